//! Detection of active upgradeability proxy contracts from transaction
//! traces and decompiled bytecode.
//!
//! The pipeline has three layers. Layer 1 scans traces for delegations that
//! preserve the incoming call's selector, which marks a contract as an
//! active proxy and collects every implementation it ever delegated to.
//! Layer 2 decides whether the proxy is upgradeable by locating the storage
//! variable behind each relevant delegatecall and searching the proxy, its
//! external dependency, or its implementation contracts for a function that
//! can replace it. Layer 3 names the specific upgradeability pattern the
//! contract follows.

pub mod chainquery;
pub mod classifier;
pub mod datastore;
pub mod decompiled;
pub mod model;
pub mod pipeline;
pub mod proxy;
pub mod upgradeability;

pub use chainquery::{ChainQuery, LoupeFixture};
pub use classifier::{classify, PatternKind, PatternLabel};
pub use datastore::{IngestSummary, Store, TraceRecord};
pub use decompiled::{relevant_delegatecalls, DecompiledContract};
pub use model::{selector_of, Address, Bytecode, Selector, StorageSlot};
pub use pipeline::{analyze_address, ReportRecord, Summary};
pub use proxy::{detect_proxy, ProxyDetectOptions, ProxyStatus};
pub use upgradeability::{detect_upc, AnalysisOptions, Design, UpcReport, Verdict};
