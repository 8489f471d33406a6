//! Layer 2: decides UPC vs Non-UPC for an active proxy.
//!
//! The entry point walks every relevant delegatecall site of the proxy and
//! dispatches on how the site resolves its target: storage-resident targets
//! are analyzed in the proxy itself, with a fallback into the proxy's
//! implementation contracts when no upgrade function lives in the proxy;
//! externally fetched targets route into the dependency contract that the
//! traces show answering right before the delegation. Upgrade evidence
//! accumulates in a shared memory; the final verdict is simply whether any
//! evidence exists.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::Serialize;

use crate::chainquery::ChainQuery;
use crate::datastore::{CallType, DecompiledLookup, Store};
use crate::decompiled::{
    assignments_to, base_ident, caller_guard_before, relevant_delegatecalls, DecompiledContract,
    DelegateTarget, StatementKind, StorageDecl, ValueType,
};
use crate::model::{selector_of, Address, Bytecode, Selector, StorageSlot};
use crate::proxy::{delegation_events, detect_proxy, ProxyDetectOptions, ProxyStatus};

/// Canonical cut-function signature shared by the three reference diamond
/// implementations; the loupe probe keys on its selector.
pub const DIAMOND_CUT_SIGNATURE: &str = "diamondCut((address,uint8,bytes4[])[],address,bytes)";

pub fn diamond_cut_selector() -> Selector {
    selector_of(DIAMOND_CUT_SIGNATURE).expect("constant signature")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FailureFlag {
    Decompiler,
    DelegateNotFound,
}

impl fmt::Display for FailureFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureFlag::Decompiler => f.write_str("Failure: Decompiler"),
            FailureFlag::DelegateNotFound => f.write_str("Failure: Delegate Not Found"),
        }
    }
}

impl Serialize for FailureFlag {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceVia {
    Smup,
    Esup,
    Dup,
    DiamondLoupe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Smup,
    EsupV1,
    EsupV2,
    DupV1,
    DupV2,
    DupV3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    NonUpc,
    Upc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UpgradeEvidence {
    pub signature: String,
    pub line: u32,
    pub host: Address,
    pub via: EvidenceVia,
    pub delegatecall_site_line: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    Esup,
    Dup,
}

/// Scratchpad shared by the detectors during one analysis.
#[derive(Debug, Default)]
pub struct GlobalMemory {
    pub evidence: Vec<UpgradeEvidence>,
    pub failure_flags: BTreeSet<FailureFlag>,
    visited: HashSet<(Address, Phase)>,
    design: Option<Design>,
}

impl GlobalMemory {
    fn push_evidence(&mut self, evidence: UpgradeEvidence, design: Design) {
        if self.evidence.contains(&evidence) {
            return;
        }
        self.design.get_or_insert(design);
        self.evidence.push(evidence);
    }

    fn flag(&mut self, flag: FailureFlag) {
        self.failure_flags.insert(flag);
    }

    /// Marks (address, phase) visited; false when already seen.
    fn visit(&mut self, address: Address, phase: Phase) -> bool {
        self.visited.insert((address, phase))
    }

    pub fn flag_strings(&self) -> Vec<String> {
        self.failure_flags.iter().map(|f| f.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactRank {
    Primary,
    Secondary,
    Tertiary,
}

/// A storage variable whose reassignment can effect an upgrade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImpactVariable {
    pub name: String,
    pub slot: StorageSlot,
    pub rank: ImpactRank,
    pub host: Address,
}

/// How a site resolved, kept for the pattern classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SiteTarget {
    StorageVariable,
    ExternalFetch,
    HardcodedAddress(Address),
}

/// The contract and variable an external fetch ultimately resolved to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EsupResolution {
    pub host: Address,
    pub return_var: String,
    pub value_type: ValueType,
}

#[derive(Debug, Clone)]
pub struct SiteAnalysis {
    pub line: u32,
    pub target: SiteTarget,
    pub guard_before: bool,
    pub primary: Option<ImpactVariable>,
    pub primary_value_type: Option<ValueType>,
    pub esup: Option<EsupResolution>,
}

#[derive(Debug)]
pub struct UpcReport {
    pub address: Address,
    pub verdict: Verdict,
    pub design: Option<Design>,
    pub memory: GlobalMemory,
    pub sites: Vec<SiteAnalysis>,
    /// Layer-1 implementations, for the classifier's layout checks.
    pub implementations: BTreeSet<Address>,
    /// Implementations not embedded in the proxy bytecode.
    pub dynamic_implementations: BTreeSet<Address>,
    pub notes: Vec<String>,
}

impl UpcReport {
    fn non_upc(address: Address, implementations: BTreeSet<Address>) -> UpcReport {
        UpcReport {
            address,
            verdict: Verdict::NonUpc,
            design: None,
            memory: GlobalMemory::default(),
            sites: Vec::new(),
            implementations,
            dynamic_implementations: BTreeSet::new(),
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    /// Recursion cap for chained proxies in the external-supervisor and
    /// delegated designs.
    pub max_depth: u32,
    pub proxy: ProxyDetectOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { max_depth: 3, proxy: ProxyDetectOptions::default() }
    }
}

/// Partition the known implementations into addresses embedded verbatim in
/// the proxy's runtime bytecode and those resolved dynamically. A hard-coded
/// implementation can never be replaced.
pub fn hardcoded_implementations(
    proxy_bytecode: &Bytecode,
    impls: &BTreeSet<Address>,
) -> (BTreeSet<Address>, BTreeSet<Address>) {
    let mut hardcoded = BTreeSet::new();
    let mut dynamic = BTreeSet::new();
    for addr in impls {
        if proxy_bytecode.contains_address(addr) {
            hardcoded.insert(*addr);
        } else {
            dynamic.insert(*addr);
        }
    }
    (hardcoded, dynamic)
}

pub fn detect_upc(
    address: &Address,
    proxy_status: &ProxyStatus,
    store: &Store,
    chain_query: &dyn ChainQuery,
    opts: &AnalysisOptions,
) -> UpcReport {
    debug_assert!(proxy_status.is_proxy);
    let mut report = UpcReport::non_upc(*address, proxy_status.implementations.clone());

    let Some(contract) = store.contract(address) else {
        report.memory.flag(FailureFlag::Decompiler);
        return report;
    };

    let (_, dynamic) =
        hardcoded_implementations(&contract.bytecode, &proxy_status.implementations);
    if dynamic.is_empty() {
        report.notes.push("all implementations hard-coded (forwarder)".to_string());
        return report;
    }
    report.dynamic_implementations = dynamic.clone();

    let ir = match store.get_decompiled(address) {
        DecompiledLookup::Ok(ir) => ir,
        DecompiledLookup::DecompileFailure | DecompiledLookup::NotFound => {
            report.memory.flag(FailureFlag::Decompiler);
            return report;
        }
    };

    let sites = relevant_delegatecalls(&ir);
    if sites.is_empty() {
        report.memory.flag(FailureFlag::DelegateNotFound);
        return report;
    }

    for site in &sites {
        let mut analysis = SiteAnalysis {
            line: site.line,
            target: match &site.target {
                DelegateTarget::StorageVariable(_) => SiteTarget::StorageVariable,
                DelegateTarget::ExternalFetch(_) => SiteTarget::ExternalFetch,
                DelegateTarget::HardcodedAddress(a) => SiteTarget::HardcodedAddress(*a),
            },
            guard_before: caller_guard_before(&ir, site),
            primary: None,
            primary_value_type: None,
            esup: None,
        };
        match &site.target {
            DelegateTarget::HardcodedAddress(_) => {}
            DelegateTarget::ExternalFetch(_) => {
                esup_detect(address, store, &mut report.memory, opts, site.line, &mut analysis, &mut report.notes);
            }
            DelegateTarget::StorageVariable(decl_idx) => {
                smup_analyze_site(
                    address,
                    &ir,
                    *decl_idx,
                    &dynamic,
                    store,
                    chain_query,
                    &mut report.memory,
                    opts,
                    site.line,
                    &mut analysis,
                );
            }
        }
        report.sites.push(analysis);
    }

    if !report.memory.evidence.is_empty() {
        report.verdict = Verdict::Upc;
        report.design = report.memory.design;
    }
    report
}

/// Storage-resident target: the declaration behind the delegation is the
/// primary impact variable. Find upgrade functions for it and its
/// auxiliaries in the proxy itself; when none exist, look into the
/// implementation contracts.
#[allow(clippy::too_many_arguments)]
fn smup_analyze_site(
    proxy: &Address,
    ir: &DecompiledContract,
    primary_idx: usize,
    dynamic_impls: &BTreeSet<Address>,
    store: &Store,
    chain_query: &dyn ChainQuery,
    memory: &mut GlobalMemory,
    opts: &AnalysisOptions,
    site_line: u32,
    analysis: &mut SiteAnalysis,
) {
    let primary = &ir.storage[primary_idx];
    analysis.primary = Some(ImpactVariable {
        name: primary.name.clone(),
        slot: primary.slot,
        rank: ImpactRank::Primary,
        host: *proxy,
    });
    analysis.primary_value_type = Some(primary.value_type.clone());

    let aux = auxiliary_impact_variables(ir, primary_idx);
    let mut impact_decls: Vec<usize> = vec![primary_idx];
    impact_decls.extend(aux.iter().map(|(idx, _)| *idx));

    let before = memory.evidence.len();
    for idx in &impact_decls {
        upgrade_functions_for(ir, &ir.storage[*idx], *proxy, EvidenceVia::Smup, Design::Smup, site_line, memory);
    }

    if memory.evidence.len() == before {
        let impact_slots: Vec<StorageSlot> =
            impact_decls.iter().map(|idx| ir.storage[*idx].slot).collect();
        dup_detect(
            proxy,
            &impact_slots,
            &primary.value_type,
            dynamic_impls,
            store,
            chain_query,
            memory,
            opts,
            site_line,
        );
    }
}

/// Secondary variables share the primary's slot under another name (packed
/// views); tertiary variables are storage-resident values that flow into a
/// primary or secondary through an assignment. One pass, no fixpoint.
pub fn auxiliary_impact_variables(
    ir: &DecompiledContract,
    primary_idx: usize,
) -> Vec<(usize, ImpactRank)> {
    let primary = &ir.storage[primary_idx];
    let mut out = Vec::new();
    for (i, decl) in ir.storage.iter().enumerate() {
        if i != primary_idx && decl.slot.same_slot(&primary.slot) && decl.name != primary.name {
            out.push((i, ImpactRank::Secondary));
        }
    }
    let mut sink_names: Vec<&str> = vec![primary.name.as_str()];
    sink_names.extend(out.iter().map(|(i, _)| ir.storage[*i].name.as_str()));
    let mut tertiary = Vec::new();
    for func in &ir.functions {
        for stmt in &func.body {
            let StatementKind::Assignment { lvalue, rvalue } = &stmt.kind else { continue };
            let Some(lv) = base_ident(lvalue) else { continue };
            if !sink_names.contains(&lv) {
                continue;
            }
            let Some(rv) = base_ident(rvalue) else { continue };
            if sink_names.contains(&rv) {
                continue;
            }
            if let Some(idx) = ir.storage_by_name(rv) {
                if idx != primary_idx && !tertiary.contains(&idx) {
                    tertiary.push(idx);
                }
            }
        }
    }
    out.extend(tertiary.into_iter().map(|idx| (idx, ImpactRank::Tertiary)));
    out
}

/// Find upgrade functions for one impact variable: assignments whose right
/// operand is a parameter of the enclosing function or the result of an
/// external call. Returns how many evidence entries were appended.
pub fn upgrade_functions_for(
    ir: &DecompiledContract,
    var: &StorageDecl,
    host: Address,
    via: EvidenceVia,
    design: Design,
    site_line: u32,
    memory: &mut GlobalMemory,
) -> usize {
    let before = memory.evidence.len();
    for (fi, si) in assignments_to(ir, var) {
        let func = &ir.functions[fi];
        let stmt = &func.body[si];
        let StatementKind::Assignment { rvalue, .. } = &stmt.kind else { continue };
        let from_param = base_ident(rvalue)
            .map(|id| func.param_names().any(|p| p == id))
            .unwrap_or(false);
        let from_call = rvalue.contains("ext_call.return_data");
        if from_param || from_call {
            memory.push_evidence(
                UpgradeEvidence {
                    signature: func.signature_or_name(),
                    line: stmt.line,
                    host,
                    via,
                    delegatecall_site_line: site_line,
                },
                design,
            );
        }
    }
    memory.evidence.len() - before
}

/// Externally fetched target: resolve the dependency contract from traces
/// (the sibling answering right before the delegation, whose output carries
/// the implementation address), then search it for the getter the proxy
/// called and upgrade functions over the variable that getter returns.
fn esup_detect(
    proxy: &Address,
    store: &Store,
    memory: &mut GlobalMemory,
    opts: &AnalysisOptions,
    site_line: u32,
    analysis: &mut SiteAnalysis,
    notes: &mut Vec<String>,
) {
    let mut dependencies: Vec<(Address, Option<Selector>)> = Vec::new();
    for (tx_hash, parent, child) in delegation_events(proxy, store, &opts.proxy) {
        let siblings = store.children_of(&tx_hash, &parent.trace_path);
        let Some(pos) = siblings.iter().position(|t| t.trace_path == child.trace_path) else {
            continue;
        };
        let impl_hex = child.to.bare_hex();
        let mut resolved = None;
        for sib in siblings[..pos].iter().rev() {
            let out = sib.output.strip_prefix("0x").unwrap_or(&sib.output).to_ascii_lowercase();
            if out.contains(&impl_hex) {
                resolved = Some(sib);
                break;
            }
        }
        if resolved.is_none() {
            if let Some(sib) = siblings[..pos]
                .iter()
                .rev()
                .find(|t| matches!(t.call_type, CallType::Call | CallType::Staticcall))
            {
                notes.push(format!(
                    "low-confidence dependency {} for site line {}: no preceding output carries the implementation address",
                    sib.to, site_line
                ));
                resolved = Some(sib);
            }
        }
        if let Some(target_trace) = resolved {
            let selector = target_trace
                .input_selector_hex()
                .and_then(|hex| Selector::parse(&hex).ok());
            let entry = (target_trace.to, selector);
            if !dependencies.contains(&entry) {
                dependencies.push(entry);
            }
        }
    }

    for (dependency, selector) in dependencies {
        esup_examine(dependency, selector, store, memory, opts, 0, site_line, analysis);
    }
}

#[allow(clippy::too_many_arguments)]
fn esup_examine(
    dependency: Address,
    target_selector: Option<Selector>,
    store: &Store,
    memory: &mut GlobalMemory,
    opts: &AnalysisOptions,
    depth: u32,
    site_line: u32,
    analysis: &mut SiteAnalysis,
) {
    if depth > opts.max_depth || !memory.visit(dependency, Phase::Esup) {
        return;
    }
    let ir = match store.get_decompiled(&dependency) {
        DecompiledLookup::Ok(ir) => ir,
        DecompiledLookup::DecompileFailure | DecompiledLookup::NotFound => {
            memory.flag(FailureFlag::Decompiler);
            return;
        }
    };

    let matched = target_selector
        .and_then(|sel| ir.functions.iter().position(|f| f.selector == Some(sel)));
    match matched {
        Some(fi) => {
            esup_target_function(dependency, &ir, fi, memory, depth, site_line, analysis);
        }
        None => {
            let status = detect_proxy(&dependency, store, &opts.proxy);
            if status.is_proxy {
                for inner in status.implementations {
                    esup_examine(
                        inner,
                        target_selector,
                        store,
                        memory,
                        opts,
                        depth + 1,
                        site_line,
                        analysis,
                    );
                }
            } else if let Some(fi) = ir.functions.iter().position(|f| f.is_fallback()) {
                esup_target_function(dependency, &ir, fi, memory, depth, site_line, analysis);
            }
        }
    }
}

fn esup_target_function(
    host: Address,
    ir: &DecompiledContract,
    function_index: usize,
    memory: &mut GlobalMemory,
    depth: u32,
    site_line: u32,
    analysis: &mut SiteAnalysis,
) {
    let func = &ir.functions[function_index];
    let returned_decl = func.body.iter().find_map(|stmt| {
        let StatementKind::Return { expr } = &stmt.kind else { return None };
        base_ident(expr).and_then(|id| ir.storage_by_name(id))
    });
    let Some(primary_idx) = returned_decl else {
        // a getter answering a compile-time constant names no impact variable
        return;
    };
    let primary = &ir.storage[primary_idx];
    if analysis.esup.is_none() {
        analysis.esup = Some(EsupResolution {
            host,
            return_var: primary.name.clone(),
            value_type: primary.value_type.clone(),
        });
    }
    if analysis.primary.is_none() {
        analysis.primary = Some(ImpactVariable {
            name: primary.name.clone(),
            slot: primary.slot,
            rank: ImpactRank::Primary,
            host,
        });
        analysis.primary_value_type = Some(primary.value_type.clone());
    }
    let design = if depth == 0 { Design::EsupV1 } else { Design::EsupV2 };
    let mut impact: Vec<usize> = vec![primary_idx];
    impact.extend(auxiliary_impact_variables(ir, primary_idx).into_iter().map(|(i, _)| i));
    for idx in impact {
        upgrade_functions_for(ir, &ir.storage[idx], host, EvidenceVia::Esup, design, site_line, memory);
    }
}

/// No upgrade function in the proxy: probe the loupe when the primary is a
/// mapping, else match the proxy's impact-variable slots against each
/// implementation's storage and search there.
#[allow(clippy::too_many_arguments)]
pub fn dup_detect(
    proxy: &Address,
    impact_slots: &[StorageSlot],
    primary_value_type: &ValueType,
    implementations: &BTreeSet<Address>,
    store: &Store,
    chain_query: &dyn ChainQuery,
    memory: &mut GlobalMemory,
    opts: &AnalysisOptions,
    site_line: u32,
) {
    if primary_value_type.is_mapping() {
        let facet = chain_query.facet_address(proxy, &diamond_cut_selector());
        if !facet.is_zero() {
            memory.push_evidence(
                UpgradeEvidence {
                    signature: DIAMOND_CUT_SIGNATURE.to_string(),
                    line: 0,
                    host: facet,
                    via: EvidenceVia::DiamondLoupe,
                    delegatecall_site_line: site_line,
                },
                Design::DupV3,
            );
            return;
        }
    }
    dup_scan_implementations(impact_slots, implementations, store, memory, opts, 0, site_line);
}

fn dup_scan_implementations(
    impact_slots: &[StorageSlot],
    implementations: &BTreeSet<Address>,
    store: &Store,
    memory: &mut GlobalMemory,
    opts: &AnalysisOptions,
    depth: u32,
    site_line: u32,
) {
    if depth > opts.max_depth {
        return;
    }
    for imp in implementations {
        if !memory.visit(*imp, Phase::Dup) {
            continue;
        }
        let ir = match store.get_decompiled(imp) {
            DecompiledLookup::Ok(ir) => ir,
            DecompiledLookup::DecompileFailure | DecompiledLookup::NotFound => {
                memory.flag(FailureFlag::Decompiler);
                continue;
            }
        };
        let before = memory.evidence.len();
        let design = if depth == 0 { Design::DupV1 } else { Design::DupV2 };
        for slot in impact_slots {
            let Some(decl_idx) = matching_slot_decl(&ir, slot) else { continue };
            let mut impact: Vec<usize> = vec![decl_idx];
            impact.extend(auxiliary_impact_variables(&ir, decl_idx).into_iter().map(|(i, _)| i));
            for idx in impact {
                upgrade_functions_for(&ir, &ir.storage[idx], *imp, EvidenceVia::Dup, design, site_line, memory);
            }
        }
        if memory.evidence.len() == before {
            let status = detect_proxy(imp, store, &opts.proxy);
            if status.is_proxy {
                dup_scan_implementations(
                    impact_slots,
                    &status.implementations,
                    store,
                    memory,
                    opts,
                    depth + 1,
                    site_line,
                );
            }
        }
    }
}

/// Cross-contract slot matching requires the same slot kind, value, and
/// packing offset. Among packed views the addr-typed one wins.
fn matching_slot_decl(ir: &DecompiledContract, slot: &StorageSlot) -> Option<usize> {
    let mut first = None;
    for (i, decl) in ir.storage.iter().enumerate() {
        if decl.slot.same_slot_and_offset(slot) {
            if decl.value_type == ValueType::Addr {
                return Some(i);
            }
            first.get_or_insert(i);
        }
    }
    first
}
