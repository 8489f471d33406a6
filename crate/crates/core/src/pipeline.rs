//! Runs the three layers for one address and shapes the result for the
//! line-delimited report output.

use std::time::Instant;

use serde::Serialize;

use crate::chainquery::ChainQuery;
use crate::classifier::{classify, PatternKind};
use crate::datastore::Store;
use crate::model::Address;
use crate::proxy::{detect_proxy, ProxyWitness};
use crate::upgradeability::{detect_upc, AnalysisOptions, Design, UpgradeEvidence, Verdict};

#[derive(Debug, Clone, Serialize)]
pub struct Layer1Summary {
    pub is_proxy: bool,
    pub implementations: Vec<Address>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<ProxyWitness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Layer2Summary {
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design: Option<Design>,
    pub failure_flags: Vec<String>,
    pub evidence: Vec<UpgradeEvidence>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Layer3Summary {
    pub pattern: PatternKind,
    pub design: Design,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Timings {
    pub layer1_us: u128,
    pub layer2_us: u128,
    pub layer3_us: u128,
}

/// One line of the report file. The third layer appears only for detected
/// UPCs; timings are omitted in deterministic runs.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRecord {
    pub address: Address,
    pub layer1: Layer1Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer2: Option<Layer2Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer3: Option<Layer3Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl ReportRecord {
    pub fn strip_timings(&mut self) -> Option<Timings> {
        self.timings.take()
    }
}

pub fn analyze_address(
    address: &Address,
    store: &Store,
    chain_query: &dyn ChainQuery,
    opts: &AnalysisOptions,
) -> ReportRecord {
    let t0 = Instant::now();
    let status = detect_proxy(address, store, &opts.proxy);
    let layer1_us = t0.elapsed().as_micros();

    let layer1 = Layer1Summary {
        is_proxy: status.is_proxy,
        implementations: status.implementations.iter().copied().collect(),
        witness: status.witness.clone(),
        note: status.note.clone(),
    };

    if !status.is_proxy {
        return ReportRecord {
            address: *address,
            layer1,
            layer2: None,
            layer3: None,
            timings: Some(Timings { layer1_us, layer2_us: 0, layer3_us: 0 }),
        };
    }

    let t1 = Instant::now();
    let report = detect_upc(address, &status, store, chain_query, opts);
    let layer2_us = t1.elapsed().as_micros();

    let t2 = Instant::now();
    let label = classify(&report, store);
    let layer3_us = t2.elapsed().as_micros();

    let layer2 = Layer2Summary {
        verdict: report.verdict,
        design: report.design,
        failure_flags: report.memory.flag_strings(),
        evidence: report.memory.evidence.clone(),
        notes: report.notes.clone(),
    };
    let layer3 =
        label.map(|l| Layer3Summary { pattern: l.pattern, design: l.design });

    ReportRecord {
        address: *address,
        layer1,
        layer2: Some(layer2),
        layer3,
        timings: Some(Timings { layer1_us, layer2_us, layer3_us }),
    }
}

/// Aggregate counts for the summary table printed after a batch run.
#[derive(Debug, Default, Serialize)]
pub struct Summary {
    pub addresses: usize,
    pub non_proxy: usize,
    pub proxy_non_upc: usize,
    pub upc: usize,
    pub by_design: std::collections::BTreeMap<String, usize>,
    pub by_pattern: std::collections::BTreeMap<String, usize>,
}

impl Summary {
    pub fn add(&mut self, record: &ReportRecord) {
        self.addresses += 1;
        if !record.layer1.is_proxy {
            self.non_proxy += 1;
            return;
        }
        match record.layer2.as_ref().map(|l| l.verdict) {
            Some(Verdict::Upc) => {
                self.upc += 1;
                if let Some(design) = record.layer2.as_ref().and_then(|l| l.design) {
                    *self.by_design.entry(tag(&design)).or_default() += 1;
                }
                if let Some(l3) = &record.layer3 {
                    *self.by_pattern.entry(tag(&l3.pattern)).or_default() += 1;
                }
            }
            _ => self.proxy_non_upc += 1,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("addresses: {}\n", self.addresses));
        out.push_str(&format!("  non-proxy: {}\n", self.non_proxy));
        out.push_str(&format!("  proxy/non-upc: {}\n", self.proxy_non_upc));
        out.push_str(&format!("  upc: {}\n", self.upc));
        if !self.by_design.is_empty() {
            let parts: Vec<String> =
                self.by_design.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("    by design: {}\n", parts.join(" ")));
        }
        if !self.by_pattern.is_empty() {
            let parts: Vec<String> =
                self.by_pattern.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("    by pattern: {}\n", parts.join(" ")));
        }
        out
    }
}

fn tag<T: Serialize>(value: &T) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(|s| s.to_string()))
        .unwrap_or_default()
}
