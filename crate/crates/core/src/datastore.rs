//! Local corpora backing the pipeline: transaction traces, contract
//! bytecodes, and pre-decompiled source texts keyed by bytecode hash.
//!
//! Files are line-delimited JSON (traces, contracts) plus a directory of
//! `<bytecode_hash>.pan` texts with `<bytecode_hash>.failed` markers for
//! contracts the decompiler could not handle.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompiled::DecompiledContract;
use crate::model::{Address, Bytecode};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("conflict: address {address} appears with differing bytecode")]
    Conflict { address: Address },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallType {
    Call,
    Delegatecall,
    Staticcall,
    Callcode,
    Create,
}

/// One message-call trace row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tx_hash: String,
    pub trace_path: Vec<u32>,
    pub from: Address,
    pub to: Address,
    pub call_type: CallType,
    pub input: String,
    pub output: String,
    pub status: bool,
    pub block_number: u64,
}

impl TraceRecord {
    /// First four input bytes as lowercase hex, when at least four bytes of
    /// calldata exist.
    pub fn input_selector_hex(&self) -> Option<String> {
        selector_hex(&self.input)
    }

    pub fn input_is_empty(&self) -> bool {
        hex_is_empty(&self.input)
    }
}

pub(crate) fn selector_hex(input: &str) -> Option<String> {
    let hex = input.strip_prefix("0x").unwrap_or(input);
    if hex.len() >= 8 {
        Some(hex[..8].to_ascii_lowercase())
    } else {
        None
    }
}

pub(crate) fn hex_is_empty(input: &str) -> bool {
    let hex = input.strip_prefix("0x").unwrap_or(input);
    hex.is_empty()
}

/// One deployed contract.
#[derive(Debug, Clone)]
pub struct ContractRecord {
    pub address: Address,
    pub bytecode: Bytecode,
    pub created_at: u64,
}

#[derive(Debug, Deserialize)]
struct ContractLine {
    address: Address,
    bytecode: String,
    created_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceStatus {
    Ok,
    DecompileFailed,
}

/// Decompiled source text for one distinct bytecode.
#[derive(Debug, Clone)]
pub struct DecompiledSourceRecord {
    pub bytecode_hash: String,
    pub text: String,
    pub status: SourceStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub traces: usize,
    pub contracts: usize,
    pub decompiled: usize,
}

/// Outcome of resolving an address to its parsed decompiled contract.
#[derive(Debug, Clone)]
pub enum DecompiledLookup {
    Ok(Arc<DecompiledContract>),
    /// No decompiled source, a failure marker, or unparseable text.
    DecompileFailure,
    NotFound,
}

/// Immutable after [`Store::ingest`]; concurrent readers are fine. The parse
/// memo deduplicates work across type-1 clones (identical bytecodes).
pub struct Store {
    contracts: HashMap<Address, ContractRecord>,
    sources: HashMap<String, DecompiledSourceRecord>,
    /// tx_hash -> traces in trace_path order.
    traces_by_tx: HashMap<String, Vec<TraceRecord>>,
    /// `to` address -> (tx_hash, index into traces_by_tx entry), grouped by
    /// tx in first-seen order.
    traces_by_to: HashMap<Address, Vec<(String, usize)>>,
    tx_order: Vec<String>,
    parsed: Mutex<HashMap<String, DecompiledLookup>>,
    parse_invocations: AtomicUsize,
}

impl Store {
    pub fn ingest(
        traces_path: &Path,
        contracts_path: &Path,
        decompiled_dir: &Path,
    ) -> Result<(Store, IngestSummary), IngestError> {
        let mut store = Store {
            contracts: HashMap::new(),
            sources: HashMap::new(),
            traces_by_tx: HashMap::new(),
            traces_by_to: HashMap::new(),
            tx_order: Vec::new(),
            parsed: Mutex::new(HashMap::new()),
            parse_invocations: AtomicUsize::new(0),
        };

        let contracts_text = read_file(contracts_path)?;
        let mut n_contracts = 0;
        for (lineno, line) in contracts_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ContractLine = serde_json::from_str(line).map_err(|e| {
                IngestError::Malformed {
                    path: contracts_path.display().to_string(),
                    line: lineno + 1,
                    reason: e.to_string(),
                }
            })?;
            let bytecode = Bytecode::from_hex(&rec.bytecode);
            if let Some(existing) = store.contracts.get(&rec.address) {
                if existing.bytecode != bytecode {
                    return Err(IngestError::Conflict { address: rec.address });
                }
                continue;
            }
            store.contracts.insert(
                rec.address,
                ContractRecord { address: rec.address, bytecode, created_at: rec.created_at },
            );
            n_contracts += 1;
        }

        let traces_text = read_file(traces_path)?;
        let mut n_traces = 0;
        for (lineno, line) in traces_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(line).map_err(|e| {
                IngestError::Malformed {
                    path: traces_path.display().to_string(),
                    line: lineno + 1,
                    reason: e.to_string(),
                }
            })?;
            if !store.traces_by_tx.contains_key(&rec.tx_hash) {
                store.tx_order.push(rec.tx_hash.clone());
            }
            store.traces_by_tx.entry(rec.tx_hash.clone()).or_default().push(rec);
            n_traces += 1;
        }
        for traces in store.traces_by_tx.values_mut() {
            traces.sort_by(|a, b| a.trace_path.cmp(&b.trace_path));
        }
        let tx_order = store.tx_order.clone();
        for tx in &tx_order {
            let traces = &store.traces_by_tx[tx];
            for (i, t) in traces.iter().enumerate() {
                store.traces_by_to.entry(t.to).or_default().push((tx.clone(), i));
            }
        }

        let mut n_decompiled = 0;
        let entries = fs::read_dir(decompiled_dir).map_err(|e| IngestError::Io {
            path: decompiled_dir.display().to_string(),
            source: e,
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let hash = stem.to_ascii_lowercase();
            let status = match path.extension().and_then(|e| e.to_str()) {
                Some("pan") => SourceStatus::Ok,
                Some("failed") => SourceStatus::DecompileFailed,
                _ => continue,
            };
            let text = if status == SourceStatus::Ok { read_file(&path)? } else { String::new() };
            store.sources.insert(
                hash.clone(),
                DecompiledSourceRecord { bytecode_hash: hash, text, status },
            );
            n_decompiled += 1;
        }

        let summary =
            IngestSummary { traces: n_traces, contracts: n_contracts, decompiled: n_decompiled };
        Ok((store, summary))
    }

    pub fn contract(&self, address: &Address) -> Option<&ContractRecord> {
        self.contracts.get(address)
    }

    /// Resolve an address to parsed IR, memoized per bytecode hash so type-1
    /// clones parse once.
    pub fn get_decompiled(&self, address: &Address) -> DecompiledLookup {
        let Some(contract) = self.contracts.get(address) else {
            return DecompiledLookup::NotFound;
        };
        let hash = contract.bytecode.hash_hex();
        let mut parsed = self.parsed.lock().unwrap();
        if let Some(hit) = parsed.get(&hash) {
            return hit.clone();
        }
        let result = match self.sources.get(&hash) {
            Some(src) if src.status == SourceStatus::Ok => {
                self.parse_invocations.fetch_add(1, Ordering::Relaxed);
                match DecompiledContract::parse(&src.text) {
                    Ok(ir) => DecompiledLookup::Ok(Arc::new(ir)),
                    Err(_) => DecompiledLookup::DecompileFailure,
                }
            }
            Some(_) => DecompiledLookup::DecompileFailure,
            None => DecompiledLookup::DecompileFailure,
        };
        parsed.insert(hash, result.clone());
        result
    }

    /// How many times source text was actually parsed (bounded by the number
    /// of distinct bytecode hashes touched).
    pub fn parse_invocation_count(&self) -> usize {
        self.parse_invocations.load(Ordering::Relaxed)
    }

    /// Every trace whose `to` equals the address, grouped by tx in first-seen
    /// order and by trace path within a tx.
    pub fn external_calls_to(&self, address: &Address) -> Vec<(String, &TraceRecord)> {
        let Some(refs) = self.traces_by_to.get(address) else { return Vec::new() };
        refs.iter().map(|(tx, idx)| (tx.clone(), &self.traces_by_tx[tx][*idx])).collect()
    }

    /// Traces whose path extends the given path by exactly one element.
    pub fn children_of(&self, tx_hash: &str, trace_path: &[u32]) -> Vec<&TraceRecord> {
        let Some(traces) = self.traces_by_tx.get(tx_hash) else { return Vec::new() };
        traces
            .iter()
            .filter(|t| {
                t.trace_path.len() == trace_path.len() + 1 && t.trace_path.starts_with(trace_path)
            })
            .collect()
    }

    pub fn all_txs(&self) -> impl Iterator<Item = (&String, &Vec<TraceRecord>)> {
        self.tx_order.iter().map(move |tx| (tx, &self.traces_by_tx[tx]))
    }
}

fn read_file(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path)
        .map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(
        dir: &Path,
        traces: &[&str],
        contracts: &[&str],
        sources: &[(&str, Option<&str>)],
    ) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let traces_path = dir.join("traces.jsonl");
        let contracts_path = dir.join("contracts.jsonl");
        let decompiled = dir.join("decompiled");
        fs::create_dir_all(&decompiled).unwrap();
        let mut f = fs::File::create(&traces_path).unwrap();
        for line in traces {
            writeln!(f, "{line}").unwrap();
        }
        let mut f = fs::File::create(&contracts_path).unwrap();
        for line in contracts {
            writeln!(f, "{line}").unwrap();
        }
        for (hash, text) in sources {
            match text {
                Some(t) => fs::write(decompiled.join(format!("{hash}.pan")), t).unwrap(),
                None => fs::write(decompiled.join(format!("{hash}.failed")), "").unwrap(),
            }
        }
        (traces_path, contracts_path, decompiled)
    }

    fn addr(n: u8) -> String {
        format!("0x{:040x}", n)
    }

    #[test]
    fn empty_trace_file_ingests_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (t, c, d) = write_corpus(dir.path(), &[], &[], &[]);
        let (_, summary) = Store::ingest(&t, &c, &d).unwrap();
        assert_eq!(summary, IngestSummary { traces: 0, contracts: 0, decompiled: 0 });
    }

    #[test]
    fn conflicting_contract_bytecode_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = addr(1);
        let (t, c, d) = write_corpus(
            dir.path(),
            &[],
            &[
                &format!(r#"{{"address":"{a}","bytecode":"0x6001","created_at":1}}"#),
                &format!(r#"{{"address":"{a}","bytecode":"0x6002","created_at":1}}"#),
            ],
            &[],
        );
        assert!(matches!(Store::ingest(&t, &c, &d), Err(IngestError::Conflict { .. })));
    }

    #[test]
    fn duplicate_identical_contract_is_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let a = addr(1);
        let line = format!(r#"{{"address":"{a}","bytecode":"0x6001","created_at":1}}"#);
        let (t, c, d) = write_corpus(dir.path(), &[], &[&line, &line], &[]);
        let (_, summary) = Store::ingest(&t, &c, &d).unwrap();
        assert_eq!(summary.contracts, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (t, c, d) = write_corpus(dir.path(), &["not json"], &[], &[]);
        match Store::ingest(&t, &c, &d) {
            Err(IngestError::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn clones_share_one_parse() {
        let dir = tempfile::tempdir().unwrap();
        let code = "0x600160015500";
        let bytecode = Bytecode::from_hex(code);
        let pan = "def storage:\n  owner is addr at storage 0\n\ndef owner():\n  return owner\n";
        let (t, c, d) = write_corpus(
            dir.path(),
            &[],
            &[
                &format!(r#"{{"address":"{}","bytecode":"{code}","created_at":1}}"#, addr(1)),
                &format!(r#"{{"address":"{}","bytecode":"{code}","created_at":2}}"#, addr(2)),
            ],
            &[(&bytecode.hash_hex(), Some(pan))],
        );
        let (store, summary) = Store::ingest(&t, &c, &d).unwrap();
        assert_eq!(summary.contracts, 2);
        let a1: Address = addr(1).parse().unwrap();
        let a2: Address = addr(2).parse().unwrap();
        let DecompiledLookup::Ok(ir1) = store.get_decompiled(&a1) else { panic!() };
        let DecompiledLookup::Ok(ir2) = store.get_decompiled(&a2) else { panic!() };
        assert!(Arc::ptr_eq(&ir1, &ir2));
        assert_eq!(store.parse_invocation_count(), 1);
    }

    #[test]
    fn failed_marker_yields_decompile_failure() {
        let dir = tempfile::tempdir().unwrap();
        let code = "0x6001";
        let bytecode = Bytecode::from_hex(code);
        let (t, c, d) = write_corpus(
            dir.path(),
            &[],
            &[&format!(r#"{{"address":"{}","bytecode":"{code}","created_at":1}}"#, addr(1))],
            &[(&bytecode.hash_hex(), None)],
        );
        let (store, _) = Store::ingest(&t, &c, &d).unwrap();
        let a1: Address = addr(1).parse().unwrap();
        assert!(matches!(store.get_decompiled(&a1), DecompiledLookup::DecompileFailure));
        let unknown: Address = addr(9).parse().unwrap();
        assert!(matches!(store.get_decompiled(&unknown), DecompiledLookup::NotFound));
    }

    fn trace_line(tx: &str, path: &[u32], from: &str, to: &str, ct: &str, input: &str) -> String {
        format!(
            r#"{{"tx_hash":"{tx}","trace_path":{path:?},"from":"{from}","to":"{to}","call_type":"{ct}","input":"{input}","output":"0x","status":true,"block_number":1}}"#
        )
    }

    #[test]
    fn children_are_ordered_and_exact_depth() {
        let dir = tempfile::tempdir().unwrap();
        let (a1, a2, a3) = (addr(1), addr(2), addr(3));
        let lines = [
            trace_line("0xt1", &[], &a1, &a2, "call", "0xaabbccdd"),
            trace_line("0xt1", &[1], &a2, &a3, "delegatecall", "0xaabbccdd"),
            trace_line("0xt1", &[0], &a2, &a3, "staticcall", "0x5c60da1b"),
            trace_line("0xt1", &[0, 0], &a3, &a1, "call", "0x"),
        ];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (t, c, d) = write_corpus(dir.path(), &refs, &[], &[]);
        let (store, summary) = Store::ingest(&t, &c, &d).unwrap();
        assert_eq!(summary.traces, 4);
        let kids = store.children_of("0xt1", &[]);
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0].trace_path, vec![0]);
        assert_eq!(kids[1].trace_path, vec![1]);
        assert!(store.children_of("0xt1", &[1]).is_empty());
        // parent-path property: every non-root trace has its parent present
        for (_, traces) in store.all_txs() {
            for tr in traces {
                if !tr.trace_path.is_empty() {
                    let parent = &tr.trace_path[..tr.trace_path.len() - 1];
                    assert!(traces.iter().any(|p| p.trace_path == parent));
                }
            }
        }
    }

    #[test]
    fn external_calls_filter_on_to_only() {
        let dir = tempfile::tempdir().unwrap();
        let (a1, a2) = (addr(1), addr(2));
        let lines = [
            trace_line("0xt1", &[], &a1, &a2, "call", "0xaabbccdd"),
            trace_line("0xt2", &[], &a2, &a1, "call", "0x11223344"),
        ];
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let (t, c, d) = write_corpus(dir.path(), &refs, &[], &[]);
        let (store, _) = Store::ingest(&t, &c, &d).unwrap();
        let a2_addr: Address = a2.parse().unwrap();
        let hits = store.external_calls_to(&a2_addr);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "0xt1");
        let unknown: Address = addr(7).parse().unwrap();
        assert!(store.external_calls_to(&unknown).is_empty());
    }
}
