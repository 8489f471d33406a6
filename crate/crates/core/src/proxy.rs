//! Layer 1: trace-based proxy detection.
//!
//! A contract is an active proxy when at least one executed transaction
//! shows it delegating a call whose selector matches the one it received —
//! the delegation preserves the caller-facing interface. Deeper descendants
//! are not matched against the parent: a grandchild delegation belongs to
//! the intermediate contract's own detection problem.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::datastore::{CallType, Store, TraceRecord};
use crate::model::Address;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProxyDetectOptions {
    /// Also consider reverted traces. A reverted delegation demonstrates
    /// nothing about exposed behavior, so the default drops them.
    pub include_failed_traces: bool,
    /// Require non-empty calldata on both sides; disables the empty-to-empty
    /// fallback-ping match.
    pub strict_nonempty_selector: bool,
}

impl Default for ProxyDetectOptions {
    fn default() -> Self {
        ProxyDetectOptions { include_failed_traces: false, strict_nonempty_selector: false }
    }
}

/// A (parent, child) trace pair witnessing the proxy behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProxyWitness {
    pub tx_hash: String,
    pub parent_path: Vec<u32>,
    pub child_path: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProxyStatus {
    pub is_proxy: bool,
    pub implementations: BTreeSet<Address>,
    pub witness: Option<ProxyWitness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProxyStatus {
    fn non_proxy(note: Option<String>) -> ProxyStatus {
        ProxyStatus { is_proxy: false, implementations: BTreeSet::new(), witness: None, note }
    }
}

/// Whether the child delegation preserves the parent call's selector: equal
/// first four bytes, or both payloads empty (a pure ether-receive ping).
pub fn selectors_match(parent: &TraceRecord, child: &TraceRecord, strict_nonempty: bool) -> bool {
    match (parent.input_selector_hex(), child.input_selector_hex()) {
        (Some(p), Some(c)) => p == c,
        (None, None) => {
            !strict_nonempty && parent.input_is_empty() && child.input_is_empty()
        }
        _ => false,
    }
}

pub fn detect_proxy(address: &Address, store: &Store, opts: &ProxyDetectOptions) -> ProxyStatus {
    let Some(contract) = store.contract(address) else {
        return ProxyStatus::non_proxy(Some("no contract record".to_string()));
    };
    if contract.bytecode.is_empty() {
        return ProxyStatus::non_proxy(Some("empty bytecode".to_string()));
    }

    let calls = store.external_calls_to(address);
    if calls.is_empty() {
        return ProxyStatus::non_proxy(Some("no traces".to_string()));
    }

    let mut implementations = BTreeSet::new();
    let mut witness = None;
    for (tx_hash, parent) in calls {
        if !parent.status && !opts.include_failed_traces {
            continue;
        }
        for child in store.children_of(&tx_hash, &parent.trace_path) {
            if child.call_type != CallType::Delegatecall || child.from != *address {
                continue;
            }
            if !child.status && !opts.include_failed_traces {
                continue;
            }
            if selectors_match(parent, child, opts.strict_nonempty_selector) {
                implementations.insert(child.to);
                if witness.is_none() {
                    witness = Some(ProxyWitness {
                        tx_hash: tx_hash.clone(),
                        parent_path: parent.trace_path.clone(),
                        child_path: child.trace_path.clone(),
                    });
                }
            }
        }
    }

    ProxyStatus { is_proxy: !implementations.is_empty(), implementations, witness, note: None }
}

/// Every (parent trace, delegating child, implementation) event for the
/// address, in store order. The upgradeability detectors use these to find
/// the external dependency a delegation fetches its target from.
pub fn delegation_events<'s>(
    address: &Address,
    store: &'s Store,
    opts: &ProxyDetectOptions,
) -> Vec<(String, &'s TraceRecord, &'s TraceRecord)> {
    let mut events = Vec::new();
    for (tx_hash, parent) in store.external_calls_to(address) {
        if !parent.status && !opts.include_failed_traces {
            continue;
        }
        for child in store.children_of(&tx_hash, &parent.trace_path) {
            if child.call_type != CallType::Delegatecall || child.from != *address {
                continue;
            }
            if !child.status && !opts.include_failed_traces {
                continue;
            }
            if selectors_match(parent, child, opts.strict_nonempty_selector) {
                events.push((tx_hash.clone(), parent, child));
            }
        }
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Store;
    use std::path::Path;

    fn addr(n: u8) -> Address {
        Address::parse(&format!("0x{:040x}", n)).unwrap()
    }

    fn trace_line(
        tx: &str,
        path: &[u32],
        from: &Address,
        to: &Address,
        ct: &str,
        input: &str,
        status: bool,
    ) -> String {
        format!(
            r#"{{"tx_hash":"{tx}","trace_path":{path:?},"from":"{from}","to":"{to}","call_type":"{ct}","input":"{input}","output":"0x","status":{status},"block_number":1}}"#
        )
    }

    fn store_with(traces: &[String], contracts: &[String]) -> Store {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("traces.jsonl");
        let c = dir.path().join("contracts.jsonl");
        let d = dir.path().join("decompiled");
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(&t, traces.join("\n")).unwrap();
        std::fs::write(&c, contracts.join("\n")).unwrap();
        let (store, _) = Store::ingest(Path::new(&t), Path::new(&c), Path::new(&d)).unwrap();
        store
    }

    fn contract_line(a: &Address, code: &str) -> String {
        format!(r#"{{"address":"{a}","bytecode":"{code}","created_at":1}}"#)
    }

    #[test]
    fn matching_delegation_marks_proxy() {
        let (user, foo, imp) = (addr(1), addr(2), addr(3));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0xaabbccdd00", true),
                trace_line("0xt1", &[0], &foo, &imp, "delegatecall", "0xaabbccdd00", true),
            ],
            &[contract_line(&foo, "0x6001"), contract_line(&imp, "0x6002")],
        );
        let status = detect_proxy(&foo, &store, &ProxyDetectOptions::default());
        assert!(status.is_proxy);
        assert_eq!(status.implementations.iter().collect::<Vec<_>>(), [&imp]);
        let w = status.witness.unwrap();
        assert_eq!(w.parent_path, Vec::<u32>::new());
        assert_eq!(w.child_path, vec![0]);
    }

    #[test]
    fn selector_mismatch_is_adapter_not_proxy() {
        let (user, foo, imp) = (addr(1), addr(2), addr(3));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0xaabbccdd", true),
                trace_line("0xt1", &[0], &foo, &imp, "delegatecall", "0x99998888", true),
            ],
            &[contract_line(&foo, "0x6001"), contract_line(&imp, "0x6002")],
        );
        let status = detect_proxy(&foo, &store, &ProxyDetectOptions::default());
        assert!(!status.is_proxy);
        assert!(status.implementations.is_empty());
    }

    #[test]
    fn empty_calldata_ping_matches_unless_strict() {
        let (user, foo, imp) = (addr(1), addr(2), addr(3));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0x", true),
                trace_line("0xt1", &[0], &foo, &imp, "delegatecall", "0x", true),
            ],
            &[contract_line(&foo, "0x6001"), contract_line(&imp, "0x6002")],
        );
        assert!(detect_proxy(&foo, &store, &ProxyDetectOptions::default()).is_proxy);
        let strict =
            ProxyDetectOptions { strict_nonempty_selector: true, ..Default::default() };
        assert!(!detect_proxy(&foo, &store, &strict).is_proxy);
    }

    #[test]
    fn failed_traces_are_ignored_by_default() {
        let (user, foo, imp) = (addr(1), addr(2), addr(3));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0xaabbccdd", true),
                trace_line("0xt1", &[0], &foo, &imp, "delegatecall", "0xaabbccdd", false),
            ],
            &[contract_line(&foo, "0x6001"), contract_line(&imp, "0x6002")],
        );
        assert!(!detect_proxy(&foo, &store, &ProxyDetectOptions::default()).is_proxy);
        let lenient = ProxyDetectOptions { include_failed_traces: true, ..Default::default() };
        assert!(detect_proxy(&foo, &store, &lenient).is_proxy);
    }

    #[test]
    fn grandchild_delegation_is_not_attributed() {
        // foo calls bar; bar delegates. That makes bar the proxy, not foo.
        let (user, foo, bar, imp) = (addr(1), addr(2), addr(3), addr(4));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0xaabbccdd", true),
                trace_line("0xt1", &[0], &foo, &bar, "call", "0xaabbccdd", true),
                trace_line("0xt1", &[0, 0], &bar, &imp, "delegatecall", "0xaabbccdd", true),
            ],
            &[
                contract_line(&foo, "0x6001"),
                contract_line(&bar, "0x6002"),
                contract_line(&imp, "0x6003"),
            ],
        );
        assert!(!detect_proxy(&foo, &store, &ProxyDetectOptions::default()).is_proxy);
        assert!(detect_proxy(&bar, &store, &ProxyDetectOptions::default()).is_proxy);
    }

    #[test]
    fn unknown_or_empty_bytecode_is_non_proxy() {
        let (user, foo, imp) = (addr(1), addr(2), addr(3));
        let store = store_with(
            &[
                trace_line("0xt1", &[], &user, &foo, "call", "0xaabbccdd", true),
                trace_line("0xt1", &[0], &foo, &imp, "delegatecall", "0xaabbccdd", true),
            ],
            &[contract_line(&foo, "0x")],
        );
        let status = detect_proxy(&foo, &store, &ProxyDetectOptions::default());
        assert!(!status.is_proxy);
        assert_eq!(status.note.as_deref(), Some("empty bytecode"));
        let status = detect_proxy(&addr(9), &store, &ProxyDetectOptions::default());
        assert_eq!(status.note.as_deref(), Some("no contract record"));
    }

    #[test]
    fn no_traces_means_inactive_non_proxy() {
        let foo = addr(2);
        let store = store_with(&[], &[contract_line(&foo, "0x6001")]);
        let status = detect_proxy(&foo, &store, &ProxyDetectOptions::default());
        assert!(!status.is_proxy);
        assert_eq!(status.note.as_deref(), Some("no traces"));
    }

    #[test]
    fn multiple_implementations_accumulate() {
        let (user, foo) = (addr(1), addr(2));
        let (i1, i2, i3) = (addr(3), addr(4), addr(5));
        let mut traces = Vec::new();
        for (n, imp) in [(1u8, &i1), (2, &i2), (3, &i3)] {
            let tx = format!("0xt{n}");
            traces.push(trace_line(&tx, &[], &user, &foo, "call", "0xaabbccdd", true));
            traces.push(trace_line(&tx, &[0], &foo, imp, "delegatecall", "0xaabbccdd", true));
        }
        let store = store_with(
            &traces,
            &[
                contract_line(&foo, "0x6001"),
                contract_line(&i1, "0x01"),
                contract_line(&i2, "0x02"),
                contract_line(&i3, "0x03"),
            ],
        );
        let status = detect_proxy(&foo, &store, &ProxyDetectOptions::default());
        assert!(status.is_proxy);
        assert_eq!(status.implementations.len(), 3);
    }
}
