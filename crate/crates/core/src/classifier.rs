//! Layer 3: maps a detected UPC to the most specific upgradeability pattern
//! within its reference design. Checks run in a fixed order and the first
//! hit wins; a UPC matching nothing lands in the non-pattern bucket.

use serde::Serialize;

use crate::datastore::{DecompiledLookup, Store};
use crate::decompiled::{DecompiledContract, StatementKind, ValueType};
use crate::model::{Selector, SlotKind, StorageSlot};
use crate::upgradeability::{
    Design, EvidenceVia, ImpactVariable, SiteAnalysis, UpcReport, Verdict,
};

/// Implementation slot mandated by the ERC-1967 standard.
pub const ERC1967_IMPLEMENTATION_SLOT: &str =
    "360894a13ba1a3210667c828492db98dca3e2076cc3735a920a3ca505d382bbc";

/// Logic slot mandated by the ERC-1822 standard (the proxiable UUID).
pub const ERC1822_LOGIC_SLOT: &str =
    "c5f16f0fcc639fa48a6947836d9850f504798523bf8c9a3a87d5876cf622bcf7";

fn proxiable_uuid_selector() -> Selector {
    Selector::parse("52d1902d").expect("constant selector")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Transparent,
    Erc1967,
    UnstructuredStorage,
    InheritedStorage,
    EternalStorage,
    Erc1822,
    Diamond,
    Beacon,
    Registry,
    NonPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PatternLabel {
    pub pattern: PatternKind,
    pub design: Design,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashedSlotCheck {
    Erc1967,
    UnstructuredStorage,
    NotHashed,
}

pub fn classify(report: &UpcReport, store: &Store) -> Option<PatternLabel> {
    if report.verdict != Verdict::Upc {
        return None;
    }
    let design = report.design?;
    let pattern = match design {
        Design::Smup => classify_smup(report, store),
        Design::DupV1 | Design::DupV2 | Design::DupV3 => classify_dup(report, store),
        Design::EsupV1 | Design::EsupV2 => classify_esup(report),
    };
    Some(PatternLabel { pattern, design })
}

fn classify_smup(report: &UpcReport, store: &Store) -> PatternKind {
    if report.sites.iter().any(check_transparent) {
        return PatternKind::Transparent;
    }
    let Some(primary) = report.sites.iter().find_map(|s| s.primary.as_ref()) else {
        return PatternKind::NonPattern;
    };
    match check_hashed_slot(primary) {
        HashedSlotCheck::Erc1967 => return PatternKind::Erc1967,
        HashedSlotCheck::UnstructuredStorage => return PatternKind::UnstructuredStorage,
        HashedSlotCheck::NotHashed => {}
    }
    let Some(proxy_ir) = decompiled(store, report) else { return PatternKind::NonPattern };
    let impl_irs: Vec<_> = report
        .implementations
        .iter()
        .filter_map(|a| match store.get_decompiled(a) {
            DecompiledLookup::Ok(ir) => Some(ir),
            _ => None,
        })
        .collect();
    if check_inherited(&proxy_ir, impl_irs.iter().map(|ir| ir.as_ref())) {
        return PatternKind::InheritedStorage;
    }
    if check_eternal(&proxy_ir, impl_irs.iter().map(|ir| ir.as_ref())) {
        return PatternKind::EternalStorage;
    }
    PatternKind::NonPattern
}

fn classify_dup(report: &UpcReport, store: &Store) -> PatternKind {
    let proxy_slot = report.sites.iter().find_map(|s| s.primary.as_ref().map(|p| p.slot));
    for evidence in &report.memory.evidence {
        if evidence.via != EvidenceVia::Dup {
            continue;
        }
        let DecompiledLookup::Ok(impl_ir) = store.get_decompiled(&evidence.host) else {
            continue;
        };
        if let Some(slot) = proxy_slot {
            if check_erc1822(&impl_ir, evidence.line, &slot) {
                return PatternKind::Erc1822;
            }
        }
    }
    if check_diamond(report) {
        return PatternKind::Diamond;
    }
    PatternKind::NonPattern
}

fn classify_esup(report: &UpcReport) -> PatternKind {
    let Some(resolution) = report.sites.iter().find_map(|s| s.esup.as_ref()) else {
        return PatternKind::NonPattern;
    };
    match check_beacon_or_registry(&resolution.value_type) {
        BeaconOrRegistry::Beacon => PatternKind::Beacon,
        BeaconOrRegistry::Registry => PatternKind::Registry,
        BeaconOrRegistry::Neither => PatternKind::NonPattern,
    }
}

fn decompiled(store: &Store, report: &UpcReport) -> Option<std::sync::Arc<DecompiledContract>> {
    match store.get_decompiled(&report.address) {
        DecompiledLookup::Ok(ir) => Some(ir),
        _ => None,
    }
}

/// Calls are routed on the caller's identity before delegation.
pub fn check_transparent(site: &SiteAnalysis) -> bool {
    site.guard_before
}

/// A hashed (32-byte) implementation slot: the standard slot means the
/// standardized pattern, any other hashed slot the generic unstructured one.
pub fn check_hashed_slot(primary: &ImpactVariable) -> HashedSlotCheck {
    match primary.slot.kind {
        SlotKind::Hashed(bytes) => {
            let expected = StorageSlot::hashed(ERC1967_IMPLEMENTATION_SLOT).unwrap();
            if SlotKind::Hashed(bytes) == expected.kind {
                HashedSlotCheck::Erc1967
            } else {
                HashedSlotCheck::UnstructuredStorage
            }
        }
        SlotKind::Integer(_) => HashedSlotCheck::NotHashed,
    }
}

/// The proxy's layout is a consistent subset of some implementation's: every
/// proxy variable sits at an identical slot (same kind, offset, and type) in
/// the implementation, and every extra implementation variable sits strictly
/// past the proxy's highest sequential slot.
pub fn check_inherited<'a>(
    proxy: &DecompiledContract,
    impls: impl Iterator<Item = &'a DecompiledContract>,
) -> bool {
    let Some(proxy_max) = proxy.max_integer_slot() else { return false };
    for imp in impls {
        let shared = proxy.storage.iter().all(|p| {
            imp.storage.iter().any(|i| {
                i.slot.same_slot_and_offset(&p.slot) && i.value_type == p.value_type
            })
        });
        if !shared {
            continue;
        }
        let extras_after = imp.storage.iter().all(|i| {
            let mirrored = proxy
                .storage
                .iter()
                .any(|p| p.slot.same_slot_and_offset(&i.slot) && p.value_type == i.value_type);
            if mirrored {
                return true;
            }
            matches!(i.slot.kind, SlotKind::Integer(n) if n > proxy_max)
        });
        if extras_after {
            return true;
        }
    }
    false
}

/// The proxy's smallest sequential slot (the indicator) sits past slots held
/// by never-read mappings of a shared eternal-storage base. True when the
/// indicator exceeds zero and some implementation shows only mappings below
/// it.
pub fn check_eternal<'a>(
    proxy: &DecompiledContract,
    impls: impl Iterator<Item = &'a DecompiledContract>,
) -> bool {
    let Some(indicator) = proxy.min_integer_slot() else { return false };
    if indicator == 0 {
        return false;
    }
    for imp in impls {
        let below_all_mappings = imp.storage.iter().all(|d| match d.slot.kind {
            SlotKind::Integer(n) if n < indicator => d.value_type.is_mapping(),
            _ => true,
        });
        if below_all_mappings {
            return true;
        }
    }
    false
}

/// The upgrade function checks the new implementation's compatibility: a
/// static call to its proxiable-UUID getter and a comparison of the returned
/// slot against the proxy's implementation slot constant.
pub fn check_erc1822(
    impl_ir: &DecompiledContract,
    evidence_line: u32,
    proxy_slot: &StorageSlot,
) -> bool {
    let SlotKind::Hashed(slot_bytes) = proxy_slot.kind else { return false };
    let slot_hex = format!("0x{}", hex32(&slot_bytes));
    let Some(func) = impl_ir.functions.iter().find(|f| {
        let end = f.body.last().map(|s| s.line).unwrap_or(f.start_line);
        f.start_line <= evidence_line && evidence_line <= end
    }) else {
        return false;
    };
    let param_names: Vec<&str> = func.param_names().collect();
    let uuid_call = func.body.iter().any(|s| match &s.kind {
        StatementKind::ExternalCall { callee_expr, selector, is_static, .. } => {
            *is_static
                && *selector == Some(proxiable_uuid_selector())
                && crate::decompiled::base_ident(callee_expr)
                    .map(|id| param_names.contains(&id))
                    .unwrap_or(false)
        }
        _ => false,
    });
    if !uuid_call {
        return false;
    }
    func.body
        .iter()
        .any(|s| s.text.contains("ext_call.return_data") && s.text.contains(&slot_hex))
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeaconOrRegistry {
    Beacon,
    Registry,
    Neither,
}

/// A single-address variable behind the getter means one implementation for
/// many proxies; multiplicity (mapping/array) means a versioned registry.
pub fn check_beacon_or_registry(return_var_type: &ValueType) -> BeaconOrRegistry {
    match return_var_type {
        ValueType::Addr => BeaconOrRegistry::Beacon,
        t if t.is_multi() => BeaconOrRegistry::Registry,
        _ => BeaconOrRegistry::Neither,
    }
}

pub fn check_diamond(report: &UpcReport) -> bool {
    report.memory.evidence.iter().any(|e| e.via == EvidenceVia::DiamondLoupe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompiled::DecompiledContract;
    use crate::model::Address;
    use crate::upgradeability::ImpactRank;

    fn parse(text: &str) -> DecompiledContract {
        DecompiledContract::parse(text).unwrap()
    }

    fn impact(slot: StorageSlot) -> ImpactVariable {
        ImpactVariable {
            name: "impl".to_string(),
            slot,
            rank: ImpactRank::Primary,
            host: Address::parse("0x00000000000000000000000000000000000000aa").unwrap(),
        }
    }

    #[test]
    fn hashed_slot_split() {
        let std_slot = StorageSlot::hashed(ERC1967_IMPLEMENTATION_SLOT).unwrap();
        assert_eq!(check_hashed_slot(&impact(std_slot)), HashedSlotCheck::Erc1967);
        let other =
            StorageSlot::hashed("7050c9e0f4ca769c69bd3a8ef740bc37934f8e2c036e5a723fd8ee048ed3f8c3")
                .unwrap();
        assert_eq!(check_hashed_slot(&impact(other)), HashedSlotCheck::UnstructuredStorage);
        assert_eq!(check_hashed_slot(&impact(StorageSlot::integer(2))), HashedSlotCheck::NotHashed);
    }

    const INHERITED_PROXY: &str = "\
def storage:
  owner is addr at storage 0
  adminAddress is addr at storage 1
  implementationAddress is addr at storage 2
";

    const INHERITED_IMPL: &str = "\
def storage:
  owner is addr at storage 0
  adminAddress is addr at storage 1
  implementationAddress is addr at storage 2
  stor3 is mapping of uint8 at storage 3
  stor4 is mapping of uint8 at storage 4
  stor5 is mapping of uint8 at storage 5

def unknownaabb0001():
  return owner
";

    #[test]
    fn inherited_subset_layout() {
        let proxy = parse(&format!("{INHERITED_PROXY}\ndef get():\n  return owner\n"));
        let imp = parse(INHERITED_IMPL);
        assert!(check_inherited(&proxy, std::iter::once(&imp)));
    }

    #[test]
    fn inherited_rejects_kind_mismatch() {
        let proxy = parse(&format!("{INHERITED_PROXY}\ndef get():\n  return owner\n"));
        let imp = parse(
            "def storage:\n  owner is addr at storage 0\n  adminAddress is mapping of uint8 at storage 1\n  implementationAddress is addr at storage 2\n\ndef get():\n  return owner\n",
        );
        assert!(!check_inherited(&proxy, std::iter::once(&imp)));
    }

    #[test]
    fn inherited_rejects_extra_below_proxy_max() {
        let proxy = parse(
            "def storage:\n  owner is addr at storage 0\n  implementationAddress is addr at storage 2\n\ndef get():\n  return owner\n",
        );
        let imp = parse(
            "def storage:\n  owner is addr at storage 0\n  sneaky is uint256 at storage 1\n  implementationAddress is addr at storage 2\n\ndef get():\n  return owner\n",
        );
        assert!(!check_inherited(&proxy, std::iter::once(&imp)));
    }

    const ETERNAL_PROXY: &str = "\
def storage:
  upgradeabilityOwner is addr at storage 6
  version is uint256 at storage 7
  implementationAddress is addr at storage 8

def get():
  return implementationAddress
";

    const ETERNAL_IMPL: &str = "\
def storage:
  deployedABlock is mapping of uint256 at storage 0
  unknown871c0760 is mapping of addr at storage 2
  stor4 is mapping of uint8 at storage 4

def get():
  return stor4
";

    #[test]
    fn eternal_indicator_slot() {
        let proxy = parse(ETERNAL_PROXY);
        let imp = parse(ETERNAL_IMPL);
        assert!(check_eternal(&proxy, std::iter::once(&imp)));
        assert_eq!(proxy.min_integer_slot(), Some(6));
    }

    #[test]
    fn eternal_rejects_zero_indicator() {
        let proxy = parse(
            "def storage:\n  impl is addr at storage 0\n\ndef get():\n  return impl\n",
        );
        let imp = parse(ETERNAL_IMPL);
        assert!(!check_eternal(&proxy, std::iter::once(&imp)));
    }

    #[test]
    fn eternal_rejects_non_mapping_below_indicator() {
        let proxy = parse(ETERNAL_PROXY);
        let imp = parse(
            "def storage:\n  deployedABlock is mapping of uint256 at storage 0\n  plain is addr at storage 3\n\ndef get():\n  return plain\n",
        );
        assert!(!check_eternal(&proxy, std::iter::once(&imp)));
    }

    const UUPS_IMPL: &str = "\
def storage:
  unknownabd108baAddress is addr at storage 0xc5f16f0fcc639fa48a6947836d9850f504798523bf8c9a3a87d5876cf622bcf7

def unknown912a9885(addr _param1) payable:
  require calldata.size - 4 >= 32
  if not caller:
    revert with 0, 17
  static call _param1.0x52d1902d with:
    gas gas_remaining wei
  if ext_call.return_data[0] != 0xc5f16f0fcc639fa48a6947836d9850f504798523bf8c9a3a87d5876cf622bcf7:
    revert with 0, 'Not compatible'
  unknownabd108baAddress = _param1
";

    #[test]
    fn erc1822_compatibility_check() {
        let imp = parse(UUPS_IMPL);
        let slot = StorageSlot::hashed(ERC1822_LOGIC_SLOT).unwrap();
        // evidence line = the assignment line
        let line = imp.functions[0]
            .body
            .iter()
            .find_map(|s| match &s.kind {
                StatementKind::Assignment { .. } => Some(s.line),
                _ => None,
            })
            .unwrap();
        assert!(check_erc1822(&imp, line, &slot));
    }

    #[test]
    fn erc1822_requires_uuid_call() {
        let imp = parse(
            "def storage:\n  logicAddr is addr at storage 0xc5f16f0fcc639fa48a6947836d9850f504798523bf8c9a3a87d5876cf622bcf7\n\ndef unknown912a9885(addr _param1) payable:\n  logicAddr = _param1\n",
        );
        let slot = StorageSlot::hashed(ERC1822_LOGIC_SLOT).unwrap();
        assert!(!check_erc1822(&imp, 4, &slot));
    }

    #[test]
    fn erc1822_requires_matching_constant() {
        let text = UUPS_IMPL.replace(
            "if ext_call.return_data[0] != 0xc5f16f0fcc639fa48a6947836d9850f504798523bf8c9a3a87d5876cf622bcf7:",
            "if ext_call.return_data[0] != 0x1111111111111111111111111111111111111111111111111111111111111111:",
        );
        let imp = parse(&text);
        let slot = StorageSlot::hashed(ERC1822_LOGIC_SLOT).unwrap();
        let line = imp.functions[0]
            .body
            .iter()
            .find_map(|s| match &s.kind {
                StatementKind::Assignment { .. } => Some(s.line),
                _ => None,
            })
            .unwrap();
        assert!(!check_erc1822(&imp, line, &slot));
    }

    #[test]
    fn beacon_registry_split() {
        assert_eq!(check_beacon_or_registry(&ValueType::Addr), BeaconOrRegistry::Beacon);
        assert_eq!(
            check_beacon_or_registry(&ValueType::Mapping(Box::new(ValueType::Addr))),
            BeaconOrRegistry::Registry
        );
        assert_eq!(
            check_beacon_or_registry(&ValueType::Array(Box::new(ValueType::Addr))),
            BeaconOrRegistry::Registry
        );
        assert_eq!(check_beacon_or_registry(&ValueType::Uint), BeaconOrRegistry::Neither);
    }
}
