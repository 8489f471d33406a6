//! Shared domain primitives: addresses, selectors, storage slots, bytecode
//! hashing and canonical function signatures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiny_keccak::{Hasher, Keccak};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid address: {0}")]
    InvalidAddress(String),
    #[error("invalid selector: {0}")]
    InvalidSelector(String),
    #[error("invalid signature: {0}")]
    InvalidSignature(String),
}

/// Keccak-256 digest of arbitrary bytes.
pub fn keccak256(data: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut hasher = Keccak::v256();
    hasher.update(data);
    hasher.finalize(&mut out);
    out
}

fn strip_0x(s: &str) -> &str {
    s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s)
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    let s = strip_0x(s);
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

fn encode_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// A 20-byte account address, stored normalized (lowercase hex).
///
/// Checksummed input is accepted but not validated against EIP-55.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address([u8; 20]);

impl Address {
    pub const ZERO: Address = Address([0u8; 20]);

    pub fn parse(text: &str) -> Result<Address, ModelError> {
        let hex = strip_0x(text);
        if hex.len() != 40 {
            return Err(ModelError::InvalidAddress(text.to_string()));
        }
        let bytes =
            decode_hex(hex).ok_or_else(|| ModelError::InvalidAddress(text.to_string()))?;
        let mut buf = [0u8; 20];
        buf.copy_from_slice(&bytes);
        Ok(Address(buf))
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 20]
    }

    /// Bare lowercase hex without the 0x prefix, as it appears embedded in
    /// runtime bytecode.
    pub fn bare_hex(&self) -> String {
        encode_hex(&self.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", self.bare_hex())
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({self})")
    }
}

impl FromStr for Address {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Address::parse(s)
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Address::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// First 4 bytes of the keccak-256 digest of a canonical function signature.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selector([u8; 4]);

impl Selector {
    pub fn from_bytes(bytes: [u8; 4]) -> Selector {
        Selector(bytes)
    }

    pub fn parse(text: &str) -> Result<Selector, ModelError> {
        let hex = strip_0x(text);
        if hex.len() != 8 {
            return Err(ModelError::InvalidSelector(text.to_string()));
        }
        let bytes =
            decode_hex(hex).ok_or_else(|| ModelError::InvalidSelector(text.to_string()))?;
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes);
        Ok(Selector(buf))
    }

    pub fn as_bytes(&self) -> &[u8; 4] {
        &self.0
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", encode_hex(&self.0))
    }
}

impl fmt::Debug for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Selector({self})")
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Selector::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Derive the 4-byte selector from a canonical signature text such as
/// `upgradeTo(address)`. The text must carry no parameter names or spaces.
pub fn selector_of(signature: &str) -> Result<Selector, ModelError> {
    let err = || ModelError::InvalidSignature(signature.to_string());
    if signature.is_empty() || signature.contains(' ') || !signature.ends_with(')') {
        return Err(err());
    }
    let open = signature.find('(').ok_or_else(err)?;
    if open == 0 {
        return Err(err());
    }
    let digest = keccak256(signature.as_bytes());
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&digest[..4]);
    Ok(Selector(buf))
}

/// Where a storage variable lives: a compiler-assigned sequential slot or a
/// 32-byte hashed slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Integer(u64),
    Hashed([u8; 32]),
}

impl SlotKind {
    pub fn is_hashed(&self) -> bool {
        matches!(self, SlotKind::Hashed(_))
    }
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotKind::Integer(n) => write!(f, "{n}"),
            SlotKind::Hashed(h) => write!(f, "0x{}", encode_hex(h)),
        }
    }
}

/// A storage slot plus an optional bit offset for packed variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StorageSlot {
    pub kind: SlotKind,
    pub offset: Option<u32>,
}

impl StorageSlot {
    pub fn integer(index: u64) -> StorageSlot {
        StorageSlot { kind: SlotKind::Integer(index), offset: None }
    }

    pub fn hashed(hex: &str) -> Option<StorageSlot> {
        let bytes = decode_hex(hex)?;
        if bytes.len() != 32 {
            return None;
        }
        let mut buf = [0u8; 32];
        buf.copy_from_slice(&bytes);
        Some(StorageSlot { kind: SlotKind::Hashed(buf), offset: None })
    }

    pub fn with_offset(mut self, offset: u32) -> StorageSlot {
        self.offset = Some(offset);
        self
    }

    /// Parse the token after `at storage` in decompiled output: decimal for
    /// sequential slots, 64-hex for hashed slots.
    pub fn parse_token(token: &str) -> Option<StorageSlot> {
        if let Some(hex) = token.strip_prefix("0x") {
            if hex.len() == 64 {
                return StorageSlot::hashed(hex);
            }
            return u64::from_str_radix(hex, 16).ok().map(StorageSlot::integer);
        }
        token.parse::<u64>().ok().map(StorageSlot::integer)
    }

    /// Slot identity ignoring the packing offset.
    pub fn same_slot(&self, other: &StorageSlot) -> bool {
        self.kind == other.kind
    }

    /// Slot identity including the packing offset.
    pub fn same_slot_and_offset(&self, other: &StorageSlot) -> bool {
        self.kind == other.kind && self.offset == other.offset
    }
}

impl fmt::Display for StorageSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(off) => write!(f, "{} offset {off}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// Runtime bytecode plus its content digest. Two contracts with the same
/// bytes share the hash, which keys the decompiled-source store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bytecode {
    hex: String,
    hash: [u8; 32],
}

impl Bytecode {
    pub fn from_hex(hex: &str) -> Bytecode {
        let normalized = strip_0x(hex).to_ascii_lowercase();
        let bytes = decode_hex(&normalized).unwrap_or_default();
        Bytecode { hash: keccak256(&bytes), hex: normalized }
    }

    pub fn is_empty(&self) -> bool {
        self.hex.is_empty()
    }

    /// Bare lowercase hex of the runtime code, no 0x prefix.
    pub fn hex(&self) -> &str {
        &self.hex
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    pub fn hash_hex(&self) -> String {
        encode_hex(&self.hash)
    }

    /// Whether the 20-byte address appears verbatim in the runtime code
    /// (the PUSH20 immediate of a hard-coded target).
    pub fn contains_address(&self, addr: &Address) -> bool {
        self.hex.contains(&addr.bare_hex())
    }
}

/// A canonical signature text paired with its derived selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSignature {
    pub text: String,
    pub selector: Selector,
}

impl FunctionSignature {
    pub fn new(text: &str) -> Result<FunctionSignature, ModelError> {
        Ok(FunctionSignature { selector: selector_of(text)?, text: text.to_string() })
    }
}

pub(crate) use decode_hex as hex_to_bytes;
pub(crate) use encode_hex as bytes_to_hex;
