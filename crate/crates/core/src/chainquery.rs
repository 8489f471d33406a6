//! Diamond-loupe lookups behind a trait, with a file-backed mock. A live
//! node adapter can implement the same trait; the test suite and acceptance
//! criteria run against the mock only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{Address, Selector};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("loupe fixture {path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Answers `facetAddress(selector)` probes against a diamond. The zero
/// address means "not a diamond hosting that selector".
pub trait ChainQuery: Sync {
    fn facet_address(&self, diamond: &Address, selector: &Selector) -> Address;
}

/// File-backed loupe answers: one JSON object per line with
/// `{diamond, selector, facet}` fields. Absent keys answer zero.
#[derive(Debug, Default)]
pub struct LoupeFixture {
    entries: HashMap<(Address, Selector), Address>,
}

#[derive(Deserialize)]
struct LoupeLine {
    diamond: Address,
    selector: Selector,
    facet: Address,
}

impl LoupeFixture {
    pub fn empty() -> LoupeFixture {
        LoupeFixture::default()
    }

    pub fn load(path: &Path) -> Result<LoupeFixture, QueryError> {
        let text = fs::read_to_string(path)
            .map_err(|e| QueryError::Io { path: path.display().to_string(), source: e })?;
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LoupeLine = serde_json::from_str(line).map_err(|e| QueryError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            entries.insert((rec.diamond, rec.selector), rec.facet);
        }
        Ok(LoupeFixture { entries })
    }

    pub fn insert(&mut self, diamond: Address, selector: Selector, facet: Address) {
        self.entries.insert((diamond, selector), facet);
    }
}

impl ChainQuery for LoupeFixture {
    fn facet_address(&self, diamond: &Address, selector: &Selector) -> Address {
        self.entries.get(&(*diamond, *selector)).copied().unwrap_or(Address::ZERO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::selector_of;

    #[test]
    fn unknown_diamond_answers_zero() {
        let fixture = LoupeFixture::empty();
        let d = Address::parse("0x1111111111111111111111111111111111111111").unwrap();
        let sel = selector_of("diamondCut((address,uint8,bytes4[])[],address,bytes)").unwrap();
        assert!(fixture.facet_address(&d, &sel).is_zero());
    }

    #[test]
    fn known_entry_answers_and_wrong_selector_is_zero() {
        let mut fixture = LoupeFixture::empty();
        let d = Address::parse("0x1111111111111111111111111111111111111111").unwrap();
        let facet = Address::parse("0x2222222222222222222222222222222222222222").unwrap();
        let cut = selector_of("diamondCut((address,uint8,bytes4[])[],address,bytes)").unwrap();
        fixture.insert(d, cut, facet);
        assert_eq!(fixture.facet_address(&d, &cut), facet);
        let other = selector_of("facetAddress(bytes4)").unwrap();
        assert!(fixture.facet_address(&d, &other).is_zero());
    }

    #[test]
    fn loads_line_delimited_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loupe.jsonl");
        std::fs::write(
            &path,
            r#"{"diamond":"0x1111111111111111111111111111111111111111","selector":"0x1f931c1c","facet":"0x2222222222222222222222222222222222222222"}
"#,
        )
        .unwrap();
        let fixture = LoupeFixture::load(&path).unwrap();
        let d = Address::parse("0x1111111111111111111111111111111111111111").unwrap();
        let sel = Selector::parse("0x1f931c1c").unwrap();
        assert_eq!(
            fixture.facet_address(&d, &sel).to_string(),
            "0x2222222222222222222222222222222222222222"
        );
    }
}
