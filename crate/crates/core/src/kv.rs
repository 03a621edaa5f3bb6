//! Flat `key = value` text records.
//!
//! One pair per line, UTF-8. Blank lines and lines starting with `#` are ignored.
//! Keys are `[A-Za-z0-9_.-]+`; values are trimmed and may be empty. Duplicate keys
//! are rejected.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvRecord {
    entries: BTreeMap<String, String>,
}

impl KvRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    message: "expected `key = value`".into(),
                });
            };
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
            {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("invalid key `{key}`"),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::corrupt(format!("missing field `{key}`")))
    }

    pub fn require_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::corrupt(format!("field `{key}` has invalid value `{raw}`")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::invalid(format!("`{key}` has invalid value `{raw}`"))),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn into_map(self) -> BTreeMap<String, String> {
        self.entries
    }

    /// Serializes with keys in the given order; remaining keys follow alphabetically.
    pub fn to_text_ordered(&self, order: &[&str]) -> String {
        let mut out = String::new();
        for key in order {
            if let Some(v) = self.entries.get(*key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        for (k, v) in &self.entries {
            if !order.contains(&k.as_str()) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.to_text_ordered(&[])
    }
}

impl From<BTreeMap<String, String>> for KvRecord {
    fn from(entries: BTreeMap<String, String>) -> Self {
        Self { entries }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KvRecord::parse("# header\n\nsteps = 100\nlambda_id=1.0\n").unwrap();
        assert_eq!(kv.get("steps"), Some("100"));
        assert_eq!(kv.get("lambda_id"), Some("1.0"));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(
            KvRecord::parse("a = 1\na = 2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(KvRecord::parse("no equals sign").is_err());
        assert!(KvRecord::parse("bad key = 1").is_err());
    }

    #[test]
    fn ordered_output_roundtrips() {
        let mut kv = KvRecord::new();
        kv.set("z", 1);
        kv.set("a", "x");
        let text = kv.to_text_ordered(&["z"]);
        assert_eq!(text, "z = 1\na = x\n");
        assert_eq!(KvRecord::parse(&text).unwrap(), kv);
    }
}
