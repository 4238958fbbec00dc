//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("key {key:?}: cannot parse {value:?} ({reason})")]
    Parse { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
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

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.require(key)?;
        v.parse().map_err(|e: T::Err| ConfigError::Parse { key: key.into(), value: v.into(), reason: e.to_string() })
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if self.contains(key) {
            self.parsed(key)
        } else {
            Ok(default)
        }
    }

    /// Whitespace- or comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.require(key)?;
        v.split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e: T::Err| ConfigError::Parse { key: key.into(), value: v.into(), reason: e.to_string() }))
            .collect()
    }

    pub fn array<const N: usize>(&self, key: &str) -> Result<[f64; N], ConfigError> {
        let v: Vec<f64> = self.list(key)?;
        v.as_slice().try_into().map_err(|_| ConfigError::Parse {
            key: key.into(),
            value: self.get(key).unwrap_or_default().into(),
            reason: format!("expected {N} numbers, got {}", v.len()),
        })
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(move |(k, v)| (&k[prefix.len()..], v.as_str()))
    }

    /// Sorted `key = value` lines.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = KvConfig::parse("# header\n a = 1 \nb=two words # trailing\n\nlist = 1, 2 3\n").unwrap();
        assert_eq!(c.get("a"), Some("1"));
        assert_eq!(c.get("b"), Some("two words"));
        assert_eq!(c.list::<u32>("list").unwrap(), vec![1, 2, 3]);
        assert_eq!(c.parsed::<f64>("a").unwrap(), 1.0);
        assert!(c.parsed::<f64>("b").is_err());
        assert!(matches!(c.require("zz"), Err(ConfigError::Missing(_))));
    }

    #[test]
    fn rejects_bad_lines_and_duplicates() {
        assert!(matches!(KvConfig::parse("novalue\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(KvConfig::parse("a=1\na=2\n"), Err(ConfigError::Duplicate { line: 2, .. })));
    }

    #[test]
    fn hash_ignores_formatting_and_order() {
        let a = KvConfig::parse("x = 1\ny = 2\n").unwrap();
        let b = KvConfig::parse("# c\ny=2\n   x =1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let c = KvConfig::parse("x = 1\ny = 3\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn prefix_scan() {
        let c = KvConfig::parse("t.a = 1\nt.b = 2\nu = 3\n").unwrap();
        let got: Vec<_> = c.keys_with_prefix("t.").collect();
        assert_eq!(got, vec![("a", "1"), ("b", "2")]);
    }
}
