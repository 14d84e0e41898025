//! Flat `key=value` text files: one pair per line, `#` starts a comment line,
//! blank lines are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: expected key=value")]
    MalformedLine { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}")]
    InvalidValue { line: usize, key: String, value: String },
}

/// Parsed pairs, remembering the 1-based line of each key.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (k, v) = trimmed.split_once('=').ok_or(KvError::MalformedLine { line })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::MalformedLine { line });
            }
            if entries.contains_key(&key) {
                return Err(KvError::DuplicateKey { line, key });
            }
            entries.insert(key, (line, v.trim().to_string()));
        }
        Ok(KeyValues { entries })
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), KvError> {
        let mut unknown: Vec<_> = self
            .entries
            .iter()
            .filter(|(k, _)| !allowed.contains(&k.as_str()))
            .map(|(k, (line, _))| (*line, k.clone()))
            .collect();
        unknown.sort();
        match unknown.into_iter().next() {
            Some((line, key)) => Err(KvError::UnknownKey { line, key }),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| KvError::InvalidValue {
                line: *line,
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Error for a value that parsed but is semantically invalid.
    pub fn invalid(&self, key: &str) -> KvError {
        let (line, value) = self.entries.get(key).cloned().unwrap_or((0, String::new()));
        KvError::InvalidValue {
            line,
            key: key.to_string(),
            value,
        }
    }
}
