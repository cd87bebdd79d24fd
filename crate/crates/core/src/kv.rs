//! Flat `key=value` files.
//!
//! Blank lines and lines starting with `#` are ignored. Every error names the
//! line it comes from. Consumers [`take`](KvFile::take) the keys they know
//! and call [`finish`](KvFile::finish), which rejects whatever is left.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key=value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if let Some((first, _)) = entries.get(key) {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}` (first set on line {first})"
                )));
            }
            entries.insert(key.to_string(), (line_no, value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Removes `key` and parses its value.
    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| {
                Error::Config(format!("line {line}: bad value `{value}` for `{key}`: {e}"))
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Line number of `key`, if present.
    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(l, _)| *l)
    }

    /// Fails on the first (by line) key nobody took.
    pub fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{key}`"))),
        }
    }
}

/// Builds canonical `key=value` text, one entry per line, in insertion order.
#[derive(Debug, Default)]
pub struct KvWriter {
    text: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.text.push_str(&format!("{key}={value}\n"));
        self
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        self.text.push_str(&format!("# {text}\n"));
        self
    }

    pub fn finish(&self) -> String {
        self.text.clone()
    }
}
