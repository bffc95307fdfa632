//! Flat `key = value` text files with exhaustive key validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs. Keys are tracked as they are consumed so that
/// leftovers can be reported as unknown.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries, used: Default::default() })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{s}`"))),
        }
    }

    pub fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?.ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// Keys present in the text that nobody asked for.
    pub fn unknown_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn deny_unknown(&self) -> Result<()> {
        let unknown = self.unknown_keys();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

/// Accumulates `key = value` lines in insertion order.
#[derive(Default)]
pub struct KvWriter(String);

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {value}");
        self
    }

    pub fn finish(self) -> String {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_validate() {
        let kv = KvMap::parse("a = 1\n# comment\nb=2.5 # trailing\n\nc = x").unwrap();
        assert_eq!(kv.req::<u32>("a").unwrap(), 1);
        assert_eq!(kv.get_or("b", 0.0).unwrap(), 2.5);
        assert_eq!(kv.get_or("z", 7).unwrap(), 7);
        assert_eq!(kv.unknown_keys(), vec!["c".to_string()]);
        assert!(kv.deny_unknown().is_err());
        assert!(kv.req::<u32>("c").is_err());
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(KvMap::parse("novalue").is_err());
        assert!(KvMap::parse("a=1\na=2").is_err());
        assert!(KvMap::parse("a=1").unwrap().req::<u32>("b").is_err());
    }
}
