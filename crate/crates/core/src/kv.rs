//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key-value pairs. Later duplicates override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfiguration(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::InvalidConfiguration(format!(
                    "line {}: empty key",
                    lineno + 1
                )));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parses `key` if present.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::InvalidConfiguration(format!("cannot parse {key} = {v:?}"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Fails on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        if let Some(k) = self.keys().find(|k| !known.contains(k)) {
            return Err(Error::InvalidConfiguration(format!("unknown key {k:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse("# header\n a = 1 \nb=two # trailing\n\na = 3\n").unwrap();
        assert_eq!(kv.get("a"), Some("3"));
        assert_eq!(kv.get("b"), Some("two"));
        assert_eq!(kv.parsed::<u32>("a").unwrap(), Some(3));
        assert!(kv.parsed::<u32>("b").is_err());
        assert_eq!(kv.parsed_or("missing", 5u32).unwrap(), 5);
    }

    #[test]
    fn rejects_garbage() {
        assert!(KeyValues::parse("just words").is_err());
        assert!(KeyValues::parse(" = 4").is_err());
        let kv = KeyValues::parse("x = 1").unwrap();
        assert!(kv.reject_unknown(&["y"]).is_err());
        assert!(kv.reject_unknown(&["x"]).is_ok());
    }
}
