//! `key = value` line files, used for dataset sidecars, run manifests and configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their file
//! order when written back.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: expected `key = value`, found `{text}`")]
pub struct KvError {
    pub line: usize,
    pub text: String,
}

/// Ordered list of key/value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            map.set(key, v.trim());
        }
        Ok(map)
    }

    /// Inserts or replaces; a replaced key keeps its original position.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let map = KvMap::parse("# comment\nseed = 7\n\nop=add\nseed = 8\n").unwrap();
        assert_eq!(map.get("seed"), Some("8"));
        assert_eq!(map.render(), "seed = 8\nop = add\n");
        assert_eq!(KvMap::parse(&map.render()).unwrap(), map);
    }

    #[test]
    fn missing_equals_is_an_error() {
        let err = KvMap::parse("seed 7").unwrap_err();
        assert_eq!(err.line, 1);
    }
}
