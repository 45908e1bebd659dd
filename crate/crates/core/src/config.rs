//! Plain-text `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys may
//! contain dots (`dataset.n`). Every error names the key and its line.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed key/value pairs that remember where each key was written.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                key: content.to_string(),
                line,
                message: "expected `key = value`".into(),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config {
                    key,
                    line,
                    message: "empty key".into(),
                });
            }
            let entry = Entry {
                value: v.trim().to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.clone(), entry) {
                return Err(Error::Config {
                    key,
                    line,
                    message: format!("duplicate key, first set on line {}", prev.line),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err: T::Err| Error::Config {
                key: key.to_string(),
                line: e.line,
                message: err.to_string(),
            }),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list under `key`.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|err: T::Err| Error::Config {
                        key: key.to_string(),
                        line: e.line,
                        message: format!("`{}`: {err}", s.trim()),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Error anchored at `key`'s line.
    pub fn error(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            key: key.to_string(),
            line: self.line(key).unwrap_or(0),
            message: message.into(),
        }
    }

    /// Rejects keys outside `known` (entries ending in `.*` match a prefix).
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.keys() {
            let ok = known.iter().any(|k| match k.strip_suffix('*') {
                Some(prefix) => key.starts_with(prefix),
                None => key == *k,
            });
            if !ok {
                return Err(self.error(key, "unknown key"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValues::parse("# run\nlr = 0.5\n\nlayer_sizes = 4, 8 ,1  # net\ndataset.n=10\n").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(kv.get_list::<usize>("layer_sizes").unwrap(), Some(vec![4, 8, 1]));
        assert_eq!(kv.line("dataset.n"), Some(5));
        assert_eq!(kv.get::<u64>("seed").unwrap(), None);
        assert_eq!(kv.get_or("seed", 3u64).unwrap(), 3);
    }

    #[test]
    fn errors_name_key_and_line() {
        let kv = KeyValues::parse("a = 1\nb = x\n").unwrap();
        match kv.get::<f64>("b") {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("b", 2)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(KeyValues::parse("a = 1\na = 2"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(KeyValues::parse("a = 1\njunk"), Err(Error::Config { line: 2, .. })));
        match kv.check_known(&["a"]) {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("b", 2)),
            other => panic!("{other:?}"),
        }
        assert!(KeyValues::parse("x.y = 1").unwrap().check_known(&["x.*"]).is_ok());
    }
}
