//! Flat `key = value` configuration files.
//!
//! ```text
//! # comment
//! seed = 7
//! corpus.count.TI_T = 2000
//! loss.alpha = 0.2
//! ```
//!
//! Keys carry a section prefix (`corpus.`, `model.`, `train.` ...). Values are
//! parsed on access so errors name the offending key and line.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    source: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line))
                .is_some()
            {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self {
            source: source.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Overrides or inserts a value (command-line flags).
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((raw, line)) => raw.parse::<T>().map(Some).map_err(|_| Error::Parse {
                path: self.source.clone(),
                line: *line,
                message: format!("cannot parse value `{raw}` for key `{key}`"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((raw, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|_| Error::Parse {
                    path: self.source.clone(),
                    line: *line,
                    message: format!("cannot parse list element `{s}` for key `{key}`"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key not matched by `known` (exact keys, or
    /// prefixes ending in `.`).
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            let ok = known
                .iter()
                .any(|k| k == key || (k.ends_with('.') && key.starts_with(k)));
            if !ok {
                return Err(Error::Parse {
                    path: self.source.clone(),
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}
