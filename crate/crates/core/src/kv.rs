//! `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed entries, each remembered with its line for diagnostics.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (v.trim().to_string(), no + 1)).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: no + 1,
                    reason: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The entries whose key is in `keys`.
    pub fn only(&self, keys: &[&str]) -> Self {
        KeyValues {
            path: self.path.clone(),
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keys.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            Some((k, (_, line))) => Err(Error::Parse {
                path: self.path.clone(),
                line: *line,
                reason: format!("unknown key `{k}`"),
            }),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, _)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::config(key, format!("missing from {}", self.path.display())))
    }

    /// Whitespace- or comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, _)) => v
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| Error::config(key, format!("cannot parse `{s}`: {e}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

/// Formats a list for a `key = value` line.
pub fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let kv = KeyValues::parse("a = 1\n# note\nb = 1, 2 3  # trailing\n", Path::new("x")).unwrap();
        assert_eq!(kv.require::<u32>("a").unwrap(), 1);
        assert_eq!(kv.list::<f64>("b").unwrap().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(kv.reject_unknown(&["a"]).is_err());
        assert!(kv.reject_unknown(&["a", "b"]).is_ok());
        assert!(KeyValues::parse("a = 1\na = 2", Path::new("x")).is_err());
        assert!(KeyValues::parse("nonsense", Path::new("x")).is_err());
        assert!(matches!(kv.require::<u32>("c"), Err(Error::Config { .. })));
    }
}
