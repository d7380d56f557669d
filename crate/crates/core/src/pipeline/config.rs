//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. `include = path` splices
//! another file in place (relative to the including file), so later keys
//! override earlier ones. Command-line `--set key=value` pairs are applied on
//! top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
    /// Directory of the top-level file; relative paths in values resolve here.
    base_dir: Option<PathBuf>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.merge_file(path, 0)?;
        Ok(cfg)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::new();
        cfg.merge_text(text, None, "<string>", 0)?;
        Ok(cfg)
    }

    fn merge_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(Error::InvalidConfig(format!(
                "include depth exceeds {MAX_INCLUDE_DEPTH} at {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_text(&text, path.parent(), &path.display().to_string(), depth)
    }

    fn merge_text(&mut self, text: &str, dir: Option<&Path>, origin: &str, depth: usize) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("{origin}:{}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("{origin}:{}: empty key", n + 1)));
            }
            if k == "include" {
                let p = Path::new(v);
                let p = match dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p.to_path_buf(),
                };
                self.merge_file(&p, depth + 1)?;
            } else {
                self.values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.values.insert(key.into(), value.into());
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{assignment}' is not key=value")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::InvalidConfig(format!("override '{assignment}' has an empty key")));
        }
        self.set(k, v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::InvalidConfig(format!("{key} = '{v}': {e}"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// A path value, resolved against the top-level file's directory.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key).filter(|v| !v.is_empty())?;
        let p = PathBuf::from(v);
        Some(match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p,
        })
    }

    /// Errors on any key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return Err(Error::InvalidConfig(format!("unknown key '{k}'")));
            }
        }
        Ok(())
    }

    /// Serialized form, one sorted `key = value` per line.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
