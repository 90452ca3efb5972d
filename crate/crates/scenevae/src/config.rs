//! Flat key-value configuration files.
//!
//! Format: one `key = value` pair per line; `#` starts a comment; blank
//! lines ignored. Keys are dotted lowercase (`model.hidden`), values plain
//! scalars or comma-separated lists. See the repository README for the key
//! reference.

use indexmap::IndexMap;
use std::path::Path;

use crate::{Error, Result};

/// Parsed configuration: ordered key-value pairs with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: IndexMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = IndexMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", ln + 1))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or(default)
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::config(format!("missing key: {key}")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::config(format!("key {key}: cannot parse `{raw}`")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => self.parse_as(key, raw),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => self.parse_as(key, raw),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => self.parse_as(key, raw),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::config(format!("key {key}: bad bool `{other}`"))),
        }
    }

    /// Comma-separated usize list; empty string means empty list.
    pub fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) if raw.trim().is_empty() => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|p| self.parse_as(key, p.trim()))
                .collect(),
        }
    }

    /// Comma-separated f64 list.
    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.values.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) if raw.trim().is_empty() => Ok(Vec::new()),
            Some(raw) => raw
                .split(',')
                .map(|p| self.parse_as(key, p.trim()))
                .collect(),
        }
    }

    /// Encoder group list in `blocks x stride x channels` notation, e.g.
    /// `3x2x64,7x1x64`.
    pub fn groups_or(
        &self,
        key: &str,
        default: &[(usize, usize, usize)],
    ) -> Result<Vec<(usize, usize, usize)>> {
        let raw = match self.values.get(key) {
            None => return Ok(default.to_vec()),
            Some(raw) => raw,
        };
        raw.split(',')
            .map(|part| {
                let dims: Vec<&str> = part.trim().split('x').collect();
                if dims.len() != 3 {
                    return Err(Error::config(format!(
                        "key {key}: expected blocksxstridexchannels, got `{part}`"
                    )));
                }
                Ok((
                    self.parse_as(key, dims[0])?,
                    self.parse_as(key, dims[1])?,
                    self.parse_as(key, dims[2])?,
                ))
            })
            .collect()
    }
}
