//! `key = value` text with `[section]` headers and `#` comments.

use std::str::FromStr;

use super::IoError;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    pub fn error(&self, msg: impl Into<String>) -> IoError {
        IoError::Config {
            line: self.line,
            msg: msg.into(),
        }
    }

    pub fn parse<T: FromStr>(&self) -> Result<T, IoError> {
        self.value
            .parse()
            .map_err(|_| self.error(format!("invalid value `{}` for `{}`", self.value, self.key)))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self) -> Result<Vec<T>, IoError> {
        if self.value.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| self.error(format!("invalid list item `{}` for `{}`", v.trim(), self.key)))
            })
            .collect()
    }
}

/// Parses the entries in file order; repeated keys are rejected.
pub fn parse(text: &str) -> Result<Vec<Entry>, IoError> {
    let mut section = String::new();
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let err = |msg: String| IoError::Config { line: i + 1, msg };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if let Some(prev) = entries.iter().find(|e| e.section == section && e.key == key) {
            return Err(err(format!("`{key}` already set on line {}", prev.line)));
        }
        entries.push(Entry {
            section: section.clone(),
            key,
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(entries)
}
