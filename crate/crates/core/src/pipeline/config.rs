//! Flat key/value run configuration.
//!
//! The on-disk format is one `key = value` pair per line, `#` comments, and
//! `${VAR}` environment interpolation inside values so secrets never live in
//! the file itself. Later assignments win, and command-line flags are applied
//! on top via [`Config::set`].

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line} is not `key = value`: {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line} references ${{{var}}} but the environment variable is not set")]
    MissingEnv { var: String, line: usize },
    #[error("missing required config key {0:?}")]
    MissingKey(String),
    #[error("config key {key:?} has value {value:?}, expected {expected}")]
    InvalidValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("failed to read config {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A parsed configuration: a flat, ordered key→value map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parse the text form, interpolating `${VAR}` from the environment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (index, raw_line) in text.lines().enumerate() {
            let line = index + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                ConfigError::MalformedLine {
                    line,
                    content: trimmed.to_string(),
                }
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::MalformedLine {
                    line,
                    content: trimmed.to_string(),
                });
            }
            let value = interpolate(value.trim(), line)?;
            values.insert(key.to_string(), value);
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn from_pairs<K, V>(pairs: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            values: pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Insert or override one key; how flags layer on top of the file.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.values.insert(key.into(), value.into());
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    /// Parse an optional key into any `FromStr` type; absent keys are `None`,
    /// unparseable values are errors.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(text) => text.parse().map(Some).map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                value: text.to_string(),
                expected: std::any::type_name::<T>(),
            }),
        }
    }

    /// Like [`Self::get_parsed`] but also accepts `0x`-prefixed hex, for seed
    /// material.
    pub fn get_u64(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(text) => {
                let parsed = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                    Some(hex) => u64::from_str_radix(hex, 16),
                    None => text.parse(),
                };
                parsed.map(Some).map_err(|_| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: text.to_string(),
                    expected: "u64 (decimal or 0x-hex)",
                })
            }
        }
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// The subset of keys that define the job identity: everything except the
    /// output location and credential material. This is what gets hashed into
    /// the run id and snapshotted into the manifest, so moving the output
    /// directory or rotating a key does not change what the job *is* — and
    /// secrets never land in an artifact.
    pub fn job_snapshot(&self) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(key, _)| {
                let leaf = key.rsplit('.').next().unwrap_or(key);
                *key != "out" && !leaf.starts_with("api_key")
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Replace every `${VAR}` in `value` with the environment variable's value.
fn interpolate(value: &str, line: usize) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(value.len());
    let mut rest = value;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| ConfigError::MalformedLine {
            line,
            content: value.to_string(),
        })?;
        let var = &after[..end];
        let resolved = std::env::var(var).map_err(|_| ConfigError::MissingEnv {
            var: var.to_string(),
            line,
        })?;
        out.push_str(&resolved);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
