//! Versioned plain-text container of named flat arrays.
//!
//! ```text
//! mpcbco-checkpoint 1
//! kind=mlp-d2
//! lane_width=8
//! array layer0.w 350
//! 0.0123
//! ...
//! ```
//!
//! Metadata lines are `key=value`; each `array <name> <len>` header is
//! followed by exactly `len` values, one per line.

use std::collections::BTreeMap;
use std::path::Path;

use super::PolicyError;

pub const CHECKPOINT_MAGIC: &str = "mpcbco-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn with_kind(kind: &str) -> Self {
        let mut c = Self::default();
        c.meta.insert("kind".into(), kind.into());
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, PolicyError> {
        let v = self.meta.get(key).ok_or_else(|| PolicyError::Checkpoint(format!("missing key {key}")))?;
        v.parse().map_err(|_| PolicyError::Checkpoint(format!("bad value for {key}: {v}")))
    }

    pub fn array(&self, name: &str) -> Result<&[f64], PolicyError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| PolicyError::Checkpoint(format!("missing array {name}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        for (k, v) in &self.meta {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (name, vals) in &self.arrays {
            out.push_str(&format!("array {name} {}\n", vals.len()));
            for v in vals {
                out.push_str(&format!("{v:?}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let bad = |line: usize, msg: String| PolicyError::CheckpointLine { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(1, format!("expected '{CHECKPOINT_MAGIC} <version>'")));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(1, "missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(1, format!("unsupported checkpoint version {version}")));
        }
        let mut c = Checkpoint::default();
        let mut pending: Option<(String, usize, Vec<f64>)> = None;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some((name, len, mut vals)) = pending.take() {
                let v: f64 = line.parse().map_err(|_| bad(no, format!("bad number '{line}' in array {name}")))?;
                vals.push(v);
                if vals.len() == len {
                    c.arrays.push((name, vals));
                } else {
                    pending = Some((name, len, vals));
                }
                continue;
            }
            if let Some(rest) = line.strip_prefix("array ") {
                let mut p = rest.split_whitespace();
                let (Some(name), Some(len)) = (p.next(), p.next().and_then(|l| l.parse::<usize>().ok())) else {
                    return Err(bad(no, "expected 'array <name> <len>'".into()));
                };
                if len == 0 {
                    c.arrays.push((name.into(), Vec::new()));
                } else {
                    pending = Some((name.into(), len, Vec::with_capacity(len)));
                }
            } else if let Some((k, v)) = line.split_once('=') {
                c.meta.insert(k.trim().into(), v.trim().into());
            } else {
                return Err(bad(no, format!("unrecognized line '{line}'")));
            }
        }
        if let Some((name, len, vals)) = pending {
            return Err(PolicyError::Checkpoint(format!("array {name} truncated: {} of {len} values", vals.len())));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_text()).map_err(|e| PolicyError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Self::from_text(&text)
    }
}
