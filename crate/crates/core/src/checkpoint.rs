//! Plain-text policy checkpoints.
//!
//! ```text
//! brts-policy version=1 vocab_size=32 context_window=6 role=teacher
//! 12 12 12 12 3 14 : 0 0 1.25 -0.5 ...
//! ```
//!
//! One line per stored context, sorted by key. Logits use Rust's shortest
//! round-trip float formatting, so a write/read cycle is bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Role};
use crate::vocab::TokenId;

pub const MAGIC: &str = "brts-policy";
pub const VERSION: u32 = 1;

pub fn to_checkpoint_string(params: &PolicyParams) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{MAGIC} version={VERSION} vocab_size={} context_window={} role={}",
        params.vocab_size(),
        params.context_window(),
        params.role()
    );
    for (key, logits) in params.iter() {
        for t in key {
            let _ = write!(out, "{t} ");
        }
        out.push(':');
        for z in logits {
            let _ = write!(out, " {z}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<PolicyParams> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
    let mut words = header.split_whitespace();
    if words.next() != Some(MAGIC) {
        return Err(Error::parse(1, format!("missing {MAGIC:?} header")));
    }
    let mut fields = HashMap::new();
    for w in words {
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed header field {w:?}")))?;
        if fields.insert(k, v).is_some() {
            return Err(Error::parse(1, format!("duplicate header field {k:?}")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::parse(1, format!("header lacks {k}")))
    };
    let version: u32 = get("version")?.parse().map_err(|_| Error::parse(1, "bad version"))?;
    if version != VERSION {
        return Err(Error::parse(1, format!("unsupported checkpoint version {version}")));
    }
    let vocab_size: usize = get("vocab_size")?
        .parse()
        .map_err(|_| Error::parse(1, "bad vocab_size"))?;
    let window: usize = get("context_window")?
        .parse()
        .map_err(|_| Error::parse(1, "bad context_window"))?;
    let role: Role = get("role")?
        .parse()
        .map_err(|e: Error| Error::parse(1, e.to_string()))?;
    if fields.len() != 4 {
        return Err(Error::parse(1, "unexpected header fields"));
    }
    // Cap sizes so a hostile header cannot request huge allocations.
    if vocab_size > 1 << 16 || window > 1 << 10 {
        return Err(Error::parse(1, "vocab_size or context_window too large"));
    }
    let mut params = PolicyParams::new(vocab_size, window, role).map_err(|e| Error::parse(1, e.to_string()))?;

    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, logits) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(lineno, "missing ':' separator"))?;
        let key: Vec<TokenId> = key
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::parse(lineno, format!("bad token id {s:?}")))
            })
            .collect::<Result<_>>()?;
        let logits: Vec<f64> = logits
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::parse(lineno, format!("bad logit {s:?}"))))
            .collect::<Result<_>>()?;
        if params.logits(&key).is_some() {
            return Err(Error::parse(lineno, "duplicate context key"));
        }
        params
            .set_logits(key, logits)
            .map_err(|e| Error::parse(lineno, e.to_string()))?;
    }
    Ok(params)
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}
