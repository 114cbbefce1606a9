//! Content-to-vector mapping.
//!
//! Text is embedded by signed feature hashing: lowercase, split on
//! non-alphanumeric characters, hash each token with 64-bit FNV-1a, add ±1 at
//! coordinate `hash mod d` (negative when the hash's top bit is set), then
//! L2-normalize. This contract is normative so vectors match across
//! implementations bit for bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn embed_text(text: &str, d: usize) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(format!("embedding dimension must be >= 2, got {d}")));
    }
    let mut v = vec![0.0; d];
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % d as u64) as usize] += sign;
    }
    normalize(&mut v);
    Ok(v)
}

/// Scales `v` to unit L2 norm; the zero vector is left as is.
pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Deserialize)]
struct VecRecord {
    id: String,
    vec: Vec<f64>,
}

/// Reads `{"id", "vec"}` lines, renormalizing each vector.
pub fn load_precomputed(path: &Path, d: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    parse_precomputed(&text, d, &path.display().to_string())
}

pub fn parse_precomputed(text: &str, d: usize, source_name: &str) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            msg,
        };
        let mut rec: VecRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.vec.len() != d {
            return Err(parse_err(format!(
                "vector for {} has dimension {}, expected {d}",
                rec.id,
                rec.vec.len()
            )));
        }
        if rec.vec.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(format!("vector for {} is not finite", rec.id)));
        }
        normalize(&mut rec.vec);
        out.insert(rec.id, rec.vec);
    }
    Ok(out)
}
