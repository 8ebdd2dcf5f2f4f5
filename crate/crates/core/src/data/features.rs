//! SRQF feature files.
//!
//! Layout (little-endian): magic `SRQF`, version `u16`, T `u32`, F `u32`,
//! frame hop in ms `f32`, then T·F `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SRQF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn encode_features<S: Scalar>(features: &FeatureSequence<S>) -> Vec<u8> {
    let [t, f] = features.frames.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&features.frame_hop_ms.to_le_bytes());
    for v in features.frames.data() {
        let x = v.to_f32().expect("finite feature value");
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_features<S: Scalar>(bytes: &[u8], utterance_id: &str) -> Result<FeatureSequence<S>> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected SRQF"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let t = read_u32(bytes, 6) as usize;
    let f = read_u32(bytes, 10) as usize;
    let hop = f32::from_le_bytes(bytes[14..18].try_into().expect("4 bytes"));
    if t == 0 || f == 0 {
        return Err(format_err(6, format!("empty shape {t}x{f}")));
    }
    if !(hop.is_finite() && hop > 0.0) {
        return Err(format_err(14, format!("invalid frame hop {hop}")));
    }
    let expected = t
        .checked_mul(f)
        .ok_or_else(|| format_err(6, "shape overflows"))?;
    let body = &bytes[HEADER_LEN..];
    let available = body.len() / 4;
    if available < expected {
        return Err(format_err(
            HEADER_LEN + 4 * available,
            format!(
                "truncated at value {} of {expected} (header {t}x{f})",
                available + 1
            ),
        ));
    }
    if body.len() != 4 * expected {
        return Err(format_err(
            HEADER_LEN + 4 * expected,
            format!("{} trailing bytes after {t}x{f} values", body.len() - 4 * expected),
        ));
    }
    let mut data = Vec::with_capacity(expected);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err(HEADER_LEN + 4 * i, "non-finite value"));
        }
        data.push(S::from_f32(v).expect("f32 widens"));
    }
    FeatureSequence::new(utterance_id, Tensor::new(t, f, data)?, hop)
}

pub fn write_features<S: Scalar>(path: &Path, features: &FeatureSequence<S>) -> Result<()> {
    fs::write(path, encode_features(features))?;
    Ok(())
}

pub fn read_features<S: Scalar>(path: &Path, utterance_id: &str) -> Result<FeatureSequence<S>> {
    decode_features(&fs::read(path)?, utterance_id)
}
