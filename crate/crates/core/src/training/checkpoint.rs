//! SRQC model checkpoints.
//!
//! Layout (little-endian): magic `SRQC`, version `u16`, config length `u32`
//! followed by the model config as UTF-8 TOML, blank index `u32`,
//! parameter count `u32`, then per parameter: name length `u16`, UTF-8
//! name, rank `u8` (always 2), dims as `u32`, values as `f64`.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::optim::ParamStore;

const MAGIC: &[u8; 4] = b"SRQC";
const VERSION: u16 = 1;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn encode_checkpoint(model: &Model<f64>) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config)
        .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.blank_index() as u32).to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, value) in model.store.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| format_err(at, format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f64>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected SRQC"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config_at = r.pos;
    let config_text = r.str(config_len, "config")?;
    let config: ModelConfig = toml::from_str(config_text)
        .map_err(|e| format_err(config_at, format!("invalid config: {e}")))?;
    let blank_at = r.pos;
    let blank = r.u32("blank index")? as usize;
    if blank != config.blank_index() {
        return Err(format_err(
            blank_at,
            format!("blank index {blank} disagrees with config ({})", config.blank_index()),
        ));
    }
    let count_at = r.pos;
    let count = r.u32("parameter count")? as usize;

    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name_at = r.pos;
        let name = r.str(name_len, "parameter name")?.to_string();
        if store.find(&name).is_some() {
            return Err(format_err(name_at, format!("duplicate parameter {name}")));
        }
        let rank_at = r.pos;
        let rank = r.u8("rank")?;
        if rank != 2 {
            return Err(format_err(rank_at, format!("parameter {name}: rank {rank}, expected 2")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_err(rank_at, "shape overflows"))?;
        let values_at = r.pos;
        let raw = r.take(n, &format!("values of parameter {i} ({name})"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(format_err(values_at + 8 * k, format!("non-finite value in {name}")));
        }
        store.add(name, Tensor::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    // checked before allocating so a corrupted config cannot request a huge model
    if config.parameter_count() != Some(store.num_values()) {
        return Err(format_err(
            config_at,
            format!("config does not match the {} stored values", store.num_values()),
        ));
    }
    let mut model = Model::new(config, 0).map_err(|e| format_err(config_at, e.to_string()))?;
    model
        .store
        .load_from(&store)
        .map_err(|e| format_err(count_at, e.to_string()))?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model<f64>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Model<f64>> {
    decode_checkpoint(&fs::read(path)?)
}
