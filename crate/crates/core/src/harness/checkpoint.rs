//! Checkpoint files.
//!
//! ```text
//! condmoe-ckpt-1\n
//! attr-v1\n
//! <config byte length>\n
//! <cfg-v1 TOML>
//! u64 array count
//! per array: u32 name length, name, u32 ndim, ndim × u64 dims, f64 data
//! ```
//! All integers and floats are little-endian.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::config::Config;
use super::data::Suite;
use super::model::Model;
use crate::error::{Error, Result};
use crate::routing::ATTR_LAYOUT_TAG;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "condmoe-ckpt-1";

pub fn write_checkpoint<W: Write>(model: &Model, config: &Config, mut w: W) -> Result<()> {
    let cfg = config.to_toml();
    write!(w, "{FORMAT_TAG}\n{ATTR_LAYOUT_TAG}\n{}\n", cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (_, name, t) in model.store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R, what: &str) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format(format!("truncated checkpoint header ({what})")));
    }
    line.pop();
    Ok(line)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint and rebuilds the model it describes.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(Config, Model)> {
    let mut r = BufReader::new(r);
    let tag = header_line(&mut r, "format tag")?;
    if tag != FORMAT_TAG {
        return Err(Error::Format(format!("expected {FORMAT_TAG}, found {tag:?}")));
    }
    let layout = header_line(&mut r, "attribute layout")?;
    if layout != ATTR_LAYOUT_TAG {
        return Err(Error::Format(format!(
            "attribute layout {layout:?} differs from {ATTR_LAYOUT_TAG}"
        )));
    }
    let len: usize = header_line(&mut r, "config length")?
        .parse()
        .map_err(|_| Error::Format("bad config length".into()))?;
    let mut cfg_bytes = vec![0u8; len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = Config::from_toml(&cfg_text)?;
    let suite = Suite::new(&config.suite)?;
    let mut model = Model::new(&config, suite.vocab_size(), config.train.seed)?;
    let count = read_u64(&mut r)? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} arrays, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unexpected array {name}")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!("array {name} has shape {shape:?}")));
        }
        *model.store.get_mut(id) = Tensor::new(shape, data)?;
    }
    Ok((config, model))
}

pub fn save(model: &Model, config: &Config, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(model, config, std::io::BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<(Config, Model)> {
    read_checkpoint(std::fs::File::open(path)?)
}
