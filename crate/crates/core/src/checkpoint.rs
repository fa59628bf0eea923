//! Flat binary checkpoints for models and element subsets.
//!
//! Layout: an 8-byte magic, a format version, a length-prefixed JSON
//! [`ModelConfig`] header, the parameter count, then one record per
//! parameter — name, element kind, shape, and the raw little-endian `f64`
//! payload — in store insertion order. Element checkpoints reuse the same
//! format with the store filtered to a kind subset, so a prompt learned in
//! one run can seed another model of the same geometry.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::elements::{ElementKind, ElementSet};
use crate::error::{ensure_input, Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEQPRIM\0";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::input(format!("truncated checkpoint reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::input(format!("truncated checkpoint reading {what}: {e}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exactly(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::input(format!("truncated checkpoint reading {what}: {e}")))?;
    Ok(buf)
}

/// Writes `cfg` plus the parameters whose kind is in `kinds` (pass the full
/// attached set for a whole-model checkpoint).
pub fn save_subset(path: &Path, cfg: &ModelConfig, store: &ParamStore, kinds: &ElementSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let header = serde_json::to_vec(cfg)?;
    write_u64(&mut w, header.len() as u64)?;
    w.write_all(&header)?;

    let selected: Vec<_> = store.iter().filter(|p| kinds.contains(p.kind)).collect();
    write_u64(&mut w, selected.len() as u64)?;
    for param in selected {
        let name = param.name.as_bytes();
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name)?;
        w.write_all(&[param.kind as u8])?;
        let shape = param.value.shape();
        write_u32(&mut w, shape.len() as u32)?;
        for &d in shape {
            write_u64(&mut w, d as u64)?;
        }
        for &v in param.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Whole-store checkpoint.
pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let all = ElementSet::from_kinds(&ElementKind::ALL);
    save_subset(path, cfg, store, &all)
}

/// A loaded checkpoint: config header plus named tensors in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, ElementKind, Tensor)>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::input(format!("cannot open {}: {e}", path.display())))?,
    );
    let magic = read_exactly(&mut r, MAGIC.len(), "magic")?;
    ensure_input!(magic == MAGIC, "{} is not a model checkpoint", path.display());
    let version = read_u32(&mut r, "version")?;
    ensure_input!(version == VERSION, "unsupported checkpoint version {version}");

    let header_len = read_u64(&mut r, "header length")? as usize;
    let header = read_exactly(&mut r, header_len, "config header")?;
    let config: ModelConfig = serde_json::from_slice(&header)
        .map_err(|e| Error::input(format!("malformed checkpoint header: {e}")))?;

    let n_params = read_u64(&mut r, "parameter count")? as usize;
    let mut params = Vec::with_capacity(n_params);
    for i in 0..n_params {
        let what = format!("parameter {i}");
        let name_len = read_u64(&mut r, &what)? as usize;
        let name = String::from_utf8(read_exactly(&mut r, name_len, &what)?)
            .map_err(|e| Error::input(format!("non-UTF8 parameter name: {e}")))?;
        let kind_byte = read_exactly(&mut r, 1, &what)?[0];
        let kind = ElementKind::from_u8(kind_byte)
            .ok_or_else(|| Error::input(format!("unknown element kind tag {kind_byte}")))?;
        let ndim = read_u32(&mut r, &what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, &what)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exactly(&mut r, len * 8, &format!("{what} payload ({name})"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, kind, Tensor::new(shape, data, false)?));
    }
    Ok(Checkpoint { config, params })
}

/// Copies checkpoint values into matching parameters of `store`. Every
/// checkpoint entry must exist with an identical shape; parameters absent
/// from the checkpoint are left untouched.
pub fn restore_into(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    for (name, _, tensor) in &ckpt.params {
        let param = store
            .get_mut(name)
            .ok_or_else(|| Error::input(format!("checkpoint parameter {name:?} not in model")))?;
        ensure_input!(
            param.value.shape() == tensor.shape(),
            "checkpoint parameter {name:?} has shape {:?}, model expects {:?}",
            tensor.shape(),
            param.value.shape()
        );
        param.value.set_data(tensor.data())?;
    }
    Ok(())
}
