use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{DenoiserModel, ModelKind, ScoreNetConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTO2CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Writes the header, the shape manifest, then every parameter as little-endian f64.
pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    w.write_all(&[match model.kind {
        ModelKind::Teacher => 0u8,
        ModelKind::Student => 1u8,
    }])?;
    let c = model.config;
    for v in [c.hidden, c.blocks, c.time_features, c.w_features, c.t_max] {
        put_u32(&mut w, v as u32)?;
    }
    let params = &model.params;
    put_u32(&mut w, params.len() as u32)?;
    for (name, t) in params.names().iter().zip(params.iter()) {
        put_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.ndim() as u32)?;
        for &d in t.shape() {
            put_u32(&mut w, d as u32)?;
        }
    }
    for t in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint, rejecting it unless its manifest matches the
/// architecture implied by the stored configuration.
pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is too short", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} has a bad magic number", path.display())));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let kind = match kind[0] {
        0 => ModelKind::Teacher,
        1 => ModelKind::Student,
        k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
    };
    let mut fields = [0usize; 5];
    for f in &mut fields {
        *f = get_u32(&mut r)? as usize;
    }
    let config = ScoreNetConfig {
        hidden: fields[0],
        blocks: fields[1],
        time_features: fields[2],
        w_features: fields[3],
        t_max: fields[4],
    };
    if config.hidden == 0 || config.t_max == 0 || config.hidden > 1 << 16 || config.blocks > 64 {
        return Err(Error::Checkpoint(format!("implausible configuration {config:?}")));
    }
    let mut model = DenoiserModel::skeleton(kind, config);

    let count = get_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {count} tensors, architecture has {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let len = get_u32(&mut r)? as usize;
        if len > 256 {
            return Err(Error::Checkpoint(format!("tensor name #{i} is {len} bytes long")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("tensor name #{i} is not UTF-8")))?;
        let ndim = get_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor '{name}' has {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(get_u32(&mut r)? as usize);
        }
        let expected = &model.params.names()[i];
        let want = model.params.get(i).shape();
        if &name != expected || dims != want {
            return Err(Error::Checkpoint(format!(
                "manifest entry #{i} is '{name}' {dims:?}, architecture expects '{expected}' {want:?}"
            )));
        }
    }
    for i in 0..count {
        let shape = model.params.get(i).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("data for '{}' is truncated", model.params.names()[i]))
        })?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.params.tensors[i] = Arc::new(Tensor::new(&shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(model)
}
