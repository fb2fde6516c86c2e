//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DLGEMCKP`, `u32` format version, the
//! [`ModelConfig`] fields, `u32` array count, then per array: `u32` name
//! length, UTF-8 name, `u32` rank, `u64` dims, `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::{GeneratorParams, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DLGEMCKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &GeneratorParams<f32>) -> std::io::Result<()> {
    let c = &params.config;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_len] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_f32::<LittleEndian>(c.init_scale)?;
    w.write_u64::<LittleEndian>(c.seed)?;

    let blocks = params.blocks();
    w.write_u32::<LittleEndian>(blocks.len() as u32)?;
    for (name, t) in blocks {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &dim in &t.shape {
            w.write_u64::<LittleEndian>(dim as u64)?;
        }
        for &x in &t.data {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<GeneratorParams<f32>> {
    let io = |e: std::io::Error| bad(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_len: dims[5],
        init_scale: r.read_f32::<LittleEndian>().map_err(io)?,
        seed: r.read_u64::<LittleEndian>().map_err(io)?,
    };
    config.validate()?;
    // Cheap sanity bound before allocating the template.
    let approx = config.vocab_size as u128 * config.d_model as u128 * 2
        + config.max_len as u128 * config.d_model as u128
        + config.n_layers as u128 * (config.d_model as u128 * (4 * config.d_model + 2 * config.d_ff) as u128);
    if approx > 1 << 32 {
        return Err(bad("implausible model dimensions"));
    }
    let mut params = GeneratorParams::<f32>::init(&ModelConfig {
        init_scale: 0.0,
        ..config.clone()
    })?;
    params.config = config;

    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut blocks = params.blocks_mut();
    if count != blocks.len() {
        return Err(bad(format!(
            "expected {} arrays, found {count}",
            blocks.len()
        )));
    }
    for (name, tensor) in blocks.iter_mut() {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if len > 256 {
            return Err(bad("array name too long"));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        let found = String::from_utf8(buf).map_err(|_| bad("array name is not UTF-8"))?;
        if &found != name {
            return Err(bad(format!("expected array {name}, found {found}")));
        }
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if rank > 4 {
            return Err(bad(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        if shape != tensor.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: tensor.shape.clone(),
                found: shape,
            });
        }
        for x in tensor.data.iter_mut() {
            *x = r.read_f32::<LittleEndian>().map_err(io)?;
        }
        if tensor.data.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("array {name} contains non-finite values")));
        }
    }
    drop(blocks);
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &GeneratorParams<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, params)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GeneratorParams<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
