//! Binary checkpoint format (`.ppbl` files).
//!
//! Layout: magic `PPBL`, format version u16, layer count u32, then per
//! layer a name and the per-tensor name/shape metadata, followed by every
//! tensor's payload as little-endian f64 in declaration order. Round-trips
//! are bit-exact, including negative zero.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamGroup};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PPBL";
const VERSION: u16 = 1;

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.num_groups() as u32).to_le_bytes())?;
    for group in params.groups() {
        write_str(&mut w, &group.name)?;
        w.write_all(&(group.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &group.tensors {
            write_str(&mut w, name)?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
    }
    for group in params.groups() {
        for (_, t) in &group.tensors {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let file = File::open(&path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u16(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }

    let num_groups = read_u32(&mut r)? as usize;
    if num_groups < 3 {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {num_groups} layers; need embed + blocks + head"
        )));
    }
    let mut meta: Vec<(String, Vec<(String, Vec<usize>)>)> = Vec::with_capacity(num_groups);
    for _ in 0..num_groups {
        let gname = read_str(&mut r)?;
        let ntensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(ntensors);
        for _ in 0..ntensors {
            let tname = read_str(&mut r)?;
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut r)? as usize);
            }
            tensors.push((tname, shape));
        }
        meta.push((gname, tensors));
    }

    let mut groups = Vec::with_capacity(num_groups);
    for (gname, tensors_meta) in meta {
        let mut tensors = Vec::with_capacity(tensors_meta.len());
        for (tname, shape) in tensors_meta {
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for x in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
            tensors.push((tname, Tensor::from_op(shape, data)));
        }
        groups.push(ParamGroup { name: gname, tensors });
    }

    let config = derive_config(&groups)?;
    ModelParams::from_groups(config, groups)
}

/// Loads a checkpoint and checks it against the expected architecture;
/// mismatches are reported distinctly from format errors.
pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load(path)?;
    if params.config != *expected {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint architecture {:?} does not match configured {:?}",
            params.config, expected
        )));
    }
    Ok(params)
}

/// Recovers the model configuration from the stored shapes.
fn derive_config(groups: &[ParamGroup]) -> Result<ModelConfig> {
    let embed = groups
        .first()
        .filter(|g| g.name == "embed")
        .and_then(|g| g.tensors.first())
        .ok_or_else(|| Error::Checkpoint("first layer is not an embedding".into()))?;
    let head = groups
        .last()
        .filter(|g| g.name == "head")
        .and_then(|g| g.tensors.first())
        .ok_or_else(|| Error::Checkpoint("last layer is not a head".into()))?;
    let (es, hs) = (embed.1.shape(), head.1.shape());
    if es.len() != 2 || hs.len() != 2 {
        return Err(Error::Checkpoint("embedding/head tensors must be 2-d".into()));
    }
    let (vocab, embed_dim) = (es[0], es[1]);
    let (hidden, head_out) = (hs[0], hs[1]);
    if embed_dim == 0 || hidden % embed_dim != 0 || head_out % vocab != 0 {
        return Err(Error::Checkpoint("inconsistent embedding/head shapes".into()));
    }
    Ok(ModelConfig {
        vocab,
        embed_dim,
        prompt_len: hidden / embed_dim,
        target_len: head_out / vocab,
        blocks: groups.len() - 2,
    })
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Checkpoint(format!("unreasonable name length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
