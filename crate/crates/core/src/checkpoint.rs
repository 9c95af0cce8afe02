//! Checkpoint files.
//!
//! Layout (little endian): `"GZCK"`, u32 version, u64 config hash, u32 length
//! plus the resolved configuration as JSON, u32 parameter count, then per
//! parameter a u32 length plus dotted name followed by one tensor record.
//! The file ends with the SHA-256 of everything before it.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use gazecast_tensor::serialize::{encode_tensor, read_tensor_any};
use gazecast_tensor::{DType, Element};
use sha2::{Digest, Sha256};

use crate::config::{ModalityId, RunConfig};
use crate::error::{GazeError, Result};
use crate::model::GazeModel;

pub const MAGIC: &[u8; 4] = b"GZCK";
const VERSION: u32 = 2;
const DIGEST_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint<T: Element>(model: &GazeModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&model.config.hash().to_le_bytes());
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    put_u32(&mut out, model.store.len() as u32);
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        encode_tensor(&p.tensor, &mut out);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Checks the trailing digest and returns the body before it.
fn verified_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(GazeError::Checkpoint("bad magic, not a checkpoint".into()));
    }
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(GazeError::Checkpoint("truncated checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(GazeError::Checkpoint("checkpoint digest mismatch (truncated or corrupted)".into()));
    }
    Ok(body)
}

pub fn save_checkpoint<T: Element>(model: &GazeModel<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| GazeError::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

fn get_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses the header and configuration only.
pub fn read_checkpoint_config(bytes: &[u8]) -> Result<RunConfig> {
    let mut cur = Cursor::new(verified_body(bytes)?);
    read_header(&mut cur)
}

fn read_header(cur: &mut Cursor<&[u8]>) -> Result<RunConfig> {
    let mut magic = [0u8; 4];
    read_exact(cur, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(GazeError::Checkpoint(format!("bad magic {magic:?}, not a checkpoint")));
    }
    let version = get_u32(cur, "version")?;
    if version != VERSION {
        return Err(GazeError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut h = [0u8; 8];
    read_exact(cur, &mut h, "config hash")?;
    let hash = u64::from_le_bytes(h);
    let len = get_u32(cur, "config length")? as usize;
    if len > cur.get_ref().len() {
        return Err(GazeError::Checkpoint("config length exceeds file size".into()));
    }
    let mut json = vec![0u8; len];
    read_exact(cur, &mut json, "config")?;
    let config: RunConfig = serde_json::from_slice(&json)
        .map_err(|e| GazeError::Checkpoint(format!("embedded config: {e}")))?;
    config
        .validate()
        .map_err(|e| GazeError::Checkpoint(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(GazeError::Checkpoint(format!(
            "config hash {hash:016x} does not match embedded config {:016x}",
            config.hash()
        )));
    }
    Ok(config)
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<GazeModel<T>> {
    decode_inner(bytes).map_err(|e| match e {
        GazeError::Checkpoint(m) => GazeError::Checkpoint(m),
        other => GazeError::Checkpoint(other.to_string()),
    })
}

fn decode_inner<T: Element>(bytes: &[u8]) -> Result<GazeModel<T>> {
    let bytes = verified_body(bytes)?;
    let mut cur = Cursor::new(bytes);
    let config = read_header(&mut cur)?;
    if config.dtype.dtype() != T::DTYPE {
        return Err(GazeError::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            config.dtype.dtype(),
            T::DTYPE
        )));
    }
    let mut model = GazeModel::<T>::new(&config)?;
    let count = get_u32(&mut cur, "parameter count")? as usize;
    if count != model.store.len() {
        return Err(GazeError::Checkpoint(format!(
            "checkpoint lists {count} parameters, the {} model has {}",
            config.variant,
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = get_u32(&mut cur, "name length")? as usize;
        if n > 4096 {
            return Err(GazeError::Checkpoint(format!("implausible name length {n}")));
        }
        let mut name = vec![0u8; n];
        read_exact(&mut cur, &mut name, "parameter name")?;
        let name = String::from_utf8(name).map_err(|_| GazeError::Checkpoint("parameter name is not UTF-8".into()))?;
        let t = read_tensor_any(&mut cur)?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| GazeError::Checkpoint(format!("unknown parameter `{name}`")))?;
        let want = model.store.get(id).shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(GazeError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, model expects {want:?}",
                t.shape()
            )));
        }
        if t.dtype() != T::DTYPE {
            return Err(GazeError::Checkpoint(format!("parameter `{name}` stored as {}", t.dtype())));
        }
        *model.store.get_mut(id) = t.into_exact()?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(GazeError::Checkpoint(format!("duplicate parameters; index {i} missing")));
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(GazeError::Checkpoint("trailing bytes after the last parameter".into()));
    }
    Ok(model)
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<GazeModel<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Precision recorded in a checkpoint file.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    Ok(read_checkpoint_config(&fs::read(path)?)?.dtype.dtype())
}

/// Copies the scene extractor weights of every modality the two models
/// share. Returns the number of tensors copied.
pub fn init_from<T: Element>(model: &mut GazeModel<T>, source: &GazeModel<T>) -> Result<usize> {
    let shared: Vec<ModalityId> = source
        .modalities()
        .into_iter()
        .filter(|m| model.modalities().contains(m))
        .collect();
    if shared.is_empty() {
        return Err(GazeError::Checkpoint(format!(
            "initialization checkpoint ({}) shares no modality with {}",
            source.config.variant, model.config.variant
        )));
    }
    let mut copied = 0;
    for (_, p) in source.store.iter() {
        let Some(m) = shared.iter().find(|m| p.name.starts_with(&format!("scene.{m}."))) else {
            continue;
        };
        let id = model.store.id(&p.name).ok_or_else(|| {
            GazeError::Checkpoint(format!("{m} extractor parameter `{}` has no counterpart", p.name))
        })?;
        let dst = model.store.get_mut(id);
        if dst.shape() != p.tensor.shape() {
            return Err(GazeError::Checkpoint(format!(
                "incompatible shapes for `{}`: {:?} vs {:?}",
                p.name,
                p.tensor.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(p.tensor.data());
        copied += 1;
    }
    Ok(copied)
}
