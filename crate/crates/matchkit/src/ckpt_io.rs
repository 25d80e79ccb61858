//! Checkpoint file format.
//!
//! Layout: magic `MNCKPT1\0`, `u32` version, fixed header fields, the
//! configuration text, then length-prefixed named tensor and moment
//! sections (little-endian `f64` payloads), and a trailing CRC32 of every
//! preceding byte. All maps serialize in name order, so save -> load ->
//! save is byte-identical.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use matchkit_core::checkpoint::Checkpoint;
use matchkit_core::encoder::ModelParams;
use matchkit_core::{Real, Tensor};
use thiserror::Error;

use crate::data::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("checkpoint {path} failed its checksum")]
    Checksum { path: PathBuf },
    #[error(transparent)]
    Core(#[from] matchkit_core::Error),
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.episode.to_le_bytes());
    out.extend_from_slice(&ckpt.adam_t.to_le_bytes());
    out.extend_from_slice(&ckpt.rng_seed);
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    put_bytes(&mut out, ckpt.config_text.as_bytes());

    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, tensor) in ckpt.params.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(tensor.requires_grad() as u8);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    for moments in [&ckpt.adam_m, &ckpt.adam_v] {
        out.extend_from_slice(&(moments.len() as u32).to_le_bytes());
        for (name, values) in moments {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for &v in values {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |reason: &str| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 12 + 8 + 8 + 8 + 32 + 16 + 4 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(CheckpointError::Checksum {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let config_hash = r.u64()?;
    let episode = r.u64()?;
    let adam_t = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let config_text = String::from_utf8(r.len_bytes()?.to_vec())
        .map_err(|_| corrupt("config text is not utf-8"))?;

    let n_params = r.u32()? as usize;
    let mut params = ModelParams::new();
    for _ in 0..n_params {
        let name = String::from_utf8(r.len_bytes()?.to_vec())
            .map_err(|_| corrupt("parameter name is not utf-8"))?;
        let requires_grad = r.u8()? != 0;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()? as Real);
        }
        params.insert(
            name,
            Tensor::from_vec(shape, data)?.with_requires_grad(requires_grad),
        );
    }
    let mut moment_maps = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let name = String::from_utf8(r.len_bytes()?.to_vec())
                .map_err(|_| corrupt("moment name is not utf-8"))?;
            let len = r.u32()? as usize;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f64()? as Real);
            }
            map.insert(name, values);
        }
        moment_maps.push(map);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    let adam_v = moment_maps.pop().unwrap();
    let adam_m = moment_maps.pop().unwrap();
    Ok(Checkpoint {
        config_text,
        config_hash,
        episode,
        params,
        adam_m,
        adam_v,
        adam_t,
        rng_seed,
        rng_word_pos,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(ckpt)).map_err(|e| match e {
        crate::data::DataError::Io { path, source } => CheckpointError::Io { path, source },
        other => CheckpointError::Corrupt {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .read_to_end(&mut bytes)
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode(&bytes, path)
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt {
                path: PathBuf::new(),
                reason: "unexpected end of file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
