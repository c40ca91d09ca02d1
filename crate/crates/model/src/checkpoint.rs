use crate::{ModelConfig, ModelError, ModelParams};
use pulsebp_tensorgrad::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

pub fn encode_params(params: &ModelParams, seed: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { config: params.config().clone(), seed }).expect("serializable header");
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes a versioned checkpoint with the config and RNG seed embedded.
pub fn save_params(params: &ModelParams, seed: u64, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_params(params, seed)).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptFile("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: usize) -> Result<usize, ModelError> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= limit).ok_or_else(|| ModelError::CorruptFile(format!("length {n}")))
    }
}

/// Parses a checkpoint. With `expected`, the embedded config must match it.
pub fn decode_params(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(ModelParams, u64), ModelError> {
    if bytes.len() < 12 {
        return Err(ModelError::CorruptFile("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = r.len(body.len())?;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| ModelError::CorruptFile(format!("header: {e}")))?;
    if let Some(want) = expected {
        if *want != header.config {
            return Err(ModelError::ShapeMismatch(format!(
                "checkpoint config {:?} differs from expected {want:?}",
                header.config
            )));
        }
    }
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| ModelError::CorruptFile("name".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len(body.len())?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n <= body.len() / 8).ok_or_else(|| ModelError::CorruptFile(format!("shape {shape:?}")))?;
        let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptFile("trailing bytes".into()));
    }
    Ok((ModelParams::from_named(header.config, named)?, header.seed))
}

pub fn load_params(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams, u64), ModelError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_params(&bytes, expected)
}
