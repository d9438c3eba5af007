//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic          8 bytes  "DCDCCKPT"
//! version        u32      1
//! input_dim      u64
//! num_clusters   u64
//! over_clusters  u64
//! seed           u64
//! hidden_count   u64
//! hidden_dims    hidden_count x u64
//! input_mean     input_dim x f64
//! input_scale    input_dim x f64
//! param_count    u64
//! params         param_count x f64, declaration order (see `Model::tensors`)
//! sha256         32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DcdcError, Result};
use crate::model::{InputScaling, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DCDCCKPT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(64 + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.input_dim as u64,
        cfg.num_clusters as u64,
        cfg.over_clusters as u64,
        cfg.seed,
        cfg.hidden_dims.len() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &h in &cfg.hidden_dims {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    let scaling = model.input_scaling();
    for v in scaling.mean().iter().chain(scaling.scale()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for t in model.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DcdcError::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let offset = self.pos as u64;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or(DcdcError::Format {
                offset,
                message: format!("implausible {what} {v}"),
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(DcdcError::Format {
            offset: 0,
            message: "file too short to be a checkpoint".into(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &bytes[..8] != MAGIC {
        return Err(DcdcError::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(DcdcError::Format {
            offset: body.len() as u64,
            message: "checksum mismatch".into(),
        });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DcdcError::Format {
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let input_dim = r.count("input_dim")?;
    let num_clusters = r.count("num_clusters")?;
    let over_clusters = r.count("over_clusters")?;
    let seed = r.u64("seed")?;
    let hidden_count = r.count("hidden layer count")?;
    let hidden_dims = (0..hidden_count)
        .map(|_| r.count("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        input_dim,
        hidden_dims,
        num_clusters,
        over_clusters,
        seed,
    };
    config.validate()?;
    let scaling_offset = r.pos as u64;
    let mean = r.f64s(input_dim, "input mean")?;
    let scale = r.f64s(input_dim, "input scale")?;
    let scaling = InputScaling::new(mean, scale).map_err(|e| DcdcError::Format {
        offset: scaling_offset,
        message: e.to_string(),
    })?;
    let param_offset = r.pos as u64;
    let param_count = r.count("parameter count")?;
    let flat = r.f64s(param_count, "parameters")?;
    if r.pos != body.len() {
        return Err(DcdcError::Format {
            offset: r.pos as u64,
            message: "trailing bytes after parameters".into(),
        });
    }
    Model::from_parts(config, scaling, &flat).map_err(|e| DcdcError::Format {
        offset: param_offset,
        message: e.to_string(),
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}
