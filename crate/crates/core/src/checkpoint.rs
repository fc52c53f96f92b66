//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    4 bytes "TMPC"
//! version  u32     1
//! model config: feat_dim, layers, heads, ff_dim, proposals, seq_len (u32 each),
//!               margin (f64), use_frame_embedding (u8), exclude_used (u8)
//! next_epoch u32
//! optimizer scalars: step (u64), lr, beta1, beta2, eps, weight_decay (f64 each)
//! three tensor sections (params, first moments, second moments), each:
//!   count u32, then per tensor:
//!     name_len u16, name bytes, rank u8, dims (u32 each), data (f64 each)
//! ```
//!
//! Everything is stored at full f64 so loading a checkpoint reproduces
//! training bit-exactly from that point.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::optim::OptimState;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParameterStore,
    pub optim: OptimState,
    pub next_epoch: usize,
}

fn write_tensor_section<W: Write>(w: &mut W, entries: &BTreeMap<String, Tensor>) -> std::io::Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &dim in t.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    store: &ParameterStore,
    optim: &OptimState,
    next_epoch: usize,
) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            model.feat_dim,
            model.layers,
            model.heads,
            model.ff_dim,
            model.proposals,
            model.seq_len,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&model.margin.to_le_bytes())?;
        w.write_all(&[model.use_frame_embedding as u8, model.exclude_used as u8])?;
        w.write_all(&(next_epoch as u32).to_le_bytes())?;
        w.write_all(&optim.step.to_le_bytes())?;
        for v in [optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay] {
            w.write_all(&v.to_le_bytes())?;
        }
        let params: BTreeMap<String, Tensor> = store.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        write_tensor_section(&mut w, &params)?;
        write_tensor_section(&mut w, &optim.m)?;
        write_tensor_section(&mut w, &optim.v)?;
        w.flush()
    })();
    res.map_err(|e| CoreError::io(path, e))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let at = self.offset;
        self.inner.read_exact(&mut buf).map_err(|_| CoreError::Format {
            what: format!("truncated while reading {what}"),
            offset: at,
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }
}

fn read_tensor_section<R: Read>(r: &mut Cursor<R>, what: &str) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32(what)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_bytes = r.bytes(name_len, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CoreError::Format {
            what: "tensor name is not utf-8".to_string(),
            offset: r.offset,
        })?;
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor data")?);
        }
        let at = r.offset;
        let tensor = Tensor::new(shape, data).map_err(|e| CoreError::Format {
            what: format!("tensor {name}: {e}"),
            offset: at,
        })?;
        out.insert(name, tensor);
    }
    Ok(out)
}

/// Load a checkpoint. When `expected` is given, every model-config
/// field is validated against it and a mismatch names the offending
/// field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };

    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Format {
            what: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            offset: 0,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Format {
            what: format!("unsupported version {version}"),
            offset: 4,
        });
    }

    let model = ModelConfig {
        feat_dim: r.u32("feat_dim")? as usize,
        layers: r.u32("layers")? as usize,
        heads: r.u32("heads")? as usize,
        ff_dim: r.u32("ff_dim")? as usize,
        proposals: r.u32("proposals")? as usize,
        seq_len: r.u32("seq_len")? as usize,
        margin: r.f64("margin")?,
        use_frame_embedding: r.u8("use_frame_embedding")? != 0,
        exclude_used: r.u8("exclude_used")? != 0,
    };

    if let Some(exp) = expected {
        let fields: [(&'static str, u64, u64); 6] = [
            ("D", model.feat_dim as u64, exp.feat_dim as u64),
            ("L", model.layers as u64, exp.layers as u64),
            ("heads", model.heads as u64, exp.heads as u64),
            ("d_ff", model.ff_dim as u64, exp.ff_dim as u64),
            ("P", model.proposals as u64, exp.proposals as u64),
            ("N_seq", model.seq_len as u64, exp.seq_len as u64),
        ];
        for (field, found, want) in fields {
            if found != want {
                return Err(CoreError::FormatField {
                    field,
                    found: found.to_string(),
                    expected: want.to_string(),
                });
            }
        }
    }

    let next_epoch = r.u32("next_epoch")? as usize;
    let step = r.u64("optimizer step")?;
    let lr = r.f64("lr")?;
    let beta1 = r.f64("beta1")?;
    let beta2 = r.f64("beta2")?;
    let eps = r.f64("eps")?;
    let weight_decay = r.f64("weight_decay")?;

    let params = read_tensor_section(&mut r, "parameter count")?;
    let m = read_tensor_section(&mut r, "first-moment count")?;
    let v = read_tensor_section(&mut r, "second-moment count")?;
    if params.keys().ne(m.keys()) || params.keys().ne(v.keys()) {
        return Err(CoreError::Format {
            what: "optimizer moments do not mirror the parameter set".to_string(),
            offset: r.offset,
        });
    }

    Ok(Checkpoint {
        model,
        store: ParameterStore::from_entries(params),
        optim: OptimState {
            m,
            v,
            step,
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        },
        next_epoch,
    })
}
