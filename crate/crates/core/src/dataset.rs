//! Binary dataset format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "TMPO"
//! version u32      1
//! n_seq   u32
//! p       u32
//! d       u32
//! fwidth  u32      32 (f32 feature storage)
//! count   u64
//! then per sample:
//!   true_order  n_seq * u32   (presented index of each chronological frame)
//!   features    n_seq * p * d * f32, frames in presented order, row-major
//! ```
//!
//! A JSON sidecar `<path>.meta.json` duplicates the header for human
//! inspection. Frame tags are not stored; readers assign the canonical
//! `sample_index * n_seq + presented_slot`.

use crate::error::{CoreError, Result};
use crate::head::{ProposalSet, SequenceSample};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"TMPO";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub magic: String,
    pub version: u32,
    pub n_seq: u32,
    pub p: u32,
    pub d: u32,
    pub float_width: u32,
    pub sample_count: u64,
}

/// Reader that tracks its byte offset so format errors can point at
/// the exact position.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| CoreError::Format {
            what: format!("truncated while reading {what}"),
            offset: at,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Write a homogeneous dataset. Every sample must share the same
/// frame count, proposal count and feature width.
pub fn write_dataset(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    let (n_seq, p, d) = match samples.first() {
        Some(s) => (
            s.seq_len(),
            s.frames[0].proposals(),
            s.frames[0].width(),
        ),
        None => (0, 0, 0),
    };
    for (i, s) in samples.iter().enumerate() {
        if s.seq_len() != n_seq {
            return Err(CoreError::contract(format!(
                "sample {i} has {} frames, expected {n_seq}",
                s.seq_len()
            )));
        }
        for f in &s.frames {
            if f.proposals() != p || f.width() != d {
                return Err(CoreError::contract(format!(
                    "sample {i} has a {}x{} frame, expected {p}x{d}",
                    f.proposals(),
                    f.width()
                )));
            }
        }
    }

    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);

    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io_err)?;
    for v in [n_seq as u32, p as u32, d as u32, 32u32] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&(samples.len() as u64).to_le_bytes()).map_err(io_err)?;

    for s in samples {
        for &idx in &s.true_order {
            w.write_all(&(idx as u32).to_le_bytes()).map_err(io_err)?;
        }
        for f in &s.frames {
            for &v in f.features.data() {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)?;

    let header = DatasetHeader {
        magic: "TMPO".to_string(),
        version: DATASET_VERSION,
        n_seq: n_seq as u32,
        p: p as u32,
        d: d as u32,
        float_width: 32,
        sample_count: samples.len() as u64,
    };
    let meta_path = sidecar_path(path);
    let meta = serde_json::to_string_pretty(&header)
        .map_err(|e| CoreError::contract(format!("meta serialization: {e}")))?;
    std::fs::write(&meta_path, meta).map_err(|e| CoreError::io(meta_path, e))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Read a dataset back. Inverse of [`write_dataset`] bit-for-bit at
/// f32 feature precision.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SequenceSample>)> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(CoreError::Format {
            what: format!("bad magic {magic:?}, expected {DATASET_MAGIC:?}"),
            offset: 0,
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(CoreError::Format {
            what: format!("unsupported version {version}"),
            offset: 4,
        });
    }
    let n_seq = r.u32("n_seq")? as usize;
    let p = r.u32("p")? as usize;
    let d = r.u32("d")? as usize;
    let float_width = r.u32("float_width")?;
    if float_width != 32 {
        return Err(CoreError::Format {
            what: format!("unsupported float width {float_width}"),
            offset: 20,
        });
    }
    let count = r.u64("sample_count")? as usize;

    let header = DatasetHeader {
        magic: "TMPO".to_string(),
        version,
        n_seq: n_seq as u32,
        p: p as u32,
        d: d as u32,
        float_width,
        sample_count: count as u64,
    };

    let mut samples = Vec::with_capacity(count);
    let mut feature_buf = vec![0u8; p * d * 4];
    for i in 0..count {
        let mut true_order = Vec::with_capacity(n_seq);
        for _ in 0..n_seq {
            true_order.push(r.u32("true_order")? as usize);
        }
        let mut frames = Vec::with_capacity(n_seq);
        for slot in 0..n_seq {
            r.read_exact(&mut feature_buf, "frame features")?;
            let data: Vec<f64> = feature_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let features = Tensor::new(vec![p, d], data).map_err(|e| CoreError::Format {
                what: format!("sample {i} frame {slot}: {e}"),
                offset: r.offset,
            })?;
            frames.push(ProposalSet::new(features, (i * n_seq + slot) as u64)?);
        }
        let sample = SequenceSample::new(frames, true_order).map_err(|e| CoreError::Format {
            what: format!("sample {i}: {e}"),
            offset: r.offset,
        })?;
        samples.push(sample);
    }
    Ok((header, samples))
}
