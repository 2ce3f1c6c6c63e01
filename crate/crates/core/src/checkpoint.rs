//! Binary checkpoint: model parameters, ADAM moments and the iteration
//! counter, plus the run configuration that produced them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CRNN"  u32 version  u64 n + n bytes UTF-8 config text
//! u32 count, then per tensor: u32 name_len, name, u32 rank, rank × u64 dims, f32 values
//! u32 count, then optimizer slots in the same record format ("m/<param>", "v/<param>")
//! u64 iteration
//! ```
//!
//! Values are stored as 32-bit floats whatever the training precision.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::pgm::write_atomic;
use crate::error::{format_err, usage_err, Result};
use crate::model::CubicRnn;
use crate::optim::{Adam, AdamSlot};
use crate::Real;

const MAGIC: &[u8; 4] = b"CRNN";
pub const VERSION: u32 = 1;

/// One named array as it appears in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub values: Vec<f32>,
}

/// Decoded file contents, before they are bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<Record>,
    pub slots: Vec<Record>,
    pub iteration: u64,
}

fn kernel_records<T: Real>(model: &CubicRnn<T>) -> Vec<Record> {
    let mut out = Vec::new();
    for (name, k) in model.named_kernels() {
        out.push(Record {
            name: format!("{name}.weights"),
            dims: [k.kh(), k.kw(), k.in_channels(), k.out_channels()].map(|d| d as u64).to_vec(),
            values: k.weights().iter().map(|v| v.as_f64() as f32).collect(),
        });
        out.push(Record {
            name: format!("{name}.bias"),
            dims: vec![k.out_channels() as u64],
            values: k.bias().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }
    out
}

impl Checkpoint {
    pub fn capture<T: Real>(config: &RunConfig, model: &CubicRnn<T>, adam: &Adam<T>, iteration: u64) -> Self {
        let params = kernel_records(model);
        let mut slots = Vec::new();
        for p in &params {
            let slot = &adam.slots[&p.name];
            for (prefix, data) in [("m", &slot.m), ("v", &slot.v)] {
                slots.push(Record {
                    name: format!("{prefix}/{}", p.name),
                    dims: p.dims.clone(),
                    values: data.iter().map(|v| v.as_f64() as f32).collect(),
                });
            }
        }
        Self {
            config_text: config.to_text(),
            params,
            slots,
            iteration,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_text(&self.config_text, "checkpoint config")
    }

    /// Copy the stored parameters into `model`, whose architecture must
    /// match name for name and shape for shape.
    pub fn restore_model<T: Real>(&self, model: &mut CubicRnn<T>) -> Result<()> {
        let expected = kernel_records(model);
        check_layout(&expected, &self.params, "parameter")?;
        let mut stored = self.params.iter();
        for (_, k) in model.named_kernels_mut() {
            let (w, b) = k.params_mut();
            for dst in [w, b] {
                let src = stored.next().expect("layout already checked");
                for (d, s) in dst.iter_mut().zip(&src.values) {
                    *d = T::from_f64(f64::from(*s));
                }
            }
        }
        Ok(())
    }

    /// Rebuild ADAM state for `model` with every slot at step `iteration`.
    pub fn restore_adam<T: Real>(&self, model: &CubicRnn<T>, config: crate::optim::AdamConfig) -> Result<Adam<T>> {
        let mut adam = Adam::new(model, config);
        let expected: Vec<Record> = kernel_records(model)
            .into_iter()
            .flat_map(|p| {
                ["m", "v"].map(|prefix| Record {
                    name: format!("{prefix}/{}", p.name),
                    dims: p.dims.clone(),
                    values: p.values.clone(),
                })
            })
            .collect();
        check_layout(&expected, &self.slots, "optimizer slot")?;
        for pair in self.slots.chunks(2) {
            let key = &pair[0].name[2..];
            let cast = |r: &Record| r.values.iter().map(|v| T::from_f64(f64::from(*v))).collect();
            adam.slots.insert(
                key.to_string(),
                AdamSlot {
                    m: cast(&pair[0]),
                    v: cast(&pair[1]),
                    step: self.iteration,
                },
            );
        }
        Ok(adam)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        for group in [&self.params, &self.slots] {
            out.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for r in group {
                out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
                out.extend_from_slice(r.name.as_bytes());
                out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
                for d in &r.dims {
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for v in &r.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u64()?;
        let n = r.len(n)?;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| format_err("checkpoint config is not UTF-8"))?;
        let params = r.records()?;
        let slots = r.records()?;
        let iteration = r.u64()?;
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_text,
            params,
            slots,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| usage_err(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| format_err(format!("{}: {e}", path.display())))
    }
}

fn check_layout(expected: &[Record], found: &[Record], what: &str) -> Result<()> {
    if expected.len() != found.len() {
        return Err(usage_err(format!(
            "checkpoint has {} {what} tensors, model expects {}",
            found.len(),
            expected.len()
        )));
    }
    for (e, f) in expected.iter().zip(found) {
        if e.name != f.name || e.dims != f.dims {
            return Err(usage_err(format!(
                "checkpoint {what} {} {:?} does not match model {} {:?}",
                f.name, f.dims, e.name, e.dims
            )));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&self, n: u64) -> Result<usize> {
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format_err(format!("implausible length {n} in checkpoint")))
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let n = self.u32()? as usize;
            let name = String::from_utf8(self.take(n)?.to_vec())
                .map_err(|_| format_err("checkpoint tensor name is not UTF-8"))?;
            let rank = self.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(self.u64()?);
            }
            let elems = dims
                .iter()
                .try_fold(1u64, |acc, d| acc.checked_mul(*d))
                .and_then(|e| e.checked_mul(4))
                .ok_or_else(|| format_err(format!("tensor {name} dims overflow")))?;
            let elems = self.len(elems)?;
            let raw = self.take(elems)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(Record { name, dims, values });
        }
        Ok(out)
    }
}
