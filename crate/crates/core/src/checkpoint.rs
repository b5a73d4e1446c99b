//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! "MTLK" | version=1 | param_count | param_count x tensor
//!        | state_count | state_count x tensor
//! tensor := ndim | dims[ndim] | values[prod(dims)]
//! ```
//!
//! The state section holds, in order: the architecture record
//! `[in_channels, input_size, width, stem_kernel, pool, residual_blocks,
//! block_kernel, lesions, locations, epoch]`, the per-channel input means, and when
//! optimizer state is present, the scalar record `[base_lr, momentum,
//! weight_decay, epoch, plateau_best (NaN if unset), epochs_since_improvement,
//! factor, patience, threshold, min_lr]` followed by one momentum buffer per
//! parameter.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{DualHeadNet, NetConfig};
use crate::optimizer::{PlateauConfig, PlateauState, SgdState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTLK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: DualHeadNet,
    /// Input normalization means, one per channel.
    pub channel_means: Vec<f64>,
    pub optimizer: Option<SgdState>,
    /// Completed training epochs.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let params = self.net.params();
        put_u32(&mut out, params.len() as u32);
        for p in params {
            put_tensor(&mut out, p.tensor.shape(), p.tensor.values());
        }

        let c = self.net.config();
        let arch = [
            c.in_channels,
            c.input_size,
            c.width,
            c.stem_kernel,
            c.pool,
            c.residual_blocks,
            c.block_kernel,
            self.net.num_lesions(),
            self.net.num_locations(),
            self.epoch,
        ]
        .map(|v| v as f64);
        let state_count = 2 + self.optimizer.as_ref().map_or(0, |o| 1 + o.buffers.len());
        put_u32(&mut out, state_count as u32);
        put_tensor(&mut out, &[arch.len()], &arch);
        put_tensor(&mut out, &[self.channel_means.len().max(1)], &padded(&self.channel_means));
        if let Some(o) = &self.optimizer {
            let pc = o.plateau_cfg;
            let scalars = [
                o.base_lr,
                o.momentum,
                o.weight_decay,
                self.epoch as f64,
                o.plateau.best.unwrap_or(f64::NAN),
                o.plateau.epochs_since_improvement as f64,
                pc.factor,
                pc.patience as f64,
                pc.threshold,
                pc.min_lr,
            ];
            put_tensor(&mut out, &[scalars.len()], &scalars);
            for (buf, p) in o.buffers.iter().zip(params) {
                put_tensor(&mut out, p.tensor.shape(), buf);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let state_count = r.u32()? as usize;
        if state_count < 2 {
            return Err(Error::Checkpoint("missing architecture record".into()));
        }
        let arch = r.tensor()?;
        let means = r.tensor()?;
        let a: Vec<usize> = arch.values().iter().map(|&v| v as usize).collect();
        if a.len() != 10 {
            return Err(Error::Checkpoint("architecture record must have 10 entries".into()));
        }
        let config = NetConfig {
            in_channels: a[0],
            input_size: a[1],
            width: a[2],
            stem_kernel: a[3],
            pool: a[4],
            residual_blocks: a[5],
            block_kernel: a[6],
        };
        let net = DualHeadNet::from_parts(config, a[7], a[8], tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let channel_means = means.values()[..net.config().in_channels.min(means.len())].to_vec();

        let epoch = a[9];
        let optimizer = if state_count > 2 {
            let s = r.tensor()?;
            let s = s.values();
            if s.len() != 10 || state_count != 3 + n {
                return Err(Error::Checkpoint("malformed optimizer state".into()));
            }
            let buffers = (0..n)
                .map(|_| r.tensor().map(Tensor::into_values))
                .collect::<Result<Vec<_>>>()?;
            for (b, p) in buffers.iter().zip(net.params()) {
                if b.len() != p.tensor.len() {
                    return Err(Error::Checkpoint(format!("momentum buffer for {}", p.name)));
                }
            }
            let state = SgdState {
                buffers,
                base_lr: s[0],
                momentum: s[1],
                weight_decay: s[2],
                plateau: PlateauState {
                    best: (!s[4].is_nan()).then_some(s[4]),
                    epochs_since_improvement: s[5] as usize,
                },
                plateau_cfg: PlateauConfig {
                    factor: s[6],
                    patience: s[7] as usize,
                    threshold: s[8],
                    min_lr: s[9],
                },
            };
            Some(state)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            net,
            channel_means,
            optimizer,
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        let path = path.as_ref();
        std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn padded(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0]
    } else {
        v.to_vec()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, shape: &[usize], values: &[f64]) {
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("bad tensor rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {shape:?} exceeds file")))?;
        let raw = self.take(len * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
