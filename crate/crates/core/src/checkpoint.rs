//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "PHNTCKPT"
//! version    u8       1
//! mode       u8       0 = phantom, 1 = tensor parallel
//! activation u8       0 = relu, 1 = identity
//! n p k L    u64 x 4  (k is 0 for tensor parallel)
//! seed       u64
//! payload    f64 ...
//! ```
//!
//! Phantom payload: for each rank, for each layer: `L`, `C`, `D[i]` for every
//! `i != rank` in ascending order, `b`. Tensor-parallel payload: for each
//! rank, for each layer: `W_j`, `b_j`. Matrices are row-major.

use std::path::Path;

use crate::error::{config_err, Result};
use crate::linalg::{Activation, Matrix};
use crate::phantom::{PhantomConfig, PhantomLayer, PhantomModel, PhantomShard};
use crate::tensor_parallel::{TpLayer, TpModel, TpShard};

const MAGIC: &[u8; 8] = b"PHNTCKPT";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Phantom { model: PhantomModel, seed: u64 },
    Tensor { model: TpModel, seed: u64 },
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        match self {
            Checkpoint::Phantom { model, seed } => {
                let c = model.config;
                out.push(0);
                out.push(c.activation.code());
                for v in [c.n, c.p, c.k, c.layers] {
                    put_u64(&mut out, v);
                }
                out.extend_from_slice(&seed.to_le_bytes());
                for shard in &model.shards {
                    for layer in &shard.layers {
                        for block in layer.param_slices() {
                            put_f64s(&mut out, block);
                        }
                    }
                }
            }
            Checkpoint::Tensor { model, seed } => {
                out.push(1);
                out.push(model.activation.code());
                let layers = model.shards.first().map_or(0, |s| s.layers.len());
                for v in [model.n, model.p, 0, layers] {
                    put_u64(&mut out, v);
                }
                out.extend_from_slice(&seed.to_le_bytes());
                for shard in &model.shards {
                    for layer in &shard.layers {
                        for block in layer.param_slices() {
                            put_f64s(&mut out, block);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(config_err("checkpoint", "bad magic"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(config_err("checkpoint", format!("unsupported version {version}")));
        }
        let mode = r.u8()?;
        let code = r.u8()?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| config_err("checkpoint", format!("unknown activation code {code}")))?;
        let (n, p, k, layers) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let seed = r.u64()?;
        let ckpt = match mode {
            0 => {
                let config = PhantomConfig {
                    n,
                    p,
                    k,
                    layers,
                    activation,
                };
                config.validate()?;
                let m = config.shard();
                let mut shards = Vec::with_capacity(p);
                for rank in 0..p {
                    let mut ls = Vec::with_capacity(layers);
                    for _ in 0..layers {
                        let local = r.matrix(m, m)?;
                        let compressor = r.matrix(k, m)?;
                        let decompressors = (0..p)
                            .map(|i| (i != rank).then(|| r.matrix(m, k)).transpose())
                            .collect::<Result<Vec<_>>>()?;
                        let bias = r.f64s(m)?;
                        ls.push(PhantomLayer::new(rank, local, compressor, decompressors, bias)?);
                    }
                    shards.push(PhantomShard {
                        config,
                        rank,
                        layers: ls,
                    });
                }
                Checkpoint::Phantom {
                    model: PhantomModel { config, shards },
                    seed,
                }
            }
            1 => {
                if p == 0 || n % p != 0 {
                    return Err(config_err("checkpoint", format!("n = {n} not divisible by p = {p}")));
                }
                let m = n / p;
                let shards = (0..p)
                    .map(|rank| {
                        let layers = (0..layers)
                            .map(|_| {
                                Ok(TpLayer {
                                    weight: r.matrix(m, n)?,
                                    bias: r.f64s(m)?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(TpShard {
                            rank,
                            activation,
                            layers,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Checkpoint::Tensor {
                    model: TpModel {
                        n,
                        p,
                        activation,
                        shards,
                    },
                    seed,
                }
            }
            other => return Err(config_err("checkpoint", format!("unknown mode tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(config_err(
                "checkpoint",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(config_err("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|e| config_err("checkpoint", e.to_string()))
    }

    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let raw = self.take(len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.f64s(rows * cols)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::DenseFFN;

    fn phantom() -> Checkpoint {
        let config = PhantomConfig {
            n: 12,
            p: 3,
            k: 2,
            layers: 2,
            activation: Activation::Identity,
        };
        Checkpoint::Phantom {
            model: PhantomModel::init(config, 5).unwrap(),
            seed: 5,
        }
    }

    #[test]
    fn phantom_round_trip() {
        let c = phantom();
        let bytes = c.to_bytes();
        // header 8 + 3 + 5·8, then per rank per layer 16 + 8 + 2·8 + 4 values
        assert_eq!(bytes.len(), 51 + 3 * 2 * 44 * 8);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn tensor_round_trip_via_file() {
        let model = TpModel::from_dense(&DenseFFN::init(8, 3, Activation::Relu, 1), 4).unwrap();
        let c = Checkpoint::Tensor { model, seed: 1 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = phantom().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut mode = bytes;
        mode[9] = 7;
        assert!(Checkpoint::from_bytes(&mode).is_err());
    }
}
