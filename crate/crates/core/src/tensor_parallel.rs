//! Tensor-parallel baseline.
//!
//! Each rank owns a row block `W_j` (`n/p x n`) of every layer's weight and
//! the matching bias shard, so it produces an `n/p`-wide output shard from
//! the full-width input. Per layer and iteration the schedule is:
//!
//! | direction | collective     | elements per rank |
//! |-----------|----------------|-------------------|
//! | forward   | all-gather     | `n/p x batch`     |
//! | forward   | broadcast      | `n x batch`       |
//! | backward  | all-reduce     | `n x batch`       |
//! | backward  | reduce-scatter | `n/p x batch`     |
//!
//! Forward gathers the input shards into the full activation and takes the
//! root's copy by broadcast. Backward all-reduces the full input gradient
//! `Σ_j W_jᵀ·δ_j` and reduce-scatters the same contributions to obtain each
//! rank's shard of it; both sums run in rank order and agree bit for bit.

use crate::collectives::{CommTag, RankComm};
use crate::error::{config_err, Error, Result};
use crate::linalg::{activation_grad, apply_activation, gemm, Activation, Flops, Matrix};
use crate::reference::DenseFFN;

#[derive(Clone, Debug, PartialEq)]
pub struct TpLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

pub type TpGrads = TpLayer;

impl TpLayer {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpLayerTape {
    /// Full-width input, `n x batch`.
    pub input: Matrix,
    /// Pre-activation shard, `n/p x batch`.
    pub preact: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TpTape {
    pub layers: Vec<TpLayerTape>,
}

pub fn tp_forward_layer(
    layer: &TpLayer,
    y_prev_shard: &Matrix,
    act: Activation,
    layer_index: usize,
    comm: &mut RankComm,
    tape: &mut TpTape,
    flops: &mut Flops,
) -> Result<Matrix> {
    let shard = layer.weight.rows();
    if y_prev_shard.rows() != shard || layer.weight.cols() != shard * comm.size() {
        return Err(config_err(
            "tp_forward_layer",
            format!(
                "weight {:?} and input shard {:?} do not fit a world of {}",
                layer.weight.shape(),
                y_prev_shard.shape(),
                comm.size()
            ),
        ));
    }
    let gathered = comm.all_gather(y_prev_shard, CommTag::forward(layer_index))?;
    let full = comm.broadcast(0, &gathered, CommTag::forward(layer_index))?;
    let mut z = gemm(&layer.weight, &full, false, false, flops)?;
    z.add_bias(&layer.bias, flops)?;
    let out = apply_activation(&z, act, flops);
    tape.layers.push(TpLayerTape {
        input: full,
        preact: z,
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpBackwardStep {
    pub grads: TpGrads,
    /// Full input gradient `∂L/∂y_{l-1}`, `n x batch`, identical on all ranks.
    pub input_grad: Matrix,
    pub delta_prev: Option<Matrix>,
}

pub fn tp_backward_layer(
    layer: &TpLayer,
    delta: &Matrix,
    tape: &TpLayerTape,
    prev: Option<(&Matrix, Activation)>,
    layer_index: usize,
    comm: &mut RankComm,
    flops: &mut Flops,
) -> Result<TpBackwardStep> {
    if delta.shape() != tape.preact.shape() {
        return Err(config_err(
            "tp_backward_layer",
            format!("delta {:?} vs tape {:?}", delta.shape(), tape.preact.shape()),
        ));
    }
    let shard = delta.rows();
    let contribution = gemm(&layer.weight, delta, true, false, flops)?;
    let input_grad = comm.all_reduce(&contribution, CommTag::backward(layer_index))?;
    let grad_shard = comm.reduce_scatter(&contribution, CommTag::backward(layer_index))?;
    debug_assert_eq!(
        grad_shard,
        input_grad.row_block(comm.rank() * shard, shard),
        "rank-ordered sums must agree"
    );

    let weight = gemm(delta, &tape.input, false, true, flops)?;
    let bias = delta.row_sums(flops);
    let delta_prev = match prev {
        None => None,
        Some((preact, act)) => {
            let mut d = grad_shard;
            d.hadamard_assign(&activation_grad(preact, act), flops)?;
            Some(d)
        }
    };
    Ok(TpBackwardStep {
        grads: TpLayer { weight, bias },
        input_grad,
        delta_prev,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpShard {
    pub rank: usize,
    pub activation: Activation,
    pub layers: Vec<TpLayer>,
}

impl TpShard {
    pub fn forward(
        &self,
        x_shard: &Matrix,
        comm: &mut RankComm,
        flops: &mut Flops,
    ) -> Result<(Matrix, TpTape)> {
        let mut tape = TpTape::default();
        let mut y = x_shard.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            y = tp_forward_layer(layer, &y, self.activation, l, comm, &mut tape, flops)?;
        }
        Ok((y, tape))
    }

    /// Returns per-layer gradients, bottom first.
    pub fn backward(
        &self,
        tape: &TpTape,
        output_delta: Matrix,
        comm: &mut RankComm,
        flops: &mut Flops,
    ) -> Result<Vec<TpGrads>> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::Sequencing(format!(
                "tape holds {} layers, model has {}",
                tape.layers.len(),
                self.layers.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_delta;
        for l in (0..self.layers.len()).rev() {
            let prev = (l > 0).then(|| (&tape.layers[l - 1].preact, self.activation));
            let step = tp_backward_layer(&self.layers[l], &delta, &tape.layers[l], prev, l, comm, flops)?;
            grads.push(step.grads);
            if let Some(d) = step.delta_prev {
                delta = d;
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpModel {
    pub n: usize,
    pub p: usize,
    pub activation: Activation,
    pub shards: Vec<TpShard>,
}

impl TpModel {
    /// Splits every dense layer into `p` row blocks.
    pub fn from_dense(dense: &DenseFFN, p: usize) -> Result<Self> {
        let n = dense.n();
        if p == 0 || n % p != 0 {
            return Err(config_err("TpModel::from_dense", format!("n = {n} not divisible by p = {p}")));
        }
        let shard = n / p;
        let shards = (0..p)
            .map(|rank| TpShard {
                rank,
                activation: dense.activation,
                layers: dense
                    .layers
                    .iter()
                    .map(|l| TpLayer {
                        weight: l.weight.row_block(rank * shard, shard),
                        bias: l.bias[rank * shard..(rank + 1) * shard].to_vec(),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            n,
            p,
            activation: dense.activation,
            shards,
        })
    }

    /// Concatenates the row blocks back into a dense network.
    pub fn to_dense(&self) -> Result<DenseFFN> {
        let depth = self.shards.first().map_or(0, |s| s.layers.len());
        let layers = (0..depth)
            .map(|l| {
                let blocks: Vec<Matrix> = self.shards.iter().map(|s| s.layers[l].weight.clone()).collect();
                let bias = self.shards.iter().flat_map(|s| s.layers[l].bias.iter().copied()).collect();
                Ok(crate::reference::DenseLayer {
                    weight: Matrix::vstack(&blocks)?,
                    bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseFFN {
            activation: self.activation,
            layers,
        })
    }
}

/// Weight count of the unsharded network, biases excluded: `layers·n²`.
pub fn tp_model_size(n: usize, layers: usize) -> u64 {
    layers as u64 * (n as u64) * (n as u64)
}
