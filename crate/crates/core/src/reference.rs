//! Single-process dense reference network and the numerical oracles used to
//! check both parallel implementations.

use crate::error::{config_err, Error, Result};
use crate::linalg::{activation_grad, apply_activation, gemm, matmul, Activation, Flops, Matrix};
use crate::phantom::PhantomModel;
use crate::rng::{glorot_uniform, ParamKind, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

/// Square fully connected network of uniform width.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFFN {
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseTape {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

impl DenseFFN {
    /// Glorot-uniform weights, zero biases. Tensor-parallel models are row
    /// splits of this, so they start from identical weights for every `p`.
    pub fn init(n: usize, layers: usize, activation: Activation, seed: u64) -> Self {
        Self {
            activation,
            layers: (0..layers)
                .map(|layer| DenseLayer {
                    weight: glorot_uniform(
                        n,
                        n,
                        seed,
                        Stream::Param {
                            layer,
                            rank: 0,
                            kind: ParamKind::DenseWeight,
                        },
                    ),
                    bias: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    /// The dense network a phantom model implicitly represents.
    pub fn from_phantom(model: &PhantomModel) -> Result<Self> {
        let layers = (0..model.config.layers)
            .map(|l| {
                Ok(DenseLayer {
                    weight: effective_weight(model, l)?,
                    bias: model
                        .shards
                        .iter()
                        .flat_map(|s| s.layers[l].bias.iter().copied())
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            activation: model.config.activation,
            layers,
        })
    }
}

/// Dense `n x n` matrix with diagonal blocks `L_j` and off-diagonal blocks
/// `(row j, col i) = D_j[i]·C_i`.
pub fn effective_weight(model: &PhantomModel, layer: usize) -> Result<Matrix> {
    let cfg = model.config;
    if layer >= cfg.layers {
        return Err(config_err(
            "effective_weight",
            format!("layer {layer} out of range (model has {})", cfg.layers),
        ));
    }
    let shard = cfg.shard();
    let mut w = Matrix::zeros(cfg.n, cfg.n);
    for (j, dest) in model.shards.iter().enumerate() {
        let lj = &dest.layers[layer];
        w.set_block(j * shard, j * shard, &lj.local);
        for (i, d) in lj.decompressors.iter().enumerate() {
            if let Some(d) = d {
                let block = matmul(d, &model.shards[i].layers[layer].compressor)?;
                w.set_block(j * shard, i * shard, &block);
            }
        }
    }
    Ok(w)
}

/// `y_L` after `L` layers of `σ(b + W·y)`, with the forward state.
pub fn dense_forward(model: &DenseFFN, x: &Matrix) -> Result<(Matrix, DenseTape)> {
    dense_forward_perturbed(model, x, None)
}

/// Like [`dense_forward`], but adds `offset` to the pre-activation of the
/// given layer. Used to differentiate the loss with respect to `z_l`.
pub fn dense_forward_perturbed(
    model: &DenseFFN,
    x: &Matrix,
    offset: Option<(usize, &Matrix)>,
) -> Result<(Matrix, DenseTape)> {
    let n = model.n();
    if x.rows() != n {
        return Err(config_err(
            "dense_forward",
            format!("input has {} rows, network width is {n}", x.rows()),
        ));
    }
    let mut flops = Flops::default();
    let mut tape = DenseTape::default();
    let mut y = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let mut z = gemm(&layer.weight, &y, false, false, &mut flops)?;
        if let Some((ol, off)) = offset {
            if ol == l {
                z.add_assign(off, &mut flops)?;
            }
        }
        z.add_bias(&layer.bias, &mut flops)?;
        let next = apply_activation(&z, model.activation, &mut flops);
        tape.inputs.push(y);
        tape.preacts.push(z);
        y = next;
    }
    Ok((y, tape))
}

/// `scale·½‖y_out − y_true‖²_F`.
pub fn mse(y_out: &Matrix, y_true: &Matrix, scale: f64) -> f64 {
    let d = y_out.sub(y_true, &mut Flops::default()).expect("conforming shapes");
    0.5 * scale * d.frobenius_sq()
}

pub fn dense_loss(model: &DenseFFN, x: &Matrix, y: &Matrix, scale: f64) -> Result<f64> {
    Ok(mse(&dense_forward(model, x)?.0, y, scale))
}

/// Plain backpropagation for the dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBackward {
    pub grads: Vec<DenseLayer>,
    /// `∂L/∂z_l` per layer, bottom first.
    pub deltas: Vec<Matrix>,
}

pub fn dense_backward(
    model: &DenseFFN,
    tape: &DenseTape,
    y_out: &Matrix,
    y_true: &Matrix,
    scale: f64,
) -> Result<DenseBackward> {
    let mut flops = Flops::default();
    let act = model.activation;
    let depth = model.layers.len();
    let mut delta = y_out.sub(y_true, &mut flops)?;
    delta.scale(scale);
    delta.hadamard_assign(&activation_grad(&tape.preacts[depth - 1], act), &mut flops)?;
    let mut grads = Vec::with_capacity(depth);
    let mut deltas = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let layer = &model.layers[l];
        grads.push(DenseLayer {
            weight: gemm(&delta, &tape.inputs[l], false, true, &mut flops)?,
            bias: delta.row_sums(&mut flops),
        });
        let next = if l > 0 {
            let mut d = gemm(&layer.weight, &delta, true, false, &mut flops)?;
            d.hadamard_assign(&activation_grad(&tape.preacts[l - 1], act), &mut flops)?;
            Some(d)
        } else {
            None
        };
        match next {
            Some(d) => deltas.push(std::mem::replace(&mut delta, d)),
            None => {
                deltas.push(delta);
                break;
            }
        }
    }
    grads.reverse();
    deltas.reverse();
    Ok(DenseBackward { grads, deltas })
}

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let up = loss(&point);
        point[i] = theta[i] - h;
        let down = loss(&point);
        point[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite loss perturbing coordinate {i}: {up}, {down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i − b_i| / max(1e-8, |a_i|, |b_i|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1e-8f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{PhantomConfig, PhantomLayer, PhantomShard};

    #[test]
    fn identity_network() {
        let model = DenseFFN {
            activation: Activation::Identity,
            layers: vec![DenseLayer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        let x = Matrix::column(&[1.0, -2.0, 3.0]);
        assert_eq!(dense_forward(&model, &x).unwrap().0, x);
        let relu = DenseFFN {
            activation: Activation::Relu,
            layers: vec![DenseLayer {
                weight: Matrix::identity(2),
                bias: vec![0.0; 2],
            }],
        };
        assert_eq!(
            dense_forward(&relu, &Matrix::column(&[-1.0, 1.0])).unwrap().0,
            Matrix::column(&[0.0, 1.0])
        );
        assert!(dense_forward(&relu, &x).is_err());
    }

    fn worked_example() -> PhantomModel {
        let config = PhantomConfig {
            n: 4,
            p: 2,
            k: 1,
            layers: 1,
            activation: Activation::Identity,
        };
        let r0 = PhantomLayer::new(
            0,
            Matrix::identity(2),
            Matrix::from_rows(&[[0.5, 0.5]]),
            vec![None, Some(Matrix::column(&[1.0, 2.0]))],
            vec![0.0; 2],
        )
        .unwrap();
        let r1 = PhantomLayer::new(
            1,
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 0.0]]),
            vec![Some(Matrix::column(&[0.0, 0.0])), None],
            vec![0.0; 2],
        )
        .unwrap();
        PhantomModel {
            config,
            shards: vec![
                PhantomShard { config, rank: 0, layers: vec![r0] },
                PhantomShard { config, rank: 1, layers: vec![r1] },
            ],
        }
    }

    #[test]
    fn effective_weight_worked_example() {
        let w = effective_weight(&worked_example(), 0).unwrap();
        let expect = Matrix::from_rows(&[
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 2.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        assert_eq!(w, expect);
        assert_eq!(
            matmul(&w, &Matrix::column(&[1.0, 2.0, 3.0, 4.0])).unwrap(),
            Matrix::column(&[4.0, 8.0, 3.0, 4.0])
        );
        assert!(effective_weight(&worked_example(), 1).is_err());
    }

    #[test]
    fn zero_compressors_give_block_diagonal() {
        let config = PhantomConfig {
            n: 9,
            p: 3,
            k: 1,
            layers: 1,
            activation: Activation::Relu,
        };
        let mut model = PhantomModel::init(config, 1).unwrap();
        for s in &mut model.shards {
            s.layers[0].compressor = Matrix::zeros(1, 3);
        }
        let w = effective_weight(&model, 0).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                if r / 3 != c / 3 {
                    assert_eq!(w.get(r, c), 0.0);
                } else {
                    assert_eq!(w.get(r, c), model.shards[r / 3].layers[0].local.get(r % 3, c % 3));
                }
            }
        }
    }

    #[test]
    fn off_diagonal_blocks_have_rank_at_most_k() {
        let config = PhantomConfig {
            n: 16,
            p: 2,
            k: 2,
            layers: 1,
            activation: Activation::Relu,
        };
        let model = PhantomModel::init(config, 8).unwrap();
        let w = effective_weight(&model, 0).unwrap();
        let block = nalgebra::DMatrix::from_fn(8, 8, |r, c| w.get(r, 8 + c));
        let rank = block.rank(1e-10);
        assert!(rank <= 2, "rank {rank}");
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_diff_grad(|t| t[0], &[1.0], 0.0).is_err());
        assert!(finite_diff_grad(|t| if t[0] > 1.0 { f64::NAN } else { 0.0 }, &[1.0], 1e-5).is_err());
    }

    #[test]
    fn finite_diff_quadratic_form() {
        // f(θ) = ‖Aθ‖²/2 has gradient AᵀAθ.
        let a = Matrix::from_rows(&[[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0], [2.0, 1.0, 1.0]]);
        let theta = [0.3, -1.2, 0.7];
        let f = |t: &[f64]| 0.5 * matmul(&a, &Matrix::column(t)).unwrap().frobenius_sq();
        let fd = finite_diff_grad(f, &theta, 1e-5).unwrap();
        let ata = matmul(&a.transpose(), &a).unwrap();
        let exact = matmul(&ata, &Matrix::column(&theta)).unwrap();
        assert!(relative_error(&fd, exact.data()) < 1e-6);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let model = DenseFFN::init(5, 2, Activation::Identity, 2);
        let x = Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.3 + j as f64 * 0.2);
        let y = Matrix::from_fn(5, 3, |i, j| ((i * j) as f64).sin());
        let (out, tape) = dense_forward(&model, &x).unwrap();
        let back = dense_backward(&model, &tape, &out, &y, 1.0).unwrap();
        for l in 0..2 {
            let theta = model.layers[l].weight.data().to_vec();
            let fd = finite_diff_grad(
                |t| {
                    let mut m = model.clone();
                    m.layers[l].weight.data_mut().copy_from_slice(t);
                    dense_loss(&m, &x, &y, 1.0).unwrap()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&fd, back.grads[l].weight.data()) < 1e-6);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1e-9], &[0.0]) - 0.1).abs() < 1e-12);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-12);
    }
}
