//! Sharded execution against the unsharded oracle.

use phantom_parallel::phantom::pp_output_delta;
use phantom_parallel::reference::{dense_backward, dense_forward, effective_weight, finite_diff_grad, mse, relative_error};
use phantom_parallel::rng::{gaussian_matrix, Stream};
use phantom_parallel::tensor_parallel::TpLayer;
use phantom_parallel::{Activation, DenseFFN, ExecMode, Flops, Matrix, PhantomConfig, PhantomModel, TpModel, World};
use proptest::prelude::*;

fn pp_outputs(model: &PhantomModel, x: &Matrix, exec: ExecMode) -> Vec<Matrix> {
    let m = model.config.shard();
    World::new(model.config.p, exec)
        .unwrap()
        .run(|comm| {
            let r = comm.rank();
            let (out, _) = model.shards[r].forward(&x.row_block(r * m, m), comm, &mut Flops::default())?;
            Ok(out)
        })
        .unwrap()
}

/// Runs one TP forward and backward; returns per-rank outputs and gradients.
fn tp_step(model: &TpModel, x: &Matrix, y: &Matrix) -> Vec<(Matrix, Vec<TpLayer>)> {
    let m = model.n / model.p;
    let depth = model.shards[0].layers.len();
    World::new(model.p, ExecMode::Lockstep)
        .unwrap()
        .run(|comm| {
            let r = comm.rank();
            let shard = &model.shards[r];
            let mut f = Flops::default();
            let (out, tape) = shard.forward(&x.row_block(r * m, m), comm, &mut f)?;
            let top = &tape.layers[depth - 1].preact;
            let delta = pp_output_delta(&out, &y.row_block(r * m, m), top, model.activation, 1.0, &mut f)?;
            let grads = shard.backward(&tape, delta, comm, &mut f)?;
            Ok((out, grads))
        })
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pp_forward_matches_effective_weights(
        m in 1usize..6,
        p in 1usize..5,
        k_frac in 0.0f64..1.0,
        layers in 1usize..4,
        batch in 1usize..4,
        relu in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let k = 1 + ((m - 1) as f64 * k_frac) as usize;
        let config = PhantomConfig {
            n: m * p,
            p,
            k,
            layers,
            activation: if relu { Activation::Relu } else { Activation::Identity },
        };
        let model = PhantomModel::init(config, seed).unwrap();
        let x = gaussian_matrix(config.n, batch, seed, Stream::Inputs);
        let outs = pp_outputs(&model, &x, ExecMode::Lockstep);
        for out in &outs {
            prop_assert_eq!(out.shape(), (m, batch));
        }
        let (want, _) = dense_forward(&DenseFFN::from_phantom(&model).unwrap(), &x).unwrap();
        prop_assert!(Matrix::vstack(&outs).unwrap().max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn effective_weight_rank_bound(p in 2usize..5, seed in any::<u64>()) {
        let config = PhantomConfig { n: 6 * p, p, k: 1, layers: 1, activation: Activation::Identity };
        let model = PhantomModel::init(config, seed).unwrap();
        let w = effective_weight(&model, 0).unwrap();
        // Off-diagonal block column j is D·C_j with k = 1: rank one.
        for j in 0..p {
            let below: Vec<Matrix> = (0..p).filter(|i| *i != j).map(|i| w.row_block(i * 6, 6).col_block(j * 6, 6)).collect();
            let stacked = Matrix::vstack(&below).unwrap();
            let a = numeric_rank(&stacked);
            prop_assert!(a <= 1);
        }
    }

    #[test]
    fn tp_matches_dense(p_pow in 0u32..3, layers in 1usize..4, batch in 1usize..4, seed in any::<u64>()) {
        let p = 1usize << p_pow;
        let n = 4 * p;
        let dense = DenseFFN::init(n, layers, Activation::Relu, seed);
        let model = TpModel::from_dense(&dense, p).unwrap();
        let x = gaussian_matrix(n, batch, seed, Stream::Inputs);
        let y = gaussian_matrix(n, batch, seed, Stream::Teacher);
        let ranks = tp_step(&model, &x, &y);
        let (want, tape) = dense_forward(&dense, &x).unwrap();
        let back = dense_backward(&dense, &tape, &want, &y, 1.0).unwrap();
        let out = Matrix::vstack(&ranks.iter().map(|r| r.0.clone()).collect::<Vec<_>>()).unwrap();
        prop_assert!(out.max_abs_diff(&want) <= 1e-12);
        let m = n / p;
        for (r, (_, grads)) in ranks.iter().enumerate() {
            for l in 0..layers {
                let w = back.grads[l].weight.row_block(r * m, m);
                prop_assert!(grads[l].weight.max_abs_diff(&w) <= 1e-12);
                let b = &back.grads[l].bias[r * m..(r + 1) * m];
                prop_assert!(relative_error(&grads[l].bias, b) <= 1e-12);
            }
        }
    }
}

/// Numerical rank by Gaussian elimination with partial pivoting.
fn numeric_rank(a: &Matrix) -> usize {
    let (rows, cols) = a.shape();
    let mut m: Vec<Vec<f64>> = (0..rows).map(|r| a.row(r).to_vec()).collect();
    let scale = a.data().iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..rows).max_by(|x, y| m[*x][c].abs().total_cmp(&m[*y][c].abs())) else {
            break;
        };
        if m[piv][c].abs() <= 1e-10 * scale {
            continue;
        }
        m.swap(rank, piv);
        for r in rank + 1..rows {
            let f = m[r][c] / m[rank][c];
            for cc in c..cols {
                m[r][cc] -= f * m[rank][cc];
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn tp_gradients_match_finite_differences() {
    let (n, p, layers, batch) = (8, 2, 2, 3);
    let dense = DenseFFN::init(n, layers, Activation::Identity, 21);
    let model = TpModel::from_dense(&dense, p).unwrap();
    let x = gaussian_matrix(n, batch, 21, Stream::Inputs);
    let y = gaussian_matrix(n, batch, 21, Stream::Teacher);
    let ranks = tp_step(&model, &x, &y);
    for (r, (_, grads)) in ranks.iter().enumerate() {
        for l in 0..layers {
            for b in 0..2 {
                let theta = model.shards[r].layers[l].param_slices()[b].to_vec();
                let fd = finite_diff_grad(
                    |t| {
                        let mut m = model.clone();
                        m.shards[r].layers[l].param_slices_mut()[b].copy_from_slice(t);
                        let d = m.to_dense().unwrap();
                        mse(&dense_forward(&d, &x).unwrap().0, &y, 1.0)
                    },
                    &theta,
                    1e-3,
                )
                .unwrap();
                let err = relative_error(&fd, grads[l].param_slices()[b]);
                assert!(err < 1e-8, "rank {r} layer {l} block {b}: {err:e}");
            }
        }
    }
}

#[test]
fn exec_modes_agree_bitwise() {
    let config = PhantomConfig {
        n: 24,
        p: 4,
        k: 3,
        layers: 3,
        activation: Activation::Relu,
    };
    let model = PhantomModel::init(config, 4).unwrap();
    let x = gaussian_matrix(24, 5, 4, Stream::Inputs);
    assert_eq!(
        pp_outputs(&model, &x, ExecMode::Lockstep),
        pp_outputs(&model, &x, ExecMode::Threaded)
    );
}

#[test]
fn sharded_loss_sums_to_dense_loss() {
    let config = PhantomConfig {
        n: 12,
        p: 3,
        k: 2,
        layers: 2,
        activation: Activation::Relu,
    };
    let model = PhantomModel::init(config, 8).unwrap();
    let x = gaussian_matrix(12, 4, 8, Stream::Inputs);
    let y = gaussian_matrix(12, 4, 8, Stream::Teacher);
    let outs = pp_outputs(&model, &x, ExecMode::Lockstep);
    let local: f64 = outs
        .iter()
        .enumerate()
        .map(|(r, o)| mse(o, &y.row_block(r * 4, 4), 1.0))
        .sum();
    let (dense, _) = dense_forward(&DenseFFN::from_phantom(&model).unwrap(), &x).unwrap();
    assert!((local - mse(&dense, &y, 1.0)).abs() <= 1e-10 * local.abs().max(1.0));
}
