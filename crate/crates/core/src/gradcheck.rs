//! Finite-difference check of the distributed phantom backward pass.
//!
//! The analytic side runs the real multi-rank forward and backward. The
//! numerical side never touches the communicator: it evaluates the loss of
//! the dense network assembled from the effective weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::collectives::{ExecMode, World};
use crate::error::{config_err, Error, Result};
use crate::linalg::{Activation, Flops, Matrix};
use crate::phantom::{pp_output_delta, PhantomConfig, PhantomModel};
use crate::reference::{dense_forward, dense_forward_perturbed, finite_diff_grad, mse, relative_error, DenseFFN};
use crate::rng::{gaussian_matrix, Stream};

/// Gradient family being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum GradGroup {
    Bias,
    Local,
    Compressor,
    Decompressor,
    /// The layer errors `δ_l`.
    Delta,
}

impl GradGroup {
    pub const ALL: [GradGroup; 5] = [
        GradGroup::Bias,
        GradGroup::Local,
        GradGroup::Compressor,
        GradGroup::Decompressor,
        GradGroup::Delta,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            GradGroup::Bias => "b",
            GradGroup::Local => "L",
            GradGroup::Compressor => "C",
            GradGroup::Decompressor => "D",
            GradGroup::Delta => "delta",
        }
    }
}

impl fmt::Display for GradGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for GradGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradGroup::ALL
            .into_iter()
            .find(|g| g.symbol().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err("GradGroup", format!("unknown group {s:?}; expected b, L, C, D or delta")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub phantom: PhantomConfig,
    pub batch: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Inputs are redrawn while any pre-activation is closer than this to
    /// zero (ReLU only).
    pub kink_margin: f64,
    pub max_redraws: usize,
    /// Test hook: perturbs the analytic gradient of one group.
    pub fault: Option<GradGroup>,
}

impl GradCheckConfig {
    /// Step `1e-5` for ReLU. With the identity activation the loss is exactly
    /// quadratic along every coordinate, so central differences have no
    /// truncation error and a larger step `1e-3` only reduces round-off.
    pub fn new(phantom: PhantomConfig, batch: usize, seed: u64) -> Self {
        Self {
            phantom,
            batch,
            seed,
            step: match phantom.activation {
                Activation::Relu => 1e-5,
                Activation::Identity => 1e-3,
            },
            kink_margin: 1e-3,
            max_redraws: 1000,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error per group.
    pub max_rel_error: BTreeMap<GradGroup, f64>,
    pub entries_checked: usize,
    pub redraws: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> (GradGroup, f64) {
        self.max_rel_error
            .iter()
            .map(|(g, e)| (*g, *e))
            .fold((GradGroup::Bias, 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }

    /// Groups whose error exceeds `tol`, in group order.
    pub fn failing(&self, tol: f64) -> Vec<GradGroup> {
        self.max_rel_error
            .iter()
            .filter(|(_, e)| !(**e <= tol))
            .map(|(g, _)| *g)
            .collect()
    }
}

struct Instance {
    model: PhantomModel,
    x: Matrix,
    y: Matrix,
    redraws: usize,
}

fn draw(cfg: &GradCheckConfig) -> Result<Instance> {
    let pc = cfg.phantom;
    let mut model = PhantomModel::init(pc, cfg.seed)?;
    let m = pc.shard();
    for attempt in 0..=cfg.max_redraws {
        let stream = |i: u64| Stream::Aux(((attempt as u64) << 8) | i);
        for (r, shard) in model.shards.iter_mut().enumerate() {
            for (l, layer) in shard.layers.iter_mut().enumerate() {
                let b = gaussian_matrix(m, 1, cfg.seed, stream(3 + (r * pc.layers + l) as u64 % 200));
                layer.bias = b.data().iter().map(|v| 0.1 * v).collect();
            }
        }
        let x = gaussian_matrix(pc.n, cfg.batch, cfg.seed, stream(1));
        let y = gaussian_matrix(pc.n, cfg.batch, cfg.seed, stream(2));
        if pc.activation == Activation::Relu {
            let dense = DenseFFN::from_phantom(&model)?;
            let (_, tape) = dense_forward(&dense, &x)?;
            let near_kink = tape
                .preacts
                .iter()
                .any(|z| z.data().iter().any(|v| v.abs() < cfg.kink_margin));
            if near_kink {
                continue;
            }
        }
        return Ok(Instance {
            model,
            x,
            y,
            redraws: attempt,
        });
    }
    Err(Error::Oracle(format!(
        "no kink-free instance after {} redraws",
        cfg.max_redraws
    )))
}

struct Analytic {
    /// Per rank, per layer: gradient blocks in `param_slices` order.
    grads: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per rank, per layer: `δ_l` shard.
    deltas: Vec<Vec<Matrix>>,
}

fn analytic(inst: &Instance) -> Result<Analytic> {
    let pc = inst.model.config;
    let m = pc.shard();
    let out = World::new(pc.p, ExecMode::Lockstep)?.run(|comm| {
        let r = comm.rank();
        let shard = &inst.model.shards[r];
        let x = inst.x.row_block(r * m, m);
        let y = inst.y.row_block(r * m, m);
        let mut f = Flops::default();
        let (out, tape) = shard.forward(&x, comm, &mut f)?;
        let top = &tape.layers[pc.layers - 1].preact;
        let delta = pp_output_delta(&out, &y, top, pc.activation, 1.0, &mut f)?;
        let back = shard.backward(&tape, delta, comm, &mut f)?;
        let grads = back
            .grads
            .iter()
            .map(|g| g.param_slices().into_iter().map(<[f64]>::to_vec).collect())
            .collect();
        Ok((grads, back.deltas))
    })?;
    let (grads, deltas) = out.into_iter().unzip();
    Ok(Analytic { grads, deltas })
}

/// Which group each `param_slices` block of a layer belongs to.
fn block_groups(p: usize) -> Vec<GradGroup> {
    let mut g = vec![GradGroup::Local, GradGroup::Compressor];
    g.extend(std::iter::repeat_n(GradGroup::Decompressor, p - 1));
    g.push(GradGroup::Bias);
    g
}

/// Compares every parameter gradient and every layer error of one seeded
/// instance with central differences of the global loss.
pub fn pp_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.phantom.validate()?;
    if cfg.batch == 0 {
        return Err(config_err("pp_gradcheck", "batch must be positive"));
    }
    let inst = draw(cfg)?;
    let mut an = analytic(&inst)?;
    if let Some(group) = cfg.fault {
        inject(&mut an, group, cfg.phantom.p);
    }
    let pc = inst.model.config;
    let groups = block_groups(pc.p);
    let mut worst: BTreeMap<GradGroup, f64> = GradGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
    let mut checked = 0;

    for r in 0..pc.p {
        for l in 0..pc.layers {
            for (b, group) in groups.iter().enumerate() {
                let theta = inst.model.shards[r].layers[l].param_slices()[b].to_vec();
                let fd = finite_diff_grad(
                    |t| {
                        let mut model = inst.model.clone();
                        model.shards[r].layers[l].param_slices_mut()[b].copy_from_slice(t);
                        loss_of(&model, &inst.x, &inst.y)
                    },
                    &theta,
                    cfg.step,
                )?;
                let err = relative_error(&fd, &an.grads[r][l][b]);
                checked += fd.len();
                let w = worst.get_mut(group).expect("all groups present");
                *w = w.max(err);
            }
        }
    }

    let dense = DenseFFN::from_phantom(&inst.model)?;
    let m = pc.shard();
    for l in 0..pc.layers {
        let zero = Matrix::zeros(pc.n, cfg.batch);
        let fd = finite_diff_grad(
            |t| {
                let offset = Matrix::new(pc.n, cfg.batch, t.to_vec()).expect("shape");
                match dense_forward_perturbed(&dense, &inst.x, Some((l, &offset))) {
                    Ok((out, _)) => mse(&out, &inst.y, 1.0),
                    Err(_) => f64::NAN,
                }
            },
            zero.data(),
            cfg.step,
        )?;
        let fd = Matrix::new(pc.n, cfg.batch, fd)?;
        for r in 0..pc.p {
            let err = relative_error(fd.row_block(r * m, m).data(), an.deltas[r][l].data());
            checked += m * cfg.batch;
            let w = worst.get_mut(&GradGroup::Delta).expect("present");
            *w = w.max(err);
        }
    }

    Ok(GradCheckReport {
        max_rel_error: worst,
        entries_checked: checked,
        redraws: inst.redraws,
    })
}

fn loss_of(model: &PhantomModel, x: &Matrix, y: &Matrix) -> f64 {
    DenseFFN::from_phantom(model)
        .and_then(|d| dense_forward(&d, x))
        .map_or(f64::NAN, |(out, _)| mse(&out, y, 1.0))
}

fn inject(an: &mut Analytic, group: GradGroup, p: usize) {
    let corrupt = |v: &mut [f64]| {
        for x in v.iter_mut() {
            *x = *x * 1.01 + 1e-3;
        }
    };
    if group == GradGroup::Delta {
        corrupt(an.deltas[0][0].data_mut());
        return;
    }
    let b = block_groups(p).iter().position(|g| *g == group).expect("parameter group");
    corrupt(&mut an.grads[0][0][b]);
}
