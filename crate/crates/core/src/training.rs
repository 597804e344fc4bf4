//! Synthetic teacher data, the sharded MSE loss, optimizers and the
//! fixed-loss training loop for both parallel modes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::collectives::{CommCostModel, CommRecord, CommTag, ExecMode, RankComm, World};
use crate::energy::{CostReport, CostShape, EnergyRates, IterationFlops};
use crate::error::{config_err, Error, Result};
use crate::linalg::{apply_activation, gemm, Activation, Flops, Matrix};
use crate::phantom::{pp_output_delta, PhantomConfig, PhantomModel};
use crate::reference::{dense_backward, dense_forward, mse, DenseFFN};
use crate::rng::{gaussian_matrix, Stream};
use crate::phantom::PhantomShard;
use crate::tensor_parallel::{TpModel, TpShard};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pp,
    Tp,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Mode::Pp => "pp",
            Mode::Tp => "tp",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pp" | "phantom" => Ok(Mode::Pp),
            "tp" | "tensor" => Ok(Mode::Tp),
            _ => Err(config_err("mode", format!("unknown mode {s:?}, expected tp or pp"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(config_err("optimizer", format!("unknown optimizer {s:?}"))),
        }
    }
}

/// How the per-batch squared error is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Sum,
    /// Divide by the number of samples in the batch.
    Mean,
}

impl FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(LossReduction::Sum),
            "mean" => Ok(LossReduction::Mean),
            _ => Err(config_err("loss_reduction", format!("unknown reduction {s:?}, expected sum or mean"))),
        }
    }
}

impl LossReduction {
    pub fn scale(self, batch: usize) -> f64 {
        match self {
            LossReduction::Sum => 1.0,
            LossReduction::Mean => 1.0 / batch as f64,
        }
    }
}

/// Samples as columns: `y = ReLU(W·ReLU(x))` for a Gaussian teacher `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub teacher: Matrix,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn samples(&self) -> usize {
        self.x.cols()
    }
}

pub fn gen_dataset(n: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || samples == 0 {
        return Err(config_err("gen_dataset", "n and the sample count must be positive"));
    }
    let teacher = gaussian_matrix(n, n, seed, Stream::Teacher);
    let x = gaussian_matrix(n, samples, seed, Stream::Inputs);
    let mut f = Flops::default();
    let hidden = apply_activation(&x, Activation::Relu, &mut f);
    let y = apply_activation(&gemm(&teacher, &hidden, false, false, &mut f)?, Activation::Relu, &mut f);
    Ok(Dataset { x, y, teacher, seed })
}

/// This rank's share of the loss and the group total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShardLoss {
    pub local: f64,
    pub global: f64,
}

/// `scale·½‖y_out − y_true‖²` on this rank, summed over ranks by one scalar
/// all-reduce. The all-reduce counts toward communication time only if
/// `billable`.
pub fn mse_loss_sharded(
    y_out: &Matrix,
    y_true: &Matrix,
    reduction: LossReduction,
    comm: &mut RankComm,
    layer: usize,
    billable: bool,
) -> Result<ShardLoss> {
    if y_out.shape() != y_true.shape() {
        return Err(config_err(
            "mse_loss_sharded",
            format!("output {:?} vs target {:?}", y_out.shape(), y_true.shape()),
        ));
    }
    let local = mse(y_out, y_true, reduction.scale(y_out.cols()));
    let mut tag = CommTag::forward(layer);
    if !billable {
        tag = tag.unbilled();
    }
    let global = comm.all_reduce(&Matrix::filled(1, 1, local), tag)?.get(0, 0);
    Ok(ShardLoss { local, global })
}

fn check_update(params: &[&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    let bad = |reason: String| Error::Training { epoch: 0, reason };
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(config_err("optimizer", format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(bad(format!("{} parameter blocks but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(bad(format!("block {i}: {} parameters, {} gradients", p.len(), g.len())));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite gradient {} at block {i}, entry {j}", g[j])));
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g` blockwise.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
    check_update(params, grads, lr)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.iter_mut().zip(*g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        check_update(params, grads, lr)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (x, d)) in p.iter_mut().zip(*g).enumerate() {
                let m = &mut self.m[b][i];
                let v = &mut self.v[b][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Per-rank optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(Adam),
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam => OptimizerState::Adam(Adam::default()),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        match self {
            OptimizerState::Sgd => sgd_step(params, grads, lr),
            OptimizerState::Adam(a) => a.step(params, grads, lr),
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    /// Ghost neurons per rank; ignored in TP mode.
    pub k: usize,
    pub layers: usize,
    pub activation: Activation,
    /// Dataset size `N`.
    pub samples: usize,
    /// Samples per iteration; `samples` means full batch.
    pub batch: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Stop once the epoch loss is at or below this value.
    pub target_loss: Option<f64>,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    pub exec: ExecMode,
    /// Bill the scalar loss all-reduce as communication time.
    pub bill_loss_allreduce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pp,
            n: 64,
            p: 4,
            k: 8,
            layers: 2,
            activation: Activation::Relu,
            samples: 128,
            batch: 128,
            learning_rate: 1e-5,
            optimizer: Optimizer::Sgd,
            target_loss: None,
            max_epochs: 100,
            seed: 0,
            loss_reduction: LossReduction::Sum,
            exec: ExecMode::Lockstep,
            bill_loss_allreduce: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "TrainConfig";
        if self.n == 0 || self.p == 0 || self.layers == 0 {
            return Err(config_err(op, "n, p and layers must be positive"));
        }
        if self.n % self.p != 0 {
            return Err(config_err(op, format!("n = {} is not divisible by p = {}", self.n, self.p)));
        }
        if self.samples == 0 || self.batch == 0 || self.samples % self.batch != 0 {
            return Err(config_err(
                op,
                format!("batch = {} must divide samples = {}", self.batch, self.samples),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(op, format!("learning_rate = {}", self.learning_rate)));
        }
        if let Some(t) = self.target_loss {
            if t.is_nan() || t < 0.0 {
                return Err(config_err(op, format!("target_loss = {t}")));
            }
        }
        if self.mode == Mode::Pp {
            let bounds = crate::phantom::valid_k(self.n, self.p)?;
            if self.k == 0 || !bounds.comm_ok(self.k) {
                return Err(config_err(
                    op,
                    format!(
                        "k = {} must satisfy 1 <= k < n/p = {} (valid_k communication bound)",
                        self.k, bounds.comm_bound
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            n: self.n,
            p: self.p,
            k: self.k,
            layers: self.layers,
            activation: self.activation,
        }
    }

    pub fn cost_shape(&self) -> CostShape {
        match self.mode {
            Mode::Pp => CostShape::pp(&self.phantom(), self.batch),
            Mode::Tp => CostShape::tp(self.n, self.p, self.layers, self.batch),
        }
    }

    fn iterations_per_epoch(&self) -> usize {
        self.samples / self.batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub global_loss: f64,
    pub alpha_s: f64,
    pub beta_s: f64,
    #[serde(rename = "energy_J")]
    pub energy_j: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    /// `ν`: epochs run, including the one that reached the target.
    pub epochs_run: usize,
    /// Loss of the last epoch run; NaN if none ran.
    pub final_loss: f64,
    pub converged: bool,
    pub loss_history: Vec<EpochRecord>,
    /// Cost of one epoch, with `nu = epochs_run`.
    pub cost: CostReport,
    pub total_energy_j: f64,
    /// Parameters after the last epoch.
    pub model: Checkpoint,
}

impl TrainResult {
    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        for r in &self.loss_history {
            w.serialize(r).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    std::io::Error::other(e.to_string()).into()
}

/// What one rank reports about one epoch.
struct EpochTrace {
    loss: f64,
    flops: u64,
    records: Vec<CommRecord>,
}

/// Column batches of a matrix restricted to rows `[row0, row0 + rows)`.
fn batches(m: &Matrix, row0: usize, rows: usize, batch: usize) -> Vec<Matrix> {
    (0..m.cols() / batch)
        .map(|b| m.col_block(b * batch, batch).row_block(row0, rows))
        .collect()
}

fn epoch_loss(batch_losses: &[f64], reduction: LossReduction) -> f64 {
    let sum: f64 = batch_losses.iter().sum();
    match reduction {
        LossReduction::Sum => sum,
        LossReduction::Mean => sum / batch_losses.len() as f64,
    }
}

fn stop(config: &TrainConfig, loss: f64) -> bool {
    config.target_loss.is_some_and(|t| loss <= t)
}

fn diverged(epoch: usize, loss: f64) -> Error {
    Error::Training {
        epoch,
        reason: format!("loss became {loss}"),
    }
}

fn at_epoch(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Training { reason, .. } => Error::Training { epoch, reason },
        other => other,
    }
}

fn run_pp_rank(
    config: &TrainConfig,
    model: &PhantomModel,
    data: &Dataset,
    comm: &mut RankComm,
) -> Result<(Vec<EpochTrace>, PhantomShard)> {
    let r = comm.rank();
    let m = config.n / config.p;
    let mut shard = model.shards[r].clone();
    let xs = batches(&data.x, r * m, m, config.batch);
    let ys = batches(&data.y, r * m, m, config.batch);
    let scale = config.loss_reduction.scale(config.batch);
    let mut opt = OptimizerState::new(config.optimizer);
    let mut out = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut flops = Flops::default();
        let mut losses = Vec::with_capacity(xs.len());
        for (x, y) in xs.iter().zip(&ys) {
            let (y_out, tape) = shard.forward(x, comm, &mut flops)?;
            let loss = mse_loss_sharded(&y_out, y, config.loss_reduction, comm, config.layers, config.bill_loss_allreduce)?;
            if !loss.global.is_finite() {
                return Err(diverged(epoch, loss.global));
            }
            losses.push(loss.global);
            let top = &tape.layers[config.layers - 1].preact;
            let delta = pp_output_delta(&y_out, y, top, config.activation, scale, &mut flops)?;
            let back = shard.backward(&tape, delta, comm, &mut flops)?;
            let grads: Vec<&[f64]> = back.grads.iter().flat_map(|g| g.param_slices()).collect();
            let mut params: Vec<&mut [f64]> = shard.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect();
            opt.step(&mut params, &grads, config.learning_rate).map_err(at_epoch(epoch))?;
        }
        let loss = epoch_loss(&losses, config.loss_reduction);
        out.push(EpochTrace {
            loss,
            flops: flops.get(),
            records: comm.take_records(),
        });
        if stop(config, loss) {
            break;
        }
    }
    Ok((out, shard))
}

fn run_tp_rank(
    config: &TrainConfig,
    model: &TpModel,
    data: &Dataset,
    comm: &mut RankComm,
) -> Result<(Vec<EpochTrace>, TpShard)> {
    let r = comm.rank();
    let m = config.n / config.p;
    let mut shard = model.shards[r].clone();
    let xs = batches(&data.x, r * m, m, config.batch);
    let ys = batches(&data.y, r * m, m, config.batch);
    let scale = config.loss_reduction.scale(config.batch);
    let mut opt = OptimizerState::new(config.optimizer);
    let mut out = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut flops = Flops::default();
        let mut losses = Vec::with_capacity(xs.len());
        for (x, y) in xs.iter().zip(&ys) {
            let (y_out, tape) = shard.forward(x, comm, &mut flops)?;
            let loss = mse_loss_sharded(&y_out, y, config.loss_reduction, comm, config.layers, config.bill_loss_allreduce)?;
            if !loss.global.is_finite() {
                return Err(diverged(epoch, loss.global));
            }
            losses.push(loss.global);
            let top = &tape.layers[config.layers - 1].preact;
            let delta = pp_output_delta(&y_out, y, top, config.activation, scale, &mut flops)?;
            let grads = shard.backward(&tape, delta, comm, &mut flops)?;
            let grads: Vec<&[f64]> = grads.iter().flat_map(|g| g.param_slices()).collect();
            let mut params: Vec<&mut [f64]> = shard.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect();
            opt.step(&mut params, &grads, config.learning_rate).map_err(at_epoch(epoch))?;
        }
        let loss = epoch_loss(&losses, config.loss_reduction);
        out.push(EpochTrace {
            loss,
            flops: flops.get(),
            records: comm.take_records(),
        });
        if stop(config, loss) {
            break;
        }
    }
    Ok((out, shard))
}

/// Trains from the seeded initialization until the epoch loss reaches
/// `target_loss` or `max_epochs` have run.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    comm_model: &CommCostModel,
    rates: &EnergyRates,
) -> Result<TrainResult> {
    config.validate()?;
    if data.n() != config.n || data.samples() != config.samples {
        return Err(config_err(
            "train",
            format!(
                "dataset is {} x {}, config expects {} x {}",
                data.n(),
                data.samples(),
                config.n,
                config.samples
            ),
        ));
    }
    let world = World::new(config.p, config.exec)?;
    let seed = config.seed;
    let (traces, trained): (Vec<Vec<EpochTrace>>, Checkpoint) = match config.mode {
        Mode::Pp => {
            let mut model = PhantomModel::init(config.phantom(), seed)?;
            let (traces, shards) = world.run(|comm| run_pp_rank(config, &model, data, comm))?.into_iter().unzip();
            model.shards = shards;
            (traces, Checkpoint::Phantom { model, seed })
        }
        Mode::Tp => {
            let dense = DenseFFN::init(config.n, config.layers, config.activation, seed);
            let mut model = TpModel::from_dense(&dense, config.p)?;
            let (traces, shards) = world.run(|comm| run_tp_rank(config, &model, data, comm))?.into_iter().unzip();
            model.shards = shards;
            (traces, Checkpoint::Tensor { model, seed })
        }
    };

    let shape = config.cost_shape();
    let epochs = traces[0].len();
    let mut history = Vec::with_capacity(epochs);
    let mut cost = None;
    for e in 0..epochs {
        let flops = IterationFlops {
            per_rank: traces[0][e].flops,
            total: traces.iter().map(|t| t[e].flops).sum(),
        };
        let report = CostReport::from_iteration(shape, flops, &traces[0][e].records, comm_model, rates)?;
        history.push(EpochRecord {
            epoch: e + 1,
            global_loss: traces[0][e].loss,
            alpha_s: report.alpha_s,
            beta_s: report.beta_s,
            energy_j: report.e_per_iteration_j,
        });
        cost.get_or_insert(report);
    }
    let per_epoch = match cost {
        Some(c) => c,
        None => {
            let mut c = CostReport::modeled(shape, comm_model, rates)?;
            let iters = config.iterations_per_epoch() as u64;
            c.flops_per_rank *= iters;
            c.flops_total *= iters;
            c
        }
    };
    let final_loss = history.last().map_or(f64::NAN, |h| h.global_loss);
    let cost = per_epoch.with_nu(epochs);
    Ok(TrainResult {
        epochs_run: epochs,
        final_loss,
        converged: epochs > 0 && stop(config, final_loss),
        total_energy_j: cost.e_total_j,
        loss_history: history,
        cost,
        model: trained,
    })
}

/// Loss history of the unsharded network under the same initialization,
/// batching and optimizer as a tensor-parallel run of `config`.
pub fn train_dense(config: &TrainConfig, data: &Dataset) -> Result<Vec<f64>> {
    config.validate()?;
    let mut model = DenseFFN::init(config.n, config.layers, config.activation, config.seed);
    let xs = batches(&data.x, 0, config.n, config.batch);
    let ys = batches(&data.y, 0, config.n, config.batch);
    let scale = config.loss_reduction.scale(config.batch);
    let mut opt = OptimizerState::new(config.optimizer);
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut losses = Vec::with_capacity(xs.len());
        for (x, y) in xs.iter().zip(&ys) {
            let (out, tape) = dense_forward(&model, x)?;
            let loss = mse(&out, y, scale);
            if !loss.is_finite() {
                return Err(diverged(epoch, loss));
            }
            losses.push(loss);
            let back = dense_backward(&model, &tape, &out, y, scale)?;
            let grads: Vec<&[f64]> = back.grads.iter().flat_map(|g| g.param_slices()).collect();
            let mut params: Vec<&mut [f64]> = model.layers.iter_mut().flat_map(|l| l.param_slices_mut()).collect();
            opt.step(&mut params, &grads, config.learning_rate).map_err(at_epoch(epoch))?;
        }
        let loss = epoch_loss(&losses, config.loss_reduction);
        history.push(loss);
        if stop(config, loss) {
            break;
        }
    }
    Ok(history)
}
