//! Phantom-parallel layers.
//!
//! Rank `j` owns an `n/p`-wide shard of every layer's input and output. Its
//! part of layer `l` is
//!
//! * a local matrix `L` (`n/p x n/p`) acting on its own input shard,
//! * a compressor `C` (`k x n/p`) that squeezes its input shard into `k`
//!   ghost neurons `g = C·y`,
//! * one decompressor `D[i]` (`n/p x k`) per remote rank `i`, expanding the
//!   ghost neurons received from `i`,
//! * a bias `b` (`n/p`).
//!
//! The forward pass is
//!
//! ```text
//! y_l = σ(b + L·y_{l-1} + Σ_{i≠j} D[i]·g_i),   g_i = C_i·y_{l-1,i}
//! ```
//!
//! with the `g_i` exchanged by one all-gather of `k x batch` per rank. The
//! backward pass sends each remote rank `i` the compressed error
//! `D[i]ᵀ·δ` through one reduce-scatter, so rank `j` receives
//! `∂L/∂g_j = Σ_{i≠j} D_i[j]ᵀ·δ_i` and forms
//!
//! ```text
//! δ_{l-1} = (Lᵀ·δ_l + Cᵀ·∂L/∂g_j) ⊙ σ'(pre_{l-1})
//! ```
//!
//! No rank ever holds more than `n/p` rows of any activation.

use crate::collectives::{CommTag, RankComm};
use crate::error::{config_err, Error, Result};
use crate::linalg::{activation_grad, apply_activation, gemm, Activation, Flops, Matrix};
use crate::rng::{glorot_uniform, ParamKind, Stream};

/// Shape of a phantom-parallel network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhantomConfig {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub layers: usize,
    pub activation: Activation,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "PhantomConfig";
        if self.p == 0 || self.n == 0 || self.layers == 0 {
            return Err(config_err(op, "n, p and layers must be positive"));
        }
        if self.n % self.p != 0 {
            return Err(config_err(
                op,
                format!("n = {} is not divisible by p = {}", self.n, self.p),
            ));
        }
        let shard = self.n / self.p;
        if self.k == 0 || self.k > shard {
            return Err(config_err(
                op,
                format!("k = {} must lie in 1..={shard} (n/p)", self.k),
            ));
        }
        Ok(())
    }

    pub fn shard(&self) -> usize {
        self.n / self.p
    }
}

/// One rank's part of one layer. Also used to hold the matching gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomLayer {
    rank: usize,
    pub local: Matrix,
    pub compressor: Matrix,
    /// Indexed by source rank; `None` in this rank's own slot.
    pub decompressors: Vec<Option<Matrix>>,
    pub bias: Vec<f64>,
}

/// Gradients share the layout of the parameters they belong to.
pub type PhantomGrads = PhantomLayer;

impl PhantomLayer {
    pub fn new(
        rank: usize,
        local: Matrix,
        compressor: Matrix,
        decompressors: Vec<Option<Matrix>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let op = "PhantomLayer";
        let shard = local.rows();
        let p = decompressors.len();
        if local.cols() != shard {
            return Err(config_err(op, format!("local matrix is {:?}, not square", local.shape())));
        }
        let k = compressor.rows();
        if compressor.cols() != shard || k == 0 || k > shard {
            return Err(config_err(
                op,
                format!("compressor is {:?}; expected k x {shard} with 1 <= k <= {shard}", compressor.shape()),
            ));
        }
        if rank >= p {
            return Err(config_err(op, format!("rank {rank} outside world of size {p}")));
        }
        for (i, d) in decompressors.iter().enumerate() {
            match (i == rank, d) {
                (true, None) => {}
                (true, Some(_)) => {
                    return Err(config_err(op, "a rank has no decompressor for itself"))
                }
                (false, None) => {
                    return Err(config_err(op, format!("missing decompressor for rank {i}")))
                }
                (false, Some(d)) if d.shape() != (shard, k) => {
                    return Err(config_err(
                        op,
                        format!("decompressor {i} is {:?}, expected ({shard}, {k})", d.shape()),
                    ))
                }
                _ => {}
            }
        }
        if bias.len() != shard {
            return Err(config_err(op, format!("bias has length {}, expected {shard}", bias.len())));
        }
        Ok(Self {
            rank,
            local,
            compressor,
            decompressors,
            bias,
        })
    }

    /// Glorot-uniform weights from per-(layer, rank, matrix) streams; zero bias.
    pub fn init(config: &PhantomConfig, rank: usize, layer: usize, seed: u64) -> Self {
        let shard = config.shard();
        let k = config.k;
        let stream = |kind| Stream::Param { layer, rank, kind };
        Self {
            rank,
            local: glorot_uniform(shard, shard, seed, stream(ParamKind::Local)),
            compressor: glorot_uniform(k, shard, seed, stream(ParamKind::Compressor)),
            decompressors: (0..config.p)
                .map(|src| {
                    (src != rank).then(|| {
                        glorot_uniform(shard, k, seed, stream(ParamKind::Decompressor(src)))
                    })
                })
                .collect(),
            bias: vec![0.0; shard],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            rank: self.rank,
            local: z(&self.local),
            compressor: z(&self.compressor),
            decompressors: self.decompressors.iter().map(|d| d.as_ref().map(z)).collect(),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.decompressors.len()
    }

    pub fn shard_width(&self) -> usize {
        self.local.rows()
    }

    pub fn k(&self) -> usize {
        self.compressor.rows()
    }

    /// Parameters in canonical order: `L`, `C`, `D[i]` for ascending remote
    /// `i`, `b`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.local.data(), self.compressor.data()];
        out.extend(self.decompressors.iter().flatten().map(|d| d.data()));
        out.push(&self.bias);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.local.data_mut(), self.compressor.data_mut()];
        out.extend(self.decompressors.iter_mut().flatten().map(|d| d.data_mut()));
        out.push(&mut self.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// Forward state of one layer on one rank.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTape {
    /// `y_{l-1}` shard, `n/p x batch`.
    pub input: Matrix,
    /// `b + z_l` shard, `n/p x batch`.
    pub preact: Matrix,
    /// Every rank's ghost neurons stacked by rank, `p·k x batch`.
    pub phantoms: Matrix,
}

impl LayerTape {
    /// Ghost neurons produced by `rank`.
    pub fn phantom(&self, rank: usize, k: usize) -> Matrix {
        self.phantoms.row_block(rank * k, k)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhantomTape {
    pub layers: Vec<LayerTape>,
}

/// Forward through one phantom layer on one rank. Collective: every rank
/// must call it for the same layer.
pub fn pp_forward_layer(
    layer: &PhantomLayer,
    y_prev: &Matrix,
    act: Activation,
    layer_index: usize,
    comm: &mut RankComm,
    tape: &mut PhantomTape,
    flops: &mut Flops,
) -> Result<Matrix> {
    let j = layer.rank();
    let k = layer.k();
    if comm.rank() != j || comm.size() != layer.world_size() {
        return Err(config_err(
            "pp_forward_layer",
            format!(
                "layer belongs to rank {j} of {}, called on rank {} of {}",
                layer.world_size(),
                comm.rank(),
                comm.size()
            ),
        ));
    }
    if y_prev.rows() != layer.shard_width() {
        return Err(config_err(
            "pp_forward_layer",
            format!("input shard has {} rows, expected {}", y_prev.rows(), layer.shard_width()),
        ));
    }

    let mut z = gemm(&layer.local, y_prev, false, false, flops)?;
    let g = gemm(&layer.compressor, y_prev, false, false, flops)?;
    let phantoms = comm.all_gather(&g, CommTag::forward(layer_index))?;
    for (i, d) in layer.decompressors.iter().enumerate() {
        if let Some(d) = d {
            let remote = phantoms.row_block(i * k, k);
            let expanded = gemm(d, &remote, false, false, flops)?;
            z.add_assign(&expanded, flops)?;
        }
    }
    z.add_bias(&layer.bias, flops)?;
    let out = apply_activation(&z, act, flops);
    tape.layers.push(LayerTape {
        input: y_prev.clone(),
        preact: z,
        phantoms,
    });
    Ok(out)
}

/// Output-layer error for the loss `scale·½‖y_out − y_true‖²`:
/// `scale·(y_out − y_true) ⊙ σ'(preact)`.
pub fn pp_output_delta(
    y_out: &Matrix,
    y_true: &Matrix,
    preact: &Matrix,
    act: Activation,
    scale: f64,
    flops: &mut Flops,
) -> Result<Matrix> {
    let mut delta = y_out.sub(y_true, flops)?;
    let mut mask = activation_grad(preact, act);
    if scale != 1.0 {
        mask.scale(scale);
    }
    delta.hadamard_assign(&mask, flops)?;
    Ok(delta)
}

/// Result of exchanging the compressed errors of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardStep {
    /// `∂L/∂g_j`, `k x batch`: the sum of what every remote rank's
    /// decompressors pushed back onto this rank's ghost neurons.
    pub phantom_grad: Matrix,
    /// Error of the layer below, when requested.
    pub delta_prev: Option<Matrix>,
}

/// Backward through one phantom layer on one rank.
///
/// `delta` is this layer's error `δ_l`. Every remote rank `i` gets
/// `D[i]ᵀ·δ_l` through one reduce-scatter (this rank's own slot is zero).
/// When `prev` carries the layer below's pre-activation and activation, the
/// layer below's error `δ_{l-1}` is also formed.
pub fn pp_backward_layer(
    layer: &PhantomLayer,
    delta: &Matrix,
    prev: Option<(&Matrix, Activation)>,
    layer_index: usize,
    comm: &mut RankComm,
    flops: &mut Flops,
) -> Result<BackwardStep> {
    let p = layer.world_size();
    let k = layer.k();
    let batch = delta.cols();
    if delta.rows() != layer.shard_width() {
        return Err(config_err(
            "pp_backward_layer",
            format!("delta has {} rows, expected {}", delta.rows(), layer.shard_width()),
        ));
    }

    let mut contributions = Matrix::zeros(p * k, batch);
    for (i, d) in layer.decompressors.iter().enumerate() {
        if let Some(d) = d {
            let h = gemm(d, delta, true, false, flops)?;
            contributions.set_row_block(i * k, &h);
        }
    }
    let phantom_grad = comm.reduce_scatter(&contributions, CommTag::backward(layer_index))?;

    let delta_prev = match prev {
        None => None,
        Some((preact, act)) => {
            if preact.shape() != delta.shape() {
                return Err(config_err(
                    "pp_backward_layer",
                    format!("pre-activation {:?} vs delta {:?}", preact.shape(), delta.shape()),
                ));
            }
            let mut back = gemm(&layer.local, delta, true, false, flops)?;
            let through_ghosts = gemm(&layer.compressor, &phantom_grad, true, false, flops)?;
            back.add_assign(&through_ghosts, flops)?;
            back.hadamard_assign(&activation_grad(preact, act), flops)?;
            Some(back)
        }
    };
    Ok(BackwardStep {
        phantom_grad,
        delta_prev,
    })
}

/// Parameter gradients of one layer on one rank, summed over the batch.
///
/// `∂b = Σ_batch δ`, `∂L = δ·yᵀ`, `∂C = (∂L/∂g_j)·yᵀ`, `∂D[i] = δ·g_iᵀ`.
pub fn pp_param_grads(
    layer: &PhantomLayer,
    delta: &Matrix,
    tape: &LayerTape,
    phantom_grad: &Matrix,
    flops: &mut Flops,
) -> Result<PhantomGrads> {
    let k = layer.k();
    if delta.shape() != tape.input.shape() {
        return Err(config_err(
            "pp_param_grads",
            format!("delta {:?} vs tape input {:?}", delta.shape(), tape.input.shape()),
        ));
    }
    if phantom_grad.shape() != (k, delta.cols()) {
        return Err(config_err(
            "pp_param_grads",
            format!("phantom gradient is {:?}, expected ({k}, {})", phantom_grad.shape(), delta.cols()),
        ));
    }
    let bias = delta.row_sums(flops);
    let local = gemm(delta, &tape.input, false, true, flops)?;
    let compressor = gemm(phantom_grad, &tape.input, false, true, flops)?;
    let decompressors = layer
        .decompressors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.as_ref()
                .map(|_| gemm(delta, &tape.phantom(i, k), false, true, flops))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomLayer {
        rank: layer.rank,
        local,
        compressor,
        decompressors,
        bias,
    })
}

/// One rank's slice of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomShard {
    pub config: PhantomConfig,
    pub rank: usize,
    pub layers: Vec<PhantomLayer>,
}

/// Output of a full backward pass on one rank.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomBackward {
    pub grads: Vec<PhantomGrads>,
    /// `δ_l` for every layer, bottom first.
    pub deltas: Vec<Matrix>,
}

impl PhantomShard {
    pub fn forward(
        &self,
        x_shard: &Matrix,
        comm: &mut RankComm,
        flops: &mut Flops,
    ) -> Result<(Matrix, PhantomTape)> {
        let mut tape = PhantomTape::default();
        let mut y = x_shard.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            y = pp_forward_layer(layer, &y, self.config.activation, l, comm, &mut tape, flops)?;
        }
        Ok((y, tape))
    }

    /// Backpropagates `output_delta` (the top layer's `δ`) through all layers.
    pub fn backward(
        &self,
        tape: &PhantomTape,
        output_delta: Matrix,
        comm: &mut RankComm,
        flops: &mut Flops,
    ) -> Result<PhantomBackward> {
        if tape.layers.len() != self.layers.len() {
            return Err(Error::Sequencing(format!(
                "tape holds {} layers, model has {}",
                tape.layers.len(),
                self.layers.len()
            )));
        }
        let act = self.config.activation;
        let depth = self.layers.len();
        let mut grads = Vec::with_capacity(depth);
        let mut deltas = Vec::with_capacity(depth);
        let mut delta = output_delta;
        for l in (0..depth).rev() {
            let prev = (l > 0).then(|| (&tape.layers[l - 1].preact, act));
            let step = pp_backward_layer(&self.layers[l], &delta, prev, l, comm, flops)?;
            grads.push(pp_param_grads(
                &self.layers[l],
                &delta,
                &tape.layers[l],
                &step.phantom_grad,
                flops,
            )?);
            match step.delta_prev {
                Some(d) => deltas.push(std::mem::replace(&mut delta, d)),
                None => {
                    deltas.push(delta);
                    break;
                }
            }
        }
        grads.reverse();
        deltas.reverse();
        Ok(PhantomBackward { grads, deltas })
    }
}

/// Every rank's shards; the whole phantom-parallel network.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomModel {
    pub config: PhantomConfig,
    pub shards: Vec<PhantomShard>,
}

impl PhantomModel {
    pub fn init(config: PhantomConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shards = (0..config.p)
            .map(|rank| PhantomShard {
                config,
                rank,
                layers: (0..config.layers)
                    .map(|l| PhantomLayer::init(&config, rank, l, seed))
                    .collect(),
            })
            .collect();
        Ok(Self { config, shards })
    }

    pub fn param_count(&self) -> usize {
        self.shards
            .iter()
            .flat_map(|s| &s.layers)
            .map(|l| l.param_count())
            .sum()
    }
}

/// Weight count of a phantom network, biases excluded:
/// `layers·(n²/p + p·k·n)`.
pub fn pp_model_size(n: usize, p: usize, k: usize, layers: usize) -> Result<u64> {
    if p == 0 || n % p != 0 {
        return Err(config_err("pp_model_size", format!("n = {n} not divisible by p = {p}")));
    }
    if k == 0 || k > n / p {
        return Err(config_err("pp_model_size", format!("k = {k} outside 1..={}", n / p)));
    }
    let (n, p, k, layers) = (n as u64, p as u64, k as u64, layers as u64);
    Ok(layers * (n * n / p + p * k * n))
}

/// Upper bounds on `k`, both strict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KBounds {
    /// Below this, a phantom iteration moves fewer bytes than tensor parallel.
    pub comm_bound: f64,
    /// Below this, a phantom iteration also does fewer FLOPs.
    pub compute_bound: f64,
}

impl KBounds {
    pub fn comm_ok(&self, k: usize) -> bool {
        (k as f64) < self.comm_bound
    }

    pub fn compute_ok(&self, k: usize) -> bool {
        (k as f64) < self.compute_bound
    }
}

pub fn valid_k(n: usize, p: usize) -> Result<KBounds> {
    if p == 0 || n % p != 0 {
        return Err(config_err("valid_k", format!("n = {n} not divisible by p = {p}")));
    }
    let shard = (n / p) as f64;
    Ok(KBounds {
        comm_bound: shard,
        compute_bound: shard * (1.0 - 1.0 / p as f64),
    })
}
