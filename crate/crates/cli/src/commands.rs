use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use log::{info, warn};
use phantom_parallel::collectives::{fit_comm_model, read_measurements, write_measurements, Measurement};
use phantom_parallel::energy::{write_cost_reports_csv, CostShape};
use phantom_parallel::gradcheck::{pp_gradcheck, GradCheckConfig, GradGroup};
use phantom_parallel::phantom::{pp_model_size, valid_k};
use phantom_parallel::rng::{stream_rng, Stream};
use phantom_parallel::tensor_parallel::tp_model_size;
use phantom_parallel::training::train_dense;
use phantom_parallel::{
    gen_dataset, train, Activation, CollectiveKind, CostReport, Mode, PhantomConfig, TrainConfig, TrainResult,
};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::config::{load_comm_model, parse_rates, usage, write_manifest, Resolved, RunArgs};

/// Gradient check or other self-test failed: exit code 2.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn check(config: &TrainConfig) -> Result<()> {
    config.validate().map_err(|e| usage(e.to_string()))
}

fn run_training(r: &Resolved, config: &TrainConfig) -> Result<TrainResult> {
    let data = gen_dataset(config.n, config.samples, config.seed)?;
    info!(
        "training {} n={} p={} k={} L={} for up to {} epochs",
        config.mode, config.n, config.p, config.k, config.layers, config.max_epochs
    );
    Ok(train(config, &data, &r.comm.model, &r.rates)?)
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let r = args.resolve()?;
    if r.ks.len() > 1 {
        return Err(usage("train takes a single --k; use compare for a list"));
    }
    check(&r.train)?;
    create_dir(&args.out)?;
    write_manifest(&args.out, "train", &r, None)?;
    let result = run_training(&r, &r.train)?;
    result.write_history_csv(args.out.join("loss_history.csv"))?;
    std::fs::write(args.out.join("cost_report.toml"), result.cost.to_toml_string())?;
    write_cost_reports_csv(args.out.join("cost_report.csv"), std::slice::from_ref(&result.cost))?;
    result.model.save(args.out.join("model.ckpt"))?;
    println!(
        "{} epochs, final loss {:.6e}, converged {}, e/epoch {:.6} J, E {:.6} J",
        result.epochs_run, result.final_loss, result.converged, result.cost.e_per_iteration_j, result.total_energy_j
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Test hook: corrupt the analytic gradient of one group (b, L, C, D or delta).
    #[arg(long)]
    pub fault: Option<GradGroup>,
    /// Also write the report here as TOML.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckSummary {
    seeds: Vec<u64>,
    entries_checked: usize,
    tol: f64,
    passed: bool,
    max_rel_error: std::collections::BTreeMap<String, f64>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.n > 64 {
        return Err(usage(format!("gradcheck is meant for small networks: n = {} > 64", args.n)));
    }
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let phantom = PhantomConfig {
        n: args.n,
        p: args.p,
        k: args.k,
        layers: args.layers,
        activation: args.activation,
    };
    phantom.validate().map_err(|e| usage(e.to_string()))?;
    let mut worst: std::collections::BTreeMap<GradGroup, f64> = GradGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
    let mut entries = 0;
    for seed in args.seed..args.seed + args.seeds {
        let cfg = GradCheckConfig {
            fault: args.fault,
            ..GradCheckConfig::new(phantom, args.batch, seed)
        };
        let report = pp_gradcheck(&cfg)?;
        entries += report.entries_checked;
        for (g, e) in report.max_rel_error {
            let w = worst.entry(g).or_default();
            *w = w.max(e);
        }
    }
    println!("group  max_rel_error");
    for (g, e) in &worst {
        println!("{:<6} {e:.3e}", g.symbol());
    }
    let failing: Vec<&str> = worst
        .iter()
        .filter(|(_, e)| !(**e <= args.tol))
        .map(|(g, _)| g.symbol())
        .collect();
    println!("{entries} entries checked, tolerance {:e}", args.tol);
    if let Some(path) = &args.out {
        let summary = GradcheckSummary {
            seeds: (args.seed..args.seed + args.seeds).collect(),
            entries_checked: entries,
            tol: args.tol,
            passed: failing.is_empty(),
            max_rel_error: worst.iter().map(|(g, e)| (g.symbol().to_string(), *e)).collect(),
        };
        std::fs::write(path, toml::to_string(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    }
    if failing.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        Err(VerificationFailed(format!("gradient check failed for {}", failing.join(", "))).into())
    }
}

#[derive(Args, Debug)]
pub struct CostmodelArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub batch: Vec<usize>,
    #[arg(long)]
    pub comm_model: Option<PathBuf>,
    /// Busy watts, idle watts and device FLOP/s.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub rates: Option<Vec<f64>>,
    /// Write the table to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize, Default)]
struct CostRow {
    n: usize,
    p: usize,
    k: usize,
    layers: usize,
    batch: usize,
    pp_model_size: Option<u64>,
    tp_model_size: Option<u64>,
    flops_pp: Option<u64>,
    flops_tp: Option<u64>,
    alpha_pp_s: Option<f64>,
    alpha_tp_s: Option<f64>,
    beta_pp_s: Option<f64>,
    beta_tp_s: Option<f64>,
    e_pp_j: Option<f64>,
    e_tp_j: Option<f64>,
    alpha_pp_lt_tp: Option<bool>,
    beta_pp_lt_tp: Option<bool>,
    e_pp_lt_tp: Option<bool>,
    skipped: String,
}

fn cost_row(
    (n, p, k, layers, batch): (usize, usize, usize, usize, usize),
    model: &phantom_parallel::CommCostModel,
    rates: &phantom_parallel::EnergyRates,
) -> Result<CostRow> {
    let mut row = CostRow {
        n,
        p,
        k,
        layers,
        batch,
        ..CostRow::default()
    };
    if p == 0 || n % p != 0 {
        row.skipped = format!("n = {n} not divisible by p = {p}");
        return Ok(row);
    }
    if k == 0 || k > n / p {
        row.skipped = format!("k = {k} outside 1..={}", n / p);
        return Ok(row);
    }
    if layers == 0 || batch == 0 {
        row.skipped = "layers and batch must be positive".into();
        return Ok(row);
    }
    let config = PhantomConfig {
        n,
        p,
        k,
        layers,
        activation: Activation::Relu,
    };
    let pp = CostReport::modeled(CostShape::pp(&config, batch), model, rates)?;
    let tp = CostReport::modeled(CostShape::tp(n, p, layers, batch), model, rates)?;
    let bounds = valid_k(n, p)?;
    row.pp_model_size = Some(pp_model_size(n, p, k, layers)?);
    row.tp_model_size = Some(tp_model_size(n, layers));
    row.flops_pp = Some(pp.flops_total);
    row.flops_tp = Some(tp.flops_total);
    row.alpha_pp_s = Some(pp.alpha_s);
    row.alpha_tp_s = Some(tp.alpha_s);
    row.beta_pp_s = Some(pp.beta_s);
    row.beta_tp_s = Some(tp.beta_s);
    row.e_pp_j = Some(pp.e_per_iteration_j);
    row.e_tp_j = Some(tp.e_per_iteration_j);
    // The dominance columns report the analytic bounds on k, not the raw comparison.
    row.alpha_pp_lt_tp = Some(bounds.compute_ok(k));
    row.beta_pp_lt_tp = Some(bounds.comm_ok(k));
    row.e_pp_lt_tp = Some(bounds.compute_ok(k) && bounds.comm_ok(k));
    Ok(row)
}

pub fn cmd_costmodel(args: &CostmodelArgs) -> Result<()> {
    let comm = load_comm_model(args.comm_model.as_deref())?;
    let rates = match &args.rates {
        Some(v) => parse_rates(v)?,
        None => phantom_parallel::EnergyRates::frontier(),
    };
    let mut rows = Vec::new();
    for &n in &args.n {
        for &layers in &args.layers {
            for &batch in &args.batch {
                for &p in &args.p {
                    for &k in &args.k {
                        let row = cost_row((n, p, k, layers, batch), &comm.model, &rates)?;
                        if !row.skipped.is_empty() {
                            warn!("skipping n={n} p={p} k={k}: {}", row.skipped);
                        }
                        rows.push(row);
                    }
                }
            }
        }
    }
    rows.sort_by_key(|r| (r.p, r.k));
    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FitCommArgs {
    /// Delimited measurements with header `collective,m,p,time_us`.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub measurements: Option<PathBuf>,
    /// Fit samples generated from --comm-model (or the bundled constants).
    #[arg(long)]
    pub synthetic: bool,
    /// Standard deviation in μs of Gaussian noise added to synthetic samples.
    #[arg(long, default_value_t = 0.0)]
    pub noise_us: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub comm_model: Option<PathBuf>,
    /// Where to write the synthetic measurements.
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
    /// Fitted cost-model file.
    #[arg(long)]
    pub out: PathBuf,
}

fn synthetic_samples(args: &FitCommArgs) -> Result<Vec<Measurement>> {
    if !(args.noise_us >= 0.0 && args.noise_us.is_finite()) {
        return Err(usage("--noise-us must be a non-negative number"));
    }
    let source = load_comm_model(args.comm_model.as_deref())?;
    let mut rng = stream_rng(args.seed, Stream::Aux(0));
    let noise = Normal::new(0.0, args.noise_us)?;
    let mut samples = Vec::new();
    for kind in CollectiveKind::ALL {
        let c = source.model.coeffs(kind)?;
        for e in 2..=26 {
            for lp in 1..=8 {
                let (m, p) = (1usize << e, 1usize << lp);
                samples.push(Measurement {
                    collective: kind,
                    m,
                    p,
                    time_us: c.time_us(m, p) + noise.sample(&mut rng),
                });
            }
        }
    }
    Ok(samples)
}

pub fn cmd_fit_comm(args: &FitCommArgs) -> Result<()> {
    let samples = match &args.measurements {
        Some(path) => read_measurements(path)?,
        None => synthetic_samples(args)?,
    };
    if let Some(path) = &args.samples_out {
        write_measurements(path, &samples)?;
    }
    let report = fit_comm_model(&samples)?;
    report.model.save(&args.out)?;
    println!("collective      c1          c2          c3          rmse_log2_us");
    for (kind, fit) in &report.fits {
        println!(
            "{:<15} {:<11.6} {:<11.4e} {:<11.4e} {:.3}",
            kind.name(),
            fit.coeffs.c1,
            fit.coeffs.c2,
            fit.coeffs.c3,
            fit.rmse_log2_us
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Without --target-loss, λ is this factor times the dense loss at --dense-epochs.
    #[arg(long, default_value_t = 1.05)]
    pub lambda_factor: f64,
    #[arg(long, default_value_t = 200)]
    pub dense_epochs: usize,
}

#[derive(Serialize)]
struct CompareRow {
    mode: Mode,
    n: usize,
    p: usize,
    k: Option<usize>,
    layers: usize,
    model_size: u64,
    nu: usize,
    converged: bool,
    final_loss: f64,
    e_per_iteration_j: f64,
    e_total_j: f64,
    /// `E_pp / E_tp`, only when both runs converged.
    energy_ratio: Option<f64>,
    flag: String,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut r = args.run.resolve()?;
    if args.run.mode.is_some() {
        warn!("--mode is ignored by compare; both modes are trained");
    }
    let out = &args.run.out;
    let lambda_source;
    let lambda = match r.train.target_loss {
        Some(t) => {
            lambda_source = "given".to_string();
            t
        }
        None => {
            if args.dense_epochs == 0 || !(args.lambda_factor > 0.0) {
                return Err(usage("--dense-epochs and --lambda-factor must be positive"));
            }
            let dense_cfg = TrainConfig {
                mode: Mode::Tp,
                max_epochs: args.dense_epochs,
                target_loss: None,
                ..r.train.clone()
            };
            check(&dense_cfg)?;
            let data = gen_dataset(dense_cfg.n, dense_cfg.samples, dense_cfg.seed)?;
            let history = train_dense(&dense_cfg, &data)?;
            let last = *history.last().expect("dense_epochs > 0");
            lambda_source = format!("{} x dense loss at epoch {}", args.lambda_factor, args.dense_epochs);
            args.lambda_factor * last
        }
    };
    r.train.target_loss = Some(lambda);
    info!("fixed loss target {lambda}");

    let tp_cfg = TrainConfig {
        mode: Mode::Tp,
        ..r.train.clone()
    };
    check(&tp_cfg)?;
    let pp_cfgs: Vec<TrainConfig> = r
        .ks
        .iter()
        .map(|&k| TrainConfig {
            mode: Mode::Pp,
            k,
            ..r.train.clone()
        })
        .collect();
    for c in &pp_cfgs {
        check(c)?;
    }
    create_dir(out)?;
    write_manifest(out, "compare", &r, Some(&lambda_source))?;

    let tp = run_training(&r, &tp_cfg)?;
    let mut rows = Vec::new();
    let mut reports = vec![tp.cost.clone()];
    let row = |cfg: &TrainConfig, res: &TrainResult, size: u64, ratio: Option<f64>, flag: String| CompareRow {
        mode: cfg.mode,
        n: cfg.n,
        p: cfg.p,
        k: (cfg.mode == Mode::Pp).then_some(cfg.k),
        layers: cfg.layers,
        model_size: size,
        nu: res.epochs_run,
        converged: res.converged,
        final_loss: res.final_loss,
        e_per_iteration_j: res.cost.e_per_iteration_j,
        e_total_j: res.total_energy_j,
        energy_ratio: ratio,
        flag,
    };
    let not_converged = |res: &TrainResult| {
        if res.converged {
            String::new()
        } else {
            format!("not converged in {} epochs", res.epochs_run)
        }
    };
    rows.push(row(&tp_cfg, &tp, tp_model_size(tp_cfg.n, tp_cfg.layers), None, not_converged(&tp)));
    for cfg in &pp_cfgs {
        let pp = run_training(&r, cfg)?;
        let ratio = (pp.converged && tp.converged).then(|| pp.total_energy_j / tp.total_energy_j);
        let mut flag = not_converged(&pp);
        if !tp.converged {
            flag = if flag.is_empty() { "tp not converged".into() } else { format!("{flag}; tp not converged") };
        }
        if !flag.is_empty() {
            warn!("k = {}: {flag}; ratio omitted", cfg.k);
        }
        let size = pp_model_size(cfg.n, cfg.p, cfg.k, cfg.layers)?;
        rows.push(row(cfg, &pp, size, ratio, flag));
        reports.push(pp.cost);
    }
    rows.sort_by_key(|r| (r.mode, r.p, r.k));
    reports.sort_by_key(|r| (r.mode, r.p, r.k));

    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    write_cost_reports_csv(out.join("cost_report.csv"), &reports)?;

    println!("lambda = {lambda:.6e} ({lambda_source})");
    println!("mode  k     model_size   nu     e/iter(J)    E(J)         ratio");
    for row in &rows {
        println!(
            "{:<5} {:<5} {:<12} {:<6} {:<12.6} {:<12.4} {}",
            row.mode,
            row.k.map_or("-".to_string(), |k| k.to_string()),
            row.model_size,
            row.nu,
            row.e_per_iteration_j,
            row.e_total_j,
            row.energy_ratio.map_or_else(|| row.flag.clone(), |x| format!("{x:.4}"))
        );
    }
    Ok(())
}
