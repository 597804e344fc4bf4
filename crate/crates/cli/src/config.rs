//! Config files, command-line overrides and run manifests.
//!
//! A config file is TOML with these tables, all optional:
//!
//! ```toml
//! comm_model = "model.toml"   # relative to the config file; builtin if absent
//!
//! [train]                     # every TrainConfig field, defaults if absent
//! mode = "pp"
//! n = 64
//! p = 4
//! k = 8
//! layers = 2
//!
//! [energy]
//! busy_watts = 560.0
//! idle_watts = 90.0
//! device_flops = 1e12
//!
//! [provenance]                # written into manifests, ignored on input
//! ```
//!
//! A manifest written by `train` or `compare` is itself a valid config file.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use phantom_parallel::training::{LossReduction, Optimizer};
use phantom_parallel::{Activation, CommCostModel, EnergyRates, ExecMode, Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

/// Bad flags, files or values: exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// tp or pp.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Ghost neurons per rank; `compare` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
    /// relu or identity.
    #[arg(long)]
    pub activation: Option<Activation>,
    /// sum or mean.
    #[arg(long)]
    pub loss_reduction: Option<LossReduction>,
    /// Stop once the epoch loss is at or below this value (`inf` allowed).
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Cost-model TOML file; the bundled constants if absent.
    #[arg(long)]
    pub comm_model: Option<PathBuf>,
    /// Busy watts, idle watts and device FLOP/s, e.g. `560,90,1e12`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub rates: Option<Vec<f64>>,
    /// Run each rank on a free-running thread instead of in lockstep.
    #[arg(long, visible_alias = "threads-per-rank")]
    pub threads: bool,
    /// Bill the scalar loss all-reduce as communication time.
    #[arg(long)]
    pub bill_loss_allreduce: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    comm_model: Option<PathBuf>,
    train: Option<TrainConfig>,
    energy: Option<EnergyRates>,
    provenance: Option<toml::Table>,
}

/// Where the communication constants came from.
#[derive(Clone, Debug)]
pub struct CommSource {
    pub model: CommCostModel,
    /// File path, or `builtin`.
    pub origin: String,
    /// Git blob hash of the file contents.
    pub sha1: String,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub train: TrainConfig,
    pub rates: EnergyRates,
    pub comm: CommSource,
    /// The `--k` values; one entry for `train`.
    pub ks: Vec<usize>,
}

/// `sha1("blob <len>\0" + bytes)`, as `git hash-object` computes it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_comm_model(path: Option<&Path>) -> Result<CommSource> {
    match path {
        None => {
            let text = CommCostModel::frontier_toml();
            Ok(CommSource {
                model: CommCostModel::frontier(),
                origin: "builtin".into(),
                sha1: git_blob_sha1(text.as_bytes()),
            })
        }
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| usage(format!("cannot read cost model {}: {e}", p.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| usage(format!("cost model {} is not UTF-8", p.display())))?;
            let model = CommCostModel::from_toml_str(&text).with_context(|| format!("in {}", p.display()))?;
            Ok(CommSource {
                model,
                origin: p.display().to_string(),
                sha1: git_blob_sha1(&bytes),
            })
        }
    }
}

pub fn parse_rates(values: &[f64]) -> Result<EnergyRates> {
    match values {
        [a, b, f] => Ok(EnergyRates::new(*a, *b, *f)?),
        _ => Err(usage("--rates takes three values: busy watts, idle watts, device FLOP/s")),
    }
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {}", path.display(), e.message())))
}

impl RunArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let file = match &self.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let mut t = file.train.unwrap_or_default();
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { t.$field = v; })*
            };
        }
        set!(
            seed => seed, mode => mode, n => n, p => p, layers => layers, samples => samples,
            batch => batch, lr => learning_rate, optimizer => optimizer, activation => activation,
            loss_reduction => loss_reduction, max_epochs => max_epochs,
        );
        if let Some(v) = self.target_loss {
            t.target_loss = Some(v);
        }
        if self.threads {
            t.exec = ExecMode::Threaded;
        }
        if self.bill_loss_allreduce {
            t.bill_loss_allreduce = true;
        }
        let ks = if self.k.is_empty() { vec![t.k] } else { self.k.clone() };
        t.k = ks[0];

        let rates = match (&self.rates, file.energy) {
            (Some(v), _) => parse_rates(v)?,
            (None, Some(r)) => EnergyRates::new(r.busy_watts, r.idle_watts, r.device_flops)?,
            (None, None) => EnergyRates::frontier(),
        };
        let model_path = match (&self.comm_model, &file.comm_model, &self.config) {
            (Some(p), _, _) => Some(p.clone()),
            (None, Some(p), Some(cfg)) if p.is_relative() => {
                Some(cfg.parent().unwrap_or_else(|| Path::new(".")).join(p))
            }
            (None, Some(p), _) => Some(p.clone()),
            (None, None, _) => None,
        };
        let comm = load_comm_model(model_path.as_deref())?;
        Ok(Resolved {
            train: t,
            rates,
            comm,
            ks,
        })
    }
}

#[derive(Serialize)]
struct AdamDefaults {
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    tool_version: &'a str,
    comm_model_origin: &'a str,
    comm_model_sha1: &'a str,
    adam: AdamDefaults,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_values: Option<&'a [usize]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_loss_source: Option<&'a str>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    comm_model: Option<&'a str>,
    train: &'a TrainConfig,
    energy: &'a EnergyRates,
    provenance: Provenance<'a>,
}

/// Writes `manifest.toml` into `dir`.
pub fn write_manifest(dir: &Path, command: &str, r: &Resolved, target_loss_source: Option<&str>) -> Result<()> {
    let manifest = Manifest {
        comm_model: (r.comm.origin != "builtin").then_some(r.comm.origin.as_str()),
        train: &r.train,
        energy: &r.rates,
        provenance: Provenance {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            comm_model_origin: &r.comm.origin,
            comm_model_sha1: &r.comm.sha1,
            adam: AdamDefaults {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            k_values: (r.ks.len() > 1).then_some(r.ks.as_slice()),
            target_loss_source,
        },
    };
    let text = toml::to_string(&manifest).context("serializing manifest")?;
    std::fs::write(dir.join("manifest.toml"), text).context("writing manifest.toml")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(git_blob_sha1(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[train]\nn = 32\np = 2\nk = 3\nseed = 4\n").unwrap();
        let args = RunArgs {
            config: Some(cfg),
            p: Some(4),
            ..RunArgs::default()
        };
        let r = args.resolve().unwrap();
        assert_eq!((r.train.n, r.train.p, r.train.k, r.train.seed), (32, 4, 3, 4));
        assert_eq!(r.comm.origin, "builtin");
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "[train]\nwidth = 32\n").unwrap();
        let err = RunArgs {
            config: Some(cfg),
            ..RunArgs::default()
        }
        .resolve()
        .unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
