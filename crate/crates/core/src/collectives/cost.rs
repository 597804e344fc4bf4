//! Latency/bandwidth cost model for collectives and its least-squares fit.
//!
//! `time_us(m, p) = c1·log2(p) + c2·m + c3`, one coefficient triple per
//! collective.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CollectiveKind;
use crate::error::{config_err, Error, Result};

const DEFAULT_MODEL: &str = include_str!("../../data/frontier_comm_model.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCoeffs {
    /// Latency coefficient, μs per doubling of the group.
    pub c1: f64,
    /// Bandwidth coefficient, μs per element.
    pub c2: f64,
    /// Constant overhead, μs.
    pub c3: f64,
}

impl CommCoeffs {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Self {
        Self { c1, c2, c3 }
    }

    pub fn time_us(&self, m: usize, p: usize) -> f64 {
        self.c1 * (p as f64).log2() + self.c2 * m as f64 + self.c3
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommCostModel {
    coeffs: BTreeMap<CollectiveKind, CommCoeffs>,
    /// Fit residual per collective as log2(RMSE in μs), when known.
    rmse_log2_us: BTreeMap<CollectiveKind, f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    collective: Vec<ModelEntry>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    name: String,
    c1: f64,
    c2: f64,
    #[serde(default)]
    c3: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rmse_log2_us: Option<f64>,
}

impl CommCostModel {
    /// The constants measured on Frontier, c3 = 0.
    pub fn frontier() -> Self {
        Self::from_toml_str(DEFAULT_MODEL).expect("bundled cost model parses")
    }

    /// Text of the bundled default cost-model file.
    pub fn frontier_toml() -> &'static str {
        DEFAULT_MODEL
    }

    pub fn insert(&mut self, kind: CollectiveKind, coeffs: CommCoeffs) -> Result<()> {
        if !(coeffs.c1 >= 0.0 && coeffs.c2 >= 0.0) || !coeffs.c3.is_finite() {
            return Err(config_err(
                "CommCostModel",
                format!("{kind}: c1 and c2 must be non-negative, got {coeffs:?}"),
            ));
        }
        self.coeffs.insert(kind, coeffs);
        Ok(())
    }

    pub fn coeffs(&self, kind: CollectiveKind) -> Result<CommCoeffs> {
        self.coeffs
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::UnknownCollective(kind.to_string()))
    }

    pub fn rmse_log2_us(&self, kind: CollectiveKind) -> Option<f64> {
        self.rmse_log2_us.get(&kind).copied()
    }

    pub fn kinds(&self) -> impl Iterator<Item = CollectiveKind> + '_ {
        self.coeffs.keys().copied()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<cost model>".into(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            reason: e.message().to_string(),
        })?;
        let mut model = Self::default();
        for entry in file.collective {
            let kind: CollectiveKind = entry.name.parse()?;
            if model.coeffs.contains_key(&kind) {
                return Err(config_err(
                    "CommCostModel",
                    format!("duplicate entry for {kind}"),
                ));
            }
            model.insert(kind, CommCoeffs::new(entry.c1, entry.c2, entry.c3))?;
            if let Some(r) = entry.rmse_log2_us {
                model.rmse_log2_us.insert(kind, r);
            }
        }
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ModelFile {
            collective: self
                .coeffs
                .iter()
                .map(|(kind, c)| ModelEntry {
                    name: kind.name().to_string(),
                    c1: c.c1,
                    c2: c.c2,
                    c3: c.c3,
                    rmse_log2_us: self.rmse_log2_us.get(kind).copied(),
                })
                .collect(),
        };
        let mut out = String::from(
            "# time_us(m, p) = c1 * log2(p) + c2 * m + c3; m in elements per rank\n\n",
        );
        out.push_str(&toml::to_string(&file).expect("model serializes"));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { line, reason, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                reason,
            },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// Modeled duration in μs of one `kind` collective moving `m` elements per
/// rank among `p` ranks.
pub fn comm_time(model: &CommCostModel, kind: CollectiveKind, m: usize, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(config_err("comm_time", "p must be at least 1"));
    }
    Ok(model.coeffs(kind)?.time_us(m, p))
}

/// One timing sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub collective: CollectiveKind,
    pub m: usize,
    pub p: usize,
    pub time_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveFit {
    pub coeffs: CommCoeffs,
    pub samples: usize,
    pub rmse_us: f64,
    /// `log2(rmse_us)`; `-inf` for an exact fit.
    pub rmse_log2_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub model: CommCostModel,
    pub fits: BTreeMap<CollectiveKind, CollectiveFit>,
}

/// Least-squares fit of `(c1, c2, c3)` per collective on regressors
/// `(log2 p, m, 1)` in linear μs, with `c1, c2 >= 0`.
pub fn fit_comm_model(samples: &[Measurement]) -> Result<FitReport> {
    let mut groups: BTreeMap<CollectiveKind, Vec<&Measurement>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.collective).or_default().push(s);
    }
    let mut model = CommCostModel::default();
    let mut fits = BTreeMap::new();
    for (kind, group) in groups {
        let fit = fit_one(kind, &group)?;
        model.insert(kind, fit.coeffs)?;
        model.rmse_log2_us.insert(kind, fit.rmse_log2_us);
        fits.insert(kind, fit);
    }
    Ok(FitReport { model, fits })
}

fn distinct(values: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = values.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn fit_one(kind: CollectiveKind, group: &[&Measurement]) -> Result<CollectiveFit> {
    let fail = |reason: String| Error::Fit {
        collective: kind,
        reason,
    };
    if group.len() < 3 {
        return Err(fail(format!("need at least 3 samples, got {}", group.len())));
    }
    if group.iter().any(|s| s.p == 0 || !s.time_us.is_finite()) {
        return Err(fail("samples need p >= 1 and a finite time".into()));
    }
    if distinct(group.iter().map(|s| s.p)) < 2 {
        return Err(fail("regressors are rank deficient: all samples share one p".into()));
    }
    if distinct(group.iter().map(|s| s.m)) < 2 {
        return Err(fail("regressors are rank deficient: all samples share one m".into()));
    }

    let rows = group.len();
    let design = DMatrix::from_fn(rows, 3, |r, c| match c {
        0 => (group[r].p as f64).log2(),
        1 => group[r].m as f64,
        _ => 1.0,
    });
    let target = DVector::from_iterator(rows, group.iter().map(|s| s.time_us));

    // Enumerate which of c1, c2 are pinned at zero; the best feasible
    // candidate is the constrained optimum.
    let mut best: Option<(f64, [f64; 3])> = None;
    for (free_c1, free_c2) in [(true, true), (false, true), (true, false), (false, false)] {
        let cols: Vec<usize> = [(0, free_c1), (1, free_c2), (2, true)]
            .into_iter()
            .filter_map(|(c, free)| free.then_some(c))
            .collect();
        let Some(coef) = solve_subset(&design, &target, &cols) else {
            if free_c1 && free_c2 {
                return Err(fail("regressors are numerically rank deficient".into()));
            }
            continue;
        };
        let mut full = [0.0; 3];
        for (i, c) in cols.iter().enumerate() {
            full[*c] = coef[i];
        }
        if full[0] < 0.0 || full[1] < 0.0 {
            continue;
        }
        let sse: f64 = (0..rows)
            .map(|r| {
                let pred = full[0] * design[(r, 0)] + full[1] * design[(r, 1)] + full[2];
                (pred - target[r]).powi(2)
            })
            .sum();
        if best.is_none_or(|(b, _)| sse < b) {
            best = Some((sse, full));
        }
        if free_c1 && free_c2 {
            break;
        }
    }
    let (sse, [c1, c2, c3]) = best.ok_or_else(|| fail("no feasible solution".into()))?;
    let rmse_us = (sse / rows as f64).sqrt();
    Ok(CollectiveFit {
        coeffs: CommCoeffs::new(c1, c2, c3),
        samples: rows,
        rmse_us,
        rmse_log2_us: rmse_us.log2(),
    })
}

/// Least squares on the selected columns, after scaling each column to unit
/// max-norm. `None` if the scaled system is rank deficient.
fn solve_subset(design: &DMatrix<f64>, target: &DVector<f64>, cols: &[usize]) -> Option<Vec<f64>> {
    let rows = design.nrows();
    let scales: Vec<f64> = cols
        .iter()
        .map(|&c| design.column(c).amax())
        .collect();
    if scales.iter().any(|s| *s == 0.0) {
        return None;
    }
    let a = DMatrix::from_fn(rows, cols.len(), |r, i| design[(r, cols[i])] / scales[i]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * 1e-12 {
        return None;
    }
    let x = svd.solve(target, 0.0).ok()?;
    Some(x.iter().zip(&scales).map(|(v, s)| v / s).collect())
}

/// Reads delimited measurements with header `collective,m,p,time_us`.
pub fn read_measurements(path: impl AsRef<Path>) -> Result<Vec<Measurement>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: name.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: name.clone(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: name.clone(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |reason: String| Error::Parse {
            path: name.clone(),
            line,
            reason,
        };
        let raw: RawMeasurement = rec
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(e.to_string()))?;
        let collective = raw
            .collective
            .parse()
            .map_err(|_| parse_err(format!("unknown collective `{}`", raw.collective)))?;
        if !raw.time_us.is_finite() || raw.time_us < 0.0 {
            return Err(parse_err(format!("invalid time_us {}", raw.time_us)));
        }
        out.push(Measurement {
            collective,
            m: raw.m,
            p: raw.p,
            time_us: raw.time_us,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct RawMeasurement {
    collective: String,
    m: usize,
    p: usize,
    time_us: f64,
}

pub fn write_measurements(path: impl AsRef<Path>, samples: &[Measurement]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    w.write_record(["collective", "m", "p", "time_us"])
        .map_err(std::io::Error::from)?;
    for s in samples {
        w.write_record([
            s.collective.name().to_string(),
            s.m.to_string(),
            s.p.to_string(),
            format!("{}", s.time_us),
        ])
        .map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}
