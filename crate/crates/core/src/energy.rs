//! FLOP counts, modeled communication time and the `e = A·α + B·β` energy
//! model.
//!
//! FLOP convention: a matrix product of an `m x k` and a `k x n` operand
//! costs `2·m·n·k`; every elementwise operation (accumulate, bias add,
//! activation, Hadamard mask, subtraction, batch row-sum) costs one FLOP per
//! element. Evaluating `σ'`, the loss value and the optimizer update are
//! free. These are exactly the operations the counted kernels in
//! [`crate::linalg`] report, so closed forms and runtime counts agree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collectives::{comm_time, CollectiveKind, CommCostModel, CommRecord, Direction};
use crate::error::{config_err, Result};
use crate::phantom::PhantomConfig;
use crate::training::Mode;

/// Device power draw and throughput.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRates {
    /// Busy power `A`, Watts.
    pub busy_watts: f64,
    /// Idle power `B`, Watts.
    pub idle_watts: f64,
    /// FLOP/s used to turn FLOP counts into compute seconds.
    pub device_flops: f64,
}

impl EnergyRates {
    pub fn new(busy_watts: f64, idle_watts: f64, device_flops: f64) -> Result<Self> {
        if !(busy_watts > idle_watts && idle_watts > 0.0) {
            return Err(config_err(
                "EnergyRates",
                format!("need A > B > 0, got A = {busy_watts}, B = {idle_watts}"),
            ));
        }
        if !(device_flops > 0.0 && device_flops.is_finite()) {
            return Err(config_err("EnergyRates", format!("device_flops = {device_flops}")));
        }
        Ok(Self {
            busy_watts,
            idle_watts,
            device_flops,
        })
    }

    /// A = 560 W, B = 90 W, 10^12 FLOP/s.
    pub fn frontier() -> Self {
        Self {
            busy_watts: 560.0,
            idle_watts: 90.0,
            device_flops: 1e12,
        }
    }

    pub fn compute_seconds(&self, flops: u64) -> f64 {
        flops as f64 / self.device_flops
    }
}

impl Default for EnergyRates {
    fn default() -> Self {
        Self::frontier()
    }
}

/// FLOPs of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationFlops {
    pub per_rank: u64,
    pub total: u64,
}

impl IterationFlops {
    fn from_rank(per_rank: u64, p: usize) -> Self {
        Self {
            per_rank,
            total: per_rank * p as u64,
        }
    }
}

fn check_split(op: &'static str, n: usize, p: usize, layers: usize, batch: usize) -> Result<u64> {
    if p == 0 || n == 0 || n % p != 0 {
        return Err(config_err(op, format!("n = {n} not divisible by p = {p}")));
    }
    if layers == 0 || batch == 0 {
        return Err(config_err(op, "layers and batch must be positive"));
    }
    Ok((n / p) as u64)
}

fn check_pp(op: &'static str, n: usize, p: usize, k: usize, layers: usize, batch: usize) -> Result<u64> {
    let m = check_split(op, n, p, layers, batch)?;
    if k == 0 || k as u64 > m {
        return Err(config_err(op, format!("k = {k} outside 1..={m}")));
    }
    Ok(m)
}

/// Forward-pass FLOPs of a phantom network.
pub fn flops_pp_forward(n: usize, p: usize, k: usize, layers: usize, batch: usize) -> Result<IterationFlops> {
    let m = check_pp("flops_pp_forward", n, p, k, layers, batch)?;
    let (p64, k, l, b) = (p as u64, k as u64, layers as u64, batch as u64);
    let per_layer = b * (2 * m * m + 2 * k * m + 2 * (p64 - 1) * k * m + (p64 - 1) * m + 2 * m);
    Ok(IterationFlops::from_rank(l * per_layer, p))
}

/// Forward, output error and backward FLOPs of one phantom iteration.
pub fn flops_pp_iteration(n: usize, p: usize, k: usize, layers: usize, batch: usize) -> Result<IterationFlops> {
    let forward = flops_pp_forward(n, p, k, layers, batch)?.per_rank;
    let m = (n / p) as u64;
    let (p64, k, l, b) = (p as u64, k as u64, layers as u64, batch as u64);
    let output_delta = 2 * m * b;
    let scatter = 2 * (p64 - 1) * k * m * b;
    let grads = m * b + 2 * m * m * b + 2 * k * m * b + 2 * (p64 - 1) * k * m * b;
    let propagate = (2 * m * m + 2 * k * m + 2 * m) * b;
    let backward = l * (scatter + grads) + (l - 1) * propagate;
    Ok(IterationFlops::from_rank(forward + output_delta + backward, p))
}

/// Forward-pass FLOPs of a tensor-parallel network.
pub fn flops_tp_forward(n: usize, p: usize, layers: usize, batch: usize) -> Result<IterationFlops> {
    let m = check_split("flops_tp_forward", n, p, layers, batch)?;
    let (n, l, b) = (n as u64, layers as u64, batch as u64);
    Ok(IterationFlops::from_rank(l * b * (2 * m * n + 2 * m), p))
}

/// Forward, output error and backward FLOPs of one tensor-parallel iteration.
pub fn flops_tp_iteration(n: usize, p: usize, layers: usize, batch: usize) -> Result<IterationFlops> {
    let forward = flops_tp_forward(n, p, layers, batch)?.per_rank;
    let m = (n / p) as u64;
    let (n, l, b) = (n as u64, layers as u64, batch as u64);
    let output_delta = 2 * m * b;
    let per_layer = 2 * n * m * b + 2 * m * n * b + m * b;
    let masks = (l - 1) * m * b;
    Ok(IterationFlops::from_rank(forward + output_delta + l * per_layer + masks, p))
}

fn record(collective: CollectiveKind, message_size: usize, direction: Direction, layer: usize) -> CommRecord {
    CommRecord {
        collective,
        message_size,
        direction,
        layer,
        billable: true,
    }
}

/// Collectives one rank issues in a phantom iteration, in issue order.
pub fn pp_iteration_schedule(n: usize, p: usize, k: usize, layers: usize, batch: usize) -> Result<Vec<CommRecord>> {
    check_pp("pp_iteration_schedule", n, p, k, layers, batch)?;
    let size = k * batch;
    let mut out: Vec<_> = (0..layers)
        .map(|l| record(CollectiveKind::AllGather, size, Direction::Forward, l))
        .collect();
    out.extend((0..layers).rev().map(|l| record(CollectiveKind::ReduceScatter, size, Direction::Backward, l)));
    Ok(out)
}

/// Collectives one rank issues in a tensor-parallel iteration, in issue order.
pub fn tp_iteration_schedule(n: usize, p: usize, layers: usize, batch: usize) -> Result<Vec<CommRecord>> {
    let m = check_split("tp_iteration_schedule", n, p, layers, batch)? as usize;
    let mut out = Vec::with_capacity(4 * layers);
    for l in 0..layers {
        out.push(record(CollectiveKind::AllGather, m * batch, Direction::Forward, l));
        out.push(record(CollectiveKind::Broadcast, n * batch, Direction::Forward, l));
    }
    for l in (0..layers).rev() {
        out.push(record(CollectiveKind::AllReduce, n * batch, Direction::Backward, l));
        out.push(record(CollectiveKind::ReduceScatter, m * batch, Direction::Backward, l));
    }
    Ok(out)
}

/// Wall-clock communication seconds of one iteration as seen by one rank:
/// the sum of the modeled times of its billable records.
pub fn comm_time_iteration(records: &[CommRecord], model: &CommCostModel, p: usize) -> Result<f64> {
    if records.is_empty() {
        log::warn!("no collectives recorded for this iteration; communication time is zero");
        return Ok(0.0);
    }
    let mut us = 0.0;
    for r in records.iter().filter(|r| r.billable) {
        us += comm_time(model, r.collective, r.message_size, p)?;
    }
    Ok(us * 1e-6)
}

/// `A·α + B·β`.
pub fn energy_per_iteration(rates: &EnergyRates, alpha_s: f64, beta_s: f64) -> f64 {
    debug_assert!(alpha_s >= 0.0 && beta_s >= 0.0);
    rates.busy_watts * alpha_s + rates.idle_watts * beta_s
}

/// `ν·e`.
pub fn total_energy(e_per_iteration: f64, nu: usize) -> f64 {
    e_per_iteration * nu as f64
}

/// Cost of one iteration and of a whole run.
///
/// `alpha_s` and `beta_s` are summed over ranks: every rank is billed its
/// compute seconds at `A` and its communication seconds at `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    pub k: Option<usize>,
    pub layers: usize,
    pub batch: usize,
    pub flops_per_rank: u64,
    pub flops_total: u64,
    pub alpha_s: f64,
    pub beta_s: f64,
    pub e_per_iteration_j: f64,
    pub nu: usize,
    pub e_total_j: f64,
    /// Bytes sent per iteration summed over ranks, 8 bytes per element.
    pub bytes_communicated: u64,
}

/// Shape of the network a report describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostShape {
    pub mode: Mode,
    pub n: usize,
    pub p: usize,
    pub k: Option<usize>,
    pub layers: usize,
    pub batch: usize,
}

impl CostShape {
    pub fn pp(config: &PhantomConfig, batch: usize) -> Self {
        Self {
            mode: Mode::Pp,
            n: config.n,
            p: config.p,
            k: Some(config.k),
            layers: config.layers,
            batch,
        }
    }

    pub fn tp(n: usize, p: usize, layers: usize, batch: usize) -> Self {
        Self {
            mode: Mode::Tp,
            n,
            p,
            k: None,
            layers,
            batch,
        }
    }

    pub fn closed_form_flops(&self) -> Result<IterationFlops> {
        match self.mode {
            Mode::Pp => flops_pp_iteration(self.n, self.p, self.k.unwrap_or(0), self.layers, self.batch),
            Mode::Tp => flops_tp_iteration(self.n, self.p, self.layers, self.batch),
        }
    }

    pub fn schedule(&self) -> Result<Vec<CommRecord>> {
        match self.mode {
            Mode::Pp => pp_iteration_schedule(self.n, self.p, self.k.unwrap_or(0), self.layers, self.batch),
            Mode::Tp => tp_iteration_schedule(self.n, self.p, self.layers, self.batch),
        }
    }
}

impl CostReport {
    /// Report for one iteration with given FLOPs and one rank's records.
    pub fn from_iteration(
        shape: CostShape,
        flops: IterationFlops,
        records: &[CommRecord],
        model: &CommCostModel,
        rates: &EnergyRates,
    ) -> Result<Self> {
        let p = shape.p;
        let alpha_s = rates.compute_seconds(flops.total);
        let beta_s = p as f64 * comm_time_iteration(records, model, p)?;
        let elements: usize = records.iter().filter(|r| r.billable).map(|r| r.message_size).sum();
        Ok(Self {
            mode: shape.mode,
            n: shape.n,
            p,
            k: shape.k,
            layers: shape.layers,
            batch: shape.batch,
            flops_per_rank: flops.per_rank,
            flops_total: flops.total,
            alpha_s,
            beta_s,
            e_per_iteration_j: energy_per_iteration(rates, alpha_s, beta_s),
            nu: 0,
            e_total_j: 0.0,
            bytes_communicated: 8 * elements as u64 * p as u64,
        })
    }

    /// Report from closed-form FLOPs and the scheduled collectives.
    pub fn modeled(shape: CostShape, model: &CommCostModel, rates: &EnergyRates) -> Result<Self> {
        Self::from_iteration(shape, shape.closed_form_flops()?, &shape.schedule()?, model, rates)
    }

    pub fn with_nu(mut self, nu: usize) -> Self {
        self.nu = nu;
        self.e_total_j = total_energy(self.e_per_iteration_j, nu);
        self
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("cost report serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("CostReport", e.to_string()))
    }
}

/// Writes reports as CSV with a header row.
pub fn write_cost_reports_csv(path: impl AsRef<Path>, reports: &[CostReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    for r in reports {
        writer.serialize(r).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> crate::error::Error {
    std::io::Error::other(e.to_string()).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontier() -> CommCostModel {
        CommCostModel::frontier()
    }

    #[test]
    fn rates_validation() {
        assert!(EnergyRates::new(560.0, 90.0, 1e12).is_ok());
        assert!(EnergyRates::new(90.0, 560.0, 1e12).is_err());
        assert!(EnergyRates::new(90.0, 90.0, 1e12).is_err());
        assert!(EnergyRates::new(560.0, 0.0, 1e12).is_err());
        assert!(EnergyRates::new(560.0, 90.0, 0.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let r = EnergyRates::frontier();
        assert_eq!(energy_per_iteration(&r, 1.0, 1.0), 650.0);
        assert_eq!(energy_per_iteration(&r, 0.0, 0.0), 0.0);
        let e = energy_per_iteration(&r, 0.3, 0.7);
        assert!((energy_per_iteration(&r, 0.9, 2.1) - 3.0 * e).abs() < 1e-12);
        assert_eq!(total_energy(123.0, 0), 0.0);
        assert_eq!(total_energy(2.0, 3), 6.0);
    }

    #[test]
    fn forward_flops_leading_terms() {
        let n = 16384usize;
        let pp = flops_pp_forward(n, 8, 16, 1, 1).unwrap().total as f64;
        let lead = 2.0 * ((n * n / 8) as f64 + (8 * 16 * n) as f64);
        assert!((pp - lead).abs() / lead < 0.01, "{pp} vs {lead}");
        assert!((lead / 1e6 - 71.3).abs() < 0.05);
        let tp = flops_tp_forward(n, 8, 1, 1).unwrap().total as f64;
        assert!((tp / 1e6 - 536.9).abs() < 0.1);
        let tp2 = flops_tp_forward(n, 8, 2, 1).unwrap().total as f64;
        assert!((tp2 / 1e9 - 1.074).abs() < 1e-3);
    }

    #[test]
    fn tiny_pp_forward_by_hand() {
        // n = 4, p = 2, k = 1, batch = 1, m = 2 per rank:
        // L·y 8, C·y 4, D·g 4, accumulate 2, bias 2, activation 2.
        assert_eq!(flops_pp_forward(4, 2, 1, 1, 1).unwrap(), IterationFlops { per_rank: 22, total: 44 });
        assert!(flops_pp_forward(4, 2, 0, 1, 1).is_err());
    }

    #[test]
    fn flops_linear_in_batch() {
        for b in [1usize, 3, 7] {
            assert_eq!(
                flops_pp_iteration(64, 4, 8, 3, 2 * b).unwrap().total,
                2 * flops_pp_iteration(64, 4, 8, 3, b).unwrap().total
            );
            assert_eq!(
                flops_tp_iteration(64, 4, 3, 2 * b).unwrap().total,
                2 * flops_tp_iteration(64, 4, 3, b).unwrap().total
            );
        }
    }

    #[test]
    fn tp_forward_total_independent_of_p() {
        let base = flops_tp_forward(64, 1, 2, 3).unwrap().total;
        let with_bias = 2 * 2 * 3 * 64 * 64 + 2 * 2 * 3 * 64;
        assert_eq!(base, with_bias as u64);
        for p in [2, 4, 8, 16] {
            assert_eq!(flops_tp_forward(64, p, 2, 3).unwrap().total, base);
        }
    }

    #[test]
    fn pp_comm_time_is_two_records() {
        let model = frontier();
        let recs = pp_iteration_schedule(64, 4, 8, 1, 1).unwrap();
        let expect = comm_time(&model, CollectiveKind::AllGather, 8, 4).unwrap()
            + comm_time(&model, CollectiveKind::ReduceScatter, 8, 4).unwrap();
        assert!((comm_time_iteration(&recs, &model, 4).unwrap() - expect * 1e-6).abs() < 1e-18);
    }

    #[test]
    fn tp_comm_time_plug_in() {
        let model = frontier();
        let recs = tp_iteration_schedule(1024, 8, 1, 1).unwrap();
        // 3·35.5... evaluated by hand from the fitted constants:
        let by_hand = (3.0 * 35.5 + 1.12e-3 * 1024.0)
            + (3.0 * 149.94 + 2.07e-3 * 128.0)
            + (3.0 * 33.4 + 2.56e-3 * 1024.0)
            + (3.0 * 145.52 + 2.40e-3 * 128.0);
        let beta = comm_time_iteration(&recs, &model, 8).unwrap();
        assert!((beta * 1e6 - by_hand).abs() < 1e-9, "{beta}");
        let beta_pp = comm_time_iteration(&pp_iteration_schedule(1024, 8, 16, 1, 1).unwrap(), &model, 8).unwrap();
        assert!(beta_pp < beta);
    }

    #[test]
    fn empty_records_cost_nothing() {
        assert_eq!(comm_time_iteration(&[], &frontier(), 4).unwrap(), 0.0);
    }

    #[test]
    fn unbilled_records_are_skipped() {
        let mut recs = pp_iteration_schedule(64, 4, 8, 1, 1).unwrap();
        let billed = comm_time_iteration(&recs, &frontier(), 4).unwrap();
        recs.push(CommRecord {
            billable: false,
            ..record(CollectiveKind::AllReduce, 1, Direction::Forward, 1)
        });
        assert_eq!(comm_time_iteration(&recs, &frontier(), 4).unwrap(), billed);
    }

    #[test]
    fn report_identities() {
        let rates = EnergyRates::frontier();
        let r = CostReport::modeled(CostShape::tp(256, 4, 2, 16), &frontier(), &rates)
            .unwrap()
            .with_nu(7);
        assert_eq!(r.e_per_iteration_j, rates.busy_watts * r.alpha_s + rates.idle_watts * r.beta_s);
        assert_eq!(r.e_total_j, 7.0 * r.e_per_iteration_j);
        assert_eq!(r.flops_total, 4 * r.flops_per_rank);
        let back = CostReport::from_toml_str(&r.to_toml_string()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn report_csv_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cost.csv");
        let rates = EnergyRates::frontier();
        let reports = [
            CostReport::modeled(CostShape::tp(64, 4, 2, 1), &frontier(), &rates).unwrap(),
            CostReport::modeled(
                CostShape::pp(
                    &PhantomConfig {
                        n: 64,
                        p: 4,
                        k: 8,
                        layers: 2,
                        activation: crate::linalg::Activation::Relu,
                    },
                    1,
                ),
                &frontier(),
                &rates,
            )
            .unwrap(),
        ];
        write_cost_reports_csv(&path, &reports).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("mode,n,p,k,layers,batch"));
        assert!(lines.next().unwrap().starts_with("tp,64,4,,2,1"));
        assert!(lines.next().unwrap().starts_with("pp,64,4,8,2,1"));
    }
}
