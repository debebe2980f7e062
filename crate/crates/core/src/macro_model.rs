//! Closed-form description of self-repair: fault severity `z`, repair ratio
//! `q`, the exponential recovery trajectory, and the hyperbolic `q(z)` fit
//! benchmarked against biophysical runs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::astrocyte::{run_two_neuron_experiment, BioFaultSpec, BioSimConfig, PrTraceSet, Window};
use crate::error::{Error, Result};
use crate::seed;

/// One (z, q) observation from a biophysical run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairMeasurement {
    pub z: f64,
    pub q: f64,
    pub run_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairTrajectoryParams {
    pub q: f64,
    /// Recovery time constant (s).
    pub tau: f64,
    /// Fault time (s).
    pub t_fault: f64,
    /// Stable pre-fault PR of the synapse.
    pub pr_bf: f64,
    /// Temporal intercept (s).
    pub t_b: f64,
}

impl RepairTrajectoryParams {
    /// Build with the intercept chosen so the trajectory starts at `pr_bf`.
    pub fn new(q: f64, tau: f64, t_fault: f64, pr_bf: f64) -> Result<Self> {
        Ok(Self {
            q,
            tau,
            t_fault,
            pr_bf,
            t_b: temporal_intercept(q, tau)?,
        })
    }
}

/// Σ pr0 of healthy synapses / Σ pr0 of all synapses.
pub fn fault_severity(pr0: &[f64], disabled: &[bool]) -> Result<f64> {
    if disabled.len() != pr0.len() {
        return Err(Error::Dimension {
            expected: pr0.len(),
            got: disabled.len(),
        });
    }
    let scale: Vec<f64> = disabled.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    fault_severity_scaled(pr0, &scale)
}

/// Severity when each synapse keeps a fraction `scale[i]` of its PR(0):
/// `Σ pr0·scale / Σ pr0`. Disabled synapses have scale 0, drifted ones their
/// drift ratio.
pub fn fault_severity_scaled(pr0: &[f64], scale: &[f64]) -> Result<f64> {
    if pr0.is_empty() {
        return Err(Error::Domain("fault severity needs at least one synapse".into()));
    }
    if scale.len() != pr0.len() {
        return Err(Error::Dimension {
            expected: pr0.len(),
            got: scale.len(),
        });
    }
    if pr0.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain("negative initial PR".into()));
    }
    let total: f64 = pr0.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("total initial PR is zero".into()));
    }
    let kept: f64 = pr0.iter().zip(scale).map(|(p, s)| p * s).sum();
    Ok(kept / total)
}

fn check_z(z: f64) -> Result<()> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("repair ratio undefined for z = {z}")));
    }
    Ok(())
}

/// Empirical hyperbola `q = 1.03 / (z + 0.04)`.
pub fn repair_ratio_fit(z: f64) -> Result<f64> {
    check_z(z)?;
    Ok(1.03 / (z + 0.04))
}

/// Simplified `q = 1/z`.
pub fn repair_ratio(z: f64) -> Result<f64> {
    check_z(z)?;
    Ok(1.0 / z)
}

/// `t_b = −τ · ln((q − 1)/q)`, the offset that makes the recovery curve pass
/// through the pre-fault level at the fault time.
pub fn temporal_intercept(q: f64, tau: f64) -> Result<f64> {
    if !(q > 1.0) {
        return Err(Error::Domain(format!("temporal intercept needs q > 1, got {q}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    // ln((q-1)/q) = ln(1 - 1/q), evaluated accurately for large q.
    Ok(-tau * (-1.0 / q).ln_1p())
}

/// `q · pr_bf · (1 − exp(−(t − t_fault + t_b)/τ))` for `t > t_fault`.
pub fn repair_trajectory(p: &RepairTrajectoryParams, t: f64) -> Result<f64> {
    if !(t > p.t_fault) {
        return Err(Error::Domain(format!(
            "trajectory defined after the fault only (t = {t}, t_fault = {})",
            p.t_fault
        )));
    }
    if !(p.q > 1.0) || !(p.tau > 0.0) {
        return Err(Error::Domain(format!("need q > 1 and tau > 0, got {} and {}", p.q, p.tau)));
    }
    Ok(-p.q * p.pr_bf * (-(t - p.t_fault + p.t_b) / p.tau).exp_m1())
}

/// Per-synapse `mean(PR over AS) / mean(PR over BF)` for the non-disabled
/// synapses of neuron `neuron` (0 = N1, 1 = N2), in synapse order.
pub fn measure_repair_ratio(
    trace: &PrTraceSet,
    neuron: usize,
    bf: Window,
    as_window: Window,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for i in trace.healthy(neuron) {
        let before = trace.window_mean(neuron, i, bf)?;
        if before == 0.0 {
            return Err(Error::Domain(format!("synapse {i} has zero mean PR before the fault")));
        }
        out.push((i, trace.window_mean(neuron, i, as_window)? / before));
    }
    Ok(out)
}

/// Repair ratio of a neuron from the run's built-in window statistics:
/// mean of the per-synapse ratios over healthy synapses that never clipped in
/// either window (all healthy synapses if every one clipped).
pub fn neuron_repair_ratio(trace: &PrTraceSet, neuron: usize) -> Result<f64> {
    let stats = &trace.stats[neuron];
    let healthy: Vec<usize> = trace.healthy(neuron).collect();
    if healthy.is_empty() {
        return Err(Error::Domain("no healthy synapses left".into()));
    }
    let unclipped: Vec<usize> = healthy.iter().copied().filter(|&i| !stats.clipped[i]).collect();
    let use_set = if unclipped.is_empty() { &healthy } else { &unclipped };
    let mut sum = 0.0;
    for &i in use_set {
        let bf = stats.bf_mean(i);
        if bf == 0.0 {
            return Err(Error::Domain(format!("synapse {i} has zero mean PR before the fault")));
        }
        sum += stats.as_mean(i) / bf;
    }
    Ok(sum / use_set.len() as f64)
}

/// Severity of N2's fault in a finished run.
pub fn run_severity(trace: &PrTraceSet) -> Result<f64> {
    let syn = &trace.synapses[1];
    let pr0: Vec<f64> = syn.iter().map(|s| s.pr0).collect();
    let scale: Vec<f64> = syn
        .iter()
        .map(|s| if s.disabled { 0.0 } else { s.drift })
        .collect();
    fault_severity_scaled(&pr0, &scale)
}

/// Run one biophysical experiment and reduce it to (z, q) for N2.
pub fn measure_run(cfg: &BioSimConfig) -> Result<RepairMeasurement> {
    let trace = run_two_neuron_experiment(cfg)?;
    Ok(RepairMeasurement {
        z: run_severity(&trace)?,
        q: neuron_repair_ratio(&trace, 1)?,
        run_seed: cfg.seed,
    })
}

/// Randomized sweep: run `k` uses seed `derive_seed(master, k)` and disables
/// a uniformly drawn count in `0..=max_disabled` of N2's synapses. Runs
/// execute in parallel; results are sorted by seed.
pub fn qz_sweep(
    base: &BioSimConfig,
    n_runs: usize,
    master_seed: u64,
    max_disabled: usize,
) -> Result<Vec<RepairMeasurement>> {
    if max_disabled >= base.n_synapses {
        return Err(Error::Config(format!(
            "max_disabled {max_disabled} must leave at least one of {} synapses",
            base.n_synapses
        )));
    }
    let mut results = (0..n_runs as u64)
        .into_par_iter()
        .map(|k| {
            let run_seed = seed::derive_seed(master_seed, k);
            let mut proto = seed::rng(seed::derive_labeled(run_seed, "qz/protocol"));
            let n_disabled = proto.random_range(0..=max_disabled);
            let cfg = BioSimConfig {
                seed: run_seed,
                fault: BioFaultSpec::disable_count(n_disabled),
                record_traces: false,
                ..base.clone()
            };
            measure_run(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|m| m.run_seed);
    Ok(results)
}

/// Result of fitting `q = a / (z + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QzFit {
    pub a: f64,
    pub b: f64,
    /// RMS of `q − a/(z + b)` over the measurements.
    pub rms: f64,
}

/// Ordinary least squares of `1/q` on `z`: `1/q = z/a + b/a`.
pub fn fit_q_z(measurements: &[RepairMeasurement]) -> Result<QzFit> {
    if measurements.len() < 2 {
        return Err(Error::Domain("need at least two measurements".into()));
    }
    if measurements.iter().any(|m| !(m.q > 0.0) || !m.z.is_finite()) {
        return Err(Error::Domain("measurements need q > 0 and finite z".into()));
    }
    let n = measurements.len() as f64;
    let mz = measurements.iter().map(|m| m.z).sum::<f64>() / n;
    let my = measurements.iter().map(|m| 1.0 / m.q).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for m in measurements {
        let dz = m.z - mz;
        sxy += dz * (1.0 / m.q - my);
        sxx += dz * dz;
    }
    if sxx <= f64::EPSILON * n {
        return Err(Error::Domain("all z values are equal; fit is degenerate".into()));
    }
    let slope = sxy / sxx;
    if slope == 0.0 {
        return Err(Error::Numerical("fitted slope is zero".into()));
    }
    let intercept = my - slope * mz;
    let a = 1.0 / slope;
    let b = intercept * a;
    let rms = (measurements
        .iter()
        .map(|m| (m.q - a / (m.z + b)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(QzFit { a, b, rms })
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            out[k] = rank;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Domain("correlation needs at least two points".into()));
    }
    pearson(&ranks(x), &ranks(y))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation undefined for constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn write_qz_csv(measurements: &[RepairMeasurement], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "seed,z,q")?;
    for m in measurements {
        writeln!(out, "{},{:.12},{:.12}", m.run_seed, m.z, m.q)?;
    }
    Ok(())
}
