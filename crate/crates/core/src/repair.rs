//! Local astrocyte-inspired repair rule and the retraining loop.
//!
//! After faults, each neuron's potentiation pulls its healthy synapses toward
//! `q_j · w0_ij`, where `w0` is the pre-fault weight and `q_j` is the inverse
//! of the fraction of the neuron's pre-fault weight mass still present. The
//! depression branch is ordinary STDP.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hardware::{apply_drift, inject_stuck_at, DriftSpec, FaultMask, FaultSpec};
use crate::matrix::{Matrix, SynapseMatrix};
use crate::seed;
use crate::snn::{
    epoch_order, evaluate, normalize_weights, train_samples, NetworkState, NormMode, PlasticityRule, Potentiation,
    SnnConfig, Stdp,
};

/// Where the per-synapse repair target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairTarget {
    /// Archived pre-fault weights.
    Baseline,
    /// Weights right after the fault; only the per-neuron pre-fault sums are
    /// kept from the baseline.
    PostFault,
}

/// Pre-fault reference used by the repair rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairContext {
    w0: Matrix,
    w0_sums: Vec<f64>,
    /// Repair time constant.
    pub tau: f64,
}

impl RepairContext {
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn w0_sums(&self) -> &[f64] {
        &self.w0_sums
    }

    /// Replace the per-synapse targets with post-fault weights, keeping the
    /// pre-fault per-neuron sums.
    pub fn with_post_fault_targets(mut self, weights: &Matrix) -> Result<Self> {
        weights.ensure_shape(self.w0.rows(), self.w0.cols())?;
        self.w0 = weights.clone();
        Ok(self)
    }
}

/// Record pre-fault weights and their per-neuron sums.
pub fn snapshot_baseline(weights: &Matrix, tau: f64) -> Result<RepairContext> {
    if weights.as_slice().iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Domain("baseline weights must be non-negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("repair tau must be positive, got {tau}")));
    }
    Ok(RepairContext {
        w0_sums: weights.column_sums(),
        w0: weights.clone(),
        tau,
    })
}

/// `q_j = w0_sum_j / Σ_i w_ij` over unmasked synapses; `None` where the
/// current sum (or the pre-fault sum) is zero.
pub fn compute_q_local(weights: &Matrix, mask: &FaultMask, ctx: &RepairContext) -> Result<Vec<Option<f64>>> {
    weights.ensure_shape(ctx.w0.rows(), ctx.w0.cols())?;
    let n = weights.cols();
    let mut sums = vec![0.0; n];
    for i in 0..weights.rows() {
        for (j, s) in sums.iter_mut().enumerate() {
            if !mask.is_faulty(i, j) {
                *s += weights.get(i, j);
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&ctx.w0_sums)
        .map(|(&now, &before)| (now > 0.0 && before > 0.0).then(|| before / now))
        .collect())
}

/// One step of the local repair rule applied directly to `weights`.
///
/// Depression: each spiking input `i` loses `eta_pre · x_post[j]` on every
/// synapse. Potentiation: each spiking neuron `j` with a defined `q[j]` moves
/// every synapse by `eta_post · x_pre[i] · (q_j · w0_ij − w_ij) / tau`,
/// capped so it never passes the target; neurons without `q` use plain STDP
/// potentiation. Only column `j` of `weights` and `w0` is read for neuron `j`.
#[allow(clippy::too_many_arguments)]
pub fn astdp_local_update<M: SynapseMatrix + ?Sized, B: SynapseMatrix + ?Sized>(
    weights: &mut M,
    w0: &B,
    mask: &FaultMask,
    q: &[Option<f64>],
    tau: f64,
    x_pre: &[f64],
    x_post: &[f64],
    fired_pre: &[usize],
    fired_post: &[usize],
    cfg: &SnnConfig,
) {
    let clip = |w: f64| {
        let w = w.max(0.0);
        cfg.w_max.map_or(w, |m| w.min(m))
    };
    for &i in fired_pre {
        for (j, &x) in x_post.iter().enumerate() {
            if !mask.is_faulty(i, j) {
                let w = weights.weight(i, j) - cfg.eta_pre * x;
                weights.set_weight(i, j, clip(w));
            }
        }
    }
    for &j in fired_post {
        for (i, &x) in x_pre.iter().enumerate() {
            if mask.is_faulty(i, j) {
                continue;
            }
            let w = weights.weight(i, j);
            let next = match q[j] {
                Some(qj) => {
                    let target = qj * w0.weight(i, j);
                    w + (cfg.eta_post * x / tau).min(1.0) * (target - w)
                }
                None => w + cfg.eta_post * x,
            };
            weights.set_weight(i, j, clip(next));
        }
    }
}

/// Batched form of the local repair rule for the training engine.
#[derive(Debug, Clone)]
pub struct AstdpLocal<'a> {
    pub ctx: &'a RepairContext,
}

impl PlasticityRule for AstdpLocal<'_> {
    fn plan(&self, state: &NetworkState) -> Result<Potentiation> {
        let q = compute_q_local(&state.weights, &state.fault_mask, self.ctx)?;
        let n = state.config.n_neuron;
        let targets = Matrix::from_fn(state.config.n_input, n, |i, j| {
            q[j].map_or(0.0, |qj| qj * self.ctx.w0.get(i, j))
        });
        Ok(Potentiation::Toward {
            targets,
            active: q.iter().map(Option::is_some).collect(),
            rate: state.config.eta_post / self.ctx.tau,
        })
    }

    fn name(&self) -> &'static str {
        "astdp-local"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairRule {
    Stdp,
    AstdpLocal,
}

impl std::str::FromStr for RepairRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "stdp" => Ok(Self::Stdp),
            "astdp-local" | "a-stdp-local" | "astdp" => Ok(Self::AstdpLocal),
            other => Err(Error::Config(format!("unknown rule '{other}' (stdp|astdp-local)"))),
        }
    }
}

impl std::fmt::Display for RepairRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Stdp => "stdp",
            Self::AstdpLocal => "astdp-local",
        })
    }
}

/// Stuck-at and drift applied to a trained network. The pre-fault weights are
/// archived in `state.baseline` on the first injection.
pub fn inject_faults(state: &mut NetworkState, p_fault: f64, drift: Option<&DriftSpec>, seed: u64) -> Result<()> {
    let spec = FaultSpec::new(p_fault, seed)?;
    if state.baseline.is_none() {
        state.baseline = Some(state.weights.clone());
    }
    let (weights, mask) = inject_stuck_at(&state.weights, &spec)?;
    let mask = mask.union(&state.fault_mask)?;
    let weights = match drift {
        Some(d) => apply_drift(&weights, &mask, d, seed)?,
        None => weights,
    };
    state.weights = weights;
    for (w, &m) in state.weights.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if m {
            *w = 0.0;
        }
    }
    state.fault_mask = mask;
    state.lineage.push("inject", seed);
    Ok(())
}

/// Normalization used during and right before retraining.
pub fn repair_norm(cfg: &SnnConfig) -> NormMode {
    NormMode::MeanWithLowerBound { lb_sum: cfg.lb_sum() }
}

/// Normalize a freshly faulted network the way retraining will.
pub fn normalize_after_fault(state: &mut NetworkState) -> f64 {
    let norm = repair_norm(&state.config);
    normalize_weights(&mut state.weights, &state.fault_mask, norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOptions {
    pub rule: RepairRule,
    pub epochs: usize,
    /// Evaluate after every this many training samples.
    pub eval_every: usize,
    pub seed: u64,
    pub target: RepairTarget,
}

/// Accuracy trace of one retraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub rule: RepairRule,
    /// `(samples_seen, accuracy %)`, starting with the pre-retraining point.
    pub points: Vec<(u64, f64)>,
    pub best_acc: f64,
    /// Samples consumed before the best accuracy was first reached.
    pub steps_to_best: u64,
    pub seed: u64,
}

impl RepairReport {
    fn from_points(rule: RepairRule, points: Vec<(u64, f64)>, seed: u64) -> Self {
        let (steps_to_best, best_acc) = points
            .iter()
            .copied()
            .fold((0, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
        Self {
            rule,
            points,
            best_acc,
            steps_to_best,
            seed,
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "samples_seen,accuracy")?;
        for (s, a) in &self.points {
            writeln!(out, "{s},{a:.4}")?;
        }
        writeln!(out, "# best_acc,steps_to_best,seed")?;
        writeln!(out, "# {:.4},{},{}", self.best_acc, self.steps_to_best, self.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// Retrain a faulted network with `opts.rule`, evaluating every
/// `opts.eval_every` samples (labels reassigned on `label_set`, accuracy on
/// `eval_set`). The first point is the accuracy before any retraining.
pub fn retrain(
    state: &mut NetworkState,
    ctx: &RepairContext,
    train: &Dataset,
    label_set: &Dataset,
    eval_set: &Dataset,
    opts: &RetrainOptions,
) -> Result<RepairReport> {
    if opts.eval_every == 0 {
        return Err(Error::Config("eval_every must be positive".into()));
    }
    let ctx = match opts.target {
        RepairTarget::Baseline => ctx.clone(),
        RepairTarget::PostFault => ctx.clone().with_post_fault_targets(&state.weights)?,
    };
    let norm = repair_norm(&state.config);
    let eval_seed = seed::derive_labeled(opts.seed, "repair/eval");
    let mut points = vec![(0, evaluate(state, label_set, eval_set, eval_seed)?.accuracy)];
    let astdp = AstdpLocal { ctx: &ctx };
    let rule: &dyn PlasticityRule = match opts.rule {
        RepairRule::Stdp => &Stdp,
        RepairRule::AstdpLocal => &astdp,
    };
    state.lineage.push(&format!("retrain-{}", opts.rule), opts.seed);
    let mut total = 0u64;
    let mut last_eval = 0u64;
    let mut labels = None;
    for epoch in 0..opts.epochs as u64 {
        let order = epoch_order(train.len(), opts.seed, epoch);
        let stream = seed::derive_seed(seed::derive_labeled(opts.seed, "repair/train"), epoch);
        train_samples(state, train, &order, rule, norm, stream, |seen, st| {
            let now = total + seen as u64;
            if now / opts.eval_every as u64 > last_eval / opts.eval_every as u64 {
                let ev = evaluate(st, label_set, eval_set, eval_seed)?;
                points.push((now, ev.accuracy));
                labels = Some(ev.labels);
                last_eval = now;
            }
            Ok(())
        })?;
        total += order.len() as u64;
    }
    if last_eval != total {
        let ev = evaluate(state, label_set, eval_set, eval_seed)?;
        points.push((total, ev.accuracy));
        labels = Some(ev.labels);
    }
    if labels.is_some() {
        state.labels = labels;
    }
    Ok(RepairReport::from_points(opts.rule, points, opts.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SnnConfig {
        SnnConfig {
            n_input: 3,
            n_neuron: 2,
            w_max: None,
            ..SnnConfig::mnist(2)
        }
    }

    #[test]
    fn q_examples() {
        let w0 = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 2.0]).unwrap();
        let ctx = snapshot_baseline(&w0, 0.01).unwrap();
        assert_eq!(ctx.w0_sums(), &[4.0, 4.0]);
        let healthy = FaultMask::healthy(2, 2);
        assert_eq!(compute_q_local(&w0, &healthy, &ctx).unwrap(), vec![Some(1.0), Some(1.0)]);

        let mut half = w0.clone();
        half.set(0, 0, 0.0);
        half.set(1, 1, 0.0);
        half.set(1, 0, 2.0);
        let q = compute_q_local(&half, &healthy, &ctx).unwrap();
        assert_eq!(q, vec![Some(2.0), Some(2.0)]);

        let drifted = Matrix::from_vec(2, 2, w0.as_slice().iter().map(|w| w * 0.8).collect()).unwrap();
        let q = compute_q_local(&drifted, &healthy, &ctx).unwrap();
        assert!((q[0].unwrap() - 1.25).abs() < 1e-12);

        let zero = Matrix::zeros(2, 2);
        assert_eq!(compute_q_local(&zero, &healthy, &ctx).unwrap(), vec![None, None]);
        assert!(snapshot_baseline(&Matrix::filled(1, 1, -1.0), 0.01).is_err());
    }

    #[test]
    fn snapshot_is_independent_of_later_mutation() {
        let mut w = Matrix::filled(2, 2, 0.5);
        let ctx = snapshot_baseline(&w, 0.01).unwrap();
        w.set(0, 0, 9.0);
        assert_eq!(ctx.w0().get(0, 0), 0.5);
    }

    #[test]
    fn potentiation_examples() {
        let c = cfg();
        let mask = FaultMask::healthy(3, 2);
        let w0 = Matrix::from_vec(3, 2, vec![0.2, 0.0, 0.3, 0.5, 0.0, 0.1]).unwrap();
        let q = [Some(1.0), Some(2.0)];

        let mut w = w0.clone();
        for j in 0..2 {
            for i in 0..3 {
                w.set(i, j, q[j].unwrap() * w0.get(i, j));
            }
        }
        let fixed = w.clone();
        astdp_local_update(&mut w, &w0, &mask, &q, 0.01, &[1.0; 3], &[0.0; 2], &[], &[0, 1], &c);
        assert_eq!(w, fixed);

        // w0 = 0 drives the synapse to 0.
        let mut w = Matrix::filled(3, 2, 0.4);
        astdp_local_update(&mut w, &w0, &mask, &q, 0.01, &[1.0; 3], &[0.0; 2], &[], &[0], &c);
        assert_eq!(w.get(2, 0), 0.0);

        // eta_post = 0.01, x = 1, tau = 0.01, gap 0.05 → +0.05 (full step).
        let mut w = Matrix::filled(3, 2, 0.15);
        astdp_local_update(&mut w, &w0, &mask, &q, 0.01, &[1.0; 3], &[0.0; 2], &[], &[0], &c);
        assert!((w.get(0, 0) - 0.2).abs() < 1e-15);

        // Half-step with a larger tau.
        let mut w = Matrix::filled(3, 2, 0.15);
        astdp_local_update(&mut w, &w0, &mask, &q, 0.02, &[1.0; 3], &[0.0; 2], &[], &[0], &c);
        assert!((w.get(0, 0) - 0.175).abs() < 1e-15);
    }

    #[test]
    fn rule_names_parse() {
        assert_eq!("astdp-local".parse::<RepairRule>().unwrap(), RepairRule::AstdpLocal);
        assert_eq!("STDP".parse::<RepairRule>().unwrap(), RepairRule::Stdp);
        assert!("hebb".parse::<RepairRule>().is_err());
    }

    #[test]
    fn report_best_is_first_maximum() {
        let r = RepairReport::from_points(RepairRule::Stdp, vec![(0, 20.0), (1000, 60.0), (2000, 60.0), (3000, 50.0)], 4);
        assert_eq!(r.best_acc, 60.0);
        assert_eq!(r.steps_to_best, 1000);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("samples_seen,accuracy\n0,20.0000\n"));
        assert!(text.ends_with("# 60.0000,1000,4\n"));
    }

    #[test]
    fn injection_archives_baseline_and_zeroes_mask() {
        let mut s = NetworkState::new(SnnConfig::mnist(5), 1).unwrap();
        let before = s.weights.clone();
        inject_faults(&mut s, 0.5, Some(&DriftSpec::default()), 3).unwrap();
        assert_eq!(s.baseline.as_ref(), Some(&before));
        for (w, &m) in s.weights.as_slice().iter().zip(s.fault_mask.as_slice()) {
            if m {
                assert_eq!(*w, 0.0);
            }
        }
        let frac = s.fault_mask.fraction();
        assert!((frac - 0.5).abs() < 0.05);
    }
}
