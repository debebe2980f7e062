//! Unsupervised image-recognition network: Poisson rate coding, an LIF
//! output layer with adaptive thresholds and one-step lateral inhibition,
//! trace-based STDP, and per-batch weight normalization.
//!
//! Training runs in batches. Every image of a batch is simulated against the
//! same frozen weights and thresholds; each image accumulates its own weight
//! changes, which are merged in image order at the end of the batch before the
//! thresholds are updated and the weights normalized.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hardware::FaultMask;
use crate::matrix::{Matrix, SynapseMatrix};
use crate::seed::{self, SimRng};

pub const N_CLASSES: usize = 10;
pub const CHECKPOINT_MAGIC: &[u8; 10] = b"ASTROSNN1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Mnist,
    Fmnist,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Self::Mnist),
            "fmnist" | "fashion-mnist" | "fashion_mnist" => Ok(Self::Fmnist),
            other => Err(Error::Config(format!("unknown dataset '{other}' (mnist|fmnist)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Fmnist => "fmnist",
        })
    }
}

/// Network and learning hyperparameters. Times in ms, potentials in mV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnConfig {
    pub dataset: DatasetKind,
    pub n_input: usize,
    pub n_neuron: usize,
    pub time_per_image: f64,
    pub dt: f64,
    pub tau_v: f64,
    pub refractory: f64,
    pub v_res: f64,
    pub v_reset: f64,
    pub v_th: f64,
    /// Threshold increment per spike.
    pub theta_plus: f64,
    pub tau_theta: f64,
    pub trace_tau: f64,
    /// Lateral inhibition added to every other neuron one step after a spike.
    pub w_inh: f64,
    /// Poisson rate of a full-intensity pixel (spikes/s).
    pub max_rate: f64,
    pub eta_post: f64,
    pub eta_pre: f64,
    /// Per-neuron weight sum enforced during baseline training.
    pub norm_factor: f64,
    /// Lower bound on the per-neuron weight sum during repair retraining,
    /// as a fraction of `norm_factor`.
    pub lb: f64,
    /// Repair time constant of the local astrocyte-inspired rule.
    pub repair_tau: f64,
    pub batch_size: usize,
    /// Initial weights are drawn from U(0, w_init_max).
    pub w_init_max: f64,
    /// Optional upper clip on individual weights.
    pub w_max: Option<f64>,
    /// Emit at most one output spike per step, chosen uniformly among the
    /// neurons that crossed threshold.
    pub one_spike: bool,
}

impl SnnConfig {
    pub fn mnist(n_neuron: usize) -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            n_input: 784,
            n_neuron,
            time_per_image: 100.0,
            dt: 1.0,
            tau_v: 100.0,
            refractory: 5.0,
            v_res: -65.0,
            v_reset: -60.0,
            v_th: -52.0,
            theta_plus: 0.05,
            tau_theta: 1e7,
            trace_tau: 20.0,
            w_inh: -120.0,
            max_rate: 128.0,
            eta_post: 1e-2,
            eta_pre: 1e-4,
            norm_factor: 78.4,
            lb: 0.17,
            repair_tau: 1e-2,
            batch_size: 16,
            w_init_max: 0.3,
            w_max: None,
            one_spike: true,
        }
    }

    pub fn fmnist(n_neuron: usize) -> Self {
        Self {
            dataset: DatasetKind::Fmnist,
            w_inh: -250.0,
            max_rate: 45.0,
            eta_post: 4e-3,
            eta_pre: 4e-5,
            repair_tau: 4e-3,
            lb: 0.22,
            ..Self::mnist(n_neuron)
        }
    }

    pub fn for_dataset(kind: DatasetKind, n_neuron: usize) -> Self {
        match kind {
            DatasetKind::Mnist => Self::mnist(n_neuron),
            DatasetKind::Fmnist => Self::fmnist(n_neuron),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("time_per_image", self.time_per_image),
            ("dt", self.dt),
            ("tau_v", self.tau_v),
            ("tau_theta", self.tau_theta),
            ("trace_tau", self.trace_tau),
            ("repair_tau", self.repair_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.v_reset < self.v_th) {
            return Err(Error::Config("v_reset must lie below v_th".into()));
        }
        if self.n_input == 0 || self.n_neuron == 0 || self.batch_size == 0 {
            return Err(Error::Config("n_input, n_neuron and batch_size must be nonzero".into()));
        }
        if self.max_rate * self.dt / 1000.0 > 1.0 {
            return Err(Error::Config(format!(
                "max_rate {} /s exceeds one spike per {} ms bin",
                self.max_rate, self.dt
            )));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.time_per_image / self.dt).round() as usize
    }

    /// Minimum per-neuron weight sum during repair retraining.
    pub fn lb_sum(&self) -> f64 {
        self.lb * self.norm_factor
    }
}

/// Named seeds that produced a network, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedLineage(pub Vec<(String, u64)>);

impl SeedLineage {
    pub fn push(&mut self, stage: &str, seed: u64) {
        self.0.push((stage.to_string(), seed));
    }
}

/// Persistent network state: plastic weights (`n_input × n_neuron`),
/// adaptive thresholds, stuck-at mask, and bookkeeping carried through
/// checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: SnnConfig,
    pub weights: Matrix,
    pub theta: Vec<f64>,
    pub fault_mask: FaultMask,
    /// Pre-fault weights, recorded when faults are first injected.
    pub baseline: Option<Matrix>,
    pub labels: Option<Vec<Option<u8>>>,
    pub lineage: SeedLineage,
    /// Samples consumed by training so far.
    pub samples_trained: u64,
}

impl NetworkState {
    /// Fresh network with U(0, w_init_max) weights.
    pub fn new(config: SnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive_labeled(seed, "snn/init"));
        let dist = Uniform::new_inclusive(0.0, config.w_init_max)
            .map_err(|e| Error::Config(format!("w_init_max: {e}")))?;
        let weights = Matrix::from_fn(config.n_input, config.n_neuron, |_, _| dist.sample(&mut rng));
        let mut lineage = SeedLineage::default();
        lineage.push("init", seed);
        Ok(Self {
            theta: vec![0.0; config.n_neuron],
            fault_mask: FaultMask::healthy(config.n_input, config.n_neuron),
            weights,
            baseline: None,
            labels: None,
            lineage,
            samples_trained: 0,
            config,
        })
    }

    fn check(&self) -> Result<()> {
        let c = &self.config;
        self.weights.ensure_shape(c.n_input, c.n_neuron)?;
        if self.theta.len() != c.n_neuron {
            return Err(Error::Dimension {
                expected: c.n_neuron,
                got: self.theta.len(),
            });
        }
        if self.fault_mask.shape() != (c.n_input, c.n_neuron) {
            return Err(Error::Dimension {
                expected: c.n_input * c.n_neuron,
                got: self.fault_mask.as_slice().len(),
            });
        }
        Ok(())
    }
}

/// Input spikes of one presentation, stored as active input indices per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeRaster {
    pub n_input: usize,
    offsets: Vec<u32>,
    indices: Vec<u16>,
}

impl SpikeRaster {
    pub fn n_steps(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn step(&self, t: usize) -> &[u16] {
        &self.indices[self.offsets[t] as usize..self.offsets[t + 1] as usize]
    }

    pub fn total_spikes(&self) -> usize {
        self.indices.len()
    }

    /// Spike count of each input.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_input];
        for &i in &self.indices {
            c[i as usize] += 1;
        }
        c
    }
}

fn encode_with(probabilities: &[f64], n_steps: usize, rng: &mut impl Rng) -> SpikeRaster {
    let active: Vec<(u16, f64)> = probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (i as u16, p))
        .collect();
    let mut offsets = Vec::with_capacity(n_steps + 1);
    let mut indices = Vec::new();
    offsets.push(0);
    for _ in 0..n_steps {
        for &(i, p) in &active {
            if rng.random::<f64>() < p {
                indices.push(i);
            }
        }
        offsets.push(indices.len() as u32);
    }
    SpikeRaster {
        n_input: probabilities.len(),
        offsets,
        indices,
    }
}

/// Bernoulli(intensity · max_rate · dt) spikes per pixel and bin.
/// `max_rate` in spikes/s, `duration` and `dt` in ms.
pub fn encode_poisson(intensity: &[f64], max_rate: f64, duration: f64, dt: f64, seed: u64) -> Result<SpikeRaster> {
    if max_rate * dt / 1000.0 > 1.0 || !(dt > 0.0) {
        return Err(Error::Config(format!(
            "rate {max_rate} /s with dt {dt} ms exceeds one spike per bin"
        )));
    }
    if intensity.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain("pixel intensities must lie in [0, 1]".into()));
    }
    if intensity.len() > usize::from(u16::MAX) {
        return Err(Error::Config("too many inputs for the raster encoding".into()));
    }
    let scale = max_rate * dt / 1000.0;
    let p: Vec<f64> = intensity.iter().map(|x| x * scale).collect();
    let mut rng = seed::rng(seed);
    Ok(encode_with(&p, (duration / dt).round() as usize, &mut rng))
}

fn encode_bytes(pixels: &[u8], cfg: &SnnConfig, rng: &mut SimRng) -> SpikeRaster {
    let scale = cfg.max_rate * cfg.dt / 1000.0;
    let p: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0 * scale).collect();
    encode_with(&p, cfg.n_steps(), rng)
}

/// How post-synaptic spikes potentiate incoming synapses during a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Potentiation {
    /// `w += eta_post · x_pre`.
    Additive,
    /// `w += min(1, rate · x_pre) · (target − w)` for neurons flagged active;
    /// inactive neurons fall back to additive potentiation.
    Toward {
        targets: Matrix,
        active: Vec<bool>,
        /// `eta_post / tau`.
        rate: f64,
    },
}

/// A learning rule decides, at the start of every batch, how potentiation
/// behaves for that batch. Depression is shared by all rules.
pub trait PlasticityRule: Sync {
    fn plan(&self, state: &NetworkState) -> Result<Potentiation>;

    fn name(&self) -> &'static str;
}

/// Plain trace-based STDP.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stdp;

impl PlasticityRule for Stdp {
    fn plan(&self, _: &NetworkState) -> Result<Potentiation> {
        Ok(Potentiation::Additive)
    }

    fn name(&self) -> &'static str {
        "stdp"
    }
}

fn clip_weight(w: f64, cfg: &SnnConfig) -> f64 {
    let w = w.max(0.0);
    cfg.w_max.map_or(w, |m| w.min(m))
}

/// Apply one step of trace-based STDP directly to `weights`: every spiking
/// input `i` loses `eta_pre · x_post[j]` on each synapse, then every spiking
/// neuron `j` gains `eta_post · x_pre[i]` on each synapse. Masked synapses
/// are skipped and weights are clipped to the allowed range.
#[allow(clippy::too_many_arguments)]
pub fn stdp_update<M: SynapseMatrix + ?Sized>(
    weights: &mut M,
    mask: &FaultMask,
    x_pre: &[f64],
    x_post: &[f64],
    fired_pre: &[usize],
    fired_post: &[usize],
    cfg: &SnnConfig,
) {
    for &i in fired_pre {
        for (j, &x) in x_post.iter().enumerate() {
            if !mask.is_faulty(i, j) {
                let w = weights.weight(i, j) - cfg.eta_pre * x;
                weights.set_weight(i, j, clip_weight(w, cfg));
            }
        }
    }
    for &j in fired_post {
        for (i, &x) in x_pre.iter().enumerate() {
            if !mask.is_faulty(i, j) {
                let w = weights.weight(i, j) + cfg.eta_post * x;
                weights.set_weight(i, j, clip_weight(w, cfg));
            }
        }
    }
}

/// Per-image plasticity accumulator, laid out like the weight matrix.
/// `pot` holds additive sums, or contraction products for neurons whose
/// potentiation moves toward a target.
#[derive(Debug, Clone)]
pub struct Accumulator {
    pub pot: Vec<f64>,
    pub dep: Vec<f64>,
}

impl Accumulator {
    fn new(n_input: usize, n_neuron: usize, plan: &Potentiation) -> Self {
        let mut pot = vec![0.0; n_input * n_neuron];
        if let Potentiation::Toward { active, .. } = plan {
            for row in pot.chunks_mut(n_neuron) {
                for (p, &a) in row.iter_mut().zip(active) {
                    if a {
                        *p = 1.0;
                    }
                }
            }
        }
        Self {
            pot,
            dep: vec![0.0; n_input * n_neuron],
        }
    }
}

/// Result of presenting one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResponse {
    /// Output spikes per neuron.
    pub counts: Vec<u32>,
    /// Threshold crossings per neuron (including crossings suppressed by the
    /// one-spike rule), used for threshold adaptation.
    pub crossings: Vec<u32>,
}

/// Per-presentation dynamic state: membrane potentials, refractory timers
/// and spike traces. Traces are stored as the step of the most recent spike;
/// the trace value is `exp(−(t − t_last) · dt / trace_tau)`.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub v: Vec<f64>,
    pub refractory: Vec<f64>,
    pub last_pre: Vec<i64>,
    pub last_post: Vec<i64>,
    /// Output spikes of the previous step (drive the lateral inhibition).
    pub prev_spikes: Vec<usize>,
    pub t: i64,
    current: Vec<f64>,
    crossed: Vec<usize>,
    trace_decay: Vec<f64>,
    v_decay: f64,
}

impl Dynamics {
    pub fn new(cfg: &SnnConfig) -> Self {
        let steps = cfg.n_steps().max(1);
        Self {
            v: vec![cfg.v_res; cfg.n_neuron],
            refractory: vec![0.0; cfg.n_neuron],
            last_pre: vec![-1; cfg.n_input],
            last_post: vec![-1; cfg.n_neuron],
            prev_spikes: Vec::new(),
            t: 0,
            current: vec![0.0; cfg.n_neuron],
            crossed: Vec::new(),
            trace_decay: (0..=steps * 4)
                .map(|k| (-(k as f64) * cfg.dt / cfg.trace_tau).exp())
                .collect(),
            v_decay: (-cfg.dt / cfg.tau_v).exp(),
        }
    }

    fn decay(&self, last: i64, trace_tau_steps: f64) -> f64 {
        if last < 0 {
            return 0.0;
        }
        let k = (self.t - last) as usize;
        self.trace_decay
            .get(k)
            .copied()
            .unwrap_or_else(|| (-(k as f64) / trace_tau_steps).exp())
    }

    /// Presynaptic trace of input `i` at the current step.
    pub fn x_pre(&self, i: usize, cfg: &SnnConfig) -> f64 {
        self.decay(self.last_pre[i], cfg.trace_tau / cfg.dt)
    }

    /// Postsynaptic trace of neuron `j` at the current step.
    pub fn x_post(&self, j: usize, cfg: &SnnConfig) -> f64 {
        self.decay(self.last_post[j], cfg.trace_tau / cfg.dt)
    }
}

/// Advance the output layer by one step. Input current is the summed weight
/// of spiking inputs plus `w_inh` per spike emitted by other neurons on the
/// previous step. `theta_inc` (if given) accumulates threshold increments
/// instead of modifying `theta` directly. Returns the emitted spikes; traces
/// are updated to include this step's spikes.
#[allow(clippy::too_many_arguments)]
pub fn step_network(
    dynamics: &mut Dynamics,
    weights: &Matrix,
    theta: &[f64],
    mut theta_inc: Option<&mut [f64]>,
    input_spikes: &[u16],
    cfg: &SnnConfig,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let d = dynamics;
    d.current.iter_mut().for_each(|c| *c = 0.0);
    for &i in input_spikes {
        for (c, w) in d.current.iter_mut().zip(weights.row(i as usize)) {
            *c += w;
        }
    }
    if !d.prev_spikes.is_empty() {
        let total = d.prev_spikes.len() as f64;
        for c in d.current.iter_mut() {
            *c += cfg.w_inh * total;
        }
        for &j in &d.prev_spikes {
            d.current[j] -= cfg.w_inh;
        }
    }

    d.crossed.clear();
    for j in 0..cfg.n_neuron {
        d.v[j] = d.v_decay * (d.v[j] - cfg.v_res) + cfg.v_res;
        if d.refractory[j] <= 0.0 {
            d.v[j] += d.current[j];
        }
        d.refractory[j] -= cfg.dt;
        let threshold = cfg.v_th + theta[j] + theta_inc.as_ref().map_or(0.0, |inc| inc[j]);
        if d.v[j] >= threshold {
            d.crossed.push(j);
        }
    }
    for &j in &d.crossed {
        d.v[j] = cfg.v_reset;
        d.refractory[j] = cfg.refractory;
        if let Some(inc) = theta_inc.as_deref_mut() {
            inc[j] += cfg.theta_plus;
        }
    }
    let emitted = if cfg.one_spike && d.crossed.len() > 1 {
        vec![d.crossed[rng.random_range(0..d.crossed.len())]]
    } else {
        d.crossed.clone()
    };

    for &i in input_spikes {
        d.last_pre[i as usize] = d.t;
    }
    for &j in &emitted {
        d.last_post[j] = d.t;
    }
    d.prev_spikes.clone_from(&emitted);
    emitted
}

fn accumulate_plasticity(
    acc: &mut Accumulator,
    d: &Dynamics,
    input_spikes: &[u16],
    emitted: &[usize],
    plan: &Potentiation,
    cfg: &SnnConfig,
) {
    let n = cfg.n_neuron;
    let tau_steps = cfg.trace_tau / cfg.dt;
    if !input_spikes.is_empty() {
        let x_post: Vec<f64> = (0..n).map(|j| d.decay(d.last_post[j], tau_steps)).collect();
        if x_post.iter().any(|&x| x > 0.0) {
            for &i in input_spikes {
                let row = &mut acc.dep[i as usize * n..(i as usize + 1) * n];
                for (r, x) in row.iter_mut().zip(&x_post) {
                    *r += cfg.eta_pre * x;
                }
            }
        }
    }
    for &j in emitted {
        let toward = match plan {
            Potentiation::Toward { active, rate, .. } if active[j] => Some(*rate),
            _ => None,
        };
        for i in 0..cfg.n_input {
            let x = d.decay(d.last_pre[i], tau_steps);
            if x == 0.0 {
                continue;
            }
            let slot = &mut acc.pot[i * n + j];
            match toward {
                Some(rate) => *slot *= 1.0 - (rate * x).min(1.0),
                None => *slot += cfg.eta_post * x,
            }
        }
    }
}

/// Present one image. With `plan` set, thresholds adapt and plasticity is
/// accumulated; otherwise the network is read out with frozen state.
fn present(
    state: &NetworkState,
    pixels: &[u8],
    sample_seed: u64,
    plan: Option<&Potentiation>,
) -> (ImageResponse, Option<Accumulator>) {
    let cfg = &state.config;
    let mut rng = seed::rng(sample_seed);
    let raster = encode_bytes(pixels, cfg, &mut rng);
    let mut d = Dynamics::new(cfg);
    let mut acc = plan.map(|p| Accumulator::new(cfg.n_input, cfg.n_neuron, p));
    let mut theta_inc = vec![0.0; cfg.n_neuron];
    let mut counts = vec![0u32; cfg.n_neuron];
    let mut crossings = vec![0u32; cfg.n_neuron];
    for t in 0..raster.n_steps() {
        d.t = t as i64;
        let spikes = raster.step(t);
        let inc = plan.map(|_| theta_inc.as_mut_slice());
        let emitted = step_network(&mut d, &state.weights, &state.theta, inc, spikes, cfg, &mut rng);
        for &j in &d.crossed {
            crossings[j] += 1;
        }
        for &j in &emitted {
            counts[j] += 1;
        }
        if let (Some(a), Some(p)) = (acc.as_mut(), plan) {
            accumulate_plasticity(a, &d, spikes, &emitted, p, cfg);
        }
    }
    (ImageResponse { counts, crossings }, acc)
}

/// Spike counts for one image with learning disabled.
pub fn respond(state: &NetworkState, pixels: &[u8], sample_seed: u64) -> ImageResponse {
    present(state, pixels, sample_seed, None).0
}

/// Merge one batch of accumulators (in image order) into the weights.
fn apply_batch(state: &mut NetworkState, accs: &[Accumulator], responses: &[ImageResponse], plan: &Potentiation) {
    let cfg = state.config.clone();
    let n = cfg.n_neuron;
    let len = cfg.n_input * n;
    let mut pot = accs[0].pot.clone();
    let mut dep = accs[0].dep.clone();
    let toward = match plan {
        Potentiation::Toward { targets, active, .. } => Some((targets, active)),
        Potentiation::Additive => None,
    };
    for a in &accs[1..] {
        for k in 0..len {
            dep[k] += a.dep[k];
        }
        match toward {
            None => pot.iter_mut().zip(&a.pot).for_each(|(p, x)| *p += x),
            Some((_, active)) => {
                for k in 0..len {
                    if active[k % n] {
                        pot[k] *= a.pot[k];
                    } else {
                        pot[k] += a.pot[k];
                    }
                }
            }
        }
    }
    let mask = state.fault_mask.as_slice();
    let w = state.weights.as_mut_slice();
    for k in 0..len {
        if mask[k] {
            continue;
        }
        let potentiated = match toward {
            Some((targets, active)) if active[k % n] => {
                let target = targets.as_slice()[k];
                target - (target - w[k]) * pot[k]
            }
            _ => w[k] + pot[k],
        };
        w[k] = clip_weight(potentiated - dep[k], &cfg);
    }

    let decay = (-cfg.time_per_image / cfg.tau_theta).exp();
    for j in 0..n {
        let crossings: u32 = responses.iter().map(|r| r.crossings[j]).sum();
        state.theta[j] = state.theta[j] * decay + cfg.theta_plus * f64::from(crossings);
    }
}

/// Per-batch normalization target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormMode {
    /// Every neuron's weight sum set to a fixed value.
    Fixed { target: f64 },
    /// Every neuron's weight sum set to the network mean, but never below
    /// `lb_sum`.
    MeanWithLowerBound { lb_sum: f64 },
}

/// Rescale each neuron's (unmasked) incoming weights to a common sum.
/// Neurons whose sum is zero are left as they are. Returns the target sum.
pub fn normalize_weights(weights: &mut Matrix, mask: &FaultMask, mode: NormMode) -> f64 {
    let sums = weights.column_sums();
    let target = match mode {
        NormMode::Fixed { target } => target,
        NormMode::MeanWithLowerBound { lb_sum } => {
            let mean = sums.iter().sum::<f64>() / sums.len() as f64;
            mean.max(lb_sum)
        }
    };
    let scale: Vec<f64> = sums
        .iter()
        .map(|&s| if s > 0.0 { target / s } else { 1.0 })
        .collect();
    let n = weights.cols();
    let m = mask.as_slice();
    for (k, w) in weights.as_mut_slice().iter_mut().enumerate() {
        if !m[k] {
            *w *= scale[k % n];
        }
    }
    target
}

/// Shuffled presentation order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed::derive_seed(seed::derive_labeled(seed, "snn/order"), epoch));
    order.shuffle(&mut rng);
    order
}

/// Per-sample seed for presentation `k` of a training stream.
fn sample_seed(stream: u64, k: u64) -> u64 {
    seed::derive_seed(stream, k)
}

/// Train on `order` (indices into `data`) in batches. After every batch the
/// weights are normalized with `norm` and `on_batch(samples_seen, state)`
/// is called, where `samples_seen` counts samples within this call.
pub fn train_samples<R: PlasticityRule + ?Sized>(
    state: &mut NetworkState,
    data: &Dataset,
    order: &[usize],
    rule: &R,
    norm: NormMode,
    stream_seed: u64,
    mut on_batch: impl FnMut(usize, &NetworkState) -> Result<()>,
) -> Result<()> {
    state.check()?;
    if data.pixels_per_image() != state.config.n_input {
        return Err(Error::Dimension {
            expected: state.config.n_input,
            got: data.pixels_per_image(),
        });
    }
    let batch = state.config.batch_size;
    let mut seen = 0usize;
    for chunk in order.chunks(batch) {
        let plan = rule.plan(state)?;
        let snapshot = &*state;
        let base = seen as u64;
        let results: Vec<(ImageResponse, Accumulator)> = chunk
            .par_iter()
            .enumerate()
            .map(|(b, &idx)| {
                let (resp, acc) = present(
                    snapshot,
                    data.image(idx),
                    sample_seed(stream_seed, base + b as u64),
                    Some(&plan),
                );
                (resp, acc.expect("learning presentation accumulates"))
            })
            .collect();
        let (responses, accs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        apply_batch(state, &accs, &responses, &plan);
        normalize_weights(&mut state.weights, &state.fault_mask, norm);
        if state.weights.as_slice().iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite weight after batch update".into()));
        }
        seen += chunk.len();
        state.samples_trained += chunk.len() as u64;
        on_batch(seen, state)?;
    }
    Ok(())
}

/// Baseline STDP training with fixed per-neuron weight sums.
pub fn train(state: &mut NetworkState, data: &Dataset, epochs: usize, seed: u64) -> Result<()> {
    let norm = NormMode::Fixed {
        target: state.config.norm_factor,
    };
    normalize_weights(&mut state.weights, &state.fault_mask, norm);
    state.lineage.push("train", seed);
    for epoch in 0..epochs as u64 {
        let order = epoch_order(data.len(), seed, epoch);
        let stream = seed::derive_seed(seed::derive_labeled(seed, "snn/train"), epoch);
        train_samples(state, data, &order, &Stdp, norm, stream, |_, _| Ok(()))?;
    }
    Ok(())
}

/// Class of each neuron: the label with the highest mean spike count
/// (lowest class on ties), or `None` for neurons that never fired.
pub fn assign_labels(counts: &[Vec<u32>], labels: &[u8]) -> Result<Vec<Option<u8>>> {
    if counts.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: counts.len(),
        });
    }
    let n = counts.first().map_or(0, Vec::len);
    let mut per_class = vec![0usize; N_CLASSES];
    let mut sums = vec![[0.0f64; N_CLASSES]; n];
    for (c, &l) in counts.iter().zip(labels) {
        per_class[usize::from(l)] += 1;
        for (s, &x) in sums.iter_mut().zip(c) {
            s[usize::from(l)] += f64::from(x);
        }
    }
    Ok(sums
        .iter()
        .map(|s| {
            let mut best: Option<(usize, f64)> = None;
            for (class, &total) in s.iter().enumerate() {
                if per_class[class] == 0 {
                    continue;
                }
                let rate = total / per_class[class] as f64;
                if rate > 0.0 && best.is_none_or(|(_, b)| rate > b) {
                    best = Some((class, rate));
                }
            }
            best.map(|(c, _)| c as u8)
        })
        .collect())
}

/// Class whose assigned neurons have the highest mean spike count; ties go
/// to the lowest class. A silent response yields `fallback`.
pub fn classify_counts(counts: &[u32], labels: &[Option<u8>], fallback: u8) -> u8 {
    let mut sum = [0.0f64; N_CLASSES];
    let mut members = [0usize; N_CLASSES];
    for (&c, l) in counts.iter().zip(labels) {
        if let Some(l) = l {
            sum[usize::from(*l)] += f64::from(c);
            members[usize::from(*l)] += 1;
        }
    }
    let mut best = None;
    for class in 0..N_CLASSES {
        if members[class] == 0 {
            continue;
        }
        let mean = sum[class] / members[class] as f64;
        if mean > 0.0 && best.is_none_or(|(_, b)| mean > b) {
            best = Some((class, mean));
        }
    }
    best.map_or(fallback, |(c, _)| c as u8)
}

/// Most frequent label (lowest on ties).
pub fn majority_label(labels: &[u8]) -> u8 {
    let mut hist = [0usize; N_CLASSES];
    for &l in labels {
        hist[usize::from(l)] += 1;
    }
    (0..N_CLASSES).max_by_key(|&c| (hist[c], std::cmp::Reverse(c))).unwrap_or(0) as u8
}

/// Predict the class of one image.
pub fn classify(state: &NetworkState, labels: &[Option<u8>], fallback: u8, pixels: &[u8], sample_seed: u64) -> u8 {
    classify_counts(&respond(state, pixels, sample_seed).counts, labels, fallback)
}

/// Spike counts for every image of a dataset (parallel, deterministic).
pub fn record_responses(state: &NetworkState, data: &Dataset, stream_seed: u64) -> Vec<Vec<u32>> {
    (0..data.len())
        .into_par_iter()
        .map(|k| respond(state, data.image(k), sample_seed(stream_seed, k as u64)).counts)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percent correct on the test set.
    pub accuracy: f64,
    pub labels: Vec<Option<u8>>,
    pub predictions: Vec<u8>,
}

/// Assign neuron labels from `label_set`, then classify `test_set`.
/// Thresholds and weights stay frozen.
pub fn evaluate(state: &NetworkState, label_set: &Dataset, test_set: &Dataset, seed: u64) -> Result<Evaluation> {
    state.check()?;
    if test_set.is_empty() || label_set.is_empty() {
        return Err(Error::Config("evaluation needs non-empty labeling and test sets".into()));
    }
    let label_counts = record_responses(state, label_set, seed::derive_labeled(seed, "eval/label"));
    let labels = assign_labels(&label_counts, label_set.labels())?;
    let fallback = majority_label(label_set.labels());
    let test_counts = record_responses(state, test_set, seed::derive_labeled(seed, "eval/test"));
    let predictions: Vec<u8> = test_counts
        .iter()
        .map(|c| classify_counts(c, &labels, fallback))
        .collect();
    let correct = predictions
        .iter()
        .zip(test_set.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / test_set.len() as f64,
        labels,
        predictions,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: SnnConfig,
    n_input: usize,
    n_neuron: usize,
    lineage: SeedLineage,
    labels: Option<Vec<Option<u8>>>,
    has_baseline: bool,
    samples_trained: u64,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Layout: magic line, little-endian u64 header length, JSON header, then
/// row-major f64 weights, f64 theta, one byte per mask entry, and the
/// baseline weights if present.
pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    state.check()?;
    let header = CheckpointHeader {
        config: state.config.clone(),
        n_input: state.config.n_input,
        n_neuron: state.config.n_neuron,
        lineage: state.lineage.clone(),
        labels: state.labels.clone(),
        has_baseline: state.baseline.is_some(),
        samples_trained: state.samples_trained,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f64s(&mut out, state.weights.as_slice());
    put_f64s(&mut out, &state.theta);
    out.extend(state.fault_mask.as_slice().iter().map(|&b| u8::from(b)));
    if let Some(b) = &state.baseline {
        put_f64s(&mut out, b.as_slice());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let truncated = |what: &str| Error::Truncated {
        path: path.into(),
        detail: format!("missing {what}"),
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(truncated("header"));
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::DataFormat {
            path: path.into(),
            detail: "not an ASTROSNN1 checkpoint".into(),
        });
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let hbytes = bytes.get(pos..pos + hlen).ok_or_else(|| truncated("header"))?;
    let header: CheckpointHeader = serde_json::from_slice(hbytes).map_err(|e| Error::DataFormat {
        path: path.into(),
        detail: format!("checkpoint header: {e}"),
    })?;
    pos += hlen;
    let (ni, nn) = (header.n_input, header.n_neuron);
    let mut take_f64 = |count: usize, what: &str| -> Result<Vec<f64>> {
        let raw = bytes.get(pos..pos + count * 8).ok_or_else(|| truncated(what))?;
        pos += count * 8;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let weights = Matrix::from_vec(ni, nn, take_f64(ni * nn, "weights")?)?;
    let theta = take_f64(nn, "theta")?;
    let mask_raw = bytes.get(pos..pos + ni * nn).ok_or_else(|| truncated("fault mask"))?;
    let fault_mask = FaultMask::from_bits(ni, nn, mask_raw.iter().map(|&b| b != 0).collect())?;
    pos += ni * nn;
    let baseline = if header.has_baseline {
        let raw = bytes.get(pos..pos + ni * nn * 8).ok_or_else(|| truncated("baseline weights"))?;
        let v = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some(Matrix::from_vec(ni, nn, v)?)
    } else {
        None
    };
    let state = NetworkState {
        config: header.config,
        weights,
        theta,
        fault_mask,
        baseline,
        labels: header.labels,
        lineage: header.lineage,
        samples_trained: header.samples_trained,
    };
    state.check()?;
    Ok(state)
}
