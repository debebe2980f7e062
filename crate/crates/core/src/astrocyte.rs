//! Two-neuron-one-astrocyte biophysics.
//!
//! Two LIF neurons (N1, N2) each receive Poisson input through synapses whose
//! release probability (PR) is modulated by a neuron-local depression term
//! (DSE, driven by the neuron's own 2-AG) and an astrocyte-wide potentiation
//! term (eSP, driven by glutamate released on Ca²⁺ threshold crossings).
//! The astrocyte Ca²⁺ dynamics follow the two-variable Li-Rinzel reduction
//! with IP3 produced in proportion to 2-AG receptor occupancy.
//!
//! Time is in milliseconds throughout the public API; the Li-Rinzel rate
//! constants are per second and converted internally.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hardware::DriftSpec;
use crate::seed::{self, SimRng};

/// Li-Rinzel constants (µM, s⁻¹). Values follow the amplitude-modulating
/// parameter set of De Pittà et al. (2009), which oscillates with a period of
/// roughly 11 s for IP3 between about 0.37 and 0.65 µM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiRinzelParams {
    /// Total free Ca²⁺ content (µM).
    pub c0: f64,
    /// ER-to-cytosol volume ratio.
    pub c1: f64,
    /// Maximal IP3R channel rate (s⁻¹).
    pub r_c: f64,
    /// ER leak rate (s⁻¹).
    pub r_l: f64,
    /// Maximal SERCA uptake (µM/s).
    pub v_er: f64,
    /// SERCA affinity (µM).
    pub k_er: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d5: f64,
    /// IP3R inactivation binding rate (µM⁻¹ s⁻¹).
    pub a2: f64,
}

impl Default for LiRinzelParams {
    fn default() -> Self {
        Self {
            c0: 2.0,
            c1: 0.185,
            r_c: 6.0,
            r_l: 0.11,
            v_er: 0.9,
            k_er: 0.1,
            d1: 0.13,
            d2: 1.049,
            d3: 0.9434,
            d5: 0.08234,
            a2: 0.2,
        }
    }
}

/// Calibrated signaling constants.
///
/// Calibration targets: with 10 synapses per neuron at 10 Hz and mean initial
/// PR 0.5, both neurons settle near 10 Hz, Ca²⁺ oscillates with an ~11 s
/// period, DSE and eSP sit near −960 % and +910 % (so PR ≈ 0.5 · PR(0)), and
/// the DSE loop has a gain of about 25. That gain sets the offset of the
/// repair-ratio curve: q ≈ (1 + G) / (1 + G·z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AstrocyteParams {
    /// 2-AG decay time constant (ms).
    pub tau_ag: f64,
    /// 2-AG released per post-synaptic spike.
    pub r_ag: f64,
    /// DSE per unit 2-AG (percent).
    pub k_ag: f64,
    /// Glutamate decay time constant (ms).
    pub tau_glu: f64,
    /// Glutamate released per Ca²⁺ threshold crossing.
    pub r_glu: f64,
    /// eSP time constant (ms).
    pub tau_esp: f64,
    /// eSP per unit glutamate (percent).
    pub m_esp: f64,
    /// Resting IP3 (µM).
    pub ip3_base: f64,
    /// IP3 relaxation time constant (s).
    pub tau_ip3: f64,
    /// Maximal IP3 production at full 2-AG receptor occupancy (µM/s).
    pub r_ip3: f64,
    /// 2-AG level at half receptor occupancy.
    pub kd_ag: f64,
    /// Ca²⁺ level whose upward crossing releases glutamate (µM).
    pub ca_threshold: f64,
    pub li_rinzel: LiRinzelParams,
}

impl Default for AstrocyteParams {
    fn default() -> Self {
        Self {
            tau_ag: 10_000.0,
            r_ag: 1.0,
            k_ag: 9.6,
            tau_glu: 10_000.0,
            r_glu: 1.0,
            tau_esp: 20_000.0,
            m_esp: 1_000.0,
            ip3_base: 0.1,
            tau_ip3: 7.0,
            r_ip3: 0.07,
            kd_ag: 2.0,
            ca_threshold: 0.25,
            li_rinzel: LiRinzelParams::default(),
        }
    }
}

/// Signaling state of the astrocyte and the two neurons' 2-AG pools.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AstrocyteState {
    /// 2-AG released by N1 and N2.
    pub ag: [f64; 2],
    /// DSE of N1 and N2 (percent, ≤ 0).
    pub dse: [f64; 2],
    /// IP3 (µM).
    pub ip3: f64,
    /// Cytosolic Ca²⁺ (µM).
    pub ca: f64,
    /// Fraction of IP3 receptors not inactivated.
    pub h: f64,
    pub glu: f64,
    /// eSP intensity (percent).
    pub esp: f64,
}

impl AstrocyteState {
    /// Resting state for the given parameters.
    pub fn resting(params: &AstrocyteParams) -> Self {
        Self {
            ag: [0.0; 2],
            dse: [0.0; 2],
            ip3: params.ip3_base,
            ca: 0.07,
            h: 0.8,
            glu: 0.0,
            esp: 0.0,
        }
    }

    /// Exact exponential decay of 2-AG plus a release of `r_ag` for each
    /// neuron that spiked this step. DSE is recomputed from the new 2-AG.
    pub fn step_ag(&mut self, post_spiked: [bool; 2], dt: f64, params: &AstrocyteParams) {
        let decay = (-dt / params.tau_ag).exp();
        for n in 0..2 {
            self.ag[n] = self.ag[n] * decay + if post_spiked[n] { params.r_ag } else { 0.0 };
            self.dse[n] = compute_dse(self.ag[n], params.k_ag);
        }
    }

    /// Advance IP3, Ca²⁺ and the gating variable by one step (RK4, 2-AG held
    /// fixed). Returns whether Ca²⁺ crossed the release threshold from below.
    pub fn step_calcium(&mut self, dt: f64, params: &AstrocyteParams) -> Result<bool> {
        let occupancy = ag_occupancy(self.ag[0] + self.ag[1], params.kd_ag);
        let before = self.ca;
        let y = [self.ip3, self.ca, self.h];
        let next = rk4(y, dt / 1000.0, |s| calcium_rhs(s, occupancy, params));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "calcium state became non-finite (dt = {dt} ms)"
            )));
        }
        [self.ip3, self.ca, self.h] = next;
        Ok(before < params.ca_threshold && self.ca >= params.ca_threshold)
    }

    /// Exact glutamate decay plus a release of `r_glu` on a threshold crossing.
    pub fn step_glutamate(&mut self, threshold_crossed: bool, dt: f64, params: &AstrocyteParams) {
        self.glu = self.glu * (-dt / params.tau_glu).exp()
            + if threshold_crossed { params.r_glu } else { 0.0 };
    }

    /// Exact update of `tau_esp · d(eSP)/dt = −eSP + m_esp · Glu` with
    /// glutamate held at its current value over the step.
    pub fn step_esp(&mut self, dt: f64, params: &AstrocyteParams) {
        let target = params.m_esp * self.glu;
        self.esp = target + (self.esp - target) * (-dt / params.tau_esp).exp();
    }

    /// PR scale factor `1 + (DSE + eSP)/100` for neuron `n` (unclipped).
    pub fn modulation(&self, n: usize) -> f64 {
        1.0 + (self.dse[n] + self.esp) / 100.0
    }
}

/// DSE = −AG · K_AG.
pub fn compute_dse(ag: f64, k_ag: f64) -> f64 {
    -ag * k_ag
}

/// Release probability from PR(0), DSE and eSP, clipped to [0, 1].
pub fn compute_pr(pr0: f64, dse: f64, esp: f64) -> f64 {
    raw_pr(pr0, dse, esp).clamp(0.0, 1.0)
}

/// Unclipped `PR(0) · (1 + (DSE + eSP)/100)`.
pub fn raw_pr(pr0: f64, dse: f64, esp: f64) -> f64 {
    pr0 + pr0 * ((dse + esp) / 100.0)
}

/// Fraction of CB1 receptors bound by 2-AG.
fn ag_occupancy(ag_total: f64, kd: f64) -> f64 {
    ag_total / (ag_total + kd)
}

/// Right-hand side of the IP3 / Li-Rinzel system in per-second units.
/// State is `[ip3, ca, h]`.
pub fn calcium_rhs(state: [f64; 3], occupancy: f64, params: &AstrocyteParams) -> [f64; 3] {
    let [ip3, ca, h] = state;
    let lr = &params.li_rinzel;
    let gradient = lr.c0 - (1.0 + lr.c1) * ca;
    let m_inf = ip3 / (ip3 + lr.d1);
    let n_inf = ca / (ca + lr.d5);
    let j_chan = lr.r_c * (m_inf * n_inf * h).powi(3) * gradient;
    let j_leak = lr.r_l * gradient;
    let j_pump = lr.v_er * ca * ca / (ca * ca + lr.k_er * lr.k_er);
    let q2 = lr.d2 * (ip3 + lr.d1) / (ip3 + lr.d3);
    let h_inf = q2 / (q2 + ca);
    let tau_h = 1.0 / (lr.a2 * (q2 + ca));
    [
        (params.ip3_base - ip3) / params.tau_ip3 + params.r_ip3 * occupancy,
        j_chan + j_leak - j_pump,
        (h_inf - h) / tau_h,
    ]
}

fn rk4(y: [f64; 3], h: f64, f: impl Fn([f64; 3]) -> [f64; 3]) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = f(y);
    let k2 = f(add(y, k1, h / 2.0));
    let k3 = f(add(y, k2, h / 2.0));
    let k4 = f(add(y, k3, h));
    let mut out = y;
    for i in 0..3 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Leaky integrate-and-fire neuron with no refractory period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BioLifNeuron {
    /// Membrane potential (mV).
    pub v: f64,
    /// Membrane time constant (ms).
    pub tau_v: f64,
    pub v_res: f64,
    pub v_reset: f64,
    pub v_th: f64,
    /// Membrane resistance (mV/pA) converting injected current to potential.
    pub r_m: f64,
    /// Current injected for one step per transmitted spike (pA).
    pub injected_current: f64,
}

impl Default for BioLifNeuron {
    fn default() -> Self {
        Self {
            v: -65.0,
            tau_v: 100.0,
            v_res: -65.0,
            v_reset: -60.0,
            v_th: -52.0,
            r_m: 0.1,
            injected_current: 6650.0,
        }
    }
}

impl BioLifNeuron {
    /// Integrate `tau_v dv/dt = −(v − v_res) + R·I` exactly over `dt` with `I`
    /// held constant, then fire and reset if the threshold is reached.
    pub fn step(&mut self, input_current: f64, dt: f64) -> bool {
        let v_inf = self.v_res + self.r_m * input_current;
        self.v = v_inf + (self.v - v_inf) * (-dt / self.tau_v).exp();
        if self.v >= self.v_th {
            self.v = self.v_reset;
            true
        } else {
            false
        }
    }
}

/// Bernoulli-binned Poisson spike source.
#[derive(Debug, Clone, Copy)]
pub struct PoissonSource {
    p: f64,
}

impl PoissonSource {
    /// `rate` in spikes/s, `dt` in ms. Fails when `rate · dt > 1`.
    pub fn new(rate: f64, dt: f64) -> Result<Self> {
        if !(rate >= 0.0) || !(dt > 0.0) {
            return Err(Error::Config(format!("invalid Poisson rate {rate} /s or dt {dt} ms")));
        }
        let p = rate * dt / 1000.0;
        if p > 1.0 {
            return Err(Error::Config(format!(
                "spike probability per bin {p} exceeds 1 (rate {rate} /s, dt {dt} ms)"
            )));
        }
        Ok(Self { p })
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    pub fn sample(&self, rng: &mut impl Rng) -> bool {
        self.p > 0.0 && rng.random::<f64>() < self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    pub dt: f64,
    pub bins: Vec<bool>,
}

impl SpikeTrain {
    pub fn count(&self) -> usize {
        self.bins.iter().filter(|&&b| b).count()
    }

    pub fn spike_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i as f64 * self.dt)
    }
}

/// Independent Bernoulli(rate·dt) per bin, deterministic in `seed`.
pub fn poisson_train(rate: f64, duration: f64, dt: f64, seed: u64) -> Result<SpikeTrain> {
    let source = PoissonSource::new(rate, dt)?;
    let mut rng = seed::rng(seed);
    let n = (duration / dt).round() as usize;
    Ok(SpikeTrain {
        dt,
        bins: (0..n).map(|_| source.sample(&mut rng)).collect(),
    })
}

/// Which of N2's synapses are disabled at the fault time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DisableSpec {
    None,
    /// Fraction of synapses, rounded to the nearest count.
    Fraction(f64),
    Count(usize),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioFaultSpec {
    pub disable: DisableSpec,
    pub drift: Option<DriftSpec>,
}

impl BioFaultSpec {
    pub fn none() -> Self {
        Self {
            disable: DisableSpec::None,
            drift: None,
        }
    }

    pub fn disable_count(n: usize) -> Self {
        Self {
            disable: DisableSpec::Count(n),
            drift: None,
        }
    }
}

/// Measurement windows in ms, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    fn step_range(&self, dt: f64, n_steps: usize) -> std::ops::Range<usize> {
        let a = ((self.start / dt).round().max(0.0) as usize).min(n_steps);
        let b = ((self.end / dt).round().max(0.0) as usize).min(n_steps);
        a..b.max(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioSimConfig {
    /// Total simulated time (s).
    pub duration_s: f64,
    /// Step (ms).
    pub dt_ms: f64,
    /// Fault injection time (s).
    pub t_fault_s: f64,
    pub n_synapses: usize,
    /// Poisson rate on every synapse (spikes/s).
    pub input_rate: f64,
    /// Mean of the uniform PR(0) distribution.
    pub pr0_mean: f64,
    /// Half-width of the uniform PR(0) distribution.
    pub pr0_half_width: f64,
    pub seed: u64,
    pub fault: BioFaultSpec,
    /// Length of the before-fault and after-stabilization windows (s).
    pub window_s: f64,
    /// Keep per-step traces; when false only window statistics are kept.
    pub record_traces: bool,
    pub astrocyte: AstrocyteParams,
    pub neuron: BioLifNeuron,
}

impl Default for BioSimConfig {
    fn default() -> Self {
        Self {
            duration_s: 400.0,
            dt_ms: 1.0,
            t_fault_s: 200.0,
            n_synapses: 10,
            input_rate: 10.0,
            pr0_mean: 0.5,
            pr0_half_width: 0.15,
            seed: 0,
            fault: BioFaultSpec::none(),
            window_s: 50.0,
            record_traces: true,
            astrocyte: AstrocyteParams::default(),
            neuron: BioLifNeuron::default(),
        }
    }
}

impl BioSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_ms > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt_ms)));
        }
        if !(self.t_fault_s > 0.0 && self.duration_s > self.t_fault_s) {
            return Err(Error::Config(format!(
                "need duration > t_fault > 0, got duration {} s, t_fault {} s",
                self.duration_s, self.t_fault_s
            )));
        }
        if self.n_synapses == 0 {
            return Err(Error::Config("need at least one synapse per neuron".into()));
        }
        if !(self.window_s > 0.0 && self.window_s <= self.t_fault_s) {
            return Err(Error::Config(format!(
                "window {} s must be positive and fit before t_fault",
                self.window_s
            )));
        }
        match &self.fault.disable {
            DisableSpec::Fraction(f) if !(0.0..=1.0).contains(f) => {
                return Err(Error::Config(format!("disable fraction {f} outside [0, 1]")))
            }
            DisableSpec::Count(c) if *c > self.n_synapses => {
                return Err(Error::Config(format!(
                    "cannot disable {c} of {} synapses",
                    self.n_synapses
                )))
            }
            DisableSpec::Indices(ix) if ix.iter().any(|&i| i >= self.n_synapses) => {
                return Err(Error::Config("disabled synapse index out of range".into()))
            }
            _ => {}
        }
        if let Some(d) = &self.fault.drift {
            d.validate()?;
        }
        PoissonSource::new(self.input_rate, self.dt_ms)?;
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_s * 1000.0 / self.dt_ms).round() as usize
    }

    pub fn fault_step(&self) -> usize {
        (self.t_fault_s * 1000.0 / self.dt_ms).round() as usize
    }

    /// `[t_fault − window, t_fault)` in ms.
    pub fn bf_window(&self) -> Window {
        Window::new((self.t_fault_s - self.window_s) * 1000.0, self.t_fault_s * 1000.0)
    }

    /// `[duration − window, duration)` in ms.
    pub fn as_window(&self) -> Window {
        Window::new((self.duration_s - self.window_s) * 1000.0, self.duration_s * 1000.0)
    }
}

/// One synapse of the biophysical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BioSynapse {
    /// PR(0) as sampled at initialization.
    pub pr0: f64,
    /// Effective PR(0) that the modulation scales: `pr0 · r_decay` after a
    /// drift fault, 0 once disabled.
    pub pr0_eff: f64,
    pub pr: f64,
    pub disabled: bool,
    /// Drift ratio applied at the fault (1 when no drift).
    pub drift: f64,
    pub input_rate: f64,
}

impl BioSynapse {
    fn new(pr0: f64, input_rate: f64) -> Self {
        Self {
            pr0,
            pr0_eff: pr0,
            pr: pr0,
            disabled: false,
            drift: 1.0,
            input_rate,
        }
    }

    fn disable(&mut self) {
        self.disabled = true;
        self.pr0_eff = 0.0;
        self.pr = 0.0;
    }
}

/// Per-step record for one neuron. `pr` is step-major: `pr[step * n + i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeuronTrace {
    pub pr: Vec<f64>,
    pub clipped: Vec<bool>,
    pub spike_steps: Vec<usize>,
}

/// Per-step astrocyte record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AstroTrace {
    pub ag: [Vec<f64>; 2],
    pub dse: [Vec<f64>; 2],
    pub ip3: Vec<f64>,
    pub ca: Vec<f64>,
    pub glu: Vec<f64>,
    pub esp: Vec<f64>,
}

/// Running window statistics for one neuron's synapses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub bf_sum: Vec<f64>,
    pub as_sum: Vec<f64>,
    pub bf_steps: usize,
    pub as_steps: usize,
    /// Synapse hit a clip bound inside either window.
    pub clipped: Vec<bool>,
    pub spikes_bf: usize,
    pub spikes_as: usize,
}

impl WindowStats {
    fn new(n: usize) -> Self {
        Self {
            bf_sum: vec![0.0; n],
            as_sum: vec![0.0; n],
            bf_steps: 0,
            as_steps: 0,
            clipped: vec![false; n],
            spikes_bf: 0,
            spikes_as: 0,
        }
    }

    pub fn bf_mean(&self, i: usize) -> f64 {
        self.bf_sum[i] / self.bf_steps as f64
    }

    pub fn as_mean(&self, i: usize) -> f64 {
        self.as_sum[i] / self.as_steps as f64
    }
}

/// Output of a two-neuron run: per-synapse PR traces (when recorded),
/// astrocyte variables, and window statistics for both neurons.
#[derive(Debug, Clone)]
pub struct PrTraceSet {
    pub dt: f64,
    pub n_steps: usize,
    pub fault_step: usize,
    pub seed: u64,
    pub bf_window: Window,
    pub as_window: Window,
    pub synapses: [Vec<BioSynapse>; 2],
    pub neurons: [NeuronTrace; 2],
    pub astro: AstroTrace,
    pub stats: [WindowStats; 2],
    /// Ca²⁺ threshold crossings (step indices).
    pub ca_events: Vec<usize>,
    pub recorded: bool,
}

impl PrTraceSet {
    pub fn n_synapses(&self) -> usize {
        self.synapses[0].len()
    }

    /// PR of synapse `i` of neuron `n` at `step`.
    pub fn pr(&self, n: usize, i: usize, step: usize) -> f64 {
        self.neurons[n].pr[step * self.n_synapses() + i]
    }

    pub fn clipped(&self, n: usize, i: usize, step: usize) -> bool {
        self.neurons[n].clipped[step * self.n_synapses() + i]
    }

    /// Mean PR of a synapse over a window, from the recorded trace.
    pub fn window_mean(&self, n: usize, i: usize, w: Window) -> Result<f64> {
        if !self.recorded {
            return Err(Error::Config("traces were not recorded for this run".into()));
        }
        let r = w.step_range(self.dt, self.n_steps);
        if r.is_empty() {
            return Err(Error::Domain(format!("empty window {:?}", w)));
        }
        let len = r.len() as f64;
        Ok(r.map(|s| self.pr(n, i, s)).sum::<f64>() / len)
    }

    /// Mean firing rate (Hz) of neuron `n` within a window.
    pub fn firing_rate(&self, n: usize, w: Window) -> f64 {
        let r = w.step_range(self.dt, self.n_steps);
        let count = self.neurons[n]
            .spike_steps
            .iter()
            .filter(|s| r.contains(s))
            .count();
        count as f64 / (r.len() as f64 * self.dt / 1000.0)
    }

    pub fn healthy(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.synapses[n]
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.disabled)
            .map(|(i, _)| i)
    }
}

fn sample_pr0(cfg: &BioSimConfig, rng: &mut SimRng) -> Vec<f64> {
    let lo = cfg.pr0_mean - cfg.pr0_half_width;
    let hi = cfg.pr0_mean + cfg.pr0_half_width;
    if hi <= lo {
        return vec![cfg.pr0_mean.clamp(0.0, 1.0); cfg.n_synapses];
    }
    let dist = Uniform::new(lo, hi).expect("bounds checked above");
    (0..cfg.n_synapses)
        .map(|_| dist.sample(rng).clamp(0.0, 1.0))
        .collect()
}

fn disabled_indices(spec: &DisableSpec, n: usize, rng: &mut SimRng) -> Vec<usize> {
    let count = match spec {
        DisableSpec::None => return Vec::new(),
        DisableSpec::Indices(ix) => return ix.clone(),
        DisableSpec::Fraction(f) => ((f * n as f64).round() as usize).min(n),
        DisableSpec::Count(c) => *c,
    };
    let mut idx = rand::seq::index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Simulate N1 and N2 sharing one astrocyte; the fault hits N2 only.
pub fn run_two_neuron_experiment(cfg: &BioSimConfig) -> Result<PrTraceSet> {
    cfg.validate()?;
    let n_syn = cfg.n_synapses;
    let n_steps = cfg.n_steps();
    let fault_step = cfg.fault_step();
    let dt = cfg.dt_ms;
    let params = &cfg.astrocyte;

    let mut init_rng = seed::rng(seed::derive_labeled(cfg.seed, "bio/init"));
    let mut fault_rng = seed::rng(seed::derive_labeled(cfg.seed, "bio/fault"));
    let mut input_rng = seed::rng(seed::derive_labeled(cfg.seed, "bio/input"));
    let mut release_rng = seed::rng(seed::derive_labeled(cfg.seed, "bio/release"));

    let mut synapses: [Vec<BioSynapse>; 2] = [0, 1].map(|_| {
        sample_pr0(cfg, &mut init_rng)
            .into_iter()
            .map(|p| BioSynapse::new(p, cfg.input_rate))
            .collect()
    });
    let to_disable = disabled_indices(&cfg.fault.disable, n_syn, &mut fault_rng);
    let drift: Vec<f64> = match &cfg.fault.drift {
        Some(d) => d.sample_ratios(n_syn, &mut fault_rng),
        None => vec![1.0; n_syn],
    };

    let source = PoissonSource::new(cfg.input_rate, dt)?;
    let mut neurons = [cfg.neuron; 2];
    for nrn in &mut neurons {
        nrn.v = nrn.v_res;
    }
    let mut state = AstrocyteState::resting(params);

    let bf = cfg.bf_window().step_range(dt, n_steps);
    let aw = cfg.as_window().step_range(dt, n_steps);
    let mut stats = [WindowStats::new(n_syn), WindowStats::new(n_syn)];
    stats[0].bf_steps = bf.len();
    stats[1].bf_steps = bf.len();
    stats[0].as_steps = aw.len();
    stats[1].as_steps = aw.len();

    let record = cfg.record_traces;
    let cap = if record { n_steps * n_syn } else { 0 };
    let mut traces: [NeuronTrace; 2] = [0, 1].map(|_| NeuronTrace {
        pr: Vec::with_capacity(cap),
        clipped: Vec::with_capacity(cap),
        spike_steps: Vec::new(),
    });
    let mut astro = AstroTrace::default();
    let mut ca_events = Vec::new();

    for step in 0..n_steps {
        if step == fault_step {
            for (i, syn) in synapses[1].iter_mut().enumerate() {
                syn.drift = drift[i];
                syn.pr0_eff = syn.pr0 * drift[i];
            }
            for &i in &to_disable {
                synapses[1][i].disable();
            }
        }
        let in_bf = bf.contains(&step);
        let in_as = aw.contains(&step);

        let mut spiked = [false; 2];
        for n in 0..2 {
            let mut transmitted = 0usize;
            for (i, syn) in synapses[n].iter_mut().enumerate() {
                let raw = raw_pr(syn.pr0_eff, state.dse[n], state.esp);
                syn.pr = raw.clamp(0.0, 1.0);
                let clipped = raw != syn.pr && !syn.disabled;
                if record {
                    traces[n].pr.push(syn.pr);
                    traces[n].clipped.push(clipped);
                }
                if in_bf {
                    stats[n].bf_sum[i] += syn.pr;
                    stats[n].clipped[i] |= clipped;
                } else if in_as {
                    stats[n].as_sum[i] += syn.pr;
                    stats[n].clipped[i] |= clipped;
                }
                // Draw release even for silent synapses so the input stream
                // stays aligned across fault scenarios.
                let arrived = source.sample(&mut input_rng);
                let u: f64 = release_rng.random();
                if arrived && u < syn.pr {
                    transmitted += 1;
                }
            }
            let current = transmitted as f64 * neurons[n].injected_current;
            spiked[n] = neurons[n].step(current, dt);
            if spiked[n] {
                traces[n].spike_steps.push(step);
                if in_bf {
                    stats[n].spikes_bf += 1;
                } else if in_as {
                    stats[n].spikes_as += 1;
                }
            }
        }

        state.step_ag(spiked, dt, params);
        let crossed = state.step_calcium(dt, params)?;
        if crossed {
            ca_events.push(step);
        }
        state.step_glutamate(crossed, dt, params);
        state.step_esp(dt, params);

        if record {
            for n in 0..2 {
                astro.ag[n].push(state.ag[n]);
                astro.dse[n].push(state.dse[n]);
            }
            astro.ip3.push(state.ip3);
            astro.ca.push(state.ca);
            astro.glu.push(state.glu);
            astro.esp.push(state.esp);
        }
    }

    Ok(PrTraceSet {
        dt,
        n_steps,
        fault_step,
        seed: cfg.seed,
        bf_window: cfg.bf_window(),
        as_window: cfg.as_window(),
        synapses,
        neurons: traces,
        astro,
        stats,
        ca_events,
        recorded: record,
    })
}

/// Write `t_ms, neuron_id, synapse_id, pr` rows, every `every` steps.
pub fn write_pr_csv(trace: &PrTraceSet, mut out: impl std::io::Write, every: usize) -> std::io::Result<()> {
    writeln!(out, "t_ms,neuron_id,synapse_id,pr")?;
    let every = every.max(1);
    for step in (0..trace.n_steps).step_by(every) {
        let t = step as f64 * trace.dt;
        for n in 0..2 {
            for i in 0..trace.n_synapses() {
                writeln!(out, "{t},{},{i},{:.12e}", n + 1, trace.pr(n, i, step))?;
            }
        }
    }
    Ok(())
}

/// Write `t_ms, ag_n1, ag_n2, ip3, ca, glu, esp` rows, every `every` steps.
pub fn write_astro_csv(trace: &PrTraceSet, mut out: impl std::io::Write, every: usize) -> std::io::Result<()> {
    writeln!(out, "t_ms,ag_n1,ag_n2,ip3,ca,glu,esp")?;
    let a = &trace.astro;
    for step in (0..trace.n_steps).step_by(every.max(1)) {
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            step as f64 * trace.dt,
            a.ag[0][step],
            a.ag[1][step],
            a.ip3[step],
            a.ca[step],
            a.glu[step],
            a.esp[step]
        )?;
    }
    Ok(())
}

/// Write the synapse table `neuron_id, synapse_id, pr0, disabled, drift`
/// that accompanies a PR trace.
pub fn write_synapse_csv(trace: &PrTraceSet, mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "seed,neuron_id,synapse_id,pr0,disabled,drift")?;
    for n in 0..2 {
        for (i, s) in trace.synapses[n].iter().enumerate() {
            writeln!(
                out,
                "{},{},{i},{:.12e},{},{:.12e}",
                trace.seed,
                n + 1,
                s.pr0,
                u8::from(s.disabled),
                s.drift
            )?;
        }
    }
    Ok(())
}
