mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;

use astro_repair::hardware::FaultMask;
use astro_repair::matrix::SynapseMatrix;
use astro_repair::repair::{self, astdp_local_update, compute_q_local, RepairRule, RetrainOptions, RepairTarget};
use astro_repair::snn::{self, NetworkState, SnnConfig};
use astro_repair::Matrix;

/// Records every entry a rule reads or writes.
struct Tracing {
    inner: Matrix,
    touched: RefCell<BTreeSet<(usize, usize)>>,
}

impl Tracing {
    fn new(inner: Matrix) -> Self {
        Self {
            inner,
            touched: RefCell::new(BTreeSet::new()),
        }
    }

    fn columns(&self) -> BTreeSet<usize> {
        self.touched.borrow().iter().map(|&(_, j)| j).collect()
    }
}

impl SynapseMatrix for Tracing {
    fn n_input(&self) -> usize {
        self.inner.rows()
    }

    fn n_neuron(&self) -> usize {
        self.inner.cols()
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.touched.borrow_mut().insert((i, j));
        self.inner.get(i, j)
    }

    fn set_weight(&mut self, i: usize, j: usize, w: f64) {
        self.touched.borrow_mut().insert((i, j));
        self.inner.set(i, j, w);
    }
}

fn small_cfg(n_input: usize, n_neuron: usize) -> SnnConfig {
    SnnConfig {
        n_input,
        norm_factor: 0.1 * n_input as f64,
        ..SnnConfig::mnist(n_neuron)
    }
}

#[test]
fn potentiation_of_one_neuron_reads_only_its_column() {
    let cfg = small_cfg(5, 4);
    let w0 = Matrix::from_fn(5, 4, |i, j| 0.1 + 0.01 * (i + j) as f64);
    let mut w = Tracing::new(Matrix::from_fn(5, 4, |i, _| 0.05 * i as f64));
    let target = Tracing::new(w0.clone());
    let q = vec![Some(1.5), Some(0.7), Some(2.0), None];
    let mask = FaultMask::healthy(5, 4);
    astdp_local_update(&mut w, &target, &mask, &q, 0.01, &[0.3; 5], &[0.0; 4], &[], &[2], &cfg);
    assert_eq!(w.columns(), BTreeSet::from([2]));
    assert_eq!(target.columns(), BTreeSet::from([2]));
}

#[test]
fn depression_of_a_synapse_uses_only_its_neuron_trace() {
    let cfg = small_cfg(3, 3);
    let w0 = Matrix::filled(3, 3, 0.2);
    let mask = FaultMask::healthy(3, 3);
    let q = vec![Some(1.0); 3];
    let run = |x_post: [f64; 3]| {
        let mut w = Matrix::filled(3, 3, 0.2);
        astdp_local_update(&mut w, &w0, &mask, &q, 0.01, &[0.0; 3], &x_post, &[1], &[], &cfg);
        w
    };
    let a = run([0.5, 0.1, 0.9]);
    let b = run([0.5, 0.8, 0.0]);
    assert_eq!(a.column(0), b.column(0));
    assert_ne!(a.column(1), b.column(1));
}

#[test]
fn repair_ratio_of_a_neuron_ignores_other_columns() {
    let w0 = Matrix::from_fn(4, 3, |i, j| 0.1 * (i + j + 1) as f64);
    let ctx = repair::snapshot_baseline(&w0, 0.01).unwrap();
    let mask = FaultMask::healthy(4, 3);
    let mut w = w0.clone();
    w.set(0, 1, 0.0);
    let q1 = compute_q_local(&w, &mask, &ctx).unwrap();
    w.set(2, 0, 5.0);
    w.set(3, 2, 0.0);
    let q2 = compute_q_local(&w, &mask, &ctx).unwrap();
    assert_eq!(q1[1], q2[1]);
    assert_ne!(q1[0], q2[0]);
}

/// Repeated pairing drives a synapse toward `q · w0` without overshoot.
fn fixed_point_drill(x_pre: f64, events: usize) -> (f64, f64) {
    let cfg = small_cfg(1, 1);
    let w0 = Matrix::filled(1, 1, 0.3);
    let q = [Some(1.8)];
    let target = 1.8 * 0.3;
    let mask = FaultMask::healthy(1, 1);
    let mut w = Matrix::filled(1, 1, 0.05);
    let mut prev = w.get(0, 0);
    for _ in 0..events {
        astdp_local_update(&mut w, &w0, &mask, &q, cfg.repair_tau, &[x_pre], &[0.0], &[], &[0], &cfg);
        let now = w.get(0, 0);
        assert!(now >= prev, "not monotone");
        assert!(now <= target + 1e-15, "overshoot {now} > {target}");
        prev = now;
    }
    (prev, target)
}

#[test]
fn repair_converges_to_target_without_overshoot() {
    for x in [0.05, 0.37, 1.0] {
        let (w, target) = fixed_point_drill(x, 10_000);
        assert!((w - target).abs() < 1e-3 * target, "x_pre {x}: {w} vs {target}");
    }
}

#[test]
fn masked_synapses_stay_zero_through_retraining() {
    let data = common::patterned(128, 10, 4);
    let mut base = NetworkState::new(small_cfg(100, 12), 6).unwrap();
    snn::train(&mut base, &data, 1, 6).unwrap();
    let ctx = repair::snapshot_baseline(&base.weights, base.config.repair_tau).unwrap();
    for rule in [RepairRule::Stdp, RepairRule::AstdpLocal] {
        let mut net = base.clone();
        repair::inject_faults(&mut net, 0.6, None, 12).unwrap();
        repair::normalize_after_fault(&mut net);
        let masked: Vec<usize> = (0..net.fault_mask.as_slice().len())
            .filter(|&k| net.fault_mask.as_slice()[k])
            .collect();
        assert!(!masked.is_empty());
        let opts = RetrainOptions {
            rule,
            epochs: 1,
            eval_every: 64,
            seed: 3,
            target: RepairTarget::Baseline,
        };
        let report = repair::retrain(&mut net, &ctx, &data, &data, &data, &opts).unwrap();
        assert!(masked.iter().all(|&k| net.weights.as_slice()[k] == 0.0), "{rule}");
        assert!(net.weights.as_slice().iter().all(|&w| w >= 0.0));
        assert!(report.steps_to_best <= 128);
        assert!(report.points.iter().all(|p| (0.0..=100.0).contains(&p.1)));
        assert!(report.points.windows(2).all(|p| p[0].0 < p[1].0));
    }
}
