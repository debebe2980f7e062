use astro_repair::astrocyte::{
    calcium_rhs, run_two_neuron_experiment, AstrocyteParams, AstrocyteState, BioFaultSpec, BioSimConfig,
    DisableSpec, PrTraceSet,
};
use astro_repair::hardware::DriftSpec;
use astro_repair::macro_model::{measure_repair_ratio, neuron_repair_ratio, run_severity};

fn faulted_run(seed: u64, disable: DisableSpec, drift: Option<DriftSpec>) -> PrTraceSet {
    let cfg = BioSimConfig {
        seed,
        fault: BioFaultSpec { disable, drift },
        ..BioSimConfig::default()
    };
    run_two_neuron_experiment(&cfg).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Healthy synapses of neuron `n` that never clip inside the measurement
/// windows.
fn unclipped_in_windows(tr: &PrTraceSet, n: usize) -> Vec<usize> {
    tr.healthy(n).filter(|&i| !tr.stats[n].clipped[i]).collect()
}

#[test]
fn pr_ratios_are_time_invariant() {
    let tr = faulted_run(7, DisableSpec::Count(3), None);
    for n in 0..2 {
        let healthy: Vec<usize> = tr.healthy(n).collect();
        let (i, j) = (healthy[0], healthy[1]);
        let after_fault = |s: usize| n == 0 || s > tr.fault_step;
        let times: Vec<usize> = (0..tr.n_steps)
            .step_by(997)
            .filter(|&s| after_fault(s) && !tr.clipped(n, i, s) && !tr.clipped(n, j, s))
            .collect();
        assert!(times.len() > 100);
        let r0 = tr.pr(n, i, times[0]) / tr.pr(n, j, times[0]);
        for &s in &times {
            assert!(rel(tr.pr(n, i, s) / tr.pr(n, j, s), r0) < 1e-9, "neuron {n} step {s}");
        }
        let (t1, t2) = (times[1], times[times.len() - 1]);
        let cross_i = tr.pr(n, i, t1) / tr.pr(n, i, t2);
        let cross_j = tr.pr(n, j, t1) / tr.pr(n, j, t2);
        assert!(rel(cross_i, cross_j) < 1e-9);
    }
}

#[test]
fn repair_ratio_is_shared_by_healthy_synapses() {
    let tr = faulted_run(11, DisableSpec::Count(4), None);
    let ok = unclipped_in_windows(&tr, 1);
    let q: Vec<(usize, f64)> = measure_repair_ratio(&tr, 1, tr.bf_window, tr.as_window)
        .unwrap()
        .into_iter()
        .filter(|(i, _)| ok.contains(i))
        .collect();
    assert!(q.len() >= 2);
    for (_, qi) in &q {
        assert!(rel(*qi, q[0].1) < 1e-6);
    }
    assert!(q[0].1 > 1.0, "healthy synapses of a faulted neuron strengthen");
    let agg = neuron_repair_ratio(&tr, 1).unwrap();
    assert!(rel(agg, q[0].1) < 1e-6);
}

#[test]
fn drifted_synapses_keep_their_relative_scale() {
    let tr = faulted_run(5, DisableSpec::None, Some(DriftSpec {
        t_norm: 10.0,
        ..DriftSpec::default()
    }));
    let z = run_severity(&tr).unwrap();
    assert!(z > 0.0 && z < 1.0);
    for s in &tr.synapses[1] {
        assert!(!s.disabled);
        assert!((s.pr0_eff - s.pr0 * s.drift).abs() < 1e-15);
    }
}

#[test]
fn n1_is_statistically_unaffected() {
    let seeds = 1..=5;
    let n = seeds.clone().count() as f64;
    let mean_q: f64 = seeds
        .map(|seed| neuron_repair_ratio(&faulted_run(seed, DisableSpec::Count(5), None), 0).unwrap())
        .sum::<f64>()
        / n;
    assert!((mean_q - 1.0).abs() < 0.05, "N1 mean PR shifted by {:.3}", mean_q - 1.0);
}

/// Upward threshold crossings of a midpoint-rule integration at `h_ms`,
/// linearly interpolated within the step.
fn dense_crossings(occupancy: f64, params: &AstrocyteParams, start: [f64; 3], h_ms: f64, t_end_ms: f64) -> Vec<f64> {
    let h = h_ms / 1000.0;
    let mut y = start;
    let mut out = Vec::new();
    let n = (t_end_ms / h_ms).round() as usize;
    for k in 0..n {
        let k1 = calcium_rhs(y, occupancy, params);
        let mid = [y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1], y[2] + 0.5 * h * k1[2]];
        let k2 = calcium_rhs(mid, occupancy, params);
        let next = [y[0] + h * k2[0], y[1] + h * k2[1], y[2] + h * k2[2]];
        let th = params.ca_threshold;
        if y[1] < th && next[1] >= th {
            out.push((k as f64 + (th - y[1]) / (next[1] - y[1])) * h_ms);
        }
        y = next;
    }
    out
}

#[test]
fn calcium_events_match_dense_reference() {
    let params = AstrocyteParams::default();
    // Steady 2-AG level reached at roughly 7 Hz firing per neuron.
    let ag = [70.0, 70.0];
    let occupancy = (ag[0] + ag[1]) / (ag[0] + ag[1] + params.kd_ag);
    let mut st = AstrocyteState::resting(&params);
    st.ag = ag;
    let start = [st.ip3, st.ca, st.h];
    let t_end = 120_000.0;
    let mut coarse = Vec::new();
    for k in 0..t_end as usize {
        if st.step_calcium(1.0, &params).unwrap() {
            coarse.push((k + 1) as f64);
        }
    }
    let dense = dense_crossings(occupancy, &params, start, 0.01, t_end);
    assert!(dense.len() >= 4, "sustained drive should oscillate, got {} events", dense.len());
    assert_eq!(coarse.len(), dense.len());
    for (c, d) in coarse.iter().zip(&dense) {
        assert!((c - d).abs() <= 5.0, "event at {c} ms vs reference {d} ms");
    }
    let period = (dense[dense.len() - 1] - dense[1]) / (dense.len() - 2) as f64 / 1000.0;
    assert!((5.0..=30.0).contains(&period), "period {period} s");
}

#[test]
fn decays_between_events_are_exact() {
    let params = AstrocyteParams::default();
    let mut st = AstrocyteState::resting(&params);
    st.ag = [3.0, 1.5];
    st.glu = 2.0;
    for _ in 0..250 {
        st.step_ag([false, false], 1.0, &params);
        st.step_glutamate(false, 1.0, &params);
    }
    let f_ag = (-250.0 / params.tau_ag).exp();
    let f_glu = (-250.0 / params.tau_glu).exp();
    assert!(rel(st.ag[0], 3.0 * f_ag) < 1e-9);
    assert!(rel(st.ag[1], 1.5 * f_ag) < 1e-9);
    assert!(rel(st.glu, 2.0 * f_glu) < 1e-9);
}
