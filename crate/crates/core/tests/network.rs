mod common;

use astro_repair::snn::{self, NetworkState, SnnConfig};

fn cfg(side: usize, n_neuron: usize) -> SnnConfig {
    let n_input = side * side;
    SnnConfig {
        n_input,
        norm_factor: 0.1 * n_input as f64,
        ..SnnConfig::mnist(n_neuron)
    }
}

fn coefficient_of_variation(counts: &[f64]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Spread of per-neuron spike totals over the training set after one epoch.
fn training_spike_spread(theta_plus: f64) -> f64 {
    let data = common::patterned(400, 10, 3);
    let mut c = cfg(10, 50);
    c.theta_plus = theta_plus;
    let mut state = NetworkState::new(c, 17).unwrap();
    let order = snn::epoch_order(data.len(), 17, 0);
    let mut totals = vec![0.0; 50];
    snn::train_samples(
        &mut state,
        &data,
        &order,
        &snn::Stdp,
        snn::NormMode::Fixed { target: 10.0 },
        17,
        |_, _| Ok(()),
    )
    .unwrap();
    for counts in snn::record_responses(&state, &data, 99) {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += f64::from(c);
        }
    }
    coefficient_of_variation(&totals)
}

#[test]
fn homeostasis_spreads_activity_across_neurons() {
    let with = training_spike_spread(0.05);
    let without = training_spike_spread(0.0);
    assert!(with < without, "CV with homeostasis {with:.3} vs without {without:.3}");
}

#[test]
fn untrained_network_is_at_chance_on_uninformative_data() {
    let label_set = common::uninformative(1000, 10, 1);
    let test_set = common::uninformative(1000, 10, 2);
    let state = NetworkState::new(cfg(10, 20), 4).unwrap();
    let acc = snn::evaluate(&state, &label_set, &test_set, 8).unwrap().accuracy;
    assert!((acc - 10.0).abs() <= 5.0, "accuracy {acc}");
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let data = common::patterned(96, 10, 5);
    let run = || {
        let mut s = NetworkState::new(cfg(10, 8), 21).unwrap();
        snn::train(&mut s, &data, 1, 21).unwrap();
        let e = snn::evaluate(&s, &data, &data, 3).unwrap();
        (s.weights, s.theta, e.predictions)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_learns_separable_classes() {
    let train = common::patterned(600, 10, 7);
    let test = common::patterned(300, 10, 8);
    let mut s = NetworkState::new(cfg(10, 30), 2).unwrap();
    snn::train(&mut s, &train, 1, 2).unwrap();
    assert!(s.weights.as_slice().iter().all(|&w| w >= 0.0));
    let acc = snn::evaluate(&s, &train, &test, 1).unwrap().accuracy;
    assert!(acc > 50.0, "accuracy {acc}");
}
