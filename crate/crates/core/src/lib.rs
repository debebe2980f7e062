//! Astrocyte-inspired self-repair of spiking neural networks: a biophysical
//! two-neuron-one-astrocyte model, a closed-form repair macro-model, an
//! unsupervised STDP network, a memristive crossbar fault model, and the
//! local repair learning rule, plus an experiment harness.

pub mod astrocyte;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod hardware;
pub mod macro_model;
pub mod matrix;
pub mod repair;
pub mod seed;
pub mod snn;

pub use error::{Error, Result};
pub use matrix::Matrix;
