//! Memristive crossbar substrate: differential conductance mapping, column
//! current readout, stuck-at-zero faults and PCM conductance drift.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Per-device drift `G = G0 · t_norm^(−v)` with `v ~ N(mu_v, sigma_v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Normalized elapsed time, > 1.
    pub t_norm: f64,
    /// Mean drift exponent.
    pub mu_v: f64,
    /// Standard deviation of the drift exponent.
    pub sigma_v: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            t_norm: 1e4,
            mu_v: 1.0,
            sigma_v: 0.2258,
        }
    }
}

impl DriftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_norm > 1.0) || !self.t_norm.is_finite() {
            return Err(Error::Config(format!("drift t_norm must be > 1, got {}", self.t_norm)));
        }
        if !(self.sigma_v >= 0.0) || !self.mu_v.is_finite() || !self.sigma_v.is_finite() {
            return Err(Error::Config(format!(
                "drift exponent distribution N({}, {}) is invalid",
                self.mu_v, self.sigma_v
            )));
        }
        Ok(())
    }

    /// `t_norm^(−v)` for one exponent.
    pub fn ratio(&self, v: f64) -> f64 {
        self.t_norm.powf(-v)
    }

    pub fn sample_exponent(&self, rng: &mut impl Rng) -> f64 {
        if self.sigma_v == 0.0 {
            return self.mu_v;
        }
        Normal::new(self.mu_v, self.sigma_v)
            .expect("sigma validated non-negative")
            .sample(rng)
    }

    /// Independent drift ratios for `n` devices.
    pub fn sample_ratios(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| self.ratio(self.sample_exponent(rng))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Probability that any one synapse is stuck at zero.
    pub p_fault: f64,
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(p_fault: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_fault) {
            return Err(Error::Config(format!("p_fault {p_fault} outside [0, 1]")));
        }
        Ok(Self { p_fault, seed })
    }
}

/// Boolean stuck-at mask with the same shape as the weight matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl FaultMask {
    pub fn healthy(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                got: bits.len(),
            });
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_faulty(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Union of two masks of equal shape.
    pub fn union(&self, other: &FaultMask) -> Result<FaultMask> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                expected: self.bits.len(),
                got: other.bits.len(),
            });
        }
        Ok(FaultMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }
}

/// Differential-pair conductances for a signed weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarView {
    pub g_plus: Matrix,
    pub g_minus: Matrix,
    /// Weight-to-conductance factor.
    pub scale: f64,
    /// Conductance of a device parked in the OFF state.
    pub g_off: f64,
}

impl CrossbarView {
    /// Effective signed conductance `g_plus − g_minus`.
    pub fn effective(&self) -> Matrix {
        let data = self
            .g_plus
            .as_slice()
            .iter()
            .zip(self.g_minus.as_slice())
            .map(|(p, m)| p - m)
            .collect();
        Matrix::from_vec(self.g_plus.rows(), self.g_plus.cols(), data)
            .expect("paired matrices share a shape")
    }

    /// Recover the signed weights.
    pub fn to_weights(&self) -> Matrix {
        let mut m = self.effective();
        for w in m.as_mut_slice() {
            *w /= self.scale;
        }
        m
    }
}

/// Map signed weights onto device pairs: the sign selects which device
/// carries `|w| · scale`; the other sits at `g_off`.
pub fn to_differential(weights: &Matrix, scale: f64, g_off: f64) -> Result<CrossbarView> {
    if !(scale > 0.0) || !(g_off >= 0.0) {
        return Err(Error::Config(format!(
            "mapping needs scale > 0 and g_off >= 0, got {scale}, {g_off}"
        )));
    }
    if let Some(w) = weights.as_slice().iter().find(|w| !w.is_finite()) {
        return Err(Error::Numerical(format!("non-finite weight {w}")));
    }
    let (r, c) = weights.shape();
    let mut g_plus = Matrix::filled(r, c, g_off);
    let mut g_minus = Matrix::filled(r, c, g_off);
    for (k, &w) in weights.as_slice().iter().enumerate() {
        if w >= 0.0 {
            g_plus.as_mut_slice()[k] = g_off + w * scale;
        } else {
            g_minus.as_mut_slice()[k] = g_off - w * scale;
        }
    }
    Ok(CrossbarView {
        g_plus,
        g_minus,
        scale,
        g_off,
    })
}

/// Column currents `I_j = Σ_i G_ij V_i`.
pub fn crossbar_current(g: &Matrix, v_in: &[f64]) -> Result<Vec<f64>> {
    if v_in.len() != g.rows() {
        return Err(Error::Dimension {
            expected: g.rows(),
            got: v_in.len(),
        });
    }
    let mut out = vec![0.0; g.cols()];
    for (i, &v) in v_in.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (o, gij) in out.iter_mut().zip(g.row(i)) {
            *o += gij * v;
        }
    }
    Ok(out)
}

/// Mask each synapse independently with probability `p_fault` and zero it.
pub fn inject_stuck_at(weights: &Matrix, spec: &FaultSpec) -> Result<(Matrix, FaultMask)> {
    FaultSpec::new(spec.p_fault, spec.seed)?;
    let mut rng = seed::rng(seed::derive_labeled(spec.seed, "hw/stuck-at"));
    let mut out = weights.clone();
    let bits: Vec<bool> = out
        .as_mut_slice()
        .iter_mut()
        .map(|w| {
            let hit = rng.random::<f64>() < spec.p_fault;
            if hit {
                *w = 0.0;
            }
            hit
        })
        .collect();
    let mask = FaultMask::from_bits(weights.rows(), weights.cols(), bits)?;
    Ok((out, mask))
}

/// Multiply every unmasked weight by its own drift ratio. Ratios are drawn
/// for every device in row-major order, so the draw for a given synapse does
/// not depend on the mask.
pub fn apply_drift(weights: &Matrix, mask: &FaultMask, spec: &DriftSpec, seed: u64) -> Result<Matrix> {
    spec.validate()?;
    if mask.shape() != weights.shape() {
        return Err(Error::Dimension {
            expected: weights.rows() * weights.cols(),
            got: mask.as_slice().len(),
        });
    }
    let mut rng = seed::rng(seed::derive_labeled(seed, "hw/drift"));
    let mut out = weights.clone();
    for (w, &faulty) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        let r = spec.ratio(spec.sample_exponent(&mut rng));
        if !faulty {
            *w *= r;
        }
    }
    Ok(out)
}
