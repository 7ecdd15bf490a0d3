//! Simulation harness: Gaussian random fields on a unit-square grid,
//! sampling designs, exact kriging and predictive scores.

mod experiment;
mod krige;
mod score;
mod sim;

pub use experiment::{
    run_experiment, ExactPredictor, ExperimentReport, ExternalPredictor, FrkPredictor, Prediction, Predictor,
    ReplicationInput, ScoreRow, SummaryRow,
};
pub use krige::{exact_krige, MAX_KRIGING_OBS};
pub use score::{coverage, crps_gaussian, rmspe, score, Scores, I90_MULTIPLIER};
pub use sim::{
    design, ns_combine, simulate, simulate_field, simulate_gp, simulate_ns, Design, Replication, Simulation,
    DENSE_MAX_CELLS, MAX_GRID_CELLS,
};

use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

/// Covariance of the simulated process on `[0, 1]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceModel {
    /// `σ² exp(−h/τ)`.
    Exponential { sigma2: f64, tau: f64 },
    /// `σ² exp(−h²/τ)`.
    SquaredExponential { sigma2: f64, tau: f64 },
    /// `½{Y₁ sin(2πs₁)cos(2πs₂) + Y₂ sin(2πs₁)}` with `Y₁` exponential with
    /// standard deviation `sigma1` and `Y₂` squared exponential with standard
    /// deviation `sigma2`.
    NonstationaryMix { sigma1: f64, tau1: f64, sigma2: f64, tau2: f64 },
}

impl CovarianceModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Exponential { sigma2, tau } | Self::SquaredExponential { sigma2, tau } => sigma2 > 0.0 && tau > 0.0,
            Self::NonstationaryMix { sigma1, tau1, sigma2, tau2 } => sigma1 > 0.0 && sigma2 > 0.0 && tau1 > 0.0 && tau2 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(FrkError::InvalidParameter(format!("covariance parameters must be positive: {self:?}")))
        }
    }

    /// Marginal variance; for the nonstationary mix, its average over the
    /// unit square.
    pub fn marginal_variance(&self) -> f64 {
        match *self {
            Self::Exponential { sigma2, .. } | Self::SquaredExponential { sigma2, .. } => sigma2,
            Self::NonstationaryMix { sigma1, sigma2, .. } => 0.25 * (0.25 * sigma1 * sigma1 + 0.5 * sigma2 * sigma2),
        }
    }

    pub fn covariance(&self, s: [f64; 2], u: [f64; 2]) -> f64 {
        let h = ((s[0] - u[0]).powi(2) + (s[1] - u[1]).powi(2)).sqrt();
        match *self {
            Self::Exponential { sigma2, tau } => sigma2 * (-h / tau).exp(),
            Self::SquaredExponential { sigma2, tau } => sigma2 * (-h * h / tau).exp(),
            Self::NonstationaryMix { sigma1, tau1, sigma2, tau2 } => {
                let (a1, b1) = ns_weights(s);
                let (a2, b2) = ns_weights(u);
                let c1 = sigma1 * sigma1 * (-h / tau1).exp();
                let c2 = sigma2 * sigma2 * (-h * h / tau2).exp();
                0.25 * (a1 * a2 * c1 + b1 * b2 * c2)
            }
        }
    }
}

fn ns_weights(s: [f64; 2]) -> (f64, f64) {
    let tau = std::f64::consts::TAU;
    let b = (tau * s[0]).sin();
    (b * (tau * s[1]).cos(), b)
}

fn default_lh_fraction() -> f64 {
    0.95
}

fn default_max_per_class() -> usize {
    1000
}

/// Simulation experiment on an `n × n` grid of cells over `[0, 1]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub covariance: CovarianceModel,
    /// Number of observed cells.
    pub m: usize,
    /// Marginal variance over measurement-error variance.
    pub snr: f64,
    /// Share of observations on the left half (`s₁ < ½`).
    #[serde(default = "default_lh_fraction")]
    pub lh_fraction: f64,
    pub replications: usize,
    pub seed: u64,
    /// Largest number of prediction locations per side and class.
    #[serde(default = "default_max_per_class")]
    pub max_per_class: usize,
}

impl SimulationConfig {
    pub fn new(n: usize, covariance: CovarianceModel, m: usize, snr: f64, replications: usize, seed: u64) -> Self {
        Self {
            n,
            covariance,
            m,
            snr,
            lh_fraction: default_lh_fraction(),
            replications,
            seed,
            max_per_class: default_max_per_class(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.covariance.validate()?;
        if self.n < 2 {
            return Err(FrkError::InvalidParameter("grid needs at least 2 cells per axis".into()));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(FrkError::InvalidParameter(format!("SNR must be positive, got {}", self.snr)));
        }
        if !(0.0..=1.0).contains(&self.lh_fraction) {
            return Err(FrkError::InvalidParameter(format!("LH fraction must lie in [0, 1], got {}", self.lh_fraction)));
        }
        if self.m == 0 {
            return Err(FrkError::InsufficientData("m must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma2_eps(&self) -> f64 {
        self.covariance.marginal_variance() / self.snr
    }

    pub fn n_cells(&self) -> usize {
        self.n * self.n
    }
}

/// Centre of cell `idx = j·n + i`, where `i` indexes `s₁`.
pub fn cell_centre(n: usize, idx: usize) -> [f64; 2] {
    let (i, j) = (idx % n, idx / n);
    [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64]
}

/// Whether a cell lies on the left half of the square.
pub fn is_left(n: usize, idx: usize) -> bool {
    2 * (idx % n) < n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lh,
    Rh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coincidence {
    Observed,
    Unobserved,
}

/// The four prediction-location classes in report order.
pub const CLASSES: [(Side, Coincidence); 4] = [
    (Side::Lh, Coincidence::Observed),
    (Side::Lh, Coincidence::Unobserved),
    (Side::Rh, Coincidence::Observed),
    (Side::Rh, Coincidence::Unobserved),
];

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Lh => "lh",
            Side::Rh => "rh",
        }
    }
}

impl Coincidence {
    pub fn name(self) -> &'static str {
        match self {
            Coincidence::Observed => "obs",
            Coincidence::Unobserved => "unobs",
        }
    }
}
