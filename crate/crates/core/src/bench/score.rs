use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

/// Half-width multiplier of the nominal 90% interval.
pub const I90_MULTIPLIER: f64 = 1.64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rmspe: f64,
    pub i90: f64,
    pub crps: f64,
    pub n: usize,
}

fn check(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(FrkError::LengthMismatch { what: "truth and predictions", left: a, right: b });
    }
    if a == 0 {
        return Err(FrkError::InsufficientData("no locations to score".into()));
    }
    Ok(())
}

pub fn rmspe(truth: &[f64], mean: &[f64]) -> Result<f64> {
    check(truth.len(), mean.len())?;
    let sse: f64 = truth.iter().zip(mean).map(|(y, m)| (y - m).powi(2)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Share of `truth` inside `mean ± c·sd`.
pub fn coverage(truth: &[f64], mean: &[f64], sd: &[f64], c: f64) -> Result<f64> {
    check(truth.len(), mean.len())?;
    check(truth.len(), sd.len())?;
    let hits = truth.iter().zip(mean).zip(sd).filter(|((y, m), s)| (*y - *m).abs() <= c * **s).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Continuous ranked probability score of `N(mu, sd²)` at `y`.
pub fn crps_gaussian(y: f64, mu: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sd;
    let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    sd * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

pub fn score(truth: &[f64], mean: &[f64], sd: &[f64]) -> Result<Scores> {
    check(truth.len(), mean.len())?;
    check(truth.len(), sd.len())?;
    if let Some(s) = sd.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(FrkError::InvalidParameter(format!("invalid predictive sd {s}")));
    }
    let crps = truth.iter().zip(mean).zip(sd).map(|((y, m), s)| crps_gaussian(*y, *m, *s)).sum::<f64>() / truth.len() as f64;
    Ok(Scores { rmspe: rmspe(truth, mean)?, i90: coverage(truth, mean, sd, I90_MULTIPLIER)?, crps, n: truth.len() })
}
