use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{cell_centre, is_left, Coincidence, CovarianceModel, Side, SimulationConfig, CLASSES};
use crate::error::{FrkError, Result};

/// Grids up to this many cells are simulated through a dense Cholesky
/// factor; larger ones through circulant embedding.
pub const DENSE_MAX_CELLS: usize = 4096;

/// Largest grid accepted for exact simulation.
pub const MAX_GRID_CELLS: usize = 40_000;

#[derive(Debug, Clone, Copy)]
enum Stationary {
    Exponential { sigma2: f64, tau: f64 },
    SquaredExponential { sigma2: f64, tau: f64 },
}

impl Stationary {
    fn eval(self, h: f64) -> f64 {
        match self {
            Self::Exponential { sigma2, tau } => sigma2 * (-h / tau).exp(),
            Self::SquaredExponential { sigma2, tau } => sigma2 * (-h * h / tau).exp(),
        }
    }

    fn sigma2(self) -> f64 {
        match self {
            Self::Exponential { sigma2, .. } | Self::SquaredExponential { sigma2, .. } => sigma2,
        }
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dense_field<R: Rng>(cov: Stationary, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let cells = n * n;
    let centres: Vec<[f64; 2]> = (0..cells).map(|k| cell_centre(n, k)).collect();
    let c = DMatrix::from_fn(cells, cells, |a, b| {
        let (p, q) = (centres[a], centres[b]);
        cov.eval(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
    });
    // Smooth covariances are numerically singular on fine grids; a small
    // nugget restores a usable factor.
    let mut jitter = 0.0;
    let chol = loop {
        let mut cj = c.clone();
        for i in 0..cells {
            cj[(i, i)] += jitter;
        }
        if let Some(ch) = cj.cholesky() {
            break ch;
        }
        jitter = if jitter == 0.0 { 1e-12 * cov.sigma2() } else { jitter * 100.0 };
        if jitter > 1e-4 * cov.sigma2() {
            return Err(FrkError::NotPositiveDefinite { matrix: "grid covariance" });
        }
    };
    if jitter > 0.0 {
        log::debug!("dense simulation used jitter {jitter:e}");
    }
    let z = DVector::from_vec(normals(rng, cells));
    Ok((chol.l() * z).as_slice().to_vec())
}

fn fft2(buf: &mut [Complex<f64>], m: usize, planner: &mut FftPlanner<f64>) {
    let fft = planner.plan_fft_forward(m);
    fft.process(buf);
    let mut t = vec![Complex::new(0.0, 0.0); m * m];
    for j in 0..m {
        for i in 0..m {
            t[i * m + j] = buf[j * m + i];
        }
    }
    fft.process(&mut t);
    for j in 0..m {
        for i in 0..m {
            buf[j * m + i] = t[i * m + j];
        }
    }
}

/// Circulant embedding on an `M × M` torus with `M ≥ 2n`, doubling `M` until
/// the embedding is numerically nonnegative definite (negative eigenvalues
/// within tolerance are clipped).
fn circulant_field<R: Rng>(cov: Stationary, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let h = 1.0 / n as f64;
    let mut planner = FftPlanner::new();
    let mut m = 2 * n;
    let lambda = loop {
        let mut c: Vec<Complex<f64>> = (0..m * m)
            .map(|k| {
                let (i, j) = (k % m, k / m);
                let di = i.min(m - i) as f64;
                let dj = j.min(m - j) as f64;
                Complex::new(cov.eval(h * (di * di + dj * dj).sqrt()), 0.0)
            })
            .collect();
        fft2(&mut c, m, &mut planner);
        let lam: Vec<f64> = c.iter().map(|v| v.re).collect();
        let max = lam.iter().cloned().fold(f64::MIN, f64::max);
        let min = lam.iter().cloned().fold(f64::MAX, f64::min);
        if min >= -1e-8 * max {
            break lam;
        }
        if m >= 8 * n {
            log::warn!("circulant embedding has negative eigenvalue {min:e} (max {max:e}); clipping");
            break lam;
        }
        m *= 2;
    };
    let scale = 1.0 / (m * m) as f64;
    let mut w: Vec<Complex<f64>> = lambda
        .iter()
        .map(|&l| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(a, b) * (l.max(0.0) * scale).sqrt()
        })
        .collect();
    fft2(&mut w, m, &mut planner);
    Ok((0..n * n).map(|k| w[(k / n) * m + k % n].re).collect())
}

fn stationary_field<R: Rng>(cov: Stationary, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n * n <= DENSE_MAX_CELLS {
        dense_field(cov, n, rng)
    } else {
        circulant_field(cov, n, rng)
    }
}

/// The nonstationary mix at `s` from the two stationary components.
pub fn ns_combine(s: [f64; 2], y1: f64, y2: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let b = (tau * s[0]).sin();
    0.5 * (y1 * b * (tau * s[1]).cos() + y2 * b)
}

/// Draws the process at every cell centre of an `n × n` grid.
pub fn simulate_field<R: Rng>(cov: &CovarianceModel, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    cov.validate()?;
    if n * n > MAX_GRID_CELLS {
        return Err(FrkError::TooLarge(format!(
            "{n}×{n} grid exceeds {MAX_GRID_CELLS} cells for exact simulation; use a coarser grid"
        )));
    }
    match *cov {
        CovarianceModel::Exponential { sigma2, tau } => stationary_field(Stationary::Exponential { sigma2, tau }, n, rng),
        CovarianceModel::SquaredExponential { sigma2, tau } => {
            stationary_field(Stationary::SquaredExponential { sigma2, tau }, n, rng)
        }
        CovarianceModel::NonstationaryMix { sigma1, tau1, sigma2, tau2 } => {
            let y1 = stationary_field(Stationary::Exponential { sigma2: sigma1 * sigma1, tau: tau1 }, n, rng)?;
            let y2 = stationary_field(Stationary::SquaredExponential { sigma2: sigma2 * sigma2, tau: tau2 }, n, rng)?;
            Ok((0..n * n).map(|k| ns_combine(cell_centre(n, k), y1[k], y2[k])).collect())
        }
    }
}

/// Observed cells and the prediction locations of each class. Fixed for a
/// given configuration and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub obs_cells: Vec<usize>,
    /// Prediction cells, grouped by class in the order of [`CLASSES`].
    pub pred_cells: Vec<usize>,
    /// `(side, class, start, end)` ranges into `pred_cells`.
    pub classes: Vec<(Side, Coincidence, usize, usize)>,
}

fn pick<R: Rng>(rng: &mut R, from: &[usize], k: usize) -> Vec<usize> {
    if from.len() <= k {
        return from.to_vec();
    }
    let mut out: Vec<usize> = sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
    out.sort_unstable();
    out
}

pub fn design(config: &SimulationConfig) -> Result<Design> {
    config.validate()?;
    let n = config.n;
    let (left, right): (Vec<usize>, Vec<usize>) = (0..n * n).partition(|&k| is_left(n, k));
    let m_lh = (config.lh_fraction * config.m as f64).round() as usize;
    let m_rh = config.m - m_lh.min(config.m);
    if m_lh > left.len() || m_rh > right.len() {
        return Err(FrkError::InvalidParameter(format!(
            "cannot place {m_lh}/{m_rh} observations on {}/{} cells",
            left.len(),
            right.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let obs_l = pick(&mut rng, &left, m_lh);
    let obs_r = pick(&mut rng, &right, m_rh);
    let mut observed = vec![false; n * n];
    for &k in obs_l.iter().chain(&obs_r) {
        observed[k] = true;
    }
    let mut pred_cells = Vec::new();
    let mut classes = Vec::new();
    for (side, class) in CLASSES {
        let pool: Vec<usize> = match side {
            Side::Lh => &left,
            Side::Rh => &right,
        }
        .iter()
        .copied()
        .filter(|&k| observed[k] == (class == Coincidence::Observed))
        .collect();
        let chosen = pick(&mut rng, &pool, config.max_per_class);
        let start = pred_cells.len();
        pred_cells.extend(chosen);
        classes.push((side, class, start, pred_cells.len()));
    }
    let mut obs_cells = obs_l;
    obs_cells.extend(obs_r);
    Ok(Design { obs_cells, pred_cells, classes })
}

/// One simulated dataset.
#[derive(Debug, Clone)]
pub struct Replication {
    pub field: Vec<f64>,
    /// Data at `design.obs_cells`.
    pub z: Vec<f64>,
    /// Fresh noisy data at `design.pred_cells`, for predicted-data coverage.
    pub z_new: Vec<f64>,
}

/// Dataset `l`, drawn from seed `seed + l`.
pub fn simulate(config: &SimulationConfig, design: &Design, l: usize) -> Result<Replication> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(l as u64));
    rng.set_stream(1);
    let field = simulate_field(&config.covariance, config.n, &mut rng)?;
    let sd = config.sigma2_eps().sqrt();
    let z = design.obs_cells.iter().map(|&k| field[k] + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let z_new = design.pred_cells.iter().map(|&k| field[k] + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Replication { field, z, z_new })
}

/// A field with its sample.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub design: Design,
    pub replication: Replication,
}

fn simulate_first(config: &SimulationConfig) -> Result<Simulation> {
    let design = design(config)?;
    let replication = simulate(config, &design, 0)?;
    Ok(Simulation { design, replication })
}

/// Stationary field and sample for replication 0.
pub fn simulate_gp(config: &SimulationConfig) -> Result<Simulation> {
    if matches!(config.covariance, CovarianceModel::NonstationaryMix { .. }) {
        return Err(FrkError::InvalidParameter("use simulate_ns for the nonstationary mix".into()));
    }
    simulate_first(config)
}

/// Nonstationary field and sample for replication 0.
pub fn simulate_ns(config: &SimulationConfig) -> Result<Simulation> {
    if !matches!(config.covariance, CovarianceModel::NonstationaryMix { .. }) {
        return Err(FrkError::InvalidParameter("simulate_ns needs the nonstationary mix".into()));
    }
    simulate_first(config)
}
