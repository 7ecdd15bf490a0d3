use nalgebra::{DMatrix, DVector};

use super::CovarianceModel;
use crate::error::{FrkError, Result};
use crate::linalg::cholesky;

/// Largest sample handled by the dense kriging path.
pub const MAX_KRIGING_OBS: usize = 4000;

/// Simple kriging with known covariance and zero mean. Returns the
/// predictive mean and variance at each prediction location.
pub fn exact_krige(
    cov: &CovarianceModel,
    obs: &[[f64; 2]],
    z: &[f64],
    sigma2_eps: f64,
    pred: &[[f64; 2]],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = obs.len();
    if z.len() != m {
        return Err(FrkError::LengthMismatch { what: "kriging locations and data", left: m, right: z.len() });
    }
    if m > MAX_KRIGING_OBS {
        return Err(FrkError::TooLarge(format!("exact kriging supports at most {MAX_KRIGING_OBS} observations, got {m}")));
    }
    if sigma2_eps < 0.0 {
        return Err(FrkError::InvalidParameter(format!("negative noise variance {sigma2_eps}")));
    }
    let mut c = DMatrix::from_fn(m, m, |i, j| cov.covariance(obs[i], obs[j]));
    for i in 0..m {
        c[(i, i)] += sigma2_eps;
    }
    let chol = cholesky(c, "data covariance")?;
    let cinv = chol.inverse();
    let cross = DMatrix::from_fn(pred.len(), m, |p, i| cov.covariance(pred[p], obs[i]));
    let w = &cross * cinv;
    let mean = &w * DVector::from_column_slice(z);
    let var = DVector::from_fn(pred.len(), |p, _| {
        let explained = w.row(p).dot(&cross.row(p));
        (cov.covariance(pred[p], pred[p]) - explained).max(0.0)
    });
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXP: CovarianceModel = CovarianceModel::Exponential { sigma2: 2.0, tau: 0.3 };

    #[test]
    fn interpolates_noise_free_data() {
        let obs = [[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]];
        let z = [1.0, -0.5, 2.0];
        let (mu, var) = exact_krige(&EXP, &obs, &z, 0.0, &obs).unwrap();
        for i in 0..3 {
            assert!((mu[i] - z[i]).abs() < 1e-12);
            assert!(var[i].abs() < 1e-12);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let (mu, var) = exact_krige(&EXP, &[[0.0, 0.0]], &[3.0], 0.1, &[[100.0, 0.0]]).unwrap();
        assert!(mu[0].abs() < 1e-12);
        assert!((var[0] - 2.0).abs() < 1e-12);
    }

    /// Gauss–Jordan elimination with partial pivoting, independent of the
    /// library factorisations.
    fn gauss_solve(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for col in 0..3 {
            let p = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, p);
            b.swap(col, p);
            for r in 0..3 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in 0..3 {
                        a[r][k] -= f * a[col][k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        [b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]]
    }

    #[test]
    fn three_point_hand_solve() {
        let obs: [[f64; 2]; 3] = [[0.2, 0.2], [0.4, 0.3], [0.7, 0.8]];
        let z = [0.3, -1.2, 0.8];
        let s0: [f64; 2] = [0.35, 0.4];
        let nug = 0.25;
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let h = ((obs[i][0] - obs[j][0]).powi(2) + (obs[i][1] - obs[j][1]).powi(2)).sqrt();
                a[i][j] = 2.0 * (-h / 0.3).exp() + if i == j { nug } else { 0.0 };
            }
        }
        let k: [f64; 3] = std::array::from_fn(|i| {
            let h = ((obs[i][0] - s0[0]).powi(2) + (obs[i][1] - s0[1]).powi(2)).sqrt();
            2.0 * (-h / 0.3).exp()
        });
        let wz = gauss_solve(a, z);
        let wk = gauss_solve(a, k);
        let mean: f64 = (0..3).map(|i| k[i] * wz[i]).sum();
        let var = 2.0 - (0..3).map(|i| k[i] * wk[i]).sum::<f64>();
        let (mu, v) = exact_krige(&EXP, &obs, &z, nug, &[s0]).unwrap();
        assert!((mu[0] - mean).abs() < 1e-12);
        assert!((v[0] - var).abs() < 1e-12);
    }

    #[test]
    fn variance_shrinks_with_more_data() {
        let all: Vec<[f64; 2]> = (0..30).map(|k| [((k * 7) % 30) as f64 / 30.0, ((k * 11) % 30) as f64 / 30.0]).collect();
        let z: Vec<f64> = (0..30).map(|k| (k as f64).sin()).collect();
        let targets = [[0.5, 0.5], [0.05, 0.9]];
        let mut prev = [f64::INFINITY; 2];
        for m in [1, 5, 12, 30] {
            let (_, var) = exact_krige(&EXP, &all[..m], &z[..m], 0.1, &targets).unwrap();
            for t in 0..2 {
                assert!(var[t] <= prev[t] + 1e-12);
                prev[t] = var[t];
            }
        }
    }

    #[test]
    fn rejects_oversized_sample() {
        let obs = vec![[0.0, 0.0]; MAX_KRIGING_OBS + 1];
        let z = vec![0.0; MAX_KRIGING_OBS + 1];
        assert!(matches!(exact_krige(&EXP, &obs, &z, 0.1, &[[0.0, 0.0]]), Err(FrkError::TooLarge(_))));
    }
}
