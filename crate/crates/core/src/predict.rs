//! Prediction of the hidden process over BAUs and aggregated regions.

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisMatrix;
use crate::baus::{build_incidence, footprint_from_region, BauSet, Footprint, IncidenceMatrix, Region};
use crate::error::{FrkError, Result};
use crate::linalg::{cholesky, symmetrize, BlockDiagCholesky, CsrMatrix};
use crate::model::{SreModel, Variant};

/// Default largest number of regions for which the full predictive
/// covariance is formed.
pub const DEFAULT_FULL_COV_CAP: usize = 2000;

/// Prediction regions over a BAU set and their incidence matrix `C_P`.
#[derive(Debug, Clone)]
pub struct PredictionRegionSet {
    footprints: Vec<Footprint>,
    c_p: IncidenceMatrix,
}

impl PredictionRegionSet {
    pub fn from_footprints(baus: &BauSet, footprints: Vec<Footprint>) -> Result<Self> {
        if footprints.is_empty() {
            return Err(FrkError::InsufficientData("empty prediction region set".into()));
        }
        let c_p = build_incidence(baus, &footprints)?;
        Ok(Self { footprints, c_p })
    }

    /// Maps regions to footprints; the error names the first region that
    /// contains no BAU.
    pub fn from_regions(baus: &BauSet, regions: &[Region]) -> Result<Self> {
        let footprints = regions
            .iter()
            .enumerate()
            .map(|(k, r)| {
                footprint_from_region(baus, r).map_err(|e| match e {
                    FrkError::EmptyFootprint(_) => FrkError::EmptyFootprint(format!("prediction region {k} contains no BAU")),
                    e => e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_footprints(baus, footprints)
    }

    /// One region per BAU (`C_P = I`).
    pub fn bau_level(baus: &BauSet) -> Result<Self> {
        let n = baus.len();
        let footprints = (0..n).map(|i| Footprint::new(vec![i], n)).collect::<Result<Vec<_>>>()?;
        Self::from_footprints(baus, footprints)
    }

    pub fn len(&self) -> usize {
        self.footprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.footprints.is_empty()
    }

    pub fn footprints(&self) -> &[Footprint] {
        &self.footprints
    }

    pub fn c_p(&self) -> &IncidenceMatrix {
        &self.c_p
    }
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub full_covariance: bool,
    pub full_cov_cap: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { full_covariance: false, full_cov_cap: DEFAULT_FULL_COV_CAP }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub mu: DVector<f64>,
    pub var: DVector<f64>,
    pub sd: DVector<f64>,
    pub cov: Option<DMatrix<f64>>,
}

fn s_row(s: &BasisMatrix, i: usize) -> Vec<(usize, f64)> {
    match s {
        BasisMatrix::Sparse(m) => {
            let (c, v) = m.row(i);
            c.iter().copied().zip(v.iter().copied()).collect()
        }
        BasisMatrix::Dense(m) => m.row(i).iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect(),
    }
}

/// `cᵀ M c`, exploiting sparsity of `c` when few entries are nonzero.
fn quad_form(m: &DMatrix<f64>, c: &DVector<f64>) -> f64 {
    let nz: Vec<usize> = (0..c.len()).filter(|&i| c[i] != 0.0).collect();
    if nz.len() * 2 < c.len() {
        let mut acc = 0.0;
        for &i in &nz {
            let mut row = 0.0;
            for &j in &nz {
                row += m[(i, j)] * c[j];
            }
            acc += c[i] * row;
        }
        acc
    } else {
        c.dot(&(m * c))
    }
}

fn finish_var(v: f64) -> Result<f64> {
    if v < -1e-12 {
        return Err(FrkError::Singular(format!("negative predictive variance {v}")));
    }
    Ok(v.max(0.0))
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// Predicts over `regions` (BAU level when `None`), dispatching on the
/// model's variant.
pub fn predict(model: &SreModel, regions: Option<&PredictionRegionSet>, opts: &PredictOptions) -> Result<PredictionResult> {
    let owned;
    let regions = match regions {
        Some(r) => r,
        None => {
            owned = PredictionRegionSet::bau_level(model.baus())?;
            &owned
        }
    };
    match model.variant() {
        Variant::Case1 => predict_case1(model, regions, opts),
        Variant::Case2 => predict_case2(model, regions, opts),
    }
}

fn check_regions(model: &SreModel, regions: &PredictionRegionSet) -> Result<()> {
    if regions.c_p.ncols() != model.baus().len() {
        return Err(FrkError::LengthMismatch { what: "C_P columns and BAUs", left: regions.c_p.ncols(), right: model.baus().len() });
    }
    Ok(())
}

fn want_cov(n_p: usize, opts: &PredictOptions) -> bool {
    if opts.full_covariance && n_p > opts.full_cov_cap {
        log::warn!("{n_p} regions exceed the full-covariance cap {}; returning variances only", opts.full_cov_cap);
    }
    opts.full_covariance && n_p <= opts.full_cov_cap
}

/// `S_Pᵀ a_k` for every region, as dense columns.
fn region_basis_columns(s: &BasisMatrix, c_p: &CsrMatrix, r: usize) -> Vec<DVector<f64>> {
    (0..c_p.nrows())
        .map(|k| {
            let mut c = DVector::zeros(r);
            let (cols, vals) = c_p.row(k);
            for (&i, &a) in cols.iter().zip(vals) {
                for (l, v) in s_row(s, i) {
                    c[l] += a * v;
                }
            }
            c
        })
        .collect()
}

/// Case 1: `Ŷ_P = T_P α̂ + S_P μ̂_η`, `Σ_{Y_P|Z} = S_P Σ̂_η S_Pᵀ`.
pub fn predict_case1(model: &SreModel, regions: &PredictionRegionSet, opts: &PredictOptions) -> Result<PredictionResult> {
    if model.variant() != Variant::Case1 {
        return Err(FrkError::VariantMismatch { model: model.variant().name(), requested: "case1" });
    }
    let post = model.posterior().ok_or(FrkError::NotFitted)?;
    check_regions(model, regions)?;
    let alpha = &model.params().alpha;
    let y_hat = model.baus().covariates() * alpha + model.s().mul_vec(&post.mu);
    let mu = regions.c_p.csr().mul_vec(&y_hat);
    let cols = region_basis_columns(model.s(), regions.c_p.csr(), model.r());
    let var = DVector::from_iterator(cols.len(), cols.iter().map(|c| finish_var(quad_form(&post.sigma, c))).collect::<Result<Vec<_>>>()?);
    let cov = want_cov(cols.len(), opts).then(|| {
        let cs = DMatrix::from_columns(&cols);
        let mut cov = cs.tr_mul(&post.sigma) * &cs;
        symmetrize(&mut cov);
        cov
    });
    Ok(PredictionResult { sd: var.map(f64::sqrt), mu, var, cov })
}

/// Block elimination of the joint precision of `(η, ξ_O)` where `O` is the
/// set of BAUs touched by some observation; unobserved BAUs keep their
/// prior `ξ` variance.
struct Case2System {
    /// Local index within `O` per BAU, `usize::MAX` if unobserved.
    local: Vec<usize>,
    a: Option<BlockDiagCholesky>,
    /// `A⁻¹ B` for `B = C_Oᵀ Σ_ε⁻¹ S_Z` (`n_O × r`).
    ainv_b: DMatrix<f64>,
    /// Inverse of the Schur complement, `Var(η | Z)`.
    sch_inv: DMatrix<f64>,
    x_eta: DVector<f64>,
    x_xi: DVector<f64>,
    sigma2: f64,
}

impl Case2System {
    fn new(model: &SreModel) -> Result<Self> {
        let params = model.params();
        let sigma2 = params.sigma2;
        let n = model.baus().len();
        let r = model.r();
        let e: Vec<f64> = model.sigma_eps_diag().iter().map(|v| 1.0 / v).collect();
        let resid = model.z() - model.t_z() * &params.alpha;
        let e_resid = DVector::from_iterator(e.len(), e.iter().zip(resid.iter()).map(|(a, b)| a * b));
        let es = DMatrix::from_fn(model.m(), r, |i, j| e[i] * model.s_z()[(i, j)]);

        let kinv = cholesky(params.k().clone(), "K")?.inverse();
        let mut prec_eta = kinv + model.s_z().tr_mul(&es);
        let b_eta = model.s_z().tr_mul(&e_resid);

        let mut local = vec![usize::MAX; n];
        let mut observed = Vec::new();
        if sigma2 > 0.0 {
            let c = model.c_z().csr();
            for j in 0..c.nrows() {
                for &i in c.row(j).0 {
                    if local[i] == usize::MAX {
                        local[i] = 0;
                    }
                }
            }
            for (i, l) in local.iter_mut().enumerate() {
                if *l == 0 {
                    *l = observed.len();
                    observed.push(i);
                }
            }
        }
        if observed.is_empty() {
            symmetrize(&mut prec_eta);
            let pc = cholesky(prec_eta, "posterior precision of eta")?;
            let x_eta = pc.solve(&b_eta);
            let mut sch_inv = pc.inverse();
            symmetrize(&mut sch_inv);
            return Ok(Self {
                local,
                a: None,
                ainv_b: DMatrix::zeros(0, r),
                sch_inv,
                x_eta,
                x_xi: DVector::zeros(0),
                sigma2,
            });
        }

        let c = model.c_z().csr();
        let rows: Vec<Vec<(usize, f64)>> =
            (0..c.nrows()).map(|j| c.row(j).0.iter().zip(c.row(j).1).map(|(&i, &v)| (local[i], v)).collect()).collect();
        let c_o = CsrMatrix::from_rows(observed.len(), rows);
        let w = model.fs_bau_weights();
        let prior: Vec<f64> = observed.iter().map(|&i| 1.0 / (sigma2 * w[i])).collect();
        let a = c_o.weighted_tr_gram(&e).scale_add_diag(1.0, &prior);
        let af = a.factor("xi block of the posterior precision")?;
        let b = c_o.tr_mul_dense(&es);
        let ainv_b = af.solve_dense(&b);
        let mut sch = prec_eta - b.tr_mul(&ainv_b);
        symmetrize(&mut sch);
        let sc = cholesky(sch, "Schur complement of the posterior precision")?;
        let b_xi = c_o.tr_mul_vec(&e_resid);
        let x_eta = sc.solve(&(b_eta - ainv_b.tr_mul(&b_xi)));
        let x_xi = af.solve_vec(&(b_xi - &b * &x_eta));
        let mut sch_inv = sc.inverse();
        symmetrize(&mut sch_inv);
        Ok(Self { local, a: Some(af), ainv_b, sch_inv, x_eta, x_xi, sigma2 })
    }

    /// Splits a region row into the observed-BAU part (local indices, with
    /// `A⁻¹` applied) and the prior-variance contribution of unobserved BAUs.
    fn xi_part(&self, cols: &[usize], vals: &[f64], w: &[f64]) -> (Vec<(usize, f64)>, Vec<(usize, f64)>, f64) {
        let mut obs = Vec::new();
        let mut unobs = 0.0;
        for (&i, &a) in cols.iter().zip(vals) {
            if self.local[i] == usize::MAX {
                unobs += a * a * self.sigma2 * w[i];
            } else {
                obs.push((self.local[i], a));
            }
        }
        obs.sort_by_key(|e| e.0);
        let solved = match &self.a {
            Some(af) if !obs.is_empty() => af.solve_sparse(&obs),
            _ => Vec::new(),
        };
        (obs, solved, unobs)
    }
}

/// Case 2: prediction over the full vector `(η, ξ)` followed by exact
/// aggregation with `C_P`.
pub fn predict_case2(model: &SreModel, regions: &PredictionRegionSet, opts: &PredictOptions) -> Result<PredictionResult> {
    if model.variant() != Variant::Case2 {
        return Err(FrkError::VariantMismatch { model: model.variant().name(), requested: "case2" });
    }
    model.posterior().ok_or(FrkError::NotFitted)?;
    check_regions(model, regions)?;
    let sys = Case2System::new(model)?;
    let n = model.baus().len();
    let mut y_hat = model.baus().covariates() * &model.params().alpha + model.s().mul_vec(&sys.x_eta);
    for i in 0..n {
        if sys.local[i] != usize::MAX {
            y_hat[i] += sys.x_xi[sys.local[i]];
        }
    }
    let c_p = regions.c_p.csr();
    let mu = c_p.mul_vec(&y_hat);

    let w = model.fs_bau_weights();
    let mut cols = region_basis_columns(model.s(), c_p, model.r());
    let mut xi_terms = Vec::with_capacity(c_p.nrows());
    let mut var = DVector::zeros(c_p.nrows());
    for k in 0..c_p.nrows() {
        let (rc, rv) = c_p.row(k);
        let (obs, solved, unobs) = sys.xi_part(rc, rv, w);
        if !solved.is_empty() {
            for &(l, z) in &obs {
                for j in 0..model.r() {
                    cols[k][j] -= sys.ainv_b[(l, j)] * z;
                }
            }
        }
        let xi = sparse_dot(&obs, &solved) + unobs;
        var[k] = finish_var(xi + quad_form(&sys.sch_inv, &cols[k]))?;
        if opts.full_covariance {
            xi_terms.push((rc.to_vec(), rv.to_vec(), solved));
        }
    }

    let cov = if want_cov(c_p.nrows(), opts) {
        let cs = DMatrix::from_columns(&cols);
        let mut cov = cs.tr_mul(&sys.sch_inv) * &cs;
        let n_p = c_p.nrows();
        let obs_rows: Vec<Vec<(usize, f64)>> = xi_terms
            .iter()
            .map(|(c, v, _)| {
                let mut o: Vec<(usize, f64)> =
                    c.iter().zip(v).filter(|(i, _)| sys.local[**i] != usize::MAX).map(|(&i, &a)| (sys.local[i], a)).collect();
                o.sort_by_key(|e| e.0);
                o
            })
            .collect();
        let unobs_rows: Vec<Vec<(usize, f64)>> = xi_terms
            .iter()
            .map(|(c, v, _)| {
                c.iter()
                    .zip(v)
                    .filter(|(i, _)| sys.local[**i] == usize::MAX)
                    .map(|(&i, &a)| (i, a * (sys.sigma2 * w[i]).sqrt()))
                    .collect()
            })
            .collect();
        for k in 0..n_p {
            for l in 0..=k {
                let v = sparse_dot(&obs_rows[l], &xi_terms[k].2) + sparse_dot(&unobs_rows[k], &unobs_rows[l]);
                cov[(k, l)] += v;
                if k != l {
                    cov[(l, k)] += v;
                }
            }
        }
        symmetrize(&mut cov);
        Some(cov)
    } else {
        None
    };
    Ok(PredictionResult { sd: var.map(f64::sqrt), mu, var, cov })
}
