//! Maximum-likelihood estimation by the EM algorithm.
//!
//! All `m × m` work goes through the block-diagonal `D_Z`; the marginal
//! covariance `S_Z K S_Zᵀ + D_Z` is handled with the Sherman–Morrison–Woodbury
//! identity and the matrix determinant lemma using `K = L Lᵀ` and
//! `B = I + Lᵀ S_Zᵀ D_Z⁻¹ S_Z L`.

use argmin::core::{CostFunction, Executor};
use argmin::solver::brent::BrentRoot;
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};

use crate::error::{FrkError, Result};
use crate::linalg::{chol_ln_det, cholesky, symmetrize, BlockDiagCholesky};
use crate::model::{build_k, exponential_block, KType, Params, Posterior, ResolutionGroup, SreModel};

/// Cap on objective evaluations per resolution in the block-exponential update.
pub const K_MODEL_MAX_EVALS: usize = 500;

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub n_em: usize,
    /// Convergence threshold on the absolute change in log-likelihood.
    pub tol: f64,
    /// Log the likelihood at every iteration.
    pub print_lik: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { n_em: 100, tol: 0.01, print_lik: false }
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub iterations: usize,
    pub params: Params,
    pub posterior: Posterior,
    /// Log-likelihood at the initial and every subsequent parameter value.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// The fine-scale variance hit the upper end of its search bracket at
    /// least once.
    pub sigma2_at_bound: bool,
}

/// How the fine-scale variance update is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sigma2Method {
    /// Closed form when `C_Z V C_Zᵀ` and `Σ_ε` are multiples of the identity,
    /// root finding otherwise.
    #[default]
    Auto,
    RootFind,
    ClosedForm,
}

#[derive(Debug, Clone)]
pub struct Sigma2Update {
    pub sigma2: f64,
    pub alpha: DVector<f64>,
    pub at_bound: bool,
}

fn residual(model: &SreModel, alpha: &DVector<f64>) -> DVector<f64> {
    model.z() - model.t_z() * alpha
}

/// Conditional mean and covariance of `η` given `Z` at `params`.
pub fn e_step(model: &SreModel, params: &Params) -> Result<Posterior> {
    let dz = model.d_z(params.sigma2).factor("D_Z")?;
    e_step_with(model, params, &dz)
}

fn e_step_with(model: &SreModel, params: &Params, dz: &BlockDiagCholesky) -> Result<Posterior> {
    let dinv_s = dz.solve_dense(model.s_z());
    let mut g = model.s_z().tr_mul(&dinv_s);
    symmetrize(&mut g);
    let l = params.k_lower();
    let r = l.nrows();
    let mut b = DMatrix::identity(r, r) + l.tr_mul(&g) * l;
    symmetrize(&mut b);
    let bc = cholesky(b, "I + L'S'D^-1SL")?;
    let mut sigma = l * bc.solve(&l.transpose());
    symmetrize(&mut sigma);
    let mu = &sigma * dinv_s.tr_mul(&residual(model, &params.alpha));
    Ok(Posterior { mu, sigma })
}

/// Generalised least squares for `α` with response `y`.
fn gls(model: &SreModel, dz: &BlockDiagCholesky, y: &DVector<f64>) -> Result<DVector<f64>> {
    let dinv_t = dz.solve_dense(model.t_z());
    let mut a = model.t_z().tr_mul(&dinv_t);
    symmetrize(&mut a);
    let chol = cholesky(a, "T_Z'D^-1T_Z").map_err(|_| FrkError::Singular("T_Z'D_Z^-1 T_Z".into()))?;
    Ok(chol.solve(&dinv_t.tr_mul(y)))
}

/// `α = (T_Zᵀ D_Z⁻¹ T_Z)⁻¹ T_Zᵀ D_Z⁻¹ (Z − S_Z μ)`.
pub fn update_alpha(model: &SreModel, mu: &DVector<f64>, dz: &BlockDiagCholesky) -> Result<DVector<f64>> {
    gls(model, dz, &(model.z() - model.s_z() * mu))
}

/// `K = Σ_η + μ_η μ_ηᵀ`.
pub fn update_k_unstructured(post: &Posterior) -> DMatrix<f64> {
    let mut k = &post.sigma + &post.mu * post.mu.transpose();
    symmetrize(&mut k);
    k
}

/// Second moment `E[ηηᵀ | Z] = Σ_η + μ μᵀ` restricted to `indices`.
fn second_moment(post: &Posterior, indices: &[usize]) -> DMatrix<f64> {
    let n = indices.len();
    DMatrix::from_fn(n, n, |a, b| {
        let (i, j) = (indices[a], indices[b]);
        post.sigma[(i, j)] + post.mu[i] * post.mu[j]
    })
}

fn block_objective(theta: (f64, f64), g: &DMatrix<f64>, distances: &DMatrix<f64>) -> f64 {
    let k = exponential_block(theta, distances);
    match cholesky(k, "K_n") {
        Ok(c) => -chol_ln_det(&c) - c.solve(g).trace(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// `ln|K⁻¹| − tr(K⁻¹ (Σ_η + μμᵀ))` for block-exponential `K(ϑ)`.
pub fn k_model_objective(theta: &[(f64, f64)], post: &Posterior, groups: &[ResolutionGroup]) -> f64 {
    theta
        .iter()
        .zip(groups)
        .map(|(t, grp)| block_objective(*t, &second_moment(post, &grp.indices), &grp.distances))
        .sum()
}

/// Objective with `ϑ₁` profiled out: `ϑ₁ = tr(R⁻¹G)/r` for correlation `R(ϑ₂)`.
#[derive(Clone, Copy)]
struct Profile<'a> {
    g: &'a DMatrix<f64>,
    /// Lower factor `M` with `G = MMᵀ`, when `G` admits one.
    g_factor: Option<&'a DMatrix<f64>>,
    distances: &'a DMatrix<f64>,
}

impl Profile<'_> {
    fn eval(&self, theta2: f64) -> Option<(f64, f64)> {
        if !(theta2.is_finite() && theta2 > 0.0) {
            return None;
        }
        let n = self.g.nrows() as f64;
        let corr = exponential_block((1.0, theta2), self.distances);
        let c = cholesky(corr, "R").ok()?;
        let t = match &self.g_factor {
            Some(m) => c.l_dirty().solve_lower_triangular(*m)?.norm_squared(),
            None => c.solve(self.g).trace(),
        };
        if !(t > 0.0 && t.is_finite()) {
            return None;
        }
        let theta1 = t / n;
        Some((theta1, -n * theta1.ln() - chol_ln_det(&c) - n))
    }
}

impl CostFunction for Profile<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(x.exp()).map_or(f64::INFINITY, |(_, v)| -v))
    }
}

/// Block-exponential `K` update: per resolution, Nelder–Mead over `ln ϑ₂`
/// with `ϑ₁` in closed form, started at the previous value. A resolution
/// keeps its previous parameters unless the objective improves.
pub fn update_k_model(theta_prev: &[(f64, f64)], post: &Posterior, groups: &[ResolutionGroup]) -> Result<Vec<(f64, f64)>> {
    if theta_prev.len() != groups.len() {
        return Err(FrkError::LengthMismatch { what: "K parameters and resolutions", left: theta_prev.len(), right: groups.len() });
    }
    let mut out = Vec::with_capacity(groups.len());
    for (&prev, grp) in theta_prev.iter().zip(groups) {
        let g = second_moment(post, &grp.indices);
        let start = block_objective(prev, &g, &grp.distances);
        if !start.is_finite() {
            return Err(FrkError::Singular(format!("K objective is not finite at resolution {}", grp.resolution)));
        }
        if grp.indices.len() == 1 {
            out.push((g[(0, 0)], prev.1));
            continue;
        }
        let g_factor = g.clone().cholesky().map(|c| c.unpack());
        let profile = Profile { g: &g, g_factor: g_factor.as_ref(), distances: &grp.distances };
        let x0 = prev.1.ln();
        let solver = NelderMead::new(vec![x0, x0 + 0.5])
            .with_sd_tolerance(1e-10 * start.abs().max(1.0))
            .map_err(|e| FrkError::InvalidParameter(e.to_string()))?;
        // at most three evaluations per iteration in one dimension
        let res = Executor::new(profile, solver)
            .configure(|s| s.max_iters((K_MODEL_MAX_EVALS / 3) as u64))
            .run()
            .map_err(|e| FrkError::Singular(e.to_string()))?;
        let best = res.state().best_param.unwrap_or(x0);
        match profile.eval(best.exp()) {
            Some((theta1, value)) if value >= start => out.push((theta1, best.exp())),
            _ => out.push(prev),
        }
    }
    Ok(out)
}

/// Sufficient statistics of the posterior that enter the σ² update.
struct Sigma2Stats {
    /// `Z − S_Z μ`.
    zs: DVector<f64>,
    /// `S_Z μ`.
    u: DVector<f64>,
    /// Diagonal blocks of `S_Z (Σ + μμᵀ) S_Zᵀ` in the block structure of `V`.
    w: Vec<DMatrix<f64>>,
}

fn sigma2_stats(model: &SreModel, post: &Posterior) -> Sigma2Stats {
    let gm = update_k_unstructured(post);
    let u = model.s_z() * &post.mu;
    let structure = model.v_z().structure();
    let sg = model.s_z() * &gm;
    let w = structure
        .components()
        .iter()
        .map(|members| {
            let n = members.len();
            DMatrix::from_fn(n, n, |a, b| sg.row(members[a]).dot(&model.s_z().row(members[b])))
        })
        .collect();
    Sigma2Stats { zs: model.z() - &u, u, w }
}

/// `tr(D⁻¹VD⁻¹Ω) − tr(D⁻¹V)` at `σ²`, with `α(σ²)` substituted into `Ω`.
fn trace_equation(model: &SreModel, stats: &Sigma2Stats, sigma2: f64) -> Result<(f64, DVector<f64>)> {
    let d = model.d_z(sigma2);
    let dz = d.factor("D_Z")?;
    let alpha = gls(model, &dz, &stats.zs)?;
    let r = residual(model, &alpha);
    let v = model.v_z();
    let structure = v.structure();
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    if structure.all_singletons() {
        for (j, members) in structure.components().iter().enumerate() {
            let i = members[0];
            let dj = d.blocks()[j][(0, 0)];
            let vj = v.blocks()[j][(0, 0)];
            let omega = stats.w[j][(0, 0)] - 2.0 * stats.u[i] * r[i] + r[i] * r[i];
            t1 += vj / dj;
            t2 += vj * omega / (dj * dj);
        }
    } else {
        for (b, members) in structure.components().iter().enumerate() {
            let n = members.len();
            let ub = DVector::from_iterator(n, members.iter().map(|&i| stats.u[i]));
            let rb = DVector::from_iterator(n, members.iter().map(|&i| r[i]));
            let omega = &stats.w[b] - &ub * rb.transpose() - &rb * ub.transpose() + &rb * rb.transpose();
            let f = &dz.factors()[b];
            let mv = f.solve(&v.blocks()[b]);
            t1 += mv.trace();
            t2 += (mv * f.solve(&omega)).trace();
        }
    }
    Ok((t2 - t1, alpha))
}

/// Residual of the σ² trace equation at a given σ², for diagnostics.
pub fn sigma2_equation_residual(model: &SreModel, post: &Posterior, sigma2: f64) -> Result<f64> {
    Ok(trace_equation(model, &sigma2_stats(model, post), sigma2)?.0)
}

struct TraceEquation<'a> {
    model: &'a SreModel,
    stats: &'a Sigma2Stats,
}

impl CostFunction for TraceEquation<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, x: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(trace_equation(self.model, self.stats, *x)?.0)
    }
}

fn recover(e: argmin::core::Error) -> FrkError {
    match e.downcast::<FrkError>() {
        Ok(e) => e,
        Err(e) => FrkError::Singular(e.to_string()),
    }
}

/// Joint update of the fine-scale variance and `α`.
pub fn update_sigma2(model: &SreModel, post: &Posterior, method: Sigma2Method) -> Result<Sigma2Update> {
    let stats = sigma2_stats(model, post);
    let eps = model.sigma_eps_diag();
    let gamma1 = model.v_z().scaled_identity();
    let gamma2 = eps.iter().all(|e| *e == eps[0]).then_some(eps[0]);
    let closed = match (method, gamma1, gamma2) {
        (Sigma2Method::ClosedForm, Some(g1), Some(g2)) | (Sigma2Method::Auto, Some(g1), Some(g2)) => Some((g1, g2)),
        (Sigma2Method::ClosedForm, _, _) => {
            return Err(FrkError::InvalidParameter("closed-form update needs V and Σ_ε proportional to I".into()))
        }
        _ => None,
    };
    if let Some((g1, g2)) = closed {
        let m = model.m() as f64;
        let dz = model.d_z(1.0).factor("D_Z")?;
        let alpha = gls(model, &dz, &stats.zs)?;
        let r = residual(model, &alpha);
        let tr_omega: f64 = (0..model.m()).map(|j| stats.w[j][(0, 0)] - 2.0 * stats.u[j] * r[j] + r[j] * r[j]).sum();
        let sigma2 = ((tr_omega / m - g2) / g1).max(0.0);
        return Ok(Sigma2Update { sigma2, alpha, at_bound: false });
    }

    let z = model.z();
    let zm = z.mean();
    let var_z = if z.len() > 1 { z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / (z.len() - 1) as f64 } else { 0.0 };
    let hi = 10.0 * if var_z > 0.0 { var_z } else { 1.0 };
    let (g0, a0) = trace_equation(model, &stats, 0.0)?;
    if g0 <= 0.0 {
        return Ok(Sigma2Update { sigma2: 0.0, alpha: a0, at_bound: false });
    }
    let (ghi, ahi) = trace_equation(model, &stats, hi)?;
    if ghi > 0.0 {
        log::warn!("fine-scale variance reached the upper bracket {hi}");
        return Ok(Sigma2Update { sigma2: hi, alpha: ahi, at_bound: true });
    }
    let solver = BrentRoot::new(0.0, hi, 1e-15 * hi);
    let res = Executor::new(TraceEquation { model, stats: &stats }, solver)
        .configure(|s| s.max_iters(500))
        .run()
        .map_err(recover)?;
    let sigma2 = res.state().best_param.or(res.state().param).ok_or_else(|| FrkError::Singular("root finder returned no value".into()))?;
    let (_, alpha) = trace_equation(model, &stats, sigma2)?;
    Ok(Sigma2Update { sigma2, alpha, at_bound: false })
}

/// Gaussian log-likelihood of `Z` at `params`.
pub fn loglik(model: &SreModel, params: &Params) -> Result<f64> {
    let dz = model.d_z(params.sigma2).factor("D_Z")?;
    let y = residual(model, &params.alpha);
    let dinv_y = dz.solve_vec(&y);
    let dinv_s = dz.solve_dense(model.s_z());
    let mut g = model.s_z().tr_mul(&dinv_s);
    symmetrize(&mut g);
    let l = params.k_lower();
    let r = l.nrows();
    let mut b = DMatrix::identity(r, r) + l.tr_mul(&g) * l;
    symmetrize(&mut b);
    let bc = cholesky(b, "I + L'S'D^-1SL")?;
    let c = l.tr_mul(&model.s_z().tr_mul(&dinv_y));
    let quad = y.dot(&dinv_y) - c.dot(&bc.solve(&c));
    let ln_det = dz.ln_det() + chol_ln_det(&bc);
    let m = model.m() as f64;
    Ok(-0.5 * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * ln_det - 0.5 * quad)
}

/// One EM iteration from `params`. Returns the new parameters and whether
/// the σ² search hit its upper bound.
pub fn em_step(model: &SreModel, params: &Params) -> Result<(Params, bool)> {
    let post = e_step(model, params)?;
    let (k, theta) = match model.k_type() {
        KType::Unstructured => (update_k_unstructured(&post), None),
        KType::BlockExponential => {
            let groups = model.groups().expect("block-exponential model has resolution groups");
            let prev = params.theta.as_deref().expect("block-exponential parameters");
            let theta = update_k_model(prev, &post, groups)?;
            (build_k(&theta, groups, model.r())?, Some(theta))
        }
    };
    let s2 = update_sigma2(model, &post, Sigma2Method::Auto)?;
    Ok((Params::new(s2.alpha, k, theta, s2.sigma2)?, s2.at_bound))
}

/// Runs EM from the model's current parameters.
pub fn fit(model: SreModel, opts: &EmOptions) -> Result<(SreModel, EmState)> {
    if !(opts.tol >= 0.0) {
        return Err(FrkError::InvalidParameter(format!("tol must be nonnegative, got {}", opts.tol)));
    }
    let mut params = model.params().clone();
    let mut ll_prev = loglik(&model, &params)?;
    let mut trace = vec![ll_prev];
    let mut converged = false;
    let mut at_bound = false;
    let mut iterations = 0;
    if opts.print_lik {
        log::info!("EM start: loglik {ll_prev}");
    }
    for l in 1..=opts.n_em {
        let (next, bound) = em_step(&model, &params)?;
        at_bound |= bound;
        let ll = loglik(&model, &next)?;
        if ll < ll_prev - 1e-6 * ll_prev.abs() {
            return Err(FrkError::LikelihoodDecrease { iteration: l, previous: ll_prev, current: ll });
        }
        if opts.print_lik {
            log::info!("EM iteration {l}: loglik {ll}");
        }
        params = next;
        trace.push(ll);
        iterations = l;
        if (ll - ll_prev).abs() < opts.tol {
            converged = true;
            break;
        }
        ll_prev = ll;
    }
    let posterior = e_step(&model, &params)?;
    let fitted = model.with_fit(params.clone(), posterior.clone())?;
    Ok((fitted, EmState { iterations, params, posterior, loglik_trace: trace, converged, sigma2_at_bound: at_bound }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{local_basis, BasisFamily};
    use crate::baus::{auto_baus, BoundingBox, Observation};
    use crate::manifold::Manifold;
    use crate::model::{assemble, resolution_groups, AssembleOptions, MeasErrorConfig, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    /// Model on the unit square with `n_obs` point observations, one per
    /// BAU, a 3×3 bisquare basis and σ²_ε = 0.05.
    fn toy(n_obs: usize, seed: u64, k_type: KType) -> SreModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let baus = auto_baus(&Manifold::plane(), &[0.05, 0.05], &BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), 1.0, 1000)
            .unwrap();
        let centres: Vec<Vec<f64>> = (0..9).map(|k| vec![1.0 / 6.0 + (k % 3) as f64 / 3.0, 1.0 / 6.0 + (k / 3) as f64 / 3.0]).collect();
        let basis = local_basis(&Manifold::plane(), &centres, &[0.5; 9], BasisFamily::Bisquare).unwrap();
        let mut cells: Vec<usize> = (0..baus.len()).collect();
        for i in 0..n_obs {
            let j = rng.random_range(i..cells.len());
            cells.swap(i, j);
        }
        let obs: Vec<Observation> = cells[..n_obs]
            .iter()
            .map(|&i| {
                let c = baus.centroid(i);
                let y = (3.0 * c[0]).sin() + c[1] * c[1] + 0.3 * normal(&mut rng);
                Observation::point(c.to_vec(), y + 0.05f64.sqrt() * normal(&mut rng))
            })
            .collect();
        let cfg = ModelConfig { k_type, meas_error: MeasErrorConfig::given(0.05), ..Default::default() };
        assemble(baus, basis, &obs, &cfg, &AssembleOptions::default()).unwrap()
    }

    fn dense_loglik(model: &SreModel, params: &Params) -> f64 {
        let sz = model.marginal_covariance(params);
        let y = residual(model, &params.alpha);
        let c = sz.cholesky().unwrap();
        let m = y.len() as f64;
        -0.5 * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol_ln_det(&c) - 0.5 * y.dot(&c.solve(&y))
    }

    #[test]
    fn scalar_e_step() {
        // one datum, one basis function with S_Z = 1, K = 1, D_Z = 1, residual 2
        let baus = crate::baus::BauSet::new(
            Manifold::real_line(),
            vec![vec![0.0]],
            crate::baus::CellGeometry::Rect(vec![1.0]),
            vec![1.0],
        )
        .unwrap();
        let basis = local_basis(&Manifold::real_line(), &[vec![0.0]], &[1.0], BasisFamily::Bisquare).unwrap();
        let cfg = ModelConfig { meas_error: MeasErrorConfig::given(0.5), ..Default::default() };
        let model = assemble(baus, basis, &[Observation::point(vec![0.0], 2.0)], &cfg, &AssembleOptions::default()).unwrap();
        let params = Params::new(DVector::from_element(1, 0.0), DMatrix::identity(1, 1), None, 0.5).unwrap();
        let post = e_step(&model, &params).unwrap();
        assert!((post.sigma[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((post.mu[0] - 1.0).abs() < 1e-15);

        let ll = loglik(&model, &params).unwrap();
        let v: f64 = 2.0;
        let expect = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 4.0 / (2.0 * v);
        assert!((ll - expect).abs() < 1e-14);

        let k = update_k_unstructured(&post);
        assert!((k[(0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn exact_mean_gives_zero_mu() {
        let model = toy(30, 1, KType::Unstructured);
        let alpha = DVector::from_element(1, 0.0);
        let zero_model = {
            let mut m = model.clone();
            m.data.z = DVector::zeros(m.m());
            m
        };
        let p = Params::new(alpha, DMatrix::identity(9, 9), None, 0.3).unwrap();
        assert!(e_step(&zero_model, &p).unwrap().mu.amax() == 0.0);
    }

    #[test]
    fn large_k_limit() {
        let model = toy(40, 2, KType::Unstructured);
        let keep = [0usize, 4, 8];
        let mut sub = model.clone();
        sub.s_z = DMatrix::from_fn(model.m(), 3, |i, j| model.s_z()[(i, keep[j])]);
        let p = Params::new(DVector::from_element(1, 0.2), DMatrix::identity(3, 3) * 1e12, None, 0.3).unwrap();
        let post = e_step(&sub, &p).unwrap();
        let d = sub.d_z(0.3).to_dense();
        let info = sub.s_z().transpose() * d.try_inverse().unwrap() * sub.s_z();
        let lim = info.try_inverse().unwrap();
        let rel = (&post.sigma - &lim).abs().max() / lim.abs().max();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn alpha_updates() {
        let model = toy(50, 3, KType::Unstructured);
        let mu = DVector::from_fn(9, |i, _| 0.1 * i as f64);
        // D ∝ I: ordinary least squares on the adjusted data
        let dz = model.d_z(0.0).factor("D").unwrap();
        let a = update_alpha(&model, &mu, &dz).unwrap();
        let adj = model.z() - model.s_z() * &mu;
        assert!((a[0] - adj.mean()).abs() < 1e-13);

        // dense GLS with covariates and non-trivial D
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = model.baus().len();
        let cov = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let baus = model.baus().clone().with_covariates(vec!["a".into(), "b".into()], cov).unwrap();
        let fs: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
        let baus = crate::baus::BauSet::new(baus.manifold().clone(), baus.centroids().map(|c| c.to_vec()).collect(), baus.cell().clone(), fs)
            .unwrap()
            .with_covariates(vec!["a".into(), "b".into()], DMatrix::from_fn(n, 2, |i, j| baus.covariates()[(i, j + 1)]))
            .unwrap();
        let obs: Vec<Observation> = (0..model.m())
            .map(|j| Observation::point(crate::model::footprint_locations(model.baus(), model.data())[j].clone(), model.z()[j]))
            .collect();
        let cfg = ModelConfig { meas_error: MeasErrorConfig::given(0.05), ..Default::default() };
        let m2 = assemble(baus, model.basis().clone(), &obs, &cfg, &AssembleOptions::default()).unwrap();
        let dz = m2.d_z(0.7).factor("D").unwrap();
        let a = update_alpha(&m2, &mu, &dz).unwrap();
        let dinv = m2.d_z(0.7).to_dense().try_inverse().unwrap();
        let t = m2.t_z();
        let rhs = m2.z() - m2.s_z() * &mu;
        let dense = (t.transpose() * &dinv * t).try_inverse().unwrap() * t.transpose() * &dinv * rhs;
        assert!((a - dense).amax() < 1e-10);
    }

    #[test]
    fn smw_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..100 {
            let m_obs = rng.random_range(5..=40);
            let model = toy(m_obs, 100 + case, KType::Unstructured);
            let r = 9;
            let a = DMatrix::from_fn(r, r, |_, _| normal(&mut rng));
            let k = &a * a.transpose() * 0.3 + DMatrix::identity(r, r) * 0.05;
            let p = Params::new(DVector::from_element(1, normal(&mut rng)), k, None, rng.random::<f64>()).unwrap();
            let ll = loglik(&model, &p).unwrap();
            let dense = dense_loglik(&model, &p);
            assert!((ll - dense).abs() <= 1e-8 * dense.abs().max(1.0), "{ll} vs {dense}");
        }
    }

    #[test]
    fn tiny_k_limit() {
        let model = toy(30, 5, KType::Unstructured);
        let p = Params::new(DVector::from_element(1, 0.4), DMatrix::identity(9, 9) * 1e-12, None, 0.2).unwrap();
        let ll = loglik(&model, &p).unwrap();
        let d = model.d_z(0.2).to_dense();
        let y = residual(&model, &p.alpha);
        let c = d.cholesky().unwrap();
        let m = y.len() as f64;
        let expect = -0.5 * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol_ln_det(&c) - 0.5 * y.dot(&c.solve(&y));
        assert!((ll - expect).abs() < 1e-4);
    }

    #[test]
    fn sigma2_closed_form_and_root() {
        let model = toy(60, 6, KType::Unstructured);
        let post = e_step(&model, model.params()).unwrap();
        let closed = update_sigma2(&model, &post, Sigma2Method::ClosedForm).unwrap();
        let root = update_sigma2(&model, &post, Sigma2Method::RootFind).unwrap();
        assert!(closed.sigma2 > 0.0);
        assert!((closed.sigma2 - root.sigma2).abs() < 1e-10, "{} {}", closed.sigma2, root.sigma2);
        let g = sigma2_equation_residual(&model, &post, root.sigma2).unwrap();
        assert!(g.abs() < 1e-9 * model.m() as f64);
    }

    #[test]
    fn closed_form_arithmetic_and_clamp() {
        // With V = I and Σ_ε = γ₂ I, σ² = tr(Ω)/m − γ₂. Choose data so that
        // S_Z μ = 0 and Σ_η = 0 contributions vanish: tr(Ω)/m is then the
        // mean squared residual about the mean.
        let mut model = toy(20, 7, KType::Unstructured);
        let post = Posterior { mu: DVector::zeros(9), sigma: DMatrix::zeros(9, 9) };
        let m = model.m();
        // residuals ±sqrt(0.5 + 0.05)
        let amp = 0.55f64.sqrt();
        model.data.z = DVector::from_fn(m, |j, _| if j % 2 == 0 { amp } else { -amp });
        let s = update_sigma2(&model, &post, Sigma2Method::Auto).unwrap();
        assert!((s.sigma2 - 0.5).abs() < 1e-12, "{}", s.sigma2);
        model.data.z = DVector::from_fn(m, |j, _| if j % 2 == 0 { 0.1 } else { -0.1 });
        assert_eq!(update_sigma2(&model, &post, Sigma2Method::Auto).unwrap().sigma2, 0.0);
    }

    #[test]
    fn sigma2_root_with_heteroscedastic_weights() {
        let model = toy(80, 8, KType::Unstructured);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = model.baus().len();
        let fs: Vec<f64> = (0..n).map(|_| 0.3 + 2.0 * rng.random::<f64>()).collect();
        let baus = crate::baus::BauSet::new(model.baus().manifold().clone(), model.baus().centroids().map(|c| c.to_vec()).collect(), model.baus().cell().clone(), fs)
            .unwrap();
        let m2 = assemble_like(&model, baus);
        let post = e_step(&m2, m2.params()).unwrap();
        let s = update_sigma2(&m2, &post, Sigma2Method::Auto).unwrap();
        assert!(s.sigma2 > 0.0);
        // residual checked through an independent dense evaluation
        let d = m2.d_z(s.sigma2).to_dense();
        let v = m2.v_z().to_dense();
        let dinv = d.clone().try_inverse().unwrap();
        let r = m2.z() - m2.t_z() * &s.alpha;
        let gm = update_k_unstructured(&post);
        let u = m2.s_z() * &post.mu;
        let omega = m2.s_z() * gm * m2.s_z().transpose() - &u * r.transpose() - &r * u.transpose() + &r * r.transpose();
        let lhs = (&dinv * &v).trace();
        let rhs = (&dinv * &v * &dinv * omega).trace();
        assert!((lhs - rhs).abs() < 1e-9 * m2.m() as f64, "{}", lhs - rhs);
        assert!(matches!(update_sigma2(&m2, &post, Sigma2Method::ClosedForm), Err(FrkError::InvalidParameter(_))));
    }

    fn assemble_like(model: &SreModel, baus: crate::baus::BauSet) -> SreModel {
        let locs = crate::model::footprint_locations(model.baus(), model.data());
        let obs: Vec<Observation> = (0..model.m()).map(|j| Observation::point(locs[j].clone(), model.z()[j])).collect();
        assemble(baus, model.basis().clone(), &obs, model.config(), &AssembleOptions::default()).unwrap()
    }

    #[test]
    fn single_function_k_model() {
        let basis = local_basis(&Manifold::plane(), &[vec![0.0, 0.0]], &[1.0], BasisFamily::Bisquare).unwrap();
        let groups = resolution_groups(&basis).unwrap();
        let post = Posterior { mu: DVector::from_element(1, 0.8), sigma: DMatrix::from_element(1, 1, 0.3) };
        let t = update_k_model(&[(1.0, 2.0)], &post, &groups).unwrap();
        assert!((t[0].0 - (0.3 + 0.64)).abs() <= 1e-4 * 0.94);
    }

    #[test]
    fn k_model_improves_and_matches_grid() {
        // two resolutions of two functions each
        let functions = vec![
            crate::basis::BasisFunction { resolution: 1, ..crate::basis::BasisFunction::new(BasisFamily::Bisquare, vec![0.0, 0.0], 1.0) },
            crate::basis::BasisFunction { resolution: 1, ..crate::basis::BasisFunction::new(BasisFamily::Bisquare, vec![1.0, 0.0], 1.0) },
            crate::basis::BasisFunction { resolution: 2, ..crate::basis::BasisFunction::new(BasisFamily::Bisquare, vec![0.0, 0.5], 1.0) },
            crate::basis::BasisFunction { resolution: 2, ..crate::basis::BasisFunction::new(BasisFamily::Bisquare, vec![0.5, 0.5], 1.0) },
        ];
        let basis = crate::basis::BasisSet::from_functions(Manifold::plane(), functions).unwrap();
        let groups = resolution_groups(&basis).unwrap();
        let sigma = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.4, 0.1, 0.0, //
            0.4, 1.2, 0.0, 0.1, //
            0.1, 0.0, 0.5, 0.3, //
            0.0, 0.1, 0.3, 0.6,
        ]);
        let post = Posterior { mu: DVector::from_vec(vec![0.3, -0.2, 0.1, 0.4]), sigma };
        let prev = vec![(0.5, 0.5), (0.5, 0.5)];
        let t = update_k_model(&prev, &post, &groups).unwrap();
        let start = k_model_objective(&prev, &post, &groups);
        let got = k_model_objective(&t, &post, &groups);
        assert!(got >= start);

        // brute-force grid over (ϑ₁, ϑ₂) per resolution
        let mut best = [(f64::NEG_INFINITY, 0.0, 0.0); 2];
        for a in 1..=300 {
            for b in 1..=300 {
                let th = (a as f64 * 0.01, b as f64 * 0.02);
                for (n, grp) in groups.iter().enumerate() {
                    let v = block_objective(th, &second_moment(&post, &grp.indices), &grp.distances);
                    if v > best[n].0 {
                        best[n] = (v, th.0, th.1);
                    }
                }
            }
        }
        for n in 0..2 {
            assert!((t[n].0 - best[n].1).abs() <= 0.01, "res {n}: {:?} vs {:?}", t[n], best[n]);
            assert!((t[n].1 - best[n].2).abs() <= 0.02, "res {n}: {:?} vs {:?}", t[n], best[n]);
            let v = block_objective(t[n], &second_moment(&post, &groups[n].indices), &groups[n].distances);
            assert!(v >= best[n].0 - 1e-9);
        }

        // already optimal: objective does not go down
        let again = update_k_model(&t, &post, &groups).unwrap();
        assert!(k_model_objective(&again, &post, &groups) >= got);
    }

    #[test]
    fn zero_iterations_leave_parameters() {
        let model = toy(40, 10, KType::Unstructured);
        let before = model.params().clone();
        let (fitted, state) = fit(model, &EmOptions { n_em: 0, ..Default::default() }).unwrap();
        assert!(!state.converged);
        assert_eq!(state.iterations, 0);
        assert_eq!(fitted.params().alpha, before.alpha);
        assert_eq!(fitted.params().k(), before.k());
        assert_eq!(fitted.params().sigma2, before.sigma2);
    }

    #[test]
    fn fit_is_monotone_and_converges() {
        for k_type in [KType::Unstructured, KType::BlockExponential] {
            let model = toy(150, 11, k_type);
            let (fitted, state) = fit(model, &EmOptions { n_em: 400, tol: 0.01, print_lik: false }).unwrap();
            assert!(state.converged, "{k_type:?}");
            for w in state.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{k_type:?}: {} -> {}", w[0], w[1]);
            }
            assert!(fitted.is_fitted());
        }
    }

    #[test]
    fn fixed_point_after_convergence() {
        let model = toy(150, 12, KType::Unstructured);
        let tol = 1e-4;
        let (fitted, state) = fit(model, &EmOptions { n_em: 2000, tol, print_lik: false }).unwrap();
        assert!(state.converged);
        let (next, _) = em_step(&fitted, &state.params).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!((next.alpha.clone() - &state.params.alpha).norm() / state.params.alpha.norm() < 10.0 * tol);
        assert!((next.k() - state.params.k()).norm() / state.params.k().norm() < 10.0 * tol);
        assert!(rel(next.sigma2, state.params.sigma2) < 10.0 * tol || (next.sigma2 - state.params.sigma2).abs() < 10.0 * tol);
    }

    #[test]
    fn case1_matches_case2_with_same_weights() {
        let a = toy(80, 13, KType::Unstructured);
        let locs = crate::model::footprint_locations(a.baus(), a.data());
        let obs: Vec<Observation> = (0..a.m()).map(|j| Observation::point(locs[j].clone(), a.z()[j])).collect();
        let cfg = ModelConfig { variant: crate::model::Variant::Case1, ..a.config().clone() };
        let b = assemble(a.baus().clone(), a.basis().clone(), &obs, &cfg, &AssembleOptions::default()).unwrap();
        let opts = EmOptions { n_em: 20, tol: 0.0, print_lik: false };
        let (_, sa) = fit(a, &opts).unwrap();
        let (_, sb) = fit(b, &opts).unwrap();
        assert_eq!(sa.loglik_trace, sb.loglik_trace);
        assert_eq!(sa.params.sigma2, sb.params.sigma2);
    }
}
