//! Assembly of the spatial random effects model at the data level.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{build_s, BasisMatrix, BasisSet, SMethod};
use crate::baus::{bin_data, BauSet, BinnedData, IncidenceMatrix, Observation};
use crate::error::{FrkError, Result};
use crate::linalg::{cholesky, chol_lower, full_column_rank, BlockDiagMatrix};
use crate::manifold::Manifold;

/// Which fine-scale component is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Intra-BAU systematic error `δ`; the process has no fine-scale term.
    Case1,
    /// Fine-scale process variation `ξ`.
    #[default]
    Case2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Case1 => "case1",
            Variant::Case2 => "case2",
        }
    }
}

/// Structure of the random-effects covariance `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KType {
    #[default]
    Unstructured,
    /// Exponential covariance within each resolution, independent across
    /// resolutions.
    BlockExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeasErrorMode {
    Given,
    #[default]
    Estimate,
}

/// How the measurement-error variance `Σ_ε = σ²_ε V_ε` is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MeasErrorConfig {
    #[serde(default)]
    pub mode: MeasErrorMode,
    /// `σ²_ε` in given mode. When observations carry standard deviations
    /// `V_ε = diag(std²)` and this defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// Column of the observation file holding measurement standard deviations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_column: Option<String>,
}

impl MeasErrorConfig {
    pub fn given(sigma2: f64) -> Self {
        Self { mode: MeasErrorMode::Given, sigma2: Some(sigma2), std_column: None }
    }

    pub fn estimate() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub k_type: KType,
    #[serde(default)]
    pub meas_error: MeasErrorConfig,
}

/// Semivariogram settings for measurement-error estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramOptions {
    pub n_bins: usize,
    /// Largest lag used; defaults to a third of the largest pairwise distance.
    #[serde(default)]
    pub max_lag: Option<f64>,
    /// Number of leading non-empty bins entering the straight-line fit;
    /// `None` uses every bin.
    #[serde(default)]
    pub fit_bins: Option<usize>,
    /// Observations beyond this are thinned by a fixed stride.
    pub max_points: usize,
}

impl Default for VariogramOptions {
    fn default() -> Self {
        Self { n_bins: 15, max_lag: None, fit_bins: Some(4), max_points: 4000 }
    }
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    pub average_in_bau: bool,
    pub s_method: SMethod,
    pub variogram: VariogramOptions,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self { average_in_bau: true, s_method: SMethod::Centroid, variogram: VariogramOptions::default() }
    }
}

/// Estimates `σ²_ε` from the intercept of a straight line fitted to the
/// empirical semivariogram near the origin.
pub fn estimate_meas_error(
    manifold: &Manifold,
    locations: &[Vec<f64>],
    z: &[f64],
    opts: &VariogramOptions,
) -> Result<f64> {
    let m = z.len();
    if locations.len() != m {
        return Err(FrkError::LengthMismatch { what: "locations and values", left: locations.len(), right: m });
    }
    if m < 30 {
        return Err(FrkError::InsufficientData(format!("semivariogram needs at least 30 observations, got {m}")));
    }
    if opts.n_bins == 0 {
        return Err(FrkError::InvalidParameter("n_bins must be positive".into()));
    }
    let mean = z.iter().sum::<f64>() / m as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    if !(var > 0.0) {
        return Err(FrkError::InsufficientData("observations have zero variance".into()));
    }

    let stride = m.div_ceil(opts.max_points.max(2));
    let idx: Vec<usize> = (0..m).step_by(stride).collect();
    let spatial = manifold.spatial();
    let ds = spatial.dim();
    let mut pairs = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    let mut diameter = 0.0f64;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[..a] {
            let d = spatial.spatial_distance_unchecked(&locations[i][..ds], &locations[j][..ds]);
            diameter = diameter.max(d);
            pairs.push((d, 0.5 * (z[i] - z[j]).powi(2)));
        }
    }
    let max_lag = opts.max_lag.unwrap_or(diameter / 3.0);
    if !(max_lag > 0.0) {
        return Err(FrkError::InvalidParameter(format!("max_lag must be positive, got {max_lag}")));
    }
    let width = max_lag / opts.n_bins as f64;
    let mut count = vec![0usize; opts.n_bins];
    let mut sum_h = vec![0.0; opts.n_bins];
    let mut sum_g = vec![0.0; opts.n_bins];
    for (d, g) in pairs {
        if d > 0.0 && d <= max_lag {
            let b = ((d / width).ceil() as usize).clamp(1, opts.n_bins) - 1;
            count[b] += 1;
            sum_h[b] += d;
            sum_g[b] += g;
        }
    }
    let bins: Vec<(f64, f64, f64)> = (0..opts.n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_h[b] / count[b] as f64, sum_g[b] / count[b] as f64, count[b] as f64))
        .take(opts.fit_bins.unwrap_or(usize::MAX))
        .collect();
    if bins.len() < 2 {
        return Err(FrkError::InsufficientData("fewer than two non-empty semivariogram bins".into()));
    }
    let sw: f64 = bins.iter().map(|b| b.2).sum();
    let hbar = bins.iter().map(|b| b.2 * b.0).sum::<f64>() / sw;
    let gbar = bins.iter().map(|b| b.2 * b.1).sum::<f64>() / sw;
    let sxx: f64 = bins.iter().map(|b| b.2 * (b.0 - hbar).powi(2)).sum();
    let sxy: f64 = bins.iter().map(|b| b.2 * (b.0 - hbar) * (b.1 - gbar)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = gbar - slope * hbar;
    Ok(intercept.max(1e-8 * var))
}

/// Basis indices of one resolution together with their centre distances.
#[derive(Debug, Clone)]
pub struct ResolutionGroup {
    pub resolution: u32,
    pub indices: Vec<usize>,
    pub distances: DMatrix<f64>,
}

/// Resolution groups of a local basis set, for block-exponential `K`.
pub fn resolution_groups(basis: &BasisSet) -> Result<Vec<ResolutionGroup>> {
    let (Some(groups), Some(functions)) = (basis.resolution_groups(), basis.functions()) else {
        return Err(FrkError::InvalidParameter(
            "block-exponential K requires a basis with resolution structure, not a tensor product".into(),
        ));
    };
    let manifold = basis.manifold();
    groups
        .into_iter()
        .map(|(resolution, indices)| {
            let n = indices.len();
            let mut distances = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in 0..a {
                    let d = manifold.distance(&functions[indices[a]].centre, &functions[indices[b]].centre)?;
                    distances[(a, b)] = d;
                    distances[(b, a)] = d;
                }
            }
            Ok(ResolutionGroup { resolution, indices, distances })
        })
        .collect()
}

/// Exponential covariance of one resolution: `ϑ₁ exp(−d/ϑ₂)`.
pub fn exponential_block(theta: (f64, f64), distances: &DMatrix<f64>) -> DMatrix<f64> {
    distances.map(|d| theta.0 * (-d / theta.1).exp())
}

/// Block-diagonal `K` from per-resolution parameters `(ϑ₁ₙ, ϑ₂ₙ)`.
pub fn build_k(theta: &[(f64, f64)], groups: &[ResolutionGroup], r: usize) -> Result<DMatrix<f64>> {
    if theta.len() != groups.len() {
        return Err(FrkError::LengthMismatch { what: "K parameters and resolutions", left: theta.len(), right: groups.len() });
    }
    if theta.iter().any(|t| !(t.0 > 0.0 && t.1 > 0.0 && t.0.is_finite() && t.1.is_finite())) {
        return Err(FrkError::InvalidParameter("block-exponential parameters must be positive".into()));
    }
    let mut k = DMatrix::zeros(r, r);
    for (t, g) in theta.iter().zip(groups) {
        let block = exponential_block(*t, &g.distances);
        for (a, &i) in g.indices.iter().enumerate() {
            for (b, &j) in g.indices.iter().enumerate() {
                k[(i, j)] = block[(a, b)];
            }
        }
    }
    Ok(k)
}

/// Model parameters `θ`. `K` is kept together with its Cholesky factor and
/// can only be set through a successful factorisation.
#[derive(Debug, Clone)]
pub struct Params {
    pub alpha: DVector<f64>,
    k: DMatrix<f64>,
    k_lower: DMatrix<f64>,
    /// Per-resolution `(ϑ₁, ϑ₂)` for block-exponential `K`.
    pub theta: Option<Vec<(f64, f64)>>,
    /// `σ²_ξ` in Case 2, `σ²_δ` in Case 1.
    pub sigma2: f64,
}

impl Params {
    pub fn new(alpha: DVector<f64>, k: DMatrix<f64>, theta: Option<Vec<(f64, f64)>>, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(FrkError::InvalidParameter(format!("fine-scale variance must be nonnegative, got {sigma2}")));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(FrkError::NonFinite("alpha"));
        }
        let chol = cholesky(k.clone(), "K")?;
        let k_lower = chol_lower(&chol);
        Ok(Self { alpha, k, k_lower, theta, sigma2 })
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Lower Cholesky factor `L` with `K = L Lᵀ`.
    pub fn k_lower(&self) -> &DMatrix<f64> {
        &self.k_lower
    }
}

/// Conditional distribution of `η` given the data.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// The assembled model: data, design matrices, variance structure and the
/// current parameters.
#[derive(Debug, Clone)]
pub struct SreModel {
    pub(crate) baus: BauSet,
    pub(crate) basis: BasisSet,
    pub(crate) s: BasisMatrix,
    pub(crate) data: BinnedData,
    pub(crate) t_z: DMatrix<f64>,
    pub(crate) s_z: DMatrix<f64>,
    /// `C_Z V C_Zᵀ` for the active fine-scale component.
    pub(crate) v_z: BlockDiagMatrix,
    pub(crate) v_eps: Vec<f64>,
    pub(crate) sigma2_eps: f64,
    pub(crate) uses_std: bool,
    pub(crate) config: ModelConfig,
    pub(crate) groups: Option<Vec<ResolutionGroup>>,
    pub(crate) params: Params,
    pub(crate) posterior: Option<Posterior>,
}

/// Bins observations onto the BAUs and assembles the model.
pub fn assemble(
    baus: BauSet,
    basis: BasisSet,
    observations: &[Observation],
    config: &ModelConfig,
    opts: &AssembleOptions,
) -> Result<SreModel> {
    let data = bin_data(&baus, observations, opts.average_in_bau)?;
    assemble_binned(baus, basis, data, config, opts)
}

/// Assembles from already binned data.
pub fn assemble_binned(
    baus: BauSet,
    basis: BasisSet,
    data: BinnedData,
    config: &ModelConfig,
    opts: &AssembleOptions,
) -> Result<SreModel> {
    if data.c_z.ncols() != baus.len() {
        return Err(FrkError::LengthMismatch { what: "C_Z columns and BAUs", left: data.c_z.ncols(), right: baus.len() });
    }
    let m = data.len();
    let s = build_s(&basis, &baus, opts.s_method)?;
    let s_z = s.premultiply(data.c_z.csr());
    let t_z = data.c_z.csr().mul_dense(baus.covariates());
    if !full_column_rank(&t_z) {
        return Err(FrkError::Singular("T_Z is rank deficient".into()));
    }
    let fs = match config.variant {
        Variant::Case1 => baus.fs_delta_weights(),
        Variant::Case2 => baus.fs_weights(),
    };
    let v_z = data.c_z.csr().weighted_gram(fs);

    let (sigma2_eps, v_eps, uses_std) = match config.meas_error.mode {
        MeasErrorMode::Given => match &data.std {
            Some(std) => {
                let sigma2 = config.meas_error.sigma2.unwrap_or(1.0);
                (sigma2, std.iter().map(|s| s * s).collect::<Vec<_>>(), true)
            }
            None => {
                let sigma2 = config.meas_error.sigma2.ok_or_else(|| {
                    FrkError::InvalidParameter("given measurement error needs sigma2 or per-observation std".into())
                })?;
                (sigma2, vec![1.0; m], false)
            }
        },
        MeasErrorMode::Estimate => {
            let locs = footprint_locations(&baus, &data);
            let z: Vec<f64> = data.z.iter().copied().collect();
            (estimate_meas_error(baus.manifold(), &locs, &z, &opts.variogram)?, vec![1.0; m], false)
        }
    };
    if !(sigma2_eps.is_finite() && sigma2_eps > 0.0) {
        return Err(FrkError::InvalidParameter(format!("measurement-error variance must be positive, got {sigma2_eps}")));
    }
    if v_eps.iter().any(|v| !(*v > 0.0)) {
        return Err(FrkError::InvalidParameter("measurement std must be positive".into()));
    }

    let groups = match config.k_type {
        KType::Unstructured => None,
        KType::BlockExponential => Some(resolution_groups(&basis)?),
    };

    // Ordinary least squares start.
    let tt = cholesky(t_z.tr_mul(&t_z), "T_Z'T_Z")?;
    let alpha = tt.solve(&t_z.tr_mul(&data.z));
    let resid = &data.z - &t_z * &alpha;
    let rv = if m > 1 { resid.norm_squared() / (m - 1) as f64 } else { 0.0 };
    let rv = if rv > 0.0 { rv } else { data.z.iter().map(|v| v * v).sum::<f64>().max(1.0) / m as f64 };
    let r = basis.len();
    let (k, theta) = match &groups {
        None => (DMatrix::identity(r, r) * (0.1 * rv), None),
        Some(g) => {
            let scale = domain_diameter(&basis)? / 5.0;
            let theta: Vec<(f64, f64)> = g.iter().map(|_| (0.1 * rv, scale)).collect();
            (build_k(&theta, g, r)?, Some(theta))
        }
    };
    let params = Params::new(alpha, k, theta, 0.5 * rv)?;

    Ok(SreModel {
        baus,
        basis,
        s,
        data,
        t_z,
        s_z,
        v_z,
        v_eps,
        sigma2_eps,
        uses_std,
        config: config.clone(),
        groups,
        params,
        posterior: None,
    })
}

/// Mean centroid of each observation's footprint (spatial coordinates).
pub fn footprint_locations(baus: &BauSet, data: &BinnedData) -> Vec<Vec<f64>> {
    data.footprints
        .iter()
        .map(|f| {
            let mut c = vec![0.0; baus.dim()];
            for &i in f.indices() {
                for (a, v) in baus.centroid(i).iter().enumerate() {
                    c[a] += v;
                }
            }
            c.iter().map(|v| v / f.len() as f64).collect()
        })
        .collect()
}

fn domain_diameter(basis: &BasisSet) -> Result<f64> {
    let functions = basis.functions().unwrap_or(&[]);
    let manifold = basis.manifold();
    let mut best = 0.0f64;
    for (a, fa) in functions.iter().enumerate() {
        for fb in &functions[..a] {
            best = best.max(manifold.distance(&fa.centre, &fb.centre)?);
        }
    }
    if best > 0.0 {
        Ok(best)
    } else {
        Ok(functions.iter().map(|f| f.scale).fold(0.0, f64::max).max(1.0))
    }
}

impl SreModel {
    pub fn baus(&self) -> &BauSet {
        &self.baus
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    /// `S`, the `N × r` basis matrix.
    pub fn s(&self) -> &BasisMatrix {
        &self.s
    }

    pub fn data(&self) -> &BinnedData {
        &self.data
    }

    pub fn c_z(&self) -> &IncidenceMatrix {
        &self.data.c_z
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.data.z
    }

    pub fn t_z(&self) -> &DMatrix<f64> {
        &self.t_z
    }

    pub fn s_z(&self) -> &DMatrix<f64> {
        &self.s_z
    }

    /// `C_Z V C_Zᵀ` of the active fine-scale component.
    pub fn v_z(&self) -> &BlockDiagMatrix {
        &self.v_z
    }

    /// Diagonal of `V_ε`.
    pub fn v_eps(&self) -> &[f64] {
        &self.v_eps
    }

    pub fn sigma2_eps(&self) -> f64 {
        self.sigma2_eps
    }

    /// True when `V_ε` came from per-observation standard deviations.
    pub fn uses_std(&self) -> bool {
        self.uses_std
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn k_type(&self) -> KType {
        self.config.k_type
    }

    pub fn groups(&self) -> Option<&[ResolutionGroup]> {
        self.groups.as_deref()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn posterior(&self) -> Option<&Posterior> {
        self.posterior.as_ref()
    }

    pub fn is_fitted(&self) -> bool {
        self.posterior.is_some()
    }

    pub fn m(&self) -> usize {
        self.data.z.len()
    }

    pub fn r(&self) -> usize {
        self.s_z.ncols()
    }

    pub fn p(&self) -> usize {
        self.t_z.ncols()
    }

    /// BAU-level weights `v_i` of the active fine-scale component.
    pub fn fs_bau_weights(&self) -> &[f64] {
        match self.config.variant {
            Variant::Case1 => self.baus.fs_delta_weights(),
            Variant::Case2 => self.baus.fs_weights(),
        }
    }

    /// Diagonal of `Σ_ε`.
    pub fn sigma_eps_diag(&self) -> Vec<f64> {
        self.v_eps.iter().map(|v| self.sigma2_eps * v).collect()
    }

    /// `D_Z = σ² C_Z V C_Zᵀ + Σ_ε`.
    pub fn d_z(&self, sigma2: f64) -> BlockDiagMatrix {
        self.v_z.scale_add_diag(sigma2, &self.sigma_eps_diag())
    }

    /// Replaces the parameters and discards any posterior.
    pub fn with_params(mut self, params: Params) -> Result<Self> {
        self.check_params(&params)?;
        self.params = params;
        self.posterior = None;
        Ok(self)
    }

    /// Installs fitted parameters and the matching posterior of `η`.
    pub fn with_fit(mut self, params: Params, posterior: Posterior) -> Result<Self> {
        self.check_params(&params)?;
        let r = self.r();
        if posterior.mu.len() != r || posterior.sigma.shape() != (r, r) {
            return Err(FrkError::DimensionMismatch { expected: r, got: posterior.mu.len() });
        }
        self.params = params;
        self.posterior = Some(posterior);
        Ok(self)
    }

    fn check_params(&self, params: &Params) -> Result<()> {
        if params.alpha.len() != self.p() {
            return Err(FrkError::DimensionMismatch { expected: self.p(), got: params.alpha.len() });
        }
        if params.k().nrows() != self.r() {
            return Err(FrkError::DimensionMismatch { expected: self.r(), got: params.k().nrows() });
        }
        Ok(())
    }

    /// Dense `Var(Z)`; intended for small problems and checks.
    pub fn marginal_covariance(&self, params: &Params) -> DMatrix<f64> {
        &self.s_z * params.k() * self.s_z.transpose() + self.d_z(params.sigma2).to_dense()
    }
}
