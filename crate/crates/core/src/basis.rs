//! Local basis functions, multi-resolution basis sets and the BAU-level
//! basis matrix `S`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baus::{BauSet, BoundingBox, CellGeometry};
use crate::error::{FrkError, Result};
use crate::linalg::CsrMatrix;
use crate::manifold::{Manifold, ManifoldKind, ManifoldSpec};

/// Entries of compactly supported basis matrices below this are structural zeros.
pub const SPARSITY_THRESHOLD: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Bisquare,
    Gaussian,
    Exponential,
    Matern32,
}

impl BasisFamily {
    /// Radial profile at distance `d`.
    ///
    /// `scale` is the aperture for bisquare, the standard deviation for
    /// gaussian and the e-folding / length scale otherwise.
    pub fn profile(self, d: f64, scale: f64, amplitude: f64) -> f64 {
        match self {
            BasisFamily::Bisquare => {
                if d >= scale {
                    0.0
                } else {
                    let u = d / scale;
                    amplitude * (1.0 - u * u).powi(2)
                }
            }
            BasisFamily::Gaussian => amplitude * (-d * d / (2.0 * scale * scale)).exp(),
            BasisFamily::Exponential => amplitude * (-d / scale).exp(),
            BasisFamily::Matern32 => {
                let u = 3f64.sqrt() * d / scale;
                amplitude * (1.0 + u) * (-u).exp()
            }
        }
    }

    pub fn is_compact(self) -> bool {
        matches!(self, BasisFamily::Bisquare)
    }
}

fn default_amplitude() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub family: BasisFamily,
    pub centre: Vec<f64>,
    pub scale: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub resolution: u32,
}

impl BasisFunction {
    pub fn new(family: BasisFamily, centre: Vec<f64>, scale: f64) -> Self {
        Self { family, centre, scale, amplitude: 1.0, resolution: 0 }
    }

    fn validate(&self, manifold: &Manifold) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(FrkError::InvalidParameter(format!(
                "basis scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(FrkError::InvalidParameter(format!(
                "basis amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        manifold.check_point(&self.centre)
    }
}

/// Evaluates a single basis function at `s`.
pub fn eval_basis(f: &BasisFunction, manifold: &Manifold, s: &[f64]) -> Result<f64> {
    let d = manifold.distance(&f.centre, s)?;
    Ok(f.family.profile(d, f.scale, f.amplitude))
}

#[derive(Debug, Clone)]
enum BasisKind {
    Local(Vec<BasisFunction>),
    /// Members are ordered temporal-major: index `q * r_s + p` is `φ_p(s) ψ_q(t)`.
    Tensor { spatial: Box<BasisSet>, temporal: Box<BasisSet> },
}

/// An ordered collection of basis functions on one manifold.
#[derive(Debug, Clone)]
pub struct BasisSet {
    manifold: Manifold,
    kind: BasisKind,
}

impl BasisSet {
    /// Builds a set of local functions, validating each against the manifold.
    pub fn from_functions(manifold: Manifold, functions: Vec<BasisFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(FrkError::InvalidParameter("a basis set needs at least one function".into()));
        }
        if manifold.kind().is_spatio_temporal() {
            return Err(FrkError::ManifoldMismatch(
                "space-time basis sets are built with tensor_basis".into(),
            ));
        }
        for f in &functions {
            f.validate(&manifold)?;
        }
        Ok(Self { manifold, kind: BasisKind::Local(functions) })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Local(f) => f.len(),
            BasisKind::Tensor { spatial, temporal } => spatial.len() * temporal.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The local functions, or `None` for a tensor-product set.
    pub fn functions(&self) -> Option<&[BasisFunction]> {
        match &self.kind {
            BasisKind::Local(f) => Some(f),
            BasisKind::Tensor { .. } => None,
        }
    }

    pub fn tensor_parts(&self) -> Option<(&BasisSet, &BasisSet)> {
        match &self.kind {
            BasisKind::Local(_) => None,
            BasisKind::Tensor { spatial, temporal } => Some((spatial, temporal)),
        }
    }

    /// True when every member has compact support.
    pub fn is_compact(&self) -> bool {
        match &self.kind {
            BasisKind::Local(f) => f.iter().all(|f| f.family.is_compact()),
            BasisKind::Tensor { spatial, temporal } => spatial.is_compact() || temporal.is_compact(),
        }
    }

    /// Indices grouped by resolution, coarsest first. Tensor sets have no
    /// resolution structure and return `None`.
    pub fn resolution_groups(&self) -> Option<Vec<(u32, Vec<usize>)>> {
        let f = self.functions()?;
        let mut res: Vec<u32> = f.iter().map(|f| f.resolution).collect();
        res.sort_unstable();
        res.dedup();
        Some(
            res.into_iter()
                .map(|r| (r, (0..f.len()).filter(|&i| f[i].resolution == r).collect()))
                .collect(),
        )
    }

    pub fn n_res(&self) -> usize {
        self.resolution_groups().map_or(1, |g| g.len())
    }

    /// Evaluates every member at a point (validated).
    pub fn eval(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.manifold.check_point(s)?;
        Ok(self.eval_unchecked(s))
    }

    /// Evaluates member `i` at a point.
    pub fn eval_member(&self, i: usize, s: &[f64]) -> Result<f64> {
        self.manifold.check_point(s)?;
        match &self.kind {
            BasisKind::Local(f) => {
                let f = &f[i];
                let d = self.manifold.spatial_distance_unchecked(&f.centre, s);
                Ok(f.family.profile(d, f.scale, f.amplitude))
            }
            BasisKind::Tensor { spatial, temporal } => {
                let rs = spatial.len();
                let ds = self.manifold.spatial_dim();
                let (p, q) = (i % rs, i / rs);
                Ok(spatial.eval_member(p, &s[..ds])? * temporal.eval_member(q, &s[ds..])?)
            }
        }
    }

    pub(crate) fn eval_unchecked(&self, s: &[f64]) -> Vec<f64> {
        match &self.kind {
            BasisKind::Local(f) => f
                .iter()
                .map(|f| {
                    let d = self.manifold.spatial_distance_unchecked(&f.centre, s);
                    f.family.profile(d, f.scale, f.amplitude)
                })
                .collect(),
            BasisKind::Tensor { spatial, temporal } => {
                let ds = self.manifold.spatial_dim();
                let phi = spatial.eval_unchecked(&s[..ds]);
                let psi = temporal.eval_unchecked(&s[ds..]);
                psi.iter().flat_map(|q| phi.iter().map(move |p| p * q)).collect()
            }
        }
    }

    /// Serialises to the JSON basis document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: BasisSetDoc = serde_json::from_str(s)?;
        Self::from_doc(doc)
    }

    fn to_doc(&self) -> Result<BasisSetDoc> {
        let manifold = self.manifold.to_spec()?;
        Ok(match &self.kind {
            BasisKind::Local(f) => BasisSetDoc { manifold, functions: f.clone(), tensor: None },
            BasisKind::Tensor { spatial, temporal } => BasisSetDoc {
                manifold,
                functions: Vec::new(),
                tensor: Some(Box::new(TensorDoc {
                    spatial: spatial.to_doc()?,
                    temporal: temporal.to_doc()?,
                })),
            },
        })
    }

    fn from_doc(doc: BasisSetDoc) -> Result<Self> {
        let manifold = doc.manifold.build()?;
        match doc.tensor {
            Some(t) => {
                let set = tensor_basis(&Self::from_doc(t.spatial)?, &Self::from_doc(t.temporal)?)?;
                if set.manifold.kind() != manifold.kind() {
                    return Err(FrkError::ManifoldMismatch(
                        "tensor basis manifold does not match its parts".into(),
                    ));
                }
                Ok(set)
            }
            None => Self::from_functions(manifold, doc.functions),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisSetDoc {
    manifold: ManifoldSpec,
    #[serde(default)]
    functions: Vec<BasisFunction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tensor: Option<Box<TensorDoc>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDoc {
    spatial: BasisSetDoc,
    temporal: BasisSetDoc,
}

/// One function per `(location, scale)` pair, all at resolution 0.
pub fn local_basis(
    manifold: &Manifold,
    locs: &[Vec<f64>],
    scales: &[f64],
    family: BasisFamily,
) -> Result<BasisSet> {
    if locs.len() != scales.len() {
        return Err(FrkError::LengthMismatch {
            what: "basis locations and scales",
            left: locs.len(),
            right: scales.len(),
        });
    }
    let functions = locs
        .iter()
        .zip(scales)
        .map(|(c, s)| BasisFunction::new(family, c.clone(), *s))
        .collect();
    BasisSet::from_functions(manifold.clone(), functions)
}

#[derive(Debug, Clone)]
pub struct AutoBasisOptions {
    pub nres: usize,
    pub family: BasisFamily,
    pub max_basis: Option<usize>,
    /// Only regular placement is supported.
    pub regular: bool,
    /// Centres per axis at the coarsest resolution (longitude axis on the
    /// sphere). Defaults to 3 on flat manifolds and 5 on the sphere.
    pub coarsest: Option<usize>,
}

impl Default for AutoBasisOptions {
    fn default() -> Self {
        Self { nres: 2, family: BasisFamily::Bisquare, max_basis: None, regular: true, coarsest: None }
    }
}

/// Multi-resolution regular grids of basis functions over `extent`.
///
/// Resolution `n` (numbered from 1) has `k₀·3ⁿ⁻¹` centres per axis placed at
/// cell centres of a regular partition of the extent, with scale equal to 1.5
/// times the largest distance between neighbouring centres.
pub fn auto_basis(manifold: &Manifold, extent: &BoundingBox, opts: &AutoBasisOptions) -> Result<BasisSet> {
    if opts.nres == 0 {
        return Err(FrkError::InvalidParameter("nres must be at least 1".into()));
    }
    if !opts.regular {
        return Err(FrkError::InvalidParameter(
            "only regular basis placement is supported".into(),
        ));
    }
    if manifold.kind().is_spatio_temporal() {
        return Err(FrkError::ManifoldMismatch(
            "build spatial and temporal sets separately and combine them with tensor_basis".into(),
        ));
    }
    let d = manifold.spatial_dim();
    if extent.dim() != d {
        return Err(FrkError::DimensionMismatch { expected: d, got: extent.dim() });
    }
    extent.check_nondegenerate()?;

    let spherical = manifold.kind().is_spherical();
    let k0 = opts.coarsest.unwrap_or(if spherical { 5 } else { 3 });
    if k0 == 0 {
        return Err(FrkError::InvalidParameter("coarsest grid needs at least one centre".into()));
    }
    let axis_counts = |n: usize| -> Vec<usize> {
        let k = k0 * 3usize.pow(n as u32 - 1);
        if spherical {
            let lon_range = extent.max[0] - extent.min[0];
            let lat_range = extent.max[1] - extent.min[1];
            let k_lat = ((k as f64) * lat_range / lon_range).round().max(1.0) as usize;
            vec![k, k_lat]
        } else {
            vec![k; d]
        }
    };

    let mut nres = opts.nres;
    if let Some(max) = opts.max_basis {
        let count = |n: usize| (1..=n).map(|r| axis_counts(r).iter().product::<usize>()).sum::<usize>();
        if count(1) > max {
            return Err(FrkError::InvalidParameter(format!(
                "max_basis {max} is below the coarsest resolution's {} functions",
                count(1)
            )));
        }
        while count(nres) > max {
            nres -= 1;
        }
    }

    let mut functions = Vec::new();
    for res in 1..=nres {
        let counts = axis_counts(res);
        let spacing: Vec<f64> =
            (0..d).map(|a| (extent.max[a] - extent.min[a]) / counts[a] as f64).collect();
        let axis_centres: Vec<Vec<f64>> = (0..d)
            .map(|a| (0..counts[a]).map(|j| extent.min[a] + (j as f64 + 0.5) * spacing[a]).collect())
            .collect();

        // Distance between neighbouring centres along each axis, measured
        // where it is largest (nearest the equator on the sphere).
        let mut anchor: Vec<f64> = axis_centres.iter().map(|c| c[0]).collect();
        if spherical {
            anchor[1] = *axis_centres[1]
                .iter()
                .min_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap();
        }
        let mut step = 0.0f64;
        for a in 0..d {
            let mut other = anchor.clone();
            other[a] += spacing[a];
            if spherical && a == 1 && other[1] > 90.0 {
                other[1] = anchor[1] - spacing[1];
            }
            step = step.max(manifold.distance(&anchor, &other)?);
        }
        let scale = 1.5 * step;

        let mut idx = vec![0usize; d];
        loop {
            let centre: Vec<f64> = (0..d).map(|a| axis_centres[a][idx[a]]).collect();
            functions.push(BasisFunction {
                family: opts.family,
                centre,
                scale,
                amplitude: 1.0,
                resolution: res as u32,
            });
            // first axis fastest
            let mut a = 0;
            loop {
                idx[a] += 1;
                if idx[a] < counts[a] {
                    break;
                }
                idx[a] = 0;
                a += 1;
                if a == d {
                    break;
                }
            }
            if a == d {
                break;
            }
        }
    }
    BasisSet::from_functions(manifold.clone(), functions)
}

/// Space-time basis `{φ_p(s) ψ_q(t)}` from a spatial and a temporal set.
pub fn tensor_basis(spatial: &BasisSet, temporal: &BasisSet) -> Result<BasisSet> {
    if temporal.manifold.kind() != ManifoldKind::RealLine {
        return Err(FrkError::ManifoldMismatch(format!(
            "temporal basis must live on real_line, got {}",
            temporal.manifold.kind().name()
        )));
    }
    let sk = spatial.manifold.kind();
    if !matches!(sk, ManifoldKind::Plane | ManifoldKind::Sphere { .. }) {
        return Err(FrkError::ManifoldMismatch(format!(
            "spatial basis must live on plane or sphere, got {}",
            sk.name()
        )));
    }
    let manifold = spatial.manifold.spatio_temporal()?;
    Ok(BasisSet {
        manifold,
        kind: BasisKind::Tensor {
            spatial: Box::new(spatial.clone()),
            temporal: Box::new(temporal.clone()),
        },
    })
}

/// BAU-level basis matrix; sparse for compactly supported sets.
#[derive(Debug, Clone)]
pub enum BasisMatrix {
    Sparse(CsrMatrix),
    Dense(DMatrix<f64>),
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            BasisMatrix::Sparse(m) => m.nrows(),
            BasisMatrix::Dense(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            BasisMatrix::Sparse(m) => m.ncols(),
            BasisMatrix::Dense(m) => m.ncols(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            BasisMatrix::Sparse(m) => m.get(i, j),
            BasisMatrix::Dense(m) => m[(i, j)],
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, BasisMatrix::Sparse(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            BasisMatrix::Sparse(m) => m.to_dense(),
            BasisMatrix::Dense(m) => m.clone(),
        }
    }

    /// `C · S` for a sparse row operator `C` (incidence matrix).
    pub fn premultiply(&self, c: &CsrMatrix) -> DMatrix<f64> {
        match self {
            BasisMatrix::Sparse(m) => c.mul_csr_dense(m),
            BasisMatrix::Dense(m) => c.mul_dense(m),
        }
    }

    /// `S · x`.
    pub fn mul_vec(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        match self {
            BasisMatrix::Sparse(m) => m.mul_vec(x),
            BasisMatrix::Dense(m) => m * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SMethod {
    /// `S[i, l] = φ_l(centroid_i)`.
    Centroid,
    /// Average of `φ_l` over uniform draws inside each rectangular BAU.
    MonteCarlo { n_samples: usize, seed: u64 },
}

impl Default for SMethod {
    fn default() -> Self {
        SMethod::Centroid
    }
}

pub const DEFAULT_MC_SAMPLES: usize = 100;

/// Builds the `N × r` matrix of basis functions averaged over BAUs.
pub fn build_s(basis: &BasisSet, baus: &BauSet, method: SMethod) -> Result<BasisMatrix> {
    if basis.manifold.kind() != baus.manifold().kind() {
        return Err(FrkError::ManifoldMismatch(format!(
            "basis lives on {} but BAUs on {}",
            basis.manifold.kind().name(),
            baus.manifold().kind().name()
        )));
    }
    let n = baus.len();
    let r = basis.len();
    let rows: Vec<Vec<f64>> = match method {
        SMethod::Centroid => (0..n).map(|i| basis.eval_unchecked(baus.centroid(i))).collect(),
        SMethod::MonteCarlo { n_samples, seed } => {
            let CellGeometry::Rect(size) = baus.cell() else {
                return Err(FrkError::InvalidParameter(
                    "Monte-Carlo integration requires rectangular BAUs".into(),
                ));
            };
            if n_samples == 0 {
                return Err(FrkError::InvalidParameter("n_samples must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds = size.len();
            (0..n)
                .map(|i| {
                    let c = baus.centroid(i);
                    let mut acc = vec![0.0; r];
                    let mut p = c.to_vec();
                    for _ in 0..n_samples {
                        for a in 0..ds {
                            p[a] = c[a] + size[a] * (rng.random::<f64>() - 0.5);
                        }
                        if basis.manifold.kind().is_spherical() {
                            p[1] = p[1].clamp(-90.0, 90.0);
                        }
                        for (acc, v) in acc.iter_mut().zip(basis.eval_unchecked(&p)) {
                            *acc += v;
                        }
                    }
                    acc.iter().map(|a| a / n_samples as f64).collect()
                })
                .collect()
        }
    };
    if basis.is_compact() {
        let sparse_rows = rows
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() >= SPARSITY_THRESHOLD)
                    .collect()
            })
            .collect();
        Ok(BasisMatrix::Sparse(CsrMatrix::from_rows(r, sparse_rows)))
    } else {
        Ok(BasisMatrix::Dense(DMatrix::from_fn(n, r, |i, j| rows[i][j])))
    }
}

/// Drops functions whose column in `S_Z` is identically zero. Returns the
/// reduced set and the retained original indices.
pub fn prune_basis(basis: &BasisSet, s_z: &DMatrix<f64>) -> Result<(BasisSet, Vec<usize>)> {
    if s_z.ncols() != basis.len() {
        return Err(FrkError::LengthMismatch {
            what: "S_Z columns and basis size",
            left: s_z.ncols(),
            right: basis.len(),
        });
    }
    let Some(functions) = basis.functions() else {
        return Err(FrkError::InvalidParameter("tensor-product sets cannot be pruned".into()));
    };
    let keep: Vec<usize> =
        (0..basis.len()).filter(|&j| s_z.column(j).iter().any(|v| *v != 0.0)).collect();
    if keep.is_empty() {
        return Err(FrkError::InsufficientData(
            "every basis function is unobserved; nothing left after pruning".into(),
        ));
    }
    let kept = keep.iter().map(|&j| functions[j].clone()).collect();
    Ok((BasisSet::from_functions(basis.manifold.clone(), kept)?, keep))
}
