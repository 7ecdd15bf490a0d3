//! Basic areal units: the discretised domain, footprints and incidence
//! matrices.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{FrkError, Result};
use crate::linalg::{full_column_rank, CsrMatrix};
use crate::manifold::Manifold;

/// Default upper bound on the number of BAUs `auto_baus` will create.
pub const DEFAULT_MAX_BAUS: usize = 2_000_000;

/// Axis-aligned box in coordinate space.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoundingBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(FrkError::LengthMismatch { what: "bounding box corners", left: min.len(), right: max.len() });
        }
        if min.iter().chain(&max).any(|v| !v.is_finite()) {
            return Err(FrkError::NonFinite("bounding box"));
        }
        if min.iter().zip(&max).any(|(a, b)| a > b) {
            return Err(FrkError::InvalidParameter("bounding box min exceeds max".into()));
        }
        Ok(Self { min, max })
    }

    /// Smallest box containing the points, grown by `buffer` on every side.
    pub fn around(points: &[Vec<f64>], buffer: f64) -> Result<Self> {
        let first = points.first().ok_or_else(|| FrkError::InsufficientData("no points".into()))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for p in points {
            if p.len() != min.len() {
                return Err(FrkError::DimensionMismatch { expected: min.len(), got: p.len() });
            }
            for a in 0..p.len() {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        Self::new(min.iter().map(|v| v - buffer).collect(), max.iter().map(|v| v + buffer).collect())
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn check_nondegenerate(&self) -> Result<()> {
        if self.min.iter().zip(&self.max).any(|(a, b)| !(b > a)) {
            return Err(FrkError::InvalidParameter("degenerate extent".into()));
        }
        Ok(())
    }
}

/// Shape shared by every BAU in a set.
#[derive(Debug, Clone, PartialEq)]
pub enum CellGeometry {
    /// Rectangular cells with these side lengths, one per coordinate
    /// (including time on space-time manifolds).
    Rect(Vec<f64>),
    /// Point-BAUs.
    Point,
}

/// Prediction region or observation support.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Point(Vec<f64>),
    /// Axis-aligned box. Membership is closed at `min` and open at `max`;
    /// an axis with `min == max` matches that coordinate exactly.
    Rect { min: Vec<f64>, max: Vec<f64> },
}

impl Region {
    pub fn rect(min: Vec<f64>, max: Vec<f64>) -> Self {
        Region::Rect { min, max }
    }

    fn contains_centroid(&self, c: &[f64]) -> bool {
        match self {
            Region::Point(p) => p.as_slice() == c,
            Region::Rect { min, max } => (0..c.len()).all(|a| {
                if min[a] == max[a] {
                    c[a] == min[a]
                } else {
                    min[a] <= c[a] && c[a] < max[a]
                }
            }),
        }
    }
}

/// Non-empty, sorted set of BAU indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Footprint {
    indices: Vec<usize>,
}

impl Footprint {
    pub fn new(mut indices: Vec<usize>, n_baus: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(FrkError::EmptyFootprint("footprint has no BAUs".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= n_baus) {
            return Err(FrkError::InvalidParameter(format!("BAU index {i} out of range {n_baus}")));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_single(&self) -> bool {
        self.indices.len() == 1
    }
}

/// Row-normalised sparse incidence matrix (`C_Z` or `C_P`).
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    csr: CsrMatrix,
}

impl IncidenceMatrix {
    /// Wraps a matrix after checking rows are nonnegative and sum to one.
    pub fn new(csr: CsrMatrix) -> Result<Self> {
        for i in 0..csr.nrows() {
            let (_, vals) = csr.row(i);
            if vals.iter().any(|v| !(*v >= 0.0)) {
                return Err(FrkError::InvalidParameter(format!("incidence row {i} has a negative entry")));
            }
            let s: f64 = vals.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(FrkError::InvalidParameter(format!("incidence row {i} sums to {s}")));
            }
        }
        Ok(Self { csr })
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.csr
    }

    pub fn nrows(&self) -> usize {
        self.csr.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.csr.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.csr.to_dense()
    }
}

/// Lookup from integer lattice position to BAU index.
#[derive(Debug, Clone)]
struct Lattice {
    origin: Vec<f64>,
    size: Vec<f64>,
    index: HashMap<Vec<i64>, usize>,
}

impl Lattice {
    fn build(centroids: &[f64], dim: usize, size: &[f64]) -> Option<Self> {
        let n = centroids.len() / dim;
        let mut origin = vec![f64::INFINITY; dim];
        for c in centroids.chunks(dim) {
            for a in 0..dim {
                origin[a] = origin[a].min(c[a] - 0.5 * size[a]);
            }
        }
        let mut index = HashMap::with_capacity(n);
        for (i, c) in centroids.chunks(dim).enumerate() {
            let mut key = Vec::with_capacity(dim);
            for a in 0..dim {
                let u = (c[a] - origin[a]) / size[a] - 0.5;
                let k = u.round();
                if (u - k).abs() > 1e-6 {
                    return None;
                }
                key.push(k as i64);
            }
            if index.insert(key, i).is_some() {
                return None;
            }
        }
        Some(Self { origin, size: size.to_vec(), index })
    }

    fn key(&self, centroid: &[f64]) -> Vec<i64> {
        (0..centroid.len())
            .map(|a| ((centroid[a] - self.origin[a]) / self.size[a] - 0.5).round() as i64)
            .collect()
    }

    fn locate(&self, p: &[f64]) -> Option<usize> {
        let key: Vec<i64> = (0..p.len()).map(|a| ((p[a] - self.origin[a]) / self.size[a]).floor() as i64).collect();
        self.index.get(&key).copied()
    }
}

/// Discretisation of the domain into equal-area basic areal units.
#[derive(Debug, Clone)]
pub struct BauSet {
    manifold: Manifold,
    dim: usize,
    centroids: Vec<f64>,
    cell: CellGeometry,
    area: f64,
    fs_xi: Vec<f64>,
    fs_delta: Option<Vec<f64>>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    lattice: Option<Lattice>,
}

impl BauSet {
    /// Validates and builds a BAU set with intercept-only covariates.
    ///
    /// `centroids` holds one point per BAU, each of the manifold's coordinate
    /// dimension. On space-time manifolds the time coordinate must be an
    /// integer index.
    pub fn new(manifold: Manifold, centroids: Vec<Vec<f64>>, cell: CellGeometry, fs: Vec<f64>) -> Result<Self> {
        let dim = manifold.dim();
        let n = centroids.len();
        if n == 0 {
            return Err(FrkError::InsufficientData("a BAU set needs at least one BAU".into()));
        }
        if fs.len() != n {
            return Err(FrkError::LengthMismatch { what: "fine-scale weights and BAUs", left: fs.len(), right: n });
        }
        check_fs(&fs)?;
        let mut flat = Vec::with_capacity(n * dim);
        for c in &centroids {
            manifold.check_point(c)?;
            if manifold.kind().is_spatio_temporal() && c[dim - 1].fract() != 0.0 {
                return Err(FrkError::InvalidParameter(format!("time index {} is not an integer", c[dim - 1])));
            }
            flat.extend_from_slice(c);
        }
        let area = match &cell {
            CellGeometry::Rect(size) => {
                if size.len() != dim {
                    return Err(FrkError::DimensionMismatch { expected: dim, got: size.len() });
                }
                if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(FrkError::InvalidParameter("cell sizes must be positive".into()));
                }
                size[..manifold.spatial_dim()].iter().product()
            }
            CellGeometry::Point => 1.0,
        };
        check_distinct(&flat, dim)?;
        let lattice = match &cell {
            CellGeometry::Rect(size) => Lattice::build(&flat, dim, size),
            CellGeometry::Point => None,
        };
        Ok(Self {
            manifold,
            dim,
            centroids: flat,
            cell,
            area,
            fs_xi: fs,
            fs_delta: None,
            covariates: DMatrix::from_element(n, 1, 1.0),
            covariate_names: vec!["intercept".into()],
            lattice,
        })
    }

    /// Attaches covariates; the design matrix becomes `[1 | columns]`.
    pub fn with_covariates(mut self, names: Vec<String>, columns: DMatrix<f64>) -> Result<Self> {
        if columns.nrows() != self.len() {
            return Err(FrkError::LengthMismatch { what: "covariate rows and BAUs", left: columns.nrows(), right: self.len() });
        }
        if names.len() != columns.ncols() {
            return Err(FrkError::LengthMismatch { what: "covariate names and columns", left: names.len(), right: columns.ncols() });
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(FrkError::NonFinite("BAU covariates"));
        }
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != names.len() || names.iter().any(|n| n == "intercept") {
            return Err(FrkError::InvalidParameter("covariate names must be distinct and not 'intercept'".into()));
        }
        let n = self.len();
        let p = columns.ncols() + 1;
        let t = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { columns[(i, j - 1)] });
        if !full_column_rank(&t) {
            return Err(FrkError::Singular("BAU covariate matrix is rank deficient".into()));
        }
        self.covariates = t;
        self.covariate_names = std::iter::once("intercept".to_string()).chain(names).collect();
        Ok(self)
    }

    /// Separate weights for the intra-BAU systematic error; defaults to the
    /// fine-scale weights.
    pub fn with_fs_delta(mut self, w: Vec<f64>) -> Result<Self> {
        if w.len() != self.len() {
            return Err(FrkError::LengthMismatch { what: "delta weights and BAUs", left: w.len(), right: self.len() });
        }
        check_fs(&w)?;
        self.fs_delta = Some(w);
        Ok(self)
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn len(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.chunks(self.dim)
    }

    pub fn cell(&self) -> &CellGeometry {
        &self.cell
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn fs_weights(&self) -> &[f64] {
        &self.fs_xi
    }

    pub fn fs_delta_weights(&self) -> &[f64] {
        self.fs_delta.as_deref().unwrap_or(&self.fs_xi)
    }

    /// `T`, with the intercept in column 0.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Time index of BAU `i` on space-time manifolds.
    pub fn time(&self, i: usize) -> Option<i64> {
        self.manifold.kind().is_spatio_temporal().then(|| self.centroid(i)[self.dim - 1] as i64)
    }

    /// Bounding box of the cells (of the centroids for point-BAUs).
    pub fn extent(&self) -> BoundingBox {
        let mut min = vec![f64::INFINITY; self.dim];
        let mut max = vec![f64::NEG_INFINITY; self.dim];
        let half: Vec<f64> = match &self.cell {
            CellGeometry::Rect(s) => s.iter().map(|v| 0.5 * v).collect(),
            CellGeometry::Point => vec![0.0; self.dim],
        };
        for c in self.centroids() {
            for a in 0..self.dim {
                min[a] = min[a].min(c[a] - half[a]);
                max[a] = max[a].max(c[a] + half[a]);
            }
        }
        BoundingBox { min, max }
    }

    /// Integer lattice position of each BAU when the cells tile a regular
    /// grid.
    pub fn lattice_positions(&self) -> Option<Vec<Vec<i64>>> {
        let lat = self.lattice.as_ref()?;
        Some((0..self.len()).map(|i| lat.key(self.centroid(i))).collect())
    }

    /// Index of the BAU whose cell contains `p`.
    pub fn locate(&self, p: &[f64]) -> Option<usize> {
        match (&self.cell, &self.lattice) {
            (CellGeometry::Rect(_), Some(lat)) => lat.locate(p),
            (CellGeometry::Rect(size), None) => (0..self.len()).find(|&i| {
                let c = self.centroid(i);
                (0..self.dim).all(|a| c[a] - 0.5 * size[a] <= p[a] && p[a] < c[a] + 0.5 * size[a])
            }),
            (CellGeometry::Point, _) => (0..self.len()).find(|&i| self.centroid(i) == p),
        }
    }
}

fn check_fs(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(FrkError::InvalidParameter("fine-scale weights must be positive".into()));
    }
    Ok(())
}

fn check_distinct(flat: &[f64], dim: usize) -> Result<()> {
    let n = flat.len() / dim;
    let mut order: Vec<usize> = (0..n).collect();
    let pt = |i: usize| &flat[i * dim..(i + 1) * dim];
    let cmp = |a: &usize, b: &usize| {
        pt(*a)
            .iter()
            .zip(pt(*b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    order.sort_unstable_by(cmp);
    for w in order.windows(2) {
        if pt(w[0]) == pt(w[1]) {
            return Err(FrkError::DuplicatePoint(w[0].max(w[1])));
        }
    }
    Ok(())
}

/// Regular grid of rectangular BAUs covering `extent`.
///
/// Each spatial axis is expanded to a whole number of cells. On space-time
/// manifolds the last axis is time: BAUs are placed at `t_min, t_min + Δt,
/// …` up to `t_max`.
pub fn auto_baus(
    manifold: &Manifold,
    cellsize: &[f64],
    extent: &BoundingBox,
    fs_weight: f64,
    max_baus: usize,
) -> Result<BauSet> {
    let dim = manifold.dim();
    let ds = manifold.spatial_dim();
    if cellsize.len() != dim {
        return Err(FrkError::DimensionMismatch { expected: dim, got: cellsize.len() });
    }
    if extent.dim() != dim {
        return Err(FrkError::DimensionMismatch { expected: dim, got: extent.dim() });
    }
    if cellsize.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(FrkError::InvalidParameter("cell sizes must be positive".into()));
    }
    let spatial = BoundingBox { min: extent.min[..ds].to_vec(), max: extent.max[..ds].to_vec() };
    spatial.check_nondegenerate()?;
    let mut counts = Vec::with_capacity(dim);
    for a in 0..dim {
        let len = extent.max[a] - extent.min[a];
        let k = if a < ds {
            ((len / cellsize[a]) * (1.0 - 1e-12)).ceil().max(1.0)
        } else {
            (len / cellsize[a] + 1e-9).floor() + 1.0
        };
        counts.push(k);
    }
    let total: f64 = counts.iter().product();
    if total > max_baus as f64 {
        return Err(FrkError::TooLarge(format!("grid would have {total} BAUs, limit {max_baus}")));
    }
    let counts: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    let n = total as usize;
    let mut centroids = Vec::with_capacity(n);
    let mut idx = vec![0usize; dim];
    for _ in 0..n {
        let c: Vec<f64> = (0..dim)
            .map(|a| {
                if a < ds {
                    extent.min[a] + (idx[a] as f64 + 0.5) * cellsize[a]
                } else {
                    extent.min[a] + idx[a] as f64 * cellsize[a]
                }
            })
            .collect();
        centroids.push(c);
        for a in 0..dim {
            idx[a] += 1;
            if idx[a] < counts[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    BauSet::new(manifold.clone(), centroids, CellGeometry::Rect(cellsize.to_vec()), vec![fs_weight; n])
}

/// One square cell per point, side half the smallest nearest-neighbour gap
/// (1 for a single point).
pub fn baus_from_points(manifold: &Manifold, points: &[Vec<f64>]) -> Result<BauSet> {
    if points.is_empty() {
        return Err(FrkError::InsufficientData("no points".into()));
    }
    let dim = manifold.dim();
    for p in points {
        manifold.check_point(p)?;
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    check_distinct(&flat, dim)?;
    let side = if points.len() == 1 {
        1.0
    } else {
        let mut best = f64::INFINITY;
        for i in 0..points.len() {
            for j in 0..i {
                let d = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d > 0.0 {
                    best = best.min(d);
                }
            }
        }
        0.5 * best
    };
    BauSet::new(manifold.clone(), points.to_vec(), CellGeometry::Rect(vec![side; dim]), vec![1.0; points.len()])
}

/// BAUs belonging to a region: centroids inside a rectangle, or the cell
/// containing a point.
pub fn footprint_from_region(baus: &BauSet, region: &Region) -> Result<Footprint> {
    let dim = baus.dim();
    let indices: Vec<usize> = match region {
        Region::Point(p) => {
            if p.len() != dim {
                return Err(FrkError::DimensionMismatch { expected: dim, got: p.len() });
            }
            baus.locate(p).into_iter().collect()
        }
        Region::Rect { min, max } => {
            if min.len() != dim || max.len() != dim {
                return Err(FrkError::DimensionMismatch { expected: dim, got: min.len().min(max.len()) });
            }
            if min.iter().zip(max).any(|(a, b)| a > b) {
                return Err(FrkError::InvalidParameter("region min exceeds max".into()));
            }
            (0..baus.len()).filter(|&i| region.contains_centroid(baus.centroid(i))).collect()
        }
    };
    if indices.is_empty() {
        return Err(FrkError::EmptyFootprint(format!("{region:?} contains no BAU")));
    }
    Footprint::new(indices, baus.len())
}

/// Row-normalised incidence matrix; with equal areas row `j` is `1/|c_j|` on
/// the members of footprint `j`.
pub fn build_incidence(baus: &BauSet, footprints: &[Footprint]) -> Result<IncidenceMatrix> {
    let rows = footprints
        .iter()
        .map(|f| {
            if let Some(&i) = f.indices().iter().find(|&&i| i >= baus.len()) {
                return Err(FrkError::InvalidParameter(format!("BAU index {i} out of range {}", baus.len())));
            }
            let w = 1.0 / f.len() as f64;
            Ok(f.indices().iter().map(|&i| (i, w)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    IncidenceMatrix::new(CsrMatrix::from_rows(baus.len(), rows))
}

/// A single datum with its support and optional measurement standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub region: Region,
    pub value: f64,
    pub std: Option<f64>,
}

impl Observation {
    pub fn point(coords: Vec<f64>, value: f64) -> Self {
        Self { region: Region::Point(coords), value, std: None }
    }
}

/// Observations mapped onto the BAUs.
#[derive(Debug, Clone)]
pub struct BinnedData {
    pub c_z: IncidenceMatrix,
    pub z: DVector<f64>,
    /// Measurement standard deviations, when supplied.
    pub std: Option<DVector<f64>>,
    pub footprints: Vec<Footprint>,
    /// Original observation indices behind each row.
    pub sources: Vec<Vec<usize>>,
}

impl BinnedData {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Maps observations to footprints and builds `C_Z`.
///
/// With `average_in_bau`, point observations falling in the same BAU are
/// merged into one with the mean value and mean standard deviation; rows
/// keep the order of first occurrence.
pub fn bin_data(baus: &BauSet, observations: &[Observation], average_in_bau: bool) -> Result<BinnedData> {
    if observations.is_empty() {
        return Err(FrkError::InsufficientData("no observations".into()));
    }
    let with_std = observations.iter().filter(|o| o.std.is_some()).count();
    if with_std != 0 && with_std != observations.len() {
        return Err(FrkError::InvalidParameter("measurement std must be given for all observations or none".into()));
    }
    let mut footprints = Vec::with_capacity(observations.len());
    for (j, o) in observations.iter().enumerate() {
        if !o.value.is_finite() {
            return Err(FrkError::NonFinite("observation value"));
        }
        if let Some(s) = o.std {
            if !(s.is_finite() && s >= 0.0) {
                return Err(FrkError::InvalidParameter(format!("observation {j} has invalid std {s}")));
            }
        }
        let f = footprint_from_region(baus, &o.region)
            .map_err(|e| match e {
                FrkError::EmptyFootprint(_) => FrkError::EmptyFootprint(format!("observation {j} is disjoint from the BAUs")),
                e => e,
            })?;
        footprints.push(f);
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    if average_in_bau {
        let mut by_bau: HashMap<usize, usize> = HashMap::new();
        for (j, (o, f)) in observations.iter().zip(&footprints).enumerate() {
            if matches!(o.region, Region::Point(_)) && f.is_single() {
                match by_bau.get(&f.indices()[0]) {
                    Some(&g) => groups[g].push(j),
                    None => {
                        by_bau.insert(f.indices()[0], groups.len());
                        groups.push(vec![j]);
                    }
                }
            } else {
                groups.push(vec![j]);
            }
        }
    } else {
        groups = (0..observations.len()).map(|j| vec![j]).collect();
    }

    let mean = |g: &[usize], f: &dyn Fn(usize) -> f64| g.iter().map(|&j| f(j)).sum::<f64>() / g.len() as f64;
    let z = DVector::from_iterator(groups.len(), groups.iter().map(|g| mean(g, &|j| observations[j].value)));
    let std = (with_std > 0).then(|| {
        DVector::from_iterator(groups.len(), groups.iter().map(|g| mean(g, &|j| observations[j].std.unwrap())))
    });
    let fps: Vec<Footprint> = groups.iter().map(|g| footprints[g[0]].clone()).collect();
    let c_z = build_incidence(baus, &fps)?;
    Ok(BinnedData { c_z, z, std, footprints: fps, sources: groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundingBox {
        BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    fn line3() -> BauSet {
        BauSet::new(
            Manifold::real_line(),
            vec![vec![0.5], vec![1.5], vec![2.5]],
            CellGeometry::Rect(vec![1.0]),
            vec![1.0; 3],
        )
        .unwrap()
    }

    #[test]
    fn auto_baus_unit_square() {
        let b = auto_baus(&Manifold::plane(), &[0.5, 0.5], &unit(), 1.0, 100).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.centroid(0), &[0.25, 0.25]);
        assert_eq!(b.centroid(3), &[0.75, 0.75]);
        assert_eq!(b.area(), 0.25);
        assert_eq!(b.covariates().shape(), (4, 1));
    }

    #[test]
    fn auto_baus_expands_extent() {
        let ext = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 0.9]).unwrap();
        let b = auto_baus(&Manifold::plane(), &[0.5, 0.5], &ext, 1.0, 100).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.extent().max, vec![1.0, 1.0]);
    }

    #[test]
    fn auto_baus_million() {
        let b = auto_baus(&Manifold::plane(), &[0.001, 0.001], &unit(), 1.0, DEFAULT_MAX_BAUS).unwrap();
        assert_eq!(b.len(), 1_000_000);
        assert_eq!(b.locate(&[0.0005, 0.9995]), Some(999 * 1000));
        assert!(matches!(
            auto_baus(&Manifold::plane(), &[0.001, 0.001], &unit(), 1.0, 999_999),
            Err(FrkError::TooLarge(_))
        ));
    }

    #[test]
    fn auto_baus_space_time() {
        let ext = BoundingBox::new(vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 4.0]).unwrap();
        let b = auto_baus(&Manifold::st_plane(), &[0.5, 0.5, 1.0], &ext, 1.0, 100).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b.time(0), Some(1));
        assert_eq!(b.time(15), Some(4));
    }

    #[test]
    fn points_to_cells() {
        let b = baus_from_points(&Manifold::plane(), &[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(b.cell(), &CellGeometry::Rect(vec![0.5, 0.5]));
        let b = baus_from_points(&Manifold::real_line(), &[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(b.cell(), &CellGeometry::Rect(vec![0.5]));
        let b = baus_from_points(&Manifold::plane(), &[vec![2.0, 2.0]]).unwrap();
        assert_eq!(b.cell(), &CellGeometry::Rect(vec![1.0, 1.0]));
        assert!(matches!(
            baus_from_points(&Manifold::plane(), &[vec![0.0, 0.0], vec![0.0, 0.0]]),
            Err(FrkError::DuplicatePoint(1))
        ));
    }

    #[test]
    fn invariants_enforced() {
        let m = Manifold::real_line();
        assert!(BauSet::new(m.clone(), vec![vec![0.0], vec![0.0]], CellGeometry::Point, vec![1.0; 2]).is_err());
        assert!(BauSet::new(m.clone(), vec![vec![0.0], vec![1.0]], CellGeometry::Point, vec![1.0, 0.0]).is_err());
        let b = BauSet::new(m, vec![vec![0.0], vec![1.0], vec![2.0]], CellGeometry::Point, vec![1.0; 3]).unwrap();
        let collinear = DMatrix::from_column_slice(3, 1, &[2.0, 2.0, 2.0]);
        assert!(matches!(b.clone().with_covariates(vec!["c".into()], collinear), Err(FrkError::Singular(_))));
        let ok = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 5.0]);
        let b = b.with_covariates(vec!["x".into()], ok).unwrap();
        assert_eq!(b.covariates().shape(), (3, 2));
        assert_eq!(b.covariate_names(), &["intercept".to_string(), "x".to_string()]);
    }

    #[test]
    fn footprints() {
        let g = auto_baus(&Manifold::plane(), &[50.0, 50.0], &BoundingBox::new(vec![0.0, 0.0], vec![1000.0, 1000.0]).unwrap(), 1.0, 1000).unwrap();
        let sq = footprint_from_region(&g, &Region::rect(vec![100.0, 200.0], vec![400.0, 500.0])).unwrap();
        assert_eq!(sq.len(), 36);
        let p = footprint_from_region(&g, &Region::Point(g.centroid(17).to_vec())).unwrap();
        assert_eq!(p.indices(), &[17]);
        assert!(matches!(
            footprint_from_region(&g, &Region::rect(vec![2000.0, 0.0], vec![3000.0, 10.0])),
            Err(FrkError::EmptyFootprint(_))
        ));

        let l = line3();
        let f = footprint_from_region(&l, &Region::rect(vec![0.0], vec![2.0])).unwrap();
        assert_eq!(f.indices(), &[0, 1]);
        // the max edge is open, the min edge closed
        assert_eq!(footprint_from_region(&l, &Region::rect(vec![0.5], vec![1.5])).unwrap().indices(), &[0]);
        assert_eq!(footprint_from_region(&l, &Region::Point(vec![1.0])).unwrap().indices(), &[1]);
    }

    #[test]
    fn footprint_is_permutation_invariant() {
        let pts = vec![vec![0.5], vec![1.5], vec![2.5], vec![3.5]];
        let mut rev = pts.clone();
        rev.reverse();
        let a = BauSet::new(Manifold::real_line(), pts, CellGeometry::Rect(vec![1.0]), vec![1.0; 4]).unwrap();
        let b = BauSet::new(Manifold::real_line(), rev, CellGeometry::Rect(vec![1.0]), vec![1.0; 4]).unwrap();
        let r = Region::rect(vec![1.0], vec![3.0]);
        let fa = footprint_from_region(&a, &r).unwrap();
        let fb = footprint_from_region(&b, &r).unwrap();
        assert_eq!(fa.indices(), &[1, 2]);
        assert_eq!(fb.indices(), &[1, 2]);
        assert!(fb.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn incidence_rows() {
        let l = line3();
        let f = vec![Footprint::new(vec![0, 1], 3).unwrap(), Footprint::new(vec![2], 3).unwrap()];
        let c = build_incidence(&l, &f).unwrap().to_dense();
        assert_eq!(c, DMatrix::from_row_slice(2, 3, &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0]));
        let all = build_incidence(&l, &[Footprint::new(vec![0, 1, 2], 3).unwrap()]).unwrap().to_dense();
        assert!(all.iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-16));
        let sel = build_incidence(&l, &[Footprint::new(vec![2], 3).unwrap(), Footprint::new(vec![0], 3).unwrap()]).unwrap();
        assert_eq!(sel.to_dense(), DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        assert!(Footprint::new(vec![], 3).is_err());
        assert!(IncidenceMatrix::new(CsrMatrix::from_rows(2, vec![vec![(0, 0.5)]])).is_err());
    }

    #[test]
    fn binning() {
        let l = line3();
        let obs = vec![
            Observation { region: Region::Point(vec![1.2]), value: 1.0, std: Some(0.1) },
            Observation { region: Region::Point(vec![1.7]), value: 3.0, std: Some(0.3) },
        ];
        let b = bin_data(&l, &obs, true).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.z[0], 2.0);
        assert!((b.std.as_ref().unwrap()[0] - 0.2).abs() < 1e-15);
        assert_eq!(b.sources, vec![vec![0, 1]]);

        let b = bin_data(&l, &obs, false).unwrap();
        assert_eq!(b.len(), 2);
        let c = b.c_z.to_dense();
        assert_eq!(c.row(0), c.row(1));

        // distinct BAUs: identity
        let obs3: Vec<Observation> = (0..3).map(|i| Observation::point(vec![i as f64 + 0.3], i as f64)).collect();
        let b = bin_data(&l, &obs3, true).unwrap();
        assert_eq!(b.c_z.to_dense(), DMatrix::identity(3, 3));
        assert_eq!(b.z.as_slice(), &[0.0, 1.0, 2.0]);

        // multi-BAU footprints are never merged
        let blocks = vec![
            Observation { region: Region::rect(vec![0.0], vec![2.0]), value: 1.0, std: None },
            Observation { region: Region::rect(vec![0.0], vec![2.0]), value: 2.0, std: None },
        ];
        assert_eq!(bin_data(&l, &blocks, true).unwrap().len(), 2);

        let far = vec![Observation::point(vec![10.0], 0.0)];
        assert!(matches!(bin_data(&l, &far, true), Err(FrkError::EmptyFootprint(_))));
        let mixed = vec![obs[0].clone(), Observation::point(vec![0.2], 1.0)];
        assert!(bin_data(&l, &mixed, true).is_err());
    }
}
