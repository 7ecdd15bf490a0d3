//! Sparse and structured matrix support.
//!
//! Two structures carry all the large-matrix work:
//!
//! * [`CsrMatrix`] for incidence matrices and compactly supported basis
//!   matrices.
//! * [`BlockDiagMatrix`], a symmetric matrix that is block diagonal up to a
//!   permutation. `C_Z V C_Zᵀ` has this form (observations are coupled only
//!   when their footprints share a BAU), and so does `C_Zᵀ E C_Z` on the BAU
//!   side. Factorising one dense Cholesky per connected component is an exact
//!   sparse factorisation with no fill outside the components.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FrkError, Result};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Duplicate columns are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = col_idx.len();
            for (c, v) in row {
                assert!(c < ncols, "column {c} out of range {ncols}");
                if col_idx.len() > start && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Keeps entries with `|value| >= threshold`.
    pub fn from_dense_thresholded(m: &DMatrix<f64>, threshold: f64) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter_map(|j| {
                        let v = m[(i, j)];
                        (v.abs() >= threshold).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self::from_rows(m.ncols(), rows)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                out[(i, *c)] = *v;
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter().zip(vals).map(|(c, v)| v * x[*c]).sum::<f64>()
            }),
        )
    }

    /// `self * x` for dense `x`.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                for j in 0..x.ncols() {
                    out[(i, j)] += v * x[(*c, j)];
                }
            }
        }
        out
    }

    /// `self * other` for sparse `other`, densified.
    pub fn mul_csr_dense(&self, other: &CsrMatrix) -> DMatrix<f64> {
        assert_eq!(other.nrows, self.ncols);
        let mut out = DMatrix::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (k, a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(*k);
                for (j, b) in ocols.iter().zip(ovals) {
                    out[(i, *j)] += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * x` for a vector of length `nrows`.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                out[*c] += v * x[i];
            }
        }
        out
    }

    /// `selfᵀ * x` for dense `x` with `nrows` rows.
    pub fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.nrows);
        let mut out = DMatrix::zeros(self.ncols, x.ncols());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                for j in 0..x.ncols() {
                    out[(*c, j)] += v * x[(i, j)];
                }
            }
        }
        out
    }

    /// Column-to-rows adjacency: for each column, the `(row, value)` pairs.
    pub fn column_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.ncols];
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (c, v) in c.iter().zip(v) {
                cols[*c].push((i, *v));
            }
        }
        cols
    }

    /// `self · diag(w) · selfᵀ` as a block-diagonal symmetric matrix.
    pub fn weighted_gram(&self, w: &[f64]) -> BlockDiagMatrix {
        assert_eq!(w.len(), self.ncols);
        let mut triplets = Vec::new();
        for (col, list) in self.column_lists().iter().enumerate() {
            for &(a, va) in list {
                for &(b, vb) in list {
                    triplets.push((a, b, va * w[col] * vb));
                }
            }
        }
        BlockDiagMatrix::from_triplets(self.nrows, &triplets)
    }

    /// `selfᵀ · diag(w) · self` as a block-diagonal symmetric matrix.
    pub fn weighted_tr_gram(&self, w: &[f64]) -> BlockDiagMatrix {
        assert_eq!(w.len(), self.nrows);
        let mut triplets = Vec::new();
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (a, va) in cols.iter().zip(vals) {
                for (b, vb) in cols.iter().zip(vals) {
                    triplets.push((*a, *b, va * w[i] * vb));
                }
            }
        }
        BlockDiagMatrix::from_triplets(self.ncols, &triplets)
    }
}

/// Partition of `0..dim` into connected components.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    dim: usize,
    components: Vec<Vec<usize>>,
    /// `(component, position within component)` for each index.
    location: Vec<(usize, usize)>,
}

impl BlockStructure {
    fn from_components(dim: usize, components: Vec<Vec<usize>>) -> Self {
        let mut location = vec![(usize::MAX, 0); dim];
        for (c, members) in components.iter().enumerate() {
            for (p, &i) in members.iter().enumerate() {
                location[i] = (c, p);
            }
        }
        Self { dim, components, location }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn location(&self, i: usize) -> (usize, usize) {
        self.location[i]
    }

    pub fn all_singletons(&self) -> bool {
        self.components.len() == self.dim
    }

    pub fn max_block(&self) -> usize {
        self.components.iter().map(Vec::len).max().unwrap_or(0)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Symmetric matrix that is block diagonal after a permutation.
#[derive(Debug, Clone)]
pub struct BlockDiagMatrix {
    structure: Arc<BlockStructure>,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagMatrix {
    /// Builds from `(row, col, value)` entries; duplicates are summed. The
    /// triplets must describe a symmetric matrix.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut parent: Vec<usize> = (0..dim).collect();
        for &(a, b, _) in triplets {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent[hi] = lo;
            }
        }
        // Components ordered by smallest member; members ascending.
        let mut comp_of_root = vec![usize::MAX; dim];
        let mut components: Vec<Vec<usize>> = Vec::new();
        for i in 0..dim {
            let r = find(&mut parent, i);
            if comp_of_root[r] == usize::MAX {
                comp_of_root[r] = components.len();
                components.push(Vec::new());
            }
            components[comp_of_root[r]].push(i);
        }
        let structure = BlockStructure::from_components(dim, components);
        let mut blocks: Vec<DMatrix<f64>> = structure
            .components
            .iter()
            .map(|c| DMatrix::zeros(c.len(), c.len()))
            .collect();
        for &(a, b, v) in triplets {
            let (ca, pa) = structure.location[a];
            let (_, pb) = structure.location[b];
            blocks[ca][(pa, pb)] += v;
        }
        Self { structure: Arc::new(structure), blocks }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let triplets: Vec<_> = d.iter().enumerate().map(|(i, v)| (i, i, *v)).collect();
        Self::from_triplets(d.len(), &triplets)
    }

    pub fn structure(&self) -> &Arc<BlockStructure> {
        &self.structure
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.structure.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (ci, pi) = self.structure.location[i];
        let (cj, pj) = self.structure.location[j];
        if ci == cj {
            self.blocks[ci][(pi, pj)]
        } else {
            0.0
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| self.get(i, i)))
    }

    pub fn is_diagonal(&self) -> bool {
        self.structure.all_singletons()
    }

    /// `Some(c)` if the matrix equals `c·I` exactly.
    pub fn scaled_identity(&self) -> Option<f64> {
        if !self.is_diagonal() || self.dim() == 0 {
            return None;
        }
        let c = self.blocks[0][(0, 0)];
        self.blocks.iter().all(|b| b[(0, 0)] == c).then_some(c)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (members, block) in self.structure.components.iter().zip(&self.blocks) {
            for (p, &i) in members.iter().enumerate() {
                for (q, &j) in members.iter().enumerate() {
                    out[(i, j)] = block[(p, q)];
                }
            }
        }
        out
    }

    /// `scale · self + diag(d)`, keeping the block structure.
    pub fn scale_add_diag(&self, scale: f64, d: &[f64]) -> BlockDiagMatrix {
        assert_eq!(d.len(), self.dim());
        let blocks = self
            .structure
            .components
            .iter()
            .zip(&self.blocks)
            .map(|(members, b)| {
                let mut out = b * scale;
                for (p, &i) in members.iter().enumerate() {
                    out[(p, p)] += d[i];
                }
                out
            })
            .collect();
        BlockDiagMatrix { structure: self.structure.clone(), blocks }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (members, b) in self.structure.components.iter().zip(&self.blocks) {
            for (p, &i) in members.iter().enumerate() {
                out[i] = members.iter().enumerate().map(|(q, &j)| b[(p, q)] * x[j]).sum();
            }
        }
        out
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), x.ncols());
        for (members, b) in self.structure.components.iter().zip(&self.blocks) {
            for (p, &i) in members.iter().enumerate() {
                for (q, &j) in members.iter().enumerate() {
                    let v = b[(p, q)];
                    if v != 0.0 {
                        for c in 0..x.ncols() {
                            out[(i, c)] += v * x[(j, c)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Cholesky factor of every block.
    pub fn factor(&self, name: &'static str) -> Result<BlockDiagCholesky> {
        let factors = self
            .blocks
            .iter()
            .map(|b| Cholesky::new(b.clone()).ok_or(FrkError::NotPositiveDefinite { matrix: name }))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockDiagCholesky { structure: self.structure.clone(), factors })
    }
}

/// Cholesky factorisation of a [`BlockDiagMatrix`].
#[derive(Debug, Clone)]
pub struct BlockDiagCholesky {
    structure: Arc<BlockStructure>,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl BlockDiagCholesky {
    pub fn structure(&self) -> &Arc<BlockStructure> {
        &self.structure
    }

    pub fn dim(&self) -> usize {
        self.structure.dim
    }

    pub fn ln_det(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| f.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>())
            .sum()
    }

    pub fn solve_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let mut out = DVector::zeros(self.dim());
        for (members, f) in self.structure.components.iter().zip(&self.factors) {
            if members.len() == 1 {
                let i = members[0];
                let l = f.l_dirty()[(0, 0)];
                out[i] = x[i] / (l * l);
                continue;
            }
            let rhs = DVector::from_iterator(members.len(), members.iter().map(|&i| x[i]));
            let sol = f.solve(&rhs);
            for (p, &i) in members.iter().enumerate() {
                out[i] = sol[p];
            }
        }
        out
    }

    pub fn solve_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.dim());
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (members, f) in self.structure.components.iter().zip(&self.factors) {
            if members.len() == 1 {
                let i = members[0];
                let l = f.l_dirty()[(0, 0)];
                let inv = 1.0 / (l * l);
                for c in 0..x.ncols() {
                    out[(i, c)] = x[(i, c)] * inv;
                }
                continue;
            }
            let mut rhs = DMatrix::zeros(members.len(), x.ncols());
            for (p, &i) in members.iter().enumerate() {
                rhs.row_mut(p).copy_from(&x.row(i));
            }
            f.solve_mut(&mut rhs);
            for (p, &i) in members.iter().enumerate() {
                out.row_mut(i).copy_from(&rhs.row(p));
            }
        }
        out
    }

    /// Solves for a right-hand side supported on a few indices. Returns the
    /// solution restricted to the touched components as `(index, value)`,
    /// sorted by index.
    pub fn solve_sparse(&self, entries: &[(usize, f64)]) -> Vec<(usize, f64)> {
        let mut touched: Vec<usize> = entries.iter().map(|(i, _)| self.structure.location[*i].0).collect();
        touched.sort_unstable();
        touched.dedup();
        let mut out = Vec::new();
        for c in touched {
            let members = &self.structure.components[c];
            let mut rhs = DVector::zeros(members.len());
            for &(i, v) in entries {
                let (ci, p) = self.structure.location[i];
                if ci == c {
                    rhs[p] += v;
                }
            }
            self.factors[c].solve_mut(&mut rhs);
            out.extend(members.iter().zip(rhs.iter()).map(|(&i, &v)| (i, v)));
        }
        out.sort_unstable_by_key(|e| e.0);
        out
    }

    /// `tr(self⁻¹ · v)` for `v` sharing this block structure.
    pub fn trace_solve(&self, v: &BlockDiagMatrix) -> f64 {
        assert!(Arc::ptr_eq(&self.structure, &v.structure) || *self.structure == *v.structure);
        self.factors.iter().zip(&v.blocks).map(|(f, b)| f.solve(b).trace()).sum()
    }

    pub fn factors(&self) -> &[Cholesky<f64, Dyn>] {
        &self.factors
    }

    /// Per-block inverse blocks.
    pub fn inverse_blocks(&self) -> Vec<DMatrix<f64>> {
        self.factors.iter().map(|f| f.inverse()).collect()
    }
}

/// Dense Cholesky with a named failure.
pub fn cholesky(m: DMatrix<f64>, name: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FrkError::NotPositiveDefinite { matrix: name });
    }
    Cholesky::new(m).ok_or(FrkError::NotPositiveDefinite { matrix: name })
}

pub fn chol_ln_det(c: &Cholesky<f64, Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

/// Lower-triangular factor with the strict upper triangle zeroed.
pub fn chol_lower(c: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    c.l()
}

/// Full column rank test on column-normalised `m`: the smallest eigenvalue
/// of the normalised Gram matrix must exceed `1e-10`.
pub fn full_column_rank(m: &DMatrix<f64>) -> bool {
    if m.ncols() == 0 {
        return true;
    }
    if m.nrows() < m.ncols() {
        return false;
    }
    let mut g = m.tr_mul(m);
    let norms: Vec<f64> = (0..g.nrows()).map(|i| g[(i, i)].sqrt()).collect();
    if norms.iter().any(|n| !(*n > 0.0) || !n.is_finite()) {
        return false;
    }
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            g[(i, j)] /= norms[i] * norms[j];
        }
    }
    let eig = g.symmetric_eigenvalues();
    eig.min() > 1e-10
}

/// Symmetrises in place: `(a + aᵀ)/2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
