//! Fitted-model files: a JSON manifest plus a sidecar of little-endian f64
//! arrays. The model is rebuilt from its inputs on load, then the fitted
//! parameters and posterior are installed bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use frk_core::{
    assemble, AssembleOptions, BasisSet, BauSet, CellGeometry, EmState, ManifoldSpec, ModelConfig, Observation, Params,
    Posterior, Region, SreModel,
};

use crate::error::{CliError, CliResult};
use crate::ingest::Support;
use crate::io::create;

pub const FORMAT: &str = "frk-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    /// Offset into the sidecar, in values.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BauSpec {
    pub n: usize,
    pub dim: usize,
    /// Cell side lengths; absent for point-BAUs.
    pub cell: Option<Vec<f64>>,
    /// Covariate names, excluding the intercept.
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub m: usize,
    pub support: String,
    pub std: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub iterations: usize,
    pub converged: bool,
    pub sigma2_at_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Sidecar file name, relative to the manifest.
    pub sidecar: String,
    pub manifold: ManifoldSpec,
    pub config: ModelConfig,
    pub average_in_bau: bool,
    pub baus: BauSpec,
    pub basis: serde_json::Value,
    pub observations: ObservationSpec,
    /// Number of binned data points the model was fitted to.
    pub m: usize,
    pub r: usize,
    pub fit: FitSpec,
    pub arrays: BTreeMap<String, ArraySpec>,
}

#[derive(Default)]
struct Sidecar {
    values: Vec<f64>,
    arrays: BTreeMap<String, ArraySpec>,
}

impl Sidecar {
    fn push(&mut self, name: &str, rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) {
        let offset = self.values.len();
        self.values.extend(data);
        debug_assert_eq!(self.values.len() - offset, rows * cols);
        self.arrays.insert(name.into(), ArraySpec { offset, rows, cols });
    }

    /// Row-major flattening.
    fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.push(name, m.nrows(), m.ncols(), m.transpose().iter().copied().collect::<Vec<_>>());
    }
}

struct Loaded<'a> {
    values: Vec<f64>,
    arrays: &'a BTreeMap<String, ArraySpec>,
    path: &'a Path,
}

impl Loaded<'_> {
    fn get(&self, name: &str) -> CliResult<(&[f64], usize, usize)> {
        let spec = self
            .arrays
            .get(name)
            .ok_or_else(|| CliError::data(format!("{}: array `{name}` missing", self.path.display())))?;
        let end = spec.offset + spec.rows * spec.cols;
        if end > self.values.len() {
            return Err(CliError::data(format!("{}: array `{name}` runs past the sidecar", self.path.display())));
        }
        Ok((&self.values[spec.offset..end], spec.rows, spec.cols))
    }

    fn vector(&self, name: &str) -> CliResult<Vec<f64>> {
        Ok(self.get(name)?.0.to_vec())
    }

    fn matrix(&self, name: &str) -> CliResult<DMatrix<f64>> {
        let (v, r, c) = self.get(name)?;
        Ok(DMatrix::from_row_slice(r, c, v))
    }

    fn scalar(&self, name: &str) -> CliResult<f64> {
        self.get(name)?
            .0
            .first()
            .copied()
            .ok_or_else(|| CliError::data(format!("{}: array `{name}` is empty", self.path.display())))
    }
}

fn sidecar_path(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(name)
}

/// Writes `model` (which must be fitted) together with the observations it
/// was assembled from.
pub fn save(
    path: &Path,
    model: &SreModel,
    observations: &[Observation],
    support: Support,
    average_in_bau: bool,
    state: &EmState,
) -> CliResult<()> {
    let post = model.posterior().ok_or_else(|| CliError::data("model has not been fitted"))?;
    let baus = model.baus();
    let manifold = baus.manifold().to_spec().map_err(|e| CliError::frk_config("manifold", e))?;
    let basis: serde_json::Value = model
        .basis()
        .to_json()
        .and_then(|s| Ok(serde_json::from_str(&s)?))
        .map_err(|e| CliError::frk_config("basis", e))?;
    let dim = baus.dim();
    let n = baus.len();

    let mut side = Sidecar::default();
    side.push("bau_centroids", n, dim, baus.centroids().flatten().copied().collect::<Vec<_>>());
    side.push("bau_fs", n, 1, baus.fs_weights().to_vec());
    side.push("bau_fs_delta", n, 1, baus.fs_delta_weights().to_vec());
    let cov = baus.covariates().columns(1, baus.covariates().ncols() - 1).into_owned();
    side.push_matrix("bau_covariates", &cov);

    let width = match support {
        Support::Point => dim,
        Support::Rect => 2 * dim,
    };
    let mut coords = Vec::with_capacity(observations.len() * width);
    for o in observations {
        match (&o.region, support) {
            (Region::Point(p), Support::Point) => coords.extend_from_slice(p),
            (Region::Rect { min, max }, Support::Rect) => {
                coords.extend_from_slice(min);
                coords.extend_from_slice(max);
            }
            _ => return Err(CliError::data("observations mix points and rectangles")),
        }
    }
    let has_std = observations.iter().any(|o| o.std.is_some());
    side.push("obs_coords", observations.len(), width, coords);
    side.push("obs_value", observations.len(), 1, observations.iter().map(|o| o.value).collect::<Vec<_>>());
    if has_std {
        side.push("obs_std", observations.len(), 1, observations.iter().map(|o| o.std.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    }

    let params = model.params();
    side.push("alpha", params.alpha.len(), 1, params.alpha.iter().copied().collect::<Vec<_>>());
    side.push_matrix("k", params.k());
    if let Some(theta) = &params.theta {
        side.push("theta", theta.len(), 2, theta.iter().flat_map(|&(a, b)| [a, b]).collect::<Vec<_>>());
    }
    side.push("sigma2", 1, 1, [params.sigma2]);
    side.push("sigma2_eps", 1, 1, [model.sigma2_eps()]);
    side.push("posterior_mu", post.mu.len(), 1, post.mu.iter().copied().collect::<Vec<_>>());
    side.push_matrix("posterior_sigma", &post.sigma);
    side.push("loglik_trace", state.loglik_trace.len(), 1, state.loglik_trace.clone());

    let sidecar = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).filter(|s| !s.is_empty()).unwrap_or("model")
    );
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        sidecar: sidecar.clone(),
        manifold,
        config: model.config().clone(),
        average_in_bau,
        baus: BauSpec {
            n,
            dim,
            cell: match baus.cell() {
                CellGeometry::Rect(s) => Some(s.clone()),
                CellGeometry::Point => None,
            },
            covariates: baus.covariate_names()[1..].to_vec(),
        },
        basis,
        observations: ObservationSpec { m: observations.len(), support: support.name().into(), std: has_std },
        m: model.m(),
        r: model.r(),
        fit: FitSpec { iterations: state.iterations, converged: state.converged, sigma2_at_bound: state.sigma2_at_bound },
        arrays: side.arrays,
    };

    let bin_path = sidecar_path(path, &sidecar);
    let mut w = create(&bin_path)?;
    for v in &side.values {
        w.write_all(&v.to_le_bytes()).map_err(|e| CliError::io(&bin_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&bin_path, e))?;
    crate::io::write_json(path, &manifest)
}

/// A model read back from disk.
pub struct Stored {
    pub manifest: Manifest,
    pub model: SreModel,
}

pub fn load(path: &Path) -> CliResult<Stored> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: not a model manifest: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CliError::config(format!(
            "{}: unsupported model file {} version {} (expected {FORMAT} version {VERSION})",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let bin_path = sidecar_path(path, &manifest.sidecar);
    let bytes = std::fs::read(&bin_path).map_err(|e| CliError::io(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::data(format!("{}: truncated sidecar", bin_path.display())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let arrays = Loaded { values, arrays: &manifest.arrays, path: &bin_path };
    let ctx = path.display();
    let bad = |e| CliError::frk(&ctx, e);

    let manifold = manifest.manifold.build().map_err(|e| CliError::frk_config(&ctx, e))?;
    let spec = &manifest.baus;
    let (centroids, _, dim) = arrays.get("bau_centroids")?;
    if dim != spec.dim || centroids.len() != spec.n * spec.dim {
        return Err(CliError::data(format!("{}: BAU centroids do not match the manifest", bin_path.display())));
    }
    let cell = match &spec.cell {
        Some(s) => CellGeometry::Rect(s.clone()),
        None => CellGeometry::Point,
    };
    let mut baus = BauSet::new(manifold, centroids.chunks(dim).map(<[f64]>::to_vec).collect(), cell, arrays.vector("bau_fs")?)
        .map_err(bad)?
        .with_fs_delta(arrays.vector("bau_fs_delta")?)
        .map_err(bad)?;
    if !spec.covariates.is_empty() {
        baus = baus.with_covariates(spec.covariates.clone(), arrays.matrix("bau_covariates")?).map_err(bad)?;
    }
    let basis = BasisSet::from_json(&manifest.basis.to_string()).map_err(bad)?;

    let support = Support::from_name(&manifest.observations.support)
        .ok_or_else(|| CliError::data(format!("{ctx}: unknown support {}", manifest.observations.support)))?;
    let (coords, m, width) = arrays.get("obs_coords")?;
    let values = arrays.vector("obs_value")?;
    let std = if manifest.observations.std { Some(arrays.vector("obs_std")?) } else { None };
    if m != manifest.observations.m || values.len() != m || std.as_ref().is_some_and(|s| s.len() != m) {
        return Err(CliError::data(format!("{}: observation arrays do not match the manifest", bin_path.display())));
    }
    let observations: Vec<Observation> = (0..m)
        .map(|i| {
            let row = &coords[i * width..(i + 1) * width];
            let region = match support {
                Support::Point => Region::Point(row.to_vec()),
                Support::Rect => Region::rect(row[..width / 2].to_vec(), row[width / 2..].to_vec()),
            };
            Observation { region, value: values[i], std: std.as_ref().map(|s| s[i]) }
        })
        .collect();

    let opts = AssembleOptions { average_in_bau: manifest.average_in_bau, ..Default::default() };
    let model = assemble(baus, basis, &observations, &manifest.config, &opts).map_err(bad)?;
    let sigma2_eps = arrays.scalar("sigma2_eps")?;
    if model.m() != manifest.m || model.r() != manifest.r || model.sigma2_eps().to_bits() != sigma2_eps.to_bits() {
        return Err(CliError::data(format!("{ctx}: rebuilt model does not match the stored one")));
    }

    let theta = match arrays.arrays.contains_key("theta") {
        true => Some(arrays.get("theta")?.0.chunks(2).map(|c| (c[0], c[1])).collect()),
        false => None,
    };
    let params = Params::new(
        DVector::from_vec(arrays.vector("alpha")?),
        arrays.matrix("k")?,
        theta,
        arrays.scalar("sigma2")?,
    )
    .map_err(bad)?;
    let posterior = Posterior { mu: DVector::from_vec(arrays.vector("posterior_mu")?), sigma: arrays.matrix("posterior_sigma")? };
    let model = model.with_fit(params, posterior).map_err(bad)?;
    Ok(Stored { manifest, model })
}
