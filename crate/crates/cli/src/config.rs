use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use frk_core::bench::SimulationConfig;
use frk_core::{AutoBasisOptions, BasisFamily, EmOptions, KType, ManifoldSpec, MeasErrorConfig, ModelConfig, Variant};

use crate::error::{CliError, CliResult};

/// Settings for automatically placed multi-resolution basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_nres")]
    pub nres: usize,
    #[serde(default = "default_family")]
    pub family: BasisFamily,
    #[serde(default)]
    pub coarsest: Option<usize>,
    #[serde(default)]
    pub max_basis: Option<usize>,
}

fn default_nres() -> usize {
    2
}

fn default_family() -> BasisFamily {
    BasisFamily::Bisquare
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { nres: default_nres(), family: default_family(), coarsest: None, max_basis: None }
    }
}

impl BasisConfig {
    pub fn options(&self) -> AutoBasisOptions {
        AutoBasisOptions {
            nres: self.nres,
            family: self.family,
            max_basis: self.max_basis,
            coarsest: self.coarsest,
            ..Default::default()
        }
    }
}

/// A predictor taking part in a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorConfig {
    Frk {
        #[serde(default = "default_frk_name")]
        name: String,
        #[serde(default)]
        basis: BasisConfig,
        #[serde(default)]
        variant: Option<Variant>,
        #[serde(default)]
        k_type: Option<KType>,
        /// Defaults to the true simulation noise variance.
        #[serde(default)]
        meas_error: Option<MeasErrorConfig>,
    },
    Exact,
    /// Predictions read from a CSV with columns `replication,cell,mu,sd`.
    External { name: String, path: PathBuf },
}

fn default_frk_name() -> String {
    "frk".into()
}

fn default_predictors() -> Vec<PredictorConfig> {
    vec![PredictorConfig::Frk {
        name: default_frk_name(),
        basis: BasisConfig::default(),
        variant: None,
        k_type: None,
        meas_error: None,
    }]
}

fn default_manifold() -> ManifoldSpec {
    ManifoldSpec { kind: "plane".into(), radius: None, scale: None, time_unit: None }
}

fn default_response() -> String {
    "z".into()
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

fn default_max_baus() -> usize {
    frk_core::baus::DEFAULT_MAX_BAUS
}

fn default_n_em() -> usize {
    EmOptions::default().n_em
}

fn default_tol() -> f64 {
    EmOptions::default().tol
}

/// Contents of the JSON file given with `--config`. Relative paths are
/// resolved against the directory holding that file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Observation CSV.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// BAU CSV; without it a regular grid is laid over the data.
    #[serde(default)]
    pub baus: Option<PathBuf>,
    /// Basis JSON; without it basis functions are placed automatically.
    #[serde(default)]
    pub basis: Option<PathBuf>,
    /// Fitted-model manifest, written by `fit` and read by `predict`.
    /// Defaults to `model.json` in the output directory.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Prediction regions CSV.
    #[serde(default)]
    pub regions: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_manifold")]
    pub manifold: ManifoldSpec,
    /// Response column of the observation CSV.
    #[serde(default = "default_response")]
    pub response: String,
    /// Covariate columns of the BAU CSV.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// BAU side lengths, one per coordinate. Needed for automatic BAUs;
    /// inferred from the centroid spacing of a BAU CSV otherwise.
    #[serde(default)]
    pub cellsize: Option<Vec<f64>>,
    /// Margin added around the data before gridding.
    #[serde(default)]
    pub buffer: f64,
    #[serde(default = "default_one")]
    pub fs_weight: f64,
    #[serde(default = "default_max_baus")]
    pub max_baus: usize,
    #[serde(default)]
    pub basis_options: BasisConfig,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub k_type: KType,
    #[serde(default)]
    pub meas_error: MeasErrorConfig,
    #[serde(default = "default_true")]
    pub average_in_bau: bool,
    #[serde(default = "default_n_em")]
    pub n_em: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write PGM previews of BAU-level predictions on gridded BAUs.
    #[serde(default = "default_true")]
    pub raster: bool,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default = "default_predictors")]
    pub predictors: Vec<PredictorConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_em: Option<usize>,
    pub tol: Option<f64>,
    pub variant: Option<Variant>,
    pub k_type: Option<KType>,
    pub average_in_bau: Option<bool>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: line {}: {e}", path.display(), e.line())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.baus, &mut cfg.basis, &mut cfg.model, &mut cfg.regions, &mut cfg.output]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
        for pc in &mut cfg.predictors {
            if let PredictorConfig::External { path, .. } = pc {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            if let Some(sim) = &mut self.simulation {
                sim.seed = s;
            }
        }
        if let Some(n) = o.n_em {
            self.n_em = n;
        }
        if let Some(t) = o.tol {
            self.tol = t;
        }
        if let Some(v) = o.variant {
            self.variant = v;
            for pc in &mut self.predictors {
                if let PredictorConfig::Frk { variant, .. } = pc {
                    *variant = Some(v);
                }
            }
        }
        if let Some(k) = o.k_type {
            self.k_type = k;
            for pc in &mut self.predictors {
                if let PredictorConfig::Frk { k_type, .. } = pc {
                    *k_type = Some(k);
                }
            }
        }
        if let Some(a) = o.average_in_bau {
            self.average_in_bau = a;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.output_dir().join("model.json"))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { variant: self.variant, k_type: self.k_type, meas_error: self.meas_error.clone() }
    }

    pub fn em_options(&self) -> CliResult<EmOptions> {
        if !(self.tol >= 0.0) {
            return Err(CliError::config(format!("tol must be nonnegative, got {}", self.tol)));
        }
        Ok(EmOptions { n_em: self.n_em, tol: self.tol, print_lik: log::log_enabled!(log::Level::Info) })
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
        field.as_deref().ok_or_else(|| CliError::config(format!("config field `{name}` is required for this command")))
    }
}
