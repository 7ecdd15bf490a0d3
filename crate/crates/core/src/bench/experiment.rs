use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::krige::exact_krige;
use super::score::{coverage, score, I90_MULTIPLIER};
use super::sim::{design, simulate};
use super::{cell_centre, SimulationConfig};
use crate::basis::{auto_basis, AutoBasisOptions, BasisSet};
use crate::baus::{BauSet, BoundingBox, CellGeometry, Footprint, Observation};
use crate::em::{fit, EmOptions};
use crate::error::{FrkError, Result};
use crate::manifold::Manifold;
use crate::model::{assemble, AssembleOptions, KType, MeasErrorConfig, MeasErrorMode, ModelConfig, Variant};
use crate::predict::{predict, PredictOptions, PredictionRegionSet};

/// What a predictor sees of one replication.
#[derive(Debug, Clone, Copy)]
pub struct ReplicationInput<'a> {
    pub config: &'a SimulationConfig,
    pub replication: usize,
    pub obs_cells: &'a [usize],
    pub z: &'a [f64],
    pub pred_cells: &'a [usize],
    /// True measurement-error variance.
    pub sigma2_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Variance added to `sd² + σ²_ε` when covering new data, beyond the
    /// measurement error itself.
    pub data_var_extra: Option<Vec<f64>>,
}

pub trait Predictor {
    fn name(&self) -> &str;
    fn predict(&mut self, input: &ReplicationInput) -> Result<Prediction>;
    /// Extra per-replication values recorded after the last prediction.
    fn diagnostics(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

/// Simple kriging with the true covariance.
#[derive(Debug, Clone, Default)]
pub struct ExactPredictor;

impl Predictor for ExactPredictor {
    fn name(&self) -> &str {
        "exact"
    }

    fn predict(&mut self, input: &ReplicationInput) -> Result<Prediction> {
        let n = input.config.n;
        let obs: Vec<[f64; 2]> = input.obs_cells.iter().map(|&k| cell_centre(n, k)).collect();
        let pred: Vec<[f64; 2]> = input.pred_cells.iter().map(|&k| cell_centre(n, k)).collect();
        let (mean, var) = exact_krige(&input.config.covariance, &obs, input.z, input.sigma2_eps, &pred)?;
        Ok(Prediction { mean: mean.as_slice().to_vec(), sd: var.iter().map(|v| v.sqrt()).collect(), data_var_extra: None })
    }
}

/// Fixed rank kriging on the simulation grid, with one BAU per cell.
#[derive(Debug, Clone)]
pub struct FrkPredictor {
    pub name: String,
    pub basis: AutoBasisOptions,
    pub config: ModelConfig,
    pub em: EmOptions,
    /// With [`MeasErrorMode::Given`] the true `σ²_ε` of the simulation is
    /// supplied to the model.
    cache: Option<(usize, BauSet, BasisSet)>,
    last: Vec<(String, f64)>,
}

impl Default for FrkPredictor {
    fn default() -> Self {
        Self::new(
            "frk",
            AutoBasisOptions { nres: 2, ..Default::default() },
            ModelConfig {
                variant: Variant::Case2,
                k_type: KType::BlockExponential,
                meas_error: MeasErrorConfig::given(1.0),
            },
            EmOptions::default(),
        )
    }
}

impl FrkPredictor {
    pub fn new(name: &str, basis: AutoBasisOptions, config: ModelConfig, em: EmOptions) -> Self {
        Self { name: name.to_string(), basis, config, em, cache: None, last: Vec::new() }
    }

    fn grid(&mut self, n: usize) -> Result<(BauSet, BasisSet)> {
        if let Some((cn, b, s)) = &self.cache {
            if *cn == n {
                return Ok((b.clone(), s.clone()));
            }
        }
        let h = 1.0 / n as f64;
        let centroids = (0..n * n).map(|k| cell_centre(n, k).to_vec()).collect();
        let baus = BauSet::new(Manifold::plane(), centroids, CellGeometry::Rect(vec![h, h]), vec![1.0; n * n])?;
        let extent = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0])?;
        let basis = auto_basis(&Manifold::plane(), &extent, &self.basis)?;
        self.cache = Some((n, baus.clone(), basis.clone()));
        Ok((baus, basis))
    }
}

impl Predictor for FrkPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&mut self, input: &ReplicationInput) -> Result<Prediction> {
        let n = input.config.n;
        let (baus, basis) = self.grid(n)?;
        let obs: Vec<Observation> =
            input.obs_cells.iter().zip(input.z).map(|(&k, &z)| Observation::point(cell_centre(n, k).to_vec(), z)).collect();
        let mut config = self.config.clone();
        if config.meas_error.mode == MeasErrorMode::Given {
            config.meas_error = MeasErrorConfig::given(input.sigma2_eps);
        }
        let model = assemble(baus, basis, &obs, &config, &AssembleOptions::default())?;
        let (model, state) = fit(model, &self.em)?;
        self.last = vec![
            ("em_iterations".into(), state.iterations as f64),
            ("em_converged".into(), if state.converged { 1.0 } else { 0.0 }),
            ("loglik".into(), *state.loglik_trace.last().unwrap_or(&f64::NAN)),
            ("sigma2_fs".into(), model.params().sigma2),
        ];
        let footprints = input.pred_cells.iter().map(|&k| Footprint::new(vec![k], n * n)).collect::<Result<Vec<_>>>()?;
        let regions = PredictionRegionSet::from_footprints(model.baus(), footprints)?;
        let out = predict(&model, Some(&regions), &PredictOptions::default())?;
        let data_var_extra = (model.variant() == Variant::Case1).then(|| {
            let w = model.fs_bau_weights();
            input.pred_cells.iter().map(|&k| model.params().sigma2 * w[k]).collect()
        });
        Ok(Prediction { mean: out.mu.as_slice().to_vec(), sd: out.sd.as_slice().to_vec(), data_var_extra })
    }

    fn diagnostics(&self) -> Vec<(String, f64)> {
        self.last.clone()
    }
}

/// Predictions produced elsewhere, keyed by replication and cell index.
#[derive(Debug, Clone)]
pub struct ExternalPredictor {
    name: String,
    values: HashMap<(usize, usize), (f64, f64)>,
}

impl ExternalPredictor {
    /// `records` holds `(replication, cell, mean, sd)`.
    pub fn new(name: &str, records: impl IntoIterator<Item = (usize, usize, f64, f64)>) -> Self {
        let values = records.into_iter().map(|(l, k, m, s)| ((l, k), (m, s))).collect();
        Self { name: name.to_string(), values }
    }
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&mut self, input: &ReplicationInput) -> Result<Prediction> {
        let mut mean = Vec::with_capacity(input.pred_cells.len());
        let mut sd = Vec::with_capacity(input.pred_cells.len());
        for &k in input.pred_cells {
            let (m, s) = self.values.get(&(input.replication, k)).ok_or_else(|| {
                FrkError::InsufficientData(format!("{}: no prediction for replication {} cell {k}", self.name, input.replication))
            })?;
            mean.push(*m);
            sd.push(*s);
        }
        Ok(Prediction { mean, sd, data_var_extra: None })
    }
}

/// One report entry. `side` and `class` are `all` for pooled values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub replication: usize,
    pub predictor: String,
    pub side: String,
    pub class: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub predictor: String,
    pub side: String,
    pub class: String,
    pub metric: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: SimulationConfig,
    pub rows: Vec<ScoreRow>,
}

impl ExperimentReport {
    pub fn value(&self, replication: usize, predictor: &str, side: &str, class: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.replication == replication && r.predictor == predictor && r.side == side && r.class == class && r.metric == metric)
            .map(|r| r.value)
    }

    /// All replications' values for one cell of the report.
    pub fn series(&self, predictor: &str, side: &str, class: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.predictor == predictor && r.side == side && r.class == class && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Mean, min and max over replications.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in &self.rows {
            let key = (r.predictor.clone(), r.side.clone(), r.class.clone(), r.metric.clone());
            let e = groups.entry(key.clone()).or_default();
            if e.is_empty() {
                order.push(key);
            }
            e.push(r.value);
        }
        order
            .into_iter()
            .map(|key| {
                let v = &groups[&key];
                SummaryRow {
                    predictor: key.0,
                    side: key.1,
                    class: key.2,
                    metric: key.3,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().cloned().fold(f64::INFINITY, f64::min),
                    max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    replications: v.len(),
                }
            })
            .collect()
    }
}

/// Runs `config.replications` simulated datasets through each predictor.
/// Relative skill is measured against the first predictor.
pub fn run_experiment(config: &SimulationConfig, predictors: &mut [Box<dyn Predictor>]) -> Result<ExperimentReport> {
    if predictors.is_empty() {
        return Err(FrkError::InvalidParameter("no predictors".into()));
    }
    let mut names: Vec<&str> = predictors.iter().map(|p| p.name()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(FrkError::InvalidParameter("predictor names must be unique".into()));
    }
    let design = design(config)?;
    let sigma2_eps = config.sigma2_eps();
    let mut groups: Vec<(&str, &str, usize, usize)> =
        design.classes.iter().filter(|c| c.3 > c.2).map(|c| (c.0.name(), c.1.name(), c.2, c.3)).collect();
    groups.push(("all", "all", 0, design.pred_cells.len()));
    let mut rows = Vec::new();
    for l in 0..config.replications {
        let rep = simulate(config, &design, l)?;
        let truth: Vec<f64> = design.pred_cells.iter().map(|&k| rep.field[k]).collect();
        let input = ReplicationInput {
            config,
            replication: l,
            obs_cells: &design.obs_cells,
            z: &rep.z,
            pred_cells: &design.pred_cells,
            sigma2_eps,
        };
        let mut reference: Vec<f64> = Vec::new();
        for (pi, p) in predictors.iter_mut().enumerate() {
            let pred = p.predict(&input)?;
            let np = design.pred_cells.len();
            if pred.mean.len() != np || pred.sd.len() != np {
                return Err(FrkError::LengthMismatch { what: "predictions and prediction cells", left: pred.mean.len(), right: np });
            }
            let data_sd: Vec<f64> = (0..np)
                .map(|i| {
                    let extra = pred.data_var_extra.as_ref().map_or(0.0, |e| e[i]);
                    (pred.sd[i].powi(2) + sigma2_eps + extra).sqrt()
                })
                .collect();
            let name = p.name().to_string();
            for (gi, &(side, class, s, e)) in groups.iter().enumerate() {
                let sc = score(&truth[s..e], &pred.mean[s..e], &pred.sd[s..e])?;
                let dcov = coverage(&rep.z_new[s..e], &pred.mean[s..e], &data_sd[s..e], I90_MULTIPLIER)?;
                if pi == 0 {
                    reference.push(sc.rmspe);
                }
                let rs = sc.rmspe / reference[gi];
                for (metric, value) in [("rmspe", sc.rmspe), ("rs", rs), ("i90", sc.i90), ("crps", sc.crps), ("data_i90", dcov)] {
                    rows.push(ScoreRow {
                        replication: l,
                        predictor: name.clone(),
                        side: side.to_string(),
                        class: class.to_string(),
                        metric: metric.to_string(),
                        value,
                    });
                }
            }
            for (metric, value) in p.diagnostics() {
                rows.push(ScoreRow { replication: l, predictor: name.clone(), side: "all".into(), class: "all".into(), metric, value });
            }
        }
        log::info!("replication {}/{} done", l + 1, config.replications);
    }
    Ok(ExperimentReport { config: config.clone(), rows })
}
