use std::path::Path;

use serde::Serialize;

use frk_core::bench::{
    cell_centre, design, run_experiment, simulate, ExactPredictor, ExperimentReport, ExternalPredictor, FrkPredictor,
    Predictor, SimulationConfig, SummaryRow,
};
use frk_core::{
    assemble, auto_basis, auto_baus, fit, predict, tensor_basis, AssembleOptions, AutoBasisOptions, BasisSet, BauSet,
    BoundingBox, EmOptions, FrkError, KType, Manifold, MeasErrorConfig, ModelConfig, PredictOptions,
    PredictionRegionSet, Region, SreModel, Variant,
};

use crate::config::{PredictorConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::ingest::{coord_names, read_baus, read_observations, read_regions};
use crate::io::{csv_err, csv_writer, write_json, write_pgm, write_table, Table};
use crate::store;

fn manifold(cfg: &RunConfig) -> CliResult<Manifold> {
    cfg.manifold.build().map_err(|e| CliError::frk_config("manifold", e))
}

/// Corners of every observation support.
fn support_points(obs: &[frk_core::Observation]) -> Vec<Vec<f64>> {
    obs.iter()
        .flat_map(|o| match &o.region {
            Region::Point(p) => vec![p.clone()],
            Region::Rect { min, max } => vec![min.clone(), max.clone()],
        })
        .collect()
}

fn build_baus(cfg: &RunConfig, manifold: &Manifold, obs: &[frk_core::Observation]) -> CliResult<BauSet> {
    if cfg.baus.is_some() {
        return read_baus(cfg, manifold);
    }
    if !cfg.covariates.is_empty() {
        return Err(CliError::config("covariates need a BAU file (`baus`)"));
    }
    let cellsize = cfg
        .cellsize
        .as_ref()
        .ok_or_else(|| CliError::config("either `baus` or `cellsize` must be given"))?;
    let mut extent = BoundingBox::around(&support_points(obs), cfg.buffer).map_err(|e| CliError::frk("data", e))?;
    let ds = manifold.spatial_dim();
    if obs.iter().any(|o| matches!(o.region, Region::Point(_))) {
        // Cells are open at their upper edge and centroids carry rounding
        // error; keep points on the data boundary strictly inside the grid.
        for a in 0..ds {
            let pad = 1e-6 * cellsize.get(a).copied().unwrap_or(0.0);
            extent.min[a] -= pad;
            extent.max[a] += pad;
        }
    }
    if manifold.kind().is_spatio_temporal() {
        // Time is gridded from the first to the last observed index.
        extent.min[ds] += cfg.buffer;
        extent.max[ds] -= cfg.buffer;
    }
    auto_baus(manifold, cellsize, &extent, cfg.fs_weight, cfg.max_baus).map_err(|e| CliError::frk_config("BAU grid", e))
}

fn build_basis(cfg: &RunConfig, manifold: &Manifold, baus: &BauSet) -> CliResult<BasisSet> {
    if let Some(path) = &cfg.basis {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let basis = BasisSet::from_json(&text).map_err(|e| CliError::frk_config(path.display(), e))?;
        if basis.manifold().kind() != manifold.kind() {
            return Err(CliError::config(format!("{}: basis manifold does not match `manifold`", path.display())));
        }
        return Ok(basis);
    }
    let opts = cfg.basis_options.options();
    let extent = baus.extent();
    let err = |e| CliError::frk_config("automatic basis", e);
    if manifold.kind().is_spatio_temporal() {
        let ds = manifold.spatial_dim();
        let spatial_extent = BoundingBox::new(extent.min[..ds].to_vec(), extent.max[..ds].to_vec()).map_err(err)?;
        let time_extent = BoundingBox::new(extent.min[ds..].to_vec(), extent.max[ds..].to_vec()).map_err(err)?;
        let spatial = auto_basis(&manifold.spatial(), &spatial_extent, &opts).map_err(err)?;
        let temporal = auto_basis(&Manifold::real_line(), &time_extent, &AutoBasisOptions { nres: 1, ..opts })
            .map_err(err)?;
        tensor_basis(&spatial, &temporal).map_err(err)
    } else {
        auto_basis(manifold, &extent, &opts).map_err(err)
    }
}

#[derive(Serialize)]
struct FitReport<'a> {
    seed: u64,
    model: String,
    variant: Variant,
    k_type: KType,
    n_baus: usize,
    n_basis: usize,
    n_observations: usize,
    n_data: usize,
    iterations: usize,
    converged: bool,
    sigma2_at_bound: bool,
    loglik: f64,
    loglik_trace: &'a [f64],
    covariates: &'a [String],
    alpha: Vec<f64>,
    fine_scale_variance: f64,
    meas_error_variance: f64,
    theta: Option<&'a [(f64, f64)]>,
}

pub fn cmd_fit(cfg: &RunConfig) -> CliResult<()> {
    let manifold = manifold(cfg)?;
    let em = cfg.em_options()?;
    let table = read_observations(cfg, &manifold)?;
    let baus = build_baus(cfg, &manifold, &table.observations)?;
    let basis = build_basis(cfg, &manifold, &baus)?;
    let opts = AssembleOptions { average_in_bau: cfg.average_in_bau, ..Default::default() };
    let model = assemble(baus, basis, &table.observations, &cfg.model_config(), &opts)
        .map_err(|e| CliError::frk(cfg.data.as_deref().unwrap_or(Path::new("data")).display(), e))?;
    log::info!("assembled: {} BAUs, {} basis functions, {} data", model.baus().len(), model.r(), model.m());
    let (model, state) = fit(model, &em).map_err(|e| CliError::frk("EM", e))?;
    let model_path = cfg.model_path();
    store::save(&model_path, &model, &table.observations, table.support, cfg.average_in_bau, &state)?;

    let params = model.params();
    let report = FitReport {
        seed: cfg.seed,
        model: model_path.display().to_string(),
        variant: model.variant(),
        k_type: model.k_type(),
        n_baus: model.baus().len(),
        n_basis: model.r(),
        n_observations: table.observations.len(),
        n_data: model.m(),
        iterations: state.iterations,
        converged: state.converged,
        sigma2_at_bound: state.sigma2_at_bound,
        loglik: *state.loglik_trace.last().expect("trace holds the initial value"),
        loglik_trace: &state.loglik_trace,
        covariates: model.baus().covariate_names(),
        alpha: params.alpha.iter().copied().collect(),
        fine_scale_variance: params.sigma2,
        meas_error_variance: model.sigma2_eps(),
        theta: params.theta.as_deref(),
    };
    write_json(&cfg.output_dir().join("fit_report.json"), &report)?;
    println!(
        "fit: {} iterations, converged {}, log-likelihood {:.6}, model written to {}",
        state.iterations,
        state.converged,
        report.loglik,
        model_path.display()
    );
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, requested: Option<Variant>) -> CliResult<()> {
    let path = cfg.model_path();
    let stored = store::load(&path)?;
    let model = stored.model;
    log::info!(
        "loaded {}: {} BAUs, {} basis functions, fitted in {} EM iterations",
        path.display(),
        stored.manifest.baus.n,
        stored.manifest.r,
        stored.manifest.fit.iterations
    );
    if let Some(v) = requested {
        if v != model.variant() {
            return Err(CliError::config(format!(
                "{}: model was fitted as {} but {} was requested",
                path.display(),
                model.variant().name(),
                v.name()
            )));
        }
    }
    let regions = match &cfg.regions {
        Some(p) => {
            let regions = read_regions(p, model.baus().manifold())?;
            let set = PredictionRegionSet::from_regions(model.baus(), &regions).map_err(|e| match e {
                FrkError::EmptyFootprint(msg) => CliError::data(format!("{}: {msg}", p.display())),
                e => CliError::frk(p.display(), e),
            })?;
            Some(set)
        }
        None => None,
    };
    let out = predict(&model, regions.as_ref(), &PredictOptions::default()).map_err(|e| CliError::frk("prediction", e))?;
    let n = out.mu.len();
    let dir = cfg.output_dir();
    let csv_path = dir.join("predictions.csv");
    let row = |k: usize| vec![k as f64, out.mu[k], out.sd[k], out.var[k]];
    if regions.is_some() {
        write_table(&csv_path, &["region_id", "mu", "sd", "var"], (0..n).map(row))?;
    } else {
        let baus = model.baus();
        let names = coord_names(baus.manifold());
        let headers: Vec<&str> = ["region_id", "mu", "sd", "var"].into_iter().chain(names.iter().copied()).collect();
        write_table(
            &csv_path,
            &headers,
            (0..n).map(|k| {
                let mut r = row(k);
                r.extend_from_slice(baus.centroid(k));
                r
            }),
        )?;
        if cfg.raster {
            write_rasters(&model, &dir, out.mu.as_slice(), out.sd.as_slice())?;
        }
    }
    println!("predict: {n} rows written to {}", csv_path.display());
    Ok(())
}

/// PGM previews for BAUs on a regular two-dimensional grid.
fn write_rasters(model: &SreModel, dir: &Path, mu: &[f64], sd: &[f64]) -> CliResult<()> {
    let baus = model.baus();
    if baus.dim() != 2 {
        return Ok(());
    }
    let Some(pos) = baus.lattice_positions() else {
        return Ok(());
    };
    let cells: Vec<(i64, i64)> = pos.iter().map(|p| (p[0], p[1])).collect();
    write_pgm(&dir.join("mu.pgm"), &cells, mu)?;
    write_pgm(&dir.join("sd.pgm"), &cells, sd)
}

fn simulation(cfg: &RunConfig) -> CliResult<&SimulationConfig> {
    let sim = cfg.simulation.as_ref().ok_or_else(|| CliError::config("config field `simulation` is required"))?;
    sim.validate().map_err(|e| CliError::frk_config("simulation", e))?;
    Ok(sim)
}

/// Writes the grid as a BAU file, then per replication the observations
/// and the true field.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let sim = simulation(cfg)?;
    let dir = cfg.output_dir();
    let n = sim.n;
    let cells = sim.n_cells();
    write_table(
        &dir.join("baus.csv"),
        &["x", "y", "fs"],
        (0..cells).map(|k| {
            let c = cell_centre(n, k);
            vec![c[0], c[1], 1.0]
        }),
    )?;
    let d = design(sim).map_err(|e| CliError::frk("design", e))?;
    let mut pred = vec![None; cells];
    for &(side, class, start, end) in &d.classes {
        for &k in &d.pred_cells[start..end] {
            pred[k] = Some((side, class));
        }
    }
    write_table(
        &dir.join("prediction_cells.csv"),
        &["cell", "x", "y", "left", "observed"],
        pred.iter().enumerate().filter_map(|(k, p)| {
            let (side, class) = (*p)?;
            let c = cell_centre(n, k);
            let flag = |b: bool| if b { 1.0 } else { 0.0 };
            Some(vec![
                k as f64,
                c[0],
                c[1],
                flag(side == frk_core::bench::Side::Lh),
                flag(class == frk_core::bench::Coincidence::Observed),
            ])
        }),
    )?;
    for l in 0..sim.replications {
        let rep = simulate(sim, &d, l).map_err(|e| CliError::frk(format!("replication {l}"), e))?;
        let sub = dir.join(format!("replication_{l:03}"));
        write_table(
            &sub.join("obs.csv"),
            &["x", "y", "z", "cell"],
            d.obs_cells.iter().zip(&rep.z).map(|(&k, &z)| {
                let c = cell_centre(n, k);
                vec![c[0], c[1], z, k as f64]
            }),
        )?;
        write_table(
            &sub.join("field.csv"),
            &["cell", "x", "y", "y_true"],
            rep.field.iter().enumerate().map(|(k, &y)| {
                let c = cell_centre(n, k);
                vec![k as f64, c[0], c[1], y]
            }),
        )?;
    }
    write_json(
        &dir.join("simulation.json"),
        &serde_json::json!({ "simulation": sim, "sigma2_eps": sim.sigma2_eps(), "observed_cells": d.obs_cells.len() }),
    )?;
    println!("simulate: {} replications written to {}", sim.replications, dir.display());
    Ok(())
}

fn read_external(name: &str, path: &Path) -> CliResult<ExternalPredictor> {
    let table = Table::read(path)?;
    let [l, k, mu, sd] = [table.column("replication")?, table.column("cell")?, table.column("mu")?, table.column("sd")?];
    let mut records = Vec::with_capacity(table.len());
    for (i, r) in table.rows.iter().enumerate() {
        let index = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::data(format!("{}: `{v}` is not an index", table.at(i))))
            }
        };
        records.push((index(r[l])?, index(r[k])?, r[mu], r[sd]));
    }
    Ok(ExternalPredictor::new(name, records))
}

fn predictors(cfg: &RunConfig, em: &EmOptions) -> CliResult<Vec<Box<dyn Predictor>>> {
    cfg.predictors
        .iter()
        .map(|pc| -> CliResult<Box<dyn Predictor>> {
            Ok(match pc {
                PredictorConfig::Frk { name, basis, variant, k_type, meas_error } => Box::new(FrkPredictor::new(
                    name,
                    basis.options(),
                    ModelConfig {
                        variant: variant.unwrap_or(Variant::Case2),
                        k_type: k_type.unwrap_or(KType::BlockExponential),
                        meas_error: meas_error.clone().unwrap_or_else(|| MeasErrorConfig::given(1.0)),
                    },
                    em.clone(),
                )),
                PredictorConfig::Exact => Box::new(ExactPredictor),
                PredictorConfig::External { name, path } => Box::new(read_external(name, path)?),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct BenchmarkSummary<'a> {
    seed: u64,
    simulation: &'a SimulationConfig,
    predictors: Vec<String>,
    summary: Vec<SummaryRow>,
}

pub fn write_report(path: &Path, report: &ExperimentReport) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    for row in &report.rows {
        w.serialize(row).map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn cmd_benchmark(cfg: &RunConfig) -> CliResult<()> {
    let sim = simulation(cfg)?;
    let em = cfg.em_options()?;
    let mut preds = predictors(cfg, &em)?;
    let report = run_experiment(sim, &mut preds).map_err(|e| CliError::frk("benchmark", e))?;
    let dir = cfg.output_dir();
    write_report(&dir.join("report.csv"), &report)?;
    let summary = BenchmarkSummary {
        seed: sim.seed,
        simulation: sim,
        predictors: preds.iter().map(|p| p.name().to_string()).collect(),
        summary: report.summary(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    for row in summary.summary.iter().filter(|r| r.side == "all" && r.class == "all") {
        println!("{:<12} {:<10} {:.4}", row.predictor, row.metric, row.mean);
    }
    Ok(())
}
