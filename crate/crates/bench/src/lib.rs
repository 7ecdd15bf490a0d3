//! Fixtures shared by the benchmarks: simulated data on the unit square,
//! gridded into one BAU per cell.

use frk_core::bench::{cell_centre, design, simulate, CovarianceModel, SimulationConfig};
use frk_core::{
    assemble, auto_basis, AssembleOptions, AutoBasisOptions, BauSet, BoundingBox, CellGeometry, KType, Manifold,
    MeasErrorConfig, ModelConfig, Observation, SreModel, Variant,
};

/// Exponential covariance with unit variance and e-folding length 0.15.
pub fn covariance() -> CovarianceModel {
    CovarianceModel::Exponential { sigma2: 1.0, tau: 0.15 }
}

pub fn simulation(n: usize, m: usize, seed: u64) -> SimulationConfig {
    SimulationConfig::new(n, covariance(), m, 1.0, 1, seed)
}

/// `n × n` BAUs over the unit square.
pub fn grid_baus(n: usize) -> BauSet {
    let h = 1.0 / n as f64;
    let centroids = (0..n * n).map(|k| cell_centre(n, k).to_vec()).collect();
    BauSet::new(Manifold::plane(), centroids, CellGeometry::Rect(vec![h, h]), vec![1.0; n * n]).expect("valid grid")
}

/// Assembled, unfitted model of one simulated replication.
pub fn grid_model(n: usize, m: usize, nres: usize, k_type: KType, variant: Variant, seed: u64) -> SreModel {
    let cfg = simulation(n, m, seed);
    let d = design(&cfg).expect("design");
    let rep = simulate(&cfg, &d, 0).expect("simulation");
    let obs: Vec<Observation> =
        d.obs_cells.iter().zip(&rep.z).map(|(&k, &z)| Observation::point(cell_centre(n, k).to_vec(), z)).collect();
    let extent = BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).expect("unit square");
    let basis = auto_basis(&Manifold::plane(), &extent, &AutoBasisOptions { nres, ..Default::default() }).expect("basis");
    let config = ModelConfig { variant, k_type, meas_error: MeasErrorConfig::given(cfg.sigma2_eps()) };
    assemble(grid_baus(n), basis, &obs, &config, &AssembleOptions::default()).expect("assembly")
}
