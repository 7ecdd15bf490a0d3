//! Reading observations, BAUs and prediction regions from CSV.

use frk_core::{BauSet, CellGeometry, Manifold, Observation, Region};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::Table;

/// Column names of the coordinates, spatial axes first.
pub fn coord_names(manifold: &Manifold) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = ["x", "y", "z"][..manifold.spatial_dim()].to_vec();
    if manifold.kind().is_spatio_temporal() {
        names.push("t");
    }
    names
}

fn finite(table: &Table, k: usize, v: f64) -> CliResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::data(format!("{}: non-finite value", table.at(k))))
    }
}

/// How observation supports are laid out in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Point,
    Rect,
}

impl Support {
    pub fn name(self) -> &'static str {
        match self {
            Support::Point => "point",
            Support::Rect => "rect",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "point" => Some(Support::Point),
            "rect" => Some(Support::Rect),
            _ => None,
        }
    }
}

/// Column layout of a point or rectangle file: point files hold one
/// column per coordinate, rectangle files `<axis>min,<axis>max` per spatial
/// axis plus a single time column on space-time manifolds.
struct Layout {
    support: Support,
    /// Per coordinate, the (min, max) columns; equal for points and time.
    cols: Vec<(usize, usize)>,
}

fn layout(table: &Table, manifold: &Manifold) -> CliResult<Layout> {
    let names = coord_names(manifold);
    let ds = manifold.spatial_dim();
    if table.position(&format!("{}min", names[0])).is_some() {
        let mut cols = Vec::with_capacity(names.len());
        for name in &names[..ds] {
            cols.push((table.column(&format!("{name}min"))?, table.column(&format!("{name}max"))?));
        }
        for name in &names[ds..] {
            let c = table.column(name)?;
            cols.push((c, c));
        }
        Ok(Layout { support: Support::Rect, cols })
    } else {
        let cols = names.iter().map(|n| table.column(n).map(|c| (c, c))).collect::<CliResult<_>>()?;
        Ok(Layout { support: Support::Point, cols })
    }
}

fn region_of(layout: &Layout, table: &Table, k: usize) -> CliResult<Region> {
    let row = &table.rows[k];
    match layout.support {
        Support::Point => {
            Ok(Region::Point(layout.cols.iter().map(|&(c, _)| finite(table, k, row[c])).collect::<CliResult<_>>()?))
        }
        Support::Rect => {
            let min = layout.cols.iter().map(|&(c, _)| finite(table, k, row[c])).collect::<CliResult<Vec<_>>>()?;
            let max = layout.cols.iter().map(|&(_, c)| finite(table, k, row[c])).collect::<CliResult<Vec<_>>>()?;
            if min.iter().zip(&max).any(|(a, b)| a > b) {
                return Err(CliError::data(format!("{}: rectangle minimum exceeds maximum", table.at(k))));
            }
            Ok(Region::rect(min, max))
        }
    }
}

/// Observations as read from the data file.
#[derive(Debug, Clone)]
pub struct ObservationTable {
    pub support: Support,
    pub observations: Vec<Observation>,
}

pub fn read_observations(cfg: &RunConfig, manifold: &Manifold) -> CliResult<ObservationTable> {
    let path = cfg.require(&cfg.data, "data")?;
    let table = Table::read(path)?;
    let layout = layout(&table, manifold)?;
    let z = table.column(&cfg.response)?;
    let std = match &cfg.meas_error.std_column {
        Some(name) => Some(table.column(name)?),
        None => table.position("std"),
    };
    let table = table.non_empty()?;
    let observations = (0..table.len())
        .map(|k| {
            let region = region_of(&layout, &table, k)?;
            let value = finite(&table, k, table.rows[k][z])?;
            let std = match std {
                Some(c) => {
                    let s = table.rows[k][c];
                    if !(s.is_finite() && s > 0.0) {
                        return Err(CliError::data(format!("{}: standard deviation must be positive", table.at(k))));
                    }
                    Some(s)
                }
                None => None,
            };
            Ok(Observation { region, value, std })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ObservationTable { support: layout.support, observations })
}

/// Smallest positive gap between distinct sorted values, per axis.
fn infer_cellsize(points: &[Vec<f64>], dim: usize) -> Option<Vec<f64>> {
    (0..dim)
        .map(|a| {
            let mut v: Vec<f64> = points.iter().map(|p| p[a]).collect();
            v.sort_by(f64::total_cmp);
            v.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).min_by(f64::total_cmp)
        })
        .collect()
}

/// BAUs from a CSV with coordinate columns, `fs`, optional `fs_delta` and
/// the configured covariates.
pub fn read_baus(cfg: &RunConfig, manifold: &Manifold) -> CliResult<BauSet> {
    let path = cfg.require(&cfg.baus, "baus")?;
    let table = Table::read(path)?;
    let names = coord_names(manifold);
    let coord_cols = names.iter().map(|n| table.column(n)).collect::<CliResult<Vec<_>>>()?;
    let fs_col = table.column("fs")?;
    let delta_col = table.position("fs_delta");
    let cov_cols = cfg.covariates.iter().map(|n| table.column(n)).collect::<CliResult<Vec<_>>>()?;
    let table = table.non_empty()?;
    let mut centroids = Vec::with_capacity(table.len());
    for k in 0..table.len() {
        centroids.push(coord_cols.iter().map(|&c| finite(&table, k, table.rows[k][c])).collect::<CliResult<Vec<_>>>()?);
    }
    let fs: Vec<f64> = table.rows.iter().map(|r| r[fs_col]).collect();
    let cell = match &cfg.cellsize {
        Some(size) => CellGeometry::Rect(size.clone()),
        None => match infer_cellsize(&centroids, names.len()) {
            Some(size) => CellGeometry::Rect(size),
            None if centroids.len() == 1 => CellGeometry::Rect(vec![1.0; names.len()]),
            None => {
                return Err(CliError::config(format!(
                    "{}: cannot infer the BAU size from the centroids; set `cellsize`",
                    path.display()
                )))
            }
        },
    };
    let ctx = path.display();
    let mut baus = BauSet::new(manifold.clone(), centroids, cell, fs).map_err(|e| CliError::frk(&ctx, e))?;
    if let Some(c) = delta_col {
        baus = baus.with_fs_delta(table.rows.iter().map(|r| r[c]).collect()).map_err(|e| CliError::frk(&ctx, e))?;
    }
    if !cov_cols.is_empty() {
        let m = DMatrix::from_fn(table.len(), cov_cols.len(), |i, j| table.rows[i][cov_cols[j]]);
        baus = baus.with_covariates(cfg.covariates.clone(), m).map_err(|e| CliError::frk(&ctx, e))?;
    }
    Ok(baus)
}

/// Prediction regions: rectangles (or points) in the observation layout.
pub fn read_regions(path: &std::path::Path, manifold: &Manifold) -> CliResult<Vec<Region>> {
    let table = Table::read(path)?.non_empty()?;
    let layout = layout(&table, manifold)?;
    (0..table.len()).map(|k| region_of(&layout, &table, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(dir: &std::path::Path, file: &str, body: &str) -> RunConfig {
        let path = dir.join(file);
        std::fs::write(&path, body).unwrap();
        RunConfig { data: Some(path.clone()), baus: Some(path), ..Default::default() }
    }

    #[test]
    fn points_and_std() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "obs.csv", "x,y,z,std\n0.5,1.5,2.0,0.1\n1,2,3,0.2\n");
        let t = read_observations(&cfg, &Manifold::plane()).unwrap();
        assert_eq!(t.support, Support::Point);
        assert_eq!(t.observations[1], Observation { region: Region::Point(vec![1.0, 2.0]), value: 3.0, std: Some(0.2) });
    }

    #[test]
    fn rectangles() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "obs.csv", "xmin,xmax,ymin,ymax,z\n0,2,1,3,4.5\n");
        let t = read_observations(&cfg, &Manifold::plane()).unwrap();
        assert_eq!(t.support, Support::Rect);
        assert_eq!(t.observations[0].region, Region::rect(vec![0.0, 1.0], vec![2.0, 3.0]));
        assert_eq!(t.observations[0].std, None);
    }

    #[test]
    fn missing_response_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "obs.csv", "x,y,value\n0,0,1\n");
        assert_eq!(read_observations(&cfg, &Manifold::plane()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn empty_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg_with(dir.path(), "obs.csv", "x,y,z\n");
        assert_eq!(read_observations(&cfg, &Manifold::plane()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn bau_size_is_inferred_from_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = cfg_with(dir.path(), "baus.csv", "x,y,fs,elev\n0.5,0.5,1,3\n1.5,0.5,1,4\n0.5,1.0,2,5\n");
        cfg.covariates = vec!["elev".into()];
        let b = read_baus(&cfg, &Manifold::plane()).unwrap();
        assert_eq!(b.cell(), &CellGeometry::Rect(vec![1.0, 0.5]));
        assert_eq!(b.fs_weights(), &[1.0, 1.0, 2.0]);
        assert_eq!(b.covariates().ncols(), 2);
        assert_eq!(b.covariates()[(2, 1)], 5.0);
    }
}
