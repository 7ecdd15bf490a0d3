//! Geometries on which basis functions and BAUs live, and the distance
//! measures attached to them.
//!
//! Sphere coordinates are `(lon, lat)` in degrees. Space-time manifolds append
//! the time coordinate as the last component of a point; their distance is a
//! `(spatial, temporal)` pair and is never collapsed into a scalar.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

type DistanceFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// A distance function together with the coordinate dimension it accepts.
#[derive(Clone)]
pub enum Measure {
    Euclidean { dim: usize },
    GreatCircle { radius: f64 },
    /// Euclidean distance between componentwise-scaled points.
    Scaled { scale: Vec<f64> },
    Custom { dim: usize, dist: Arc<DistanceFn> },
}

impl Measure {
    pub fn dim(&self) -> usize {
        match self {
            Measure::Euclidean { dim } | Measure::Custom { dim, .. } => *dim,
            Measure::GreatCircle { .. } => 2,
            Measure::Scaled { scale } => scale.len(),
        }
    }

    /// Wraps a user-supplied distance function.
    pub fn custom<F>(dim: usize, dist: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(FrkError::InvalidParameter("measure dimension must be positive".into()));
        }
        Ok(Measure::Custom { dim, dist: Arc::new(dist) })
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Measure::Euclidean { .. } => euclidean(a, b),
            Measure::GreatCircle { radius } => haversine(a, b, *radius),
            Measure::Scaled { scale } => a
                .iter()
                .zip(b)
                .zip(scale)
                .map(|((x, y), s)| {
                    let d = s * (x - y);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Measure::Custom { dist, .. } => dist(a, b),
        }
    }
}

impl fmt::Debug for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Euclidean { dim } => write!(f, "Euclidean({dim})"),
            Measure::GreatCircle { radius } => write!(f, "GreatCircle(R={radius})"),
            Measure::Scaled { scale } => write!(f, "Scaled({scale:?})"),
            Measure::Custom { dim, .. } => write!(f, "Custom({dim})"),
        }
    }
}

/// Builds a measure that stretches each axis before taking Euclidean distance.
pub fn make_scaled_measure(scale: &[f64]) -> Result<Measure> {
    if scale.is_empty() {
        return Err(FrkError::InvalidParameter("scale must have at least one axis".into()));
    }
    if let Some(s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(FrkError::InvalidParameter(format!("axis scale must be positive, got {s}")));
    }
    Ok(Measure::Scaled { scale: scale.to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManifoldKind {
    RealLine,
    Plane,
    Sphere { radius: f64 },
    StPlane,
    StSphere { radius: f64 },
}

impl ManifoldKind {
    pub fn name(&self) -> &'static str {
        match self {
            ManifoldKind::RealLine => "real_line",
            ManifoldKind::Plane => "plane",
            ManifoldKind::Sphere { .. } => "sphere",
            ManifoldKind::StPlane => "st_plane",
            ManifoldKind::StSphere { .. } => "st_sphere",
        }
    }

    pub fn is_spatio_temporal(&self) -> bool {
        matches!(self, ManifoldKind::StPlane | ManifoldKind::StSphere { .. })
    }

    pub fn is_spherical(&self) -> bool {
        matches!(self, ManifoldKind::Sphere { .. } | ManifoldKind::StSphere { .. })
    }
}

#[derive(Debug, Clone)]
pub struct Manifold {
    kind: ManifoldKind,
    /// Spatial measure. For space-time kinds this acts on the spatial part only.
    measure: Measure,
    time_unit: String,
}

impl Manifold {
    pub fn real_line() -> Self {
        Self::new(ManifoldKind::RealLine, Measure::Euclidean { dim: 1 })
    }

    pub fn plane() -> Self {
        Self::new(ManifoldKind::Plane, Measure::Euclidean { dim: 2 })
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        check_radius(radius)?;
        Ok(Self::new(ManifoldKind::Sphere { radius }, Measure::GreatCircle { radius }))
    }

    pub fn st_plane() -> Self {
        Self::new(ManifoldKind::StPlane, Measure::Euclidean { dim: 2 })
    }

    pub fn st_sphere(radius: f64) -> Result<Self> {
        check_radius(radius)?;
        Ok(Self::new(ManifoldKind::StSphere { radius }, Measure::GreatCircle { radius }))
    }

    fn new(kind: ManifoldKind, measure: Measure) -> Self {
        Self { kind, measure, time_unit: "days".to_string() }
    }

    /// Replaces the spatial measure; its dimension must match the spatial
    /// coordinate dimension.
    pub fn with_measure(mut self, measure: Measure) -> Result<Self> {
        if measure.dim() != self.spatial_dim() {
            return Err(FrkError::DimensionMismatch {
                expected: self.spatial_dim(),
                got: measure.dim(),
            });
        }
        self.measure = measure;
        Ok(self)
    }

    pub fn with_time_unit(mut self, unit: impl Into<String>) -> Self {
        self.time_unit = unit.into();
        self
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn time_unit(&self) -> &str {
        &self.time_unit
    }

    pub fn spatial_dim(&self) -> usize {
        match self.kind {
            ManifoldKind::RealLine => 1,
            _ => 2,
        }
    }

    /// Coordinate dimension of a point, including time for space-time kinds.
    pub fn dim(&self) -> usize {
        self.spatial_dim() + usize::from(self.kind.is_spatio_temporal())
    }

    /// The spatial manifold embedded in a space-time one (identity otherwise).
    pub fn spatial(&self) -> Manifold {
        let kind = match self.kind {
            ManifoldKind::StPlane => ManifoldKind::Plane,
            ManifoldKind::StSphere { radius } => ManifoldKind::Sphere { radius },
            k => k,
        };
        Manifold { kind, measure: self.measure.clone(), time_unit: self.time_unit.clone() }
    }

    /// The space-time counterpart of a spatial manifold.
    pub fn spatio_temporal(&self) -> Result<Manifold> {
        let kind = match self.kind {
            ManifoldKind::Plane => ManifoldKind::StPlane,
            ManifoldKind::Sphere { radius } => ManifoldKind::StSphere { radius },
            k if k.is_spatio_temporal() => k,
            k => {
                return Err(FrkError::ManifoldMismatch(format!(
                    "{} has no space-time counterpart",
                    k.name()
                )))
            }
        };
        Ok(Manifold { kind, measure: self.measure.clone(), time_unit: self.time_unit.clone() })
    }

    /// Checks dimension, finiteness and latitude range of a point.
    pub fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(FrkError::DimensionMismatch { expected: self.dim(), got: p.len() });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(FrkError::NonFinite("point coordinates"));
        }
        if self.kind.is_spherical() && !(-90.0..=90.0).contains(&p[1]) {
            return Err(FrkError::InvalidParameter(format!("latitude {} outside [-90, 90]", p[1])));
        }
        Ok(())
    }

    /// Distance between two points of a spatial manifold.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if self.kind.is_spatio_temporal() {
            return Err(FrkError::ManifoldMismatch(
                "space-time distance is a (spatial, temporal) pair; use st_distance".into(),
            ));
        }
        self.check_point(a)?;
        self.check_point(b)?;
        Ok(self.measure.eval(a, b))
    }

    /// Spatial distance without validation, for inner loops over points that
    /// were validated on construction. Only the spatial components are read.
    pub(crate) fn spatial_distance_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.spatial_dim();
        self.measure.eval(&a[..d], &b[..d])
    }

    /// `(spatial distance, |t_a - t_b|)` on a space-time manifold.
    pub fn st_distance(&self, a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
        if !self.kind.is_spatio_temporal() {
            return Err(FrkError::ManifoldMismatch(format!(
                "st_distance requires a space-time manifold, got {}",
                self.kind.name()
            )));
        }
        self.check_point(a)?;
        self.check_point(b)?;
        let d = self.spatial_dim();
        Ok((self.measure.eval(&a[..d], &b[..d]), (a[d] - b[d]).abs()))
    }

    pub fn to_spec(&self) -> Result<ManifoldSpec> {
        let (radius, scale) = match (&self.kind, &self.measure) {
            (ManifoldKind::Sphere { radius } | ManifoldKind::StSphere { radius }, _) => {
                (Some(*radius), None)
            }
            (_, Measure::Scaled { scale }) => (None, Some(scale.clone())),
            (_, Measure::Custom { .. }) => {
                return Err(FrkError::InvalidParameter(
                    "manifolds with custom distance functions cannot be serialised".into(),
                ))
            }
            _ => (None, None),
        };
        Ok(ManifoldSpec {
            kind: self.kind.name().to_string(),
            radius,
            scale,
            time_unit: self.kind.is_spatio_temporal().then(|| self.time_unit.clone()),
        })
    }
}

/// Serialisable manifold description, as found in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_unit: Option<String>,
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<Manifold> {
        let radius = self.radius.unwrap_or(EARTH_RADIUS_KM);
        let mut m = match self.kind.as_str() {
            "real_line" => Manifold::real_line(),
            "plane" => Manifold::plane(),
            "sphere" => Manifold::sphere(radius)?,
            "st_plane" => Manifold::st_plane(),
            "st_sphere" => Manifold::st_sphere(radius)?,
            other => {
                return Err(FrkError::InvalidParameter(format!("unknown manifold {other:?}")))
            }
        };
        if let Some(scale) = &self.scale {
            if m.kind.is_spherical() {
                return Err(FrkError::InvalidParameter(
                    "scaled measures are only defined on flat manifolds".into(),
                ));
            }
            m = m.with_measure(make_scaled_measure(scale)?)?;
        }
        if let Some(unit) = &self.time_unit {
            m = m.with_time_unit(unit.clone());
        }
        Ok(m)
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius.is_finite() && radius > 0.0 {
        Ok(())
    } else {
        Err(FrkError::InvalidParameter(format!("sphere radius must be positive, got {radius}")))
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn haversine(a: &[f64], b: &[f64], radius: f64) -> f64 {
    let (lon1, lat1) = (a[0].to_radians(), a[1].to_radians());
    let (lon2, lat2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * radius * h.sqrt().min(1.0).asin()
}
