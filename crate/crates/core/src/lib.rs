//! Fixed rank kriging with the spatial random effects model.
//!
//! The pipeline is: build basic areal units ([`baus`]) and a basis
//! ([`basis`]) on a [`manifold`], map observations onto the BAUs and
//! assemble an [`SreModel`], estimate its parameters with [`fit`], then
//! [`predict`](predict::predict) over BAUs or aggregated regions.

pub mod basis;
pub mod baus;
pub mod bench;
pub mod em;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod model;
pub mod predict;

pub use basis::{auto_basis, local_basis, tensor_basis, AutoBasisOptions, BasisFamily, BasisFunction, BasisMatrix, BasisSet};
pub use baus::{auto_baus, bin_data, BauSet, BinnedData, BoundingBox, CellGeometry, Footprint, IncidenceMatrix, Observation, Region};
pub use em::{fit, EmOptions, EmState};
pub use error::{FrkError, Result};
pub use manifold::{Manifold, ManifoldKind, ManifoldSpec};
pub use model::{assemble, assemble_binned, AssembleOptions, KType, MeasErrorConfig, MeasErrorMode, ModelConfig, Params, Posterior, SreModel, Variant};
pub use predict::{predict, PredictOptions, PredictionRegionSet, PredictionResult};
