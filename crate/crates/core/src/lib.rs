//! Localized optimal interpolation (OI) for gridded scalar fields, plus an
//! observation system simulation experiment (OSSE) harness.
//!
//! The pieces:
//!
//! * [`grid`]: regular lat/lon grids, land masks, evaluation domains, fields.
//! * [`covariance`]: Gaussian background error covariance and diagonal `R`.
//! * [`obsnet`]: station networks, the nearest-neighbour operator `H` and
//!   pseudo-observations.
//! * [`oi`]: Kalman gains and the full and localized BLUE analyses.
//! * [`skill`]: RMSE maps, domain means and the correlation-length sweep.
//! * [`osse`]: synthetic nature/forecast runs and the end-to-end experiment.
//! * [`fsv`]: the plain-text field-series file format.

pub mod covariance;
pub mod error;
pub mod fsv;
pub mod grid;
pub mod linalg;
pub mod obsnet;
pub mod oi;
pub mod osse;
pub mod rng;
pub mod skill;

pub use covariance::{CovarianceParams, ObsErrorModel, Sigma2};
pub use error::{Error, Result};
pub use grid::{Cell, Field, FieldSeries, GridGeometry, GridSpec};
pub use obsnet::{ObservationBatch, ObservationNetwork};
pub use oi::{AnalysisResult, OiConfig};
