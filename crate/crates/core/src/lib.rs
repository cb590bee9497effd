//! Spatio-temporal weighted kernel density forecasting for point-process
//! demand.
//!
//! Historical events are weighted by how informative their age is for the
//! target hour, using per-cell curves with short-range, daily and weekly
//! components learned from the autocorrelation of each cell's demand share.
//! The weighted kernel density estimate is the predictive spatial density.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod domain;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod kde;
pub mod model_file;
pub mod synthetic;
pub mod weights;

pub use domain::{Event, EventStore, HourIndex, SpatialPoint, StudyRegion};
pub use error::{Error, ErrorCategory, Result};
pub use kde::{Bandwidth, DensityGrid, KernelKind, StkdeModel, WeightedKde};
pub use model_file::{load_model, save_model};
pub use weights::{retained_window, RetainedWindow, WeightModel, WeightParams};
