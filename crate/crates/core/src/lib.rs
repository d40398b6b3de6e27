//! Localization of fluorescent beads in microscope frames.
//!
//! The crate models a frame as a sum of symmetric Gaussian spots on a
//! constant background, observed with Poisson photon noise plus additive
//! instrument noise. It simulates such frames, fits them by least squares
//! and approximate maximum likelihood, chooses the number of beads, reports
//! standard errors and confidence ellipses, and checks residual diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod diagnose;
pub mod error;
pub mod fit;
pub mod frame;
pub mod infer;
pub mod io;
pub mod model;
mod optim;
pub mod params;
pub mod select;
pub mod simulate;

pub use batch::{FrameReport, RunConfig};
pub use error::{Error, Result};
pub use fit::{FitKind, FitOptions, FitResult};
pub use frame::{Grid, ImageFrame};
pub use io::FrameFormat;
pub use params::{BeadParams, ModelParams, Param, ParamLayout};
pub use select::{SelectConfig, SelectionTrace};
pub use simulate::{DesignPreset, NoiseLaw, SimulationDesign};
