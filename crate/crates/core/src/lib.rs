//! Non-rigid 3-D image registration built around the spatially region-weighted
//! correlation ratio (SRWCR).
//!
//! The crate provides the full registration stack: scalar volumes with a tiny
//! header/raw file format, cubic B-spline free-form deformations, regional
//! joint intensity histograms with a Parzen window, the SRWCR dissimilarity
//! and its analytic gradient for both asymmetric orientations, a RaPTOR
//! baseline metric, bending-energy regularization, an L-BFGS optimizer, a
//! staged parallel evaluation engine and a coarse-to-fine registration
//! driver, plus a synthetic-warp benchmark generator and the usual error
//! metrics (displacement RMSE, landmark TRE, Hausdorff distances).

pub mod bspline;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradient;
pub mod histogram;
pub mod metric;
pub mod optimizer;
mod parallel;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
