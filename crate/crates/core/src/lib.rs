//! Two-step generalized additive mixed models for high-frequency stream
//! nitrate sensor data.
//!
//! The crate covers the whole path from raw sensor CSVs to a fitted model:
//!
//! * [`ingest`] loads per-variable sensor series, honours quality flags and
//!   aligns everything onto the 15-minute nitrate grid.
//! * [`neon`] downloads the matching NEON data products and unpacks them
//!   into the ingest CSV schema.
//! * [`basis`] builds thin-plate regression spline bases and computes VIF
//!   collinearity diagnostics.
//! * [`gam`] fits penalized additive models (GCV for smoothing parameters,
//!   stepwise AIC for the covariate set).
//! * [`arma`] fits ARMA(p, q) error models to GAM residuals by exact
//!   Gaussian likelihood, with missing-observation handling.
//! * [`gamm`] composes the two steps, partitions deviance and computes
//!   variable importance.
//! * [`pipeline`], [`report`] and [`plot`] drive a full run and render the
//!   JSON report and SVG figures.
//! * [`simulate`] draws synthetic data from the same generative model.

pub mod arma;
pub mod basis;
pub mod gam;
pub mod gamm;
pub mod ingest;
mod linalg;
pub mod neon;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod simulate;

pub use arma::{ArmaFit, ArmaParams, GapMode};
pub use basis::{BasisExpansion, SmoothSpec};
pub use gam::GamFit;
pub use gamm::{GammModel, ImportanceReport};
pub use ingest::{AlignedFrame, SensorSeries};
