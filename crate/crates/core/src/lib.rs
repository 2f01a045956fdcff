//! Catchment-scale contaminant source and retention model fitted to
//! left-censored monitoring data.
//!
//! The numerical core is generic over the floating-point type (`f32` or
//! `f64`); the aliases below fix it to `f64`, which the CLI and the file
//! formats use.

pub mod crossval;
pub mod error;
pub mod gwsource;
pub mod io;
pub mod laplace;
pub mod likelihood;
pub mod network;
pub mod predict;
pub mod scalar;
pub mod sourcemodel;
pub mod synth;

pub use error::ModelError;
pub use scalar::Real;

pub type Network = network::CatchmentNetwork<f64>;
pub type SubCatchment = network::SubCatchment<f64>;
pub type Design = sourcemodel::SourceDesign<f64>;
pub type Parameters = sourcemodel::ParameterSet<f64>;
pub type Latent = sourcemodel::LatentState<f64>;
pub type Measurements = likelihood::MeasurementSet<f64>;
pub type Fit = laplace::FitResult<f64>;
