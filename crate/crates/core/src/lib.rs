//! Gradient inversion laboratory for federated time-series forecasting.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod inversion;
pub mod io;
pub mod models;

pub use error::{Error, Result};
