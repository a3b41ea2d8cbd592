//! Calibration and pricing toolkit for travel-time derivatives.
//!
//! A travel-time series is split into a deterministic part (linear trend plus
//! daily and weekly harmonics) and a stochastic residual. The residual is
//! identified as a discrete ARIMA model, mapped to a continuous-time ARMA
//! (CARMA) process and refined with a Kalman filter. Contracts written on the
//! series (instant options, congestion-day futures and options, cumulative
//! travel time futures and options) are priced under a risk-neutral measure
//! fixed by a market price of risk.

pub mod arima;
pub mod carma;
pub mod decomposition;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod pricing;
pub mod products;
pub mod rng;
pub mod series_io;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
