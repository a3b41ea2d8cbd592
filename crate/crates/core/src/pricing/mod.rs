//! Risk-neutral pricing.
//!
//! Under the pricing measure the driving Brownian motion picks up a drift
//! `θ_t`, so the last CARMA state equation gains `+θ_t σ dt`. Prices come
//! from Monte Carlo (any model and product), a closed form for CAR(1)
//! cumulative-travel-time futures, or an explicit finite-difference solver
//! for the CAR(1) Asian call.

mod calibration;
mod closed_form;
mod monte_carlo;
mod pde;
mod residual;

pub use calibration::{calibrate_theta, Calibration, CalibrationOptions, Quote, QuotePricer};
pub use closed_form::closed_form_ctt_future;
pub use monte_carlo::{
    measure_change_check, mc_payoff_samples, mc_price, mc_price_many, McOptions, MeasureChange,
};
pub use pde::{pde_price_asian_call, AsianCall, Axis, PdeGrid, PdeOutcome, CFL_LIMIT, MAX_STEPS};
pub use residual::{pde_residual_check, GridFunction};

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arima::ArimaModel;
use crate::carma::CarmaModel;
use crate::decomposition::SeasonalTrendModel;
use crate::error::{Error, Result};
use crate::linalg::{integrated_exponential, van_loan};

/// Piecewise-constant market price of risk. `values[i]` applies from
/// `breaks[i−1]` (inclusive) to `breaks[i]`; times are minutes on the
/// series clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaRecord")]
pub struct ThetaSchedule {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct ThetaRecord {
    breaks: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<ThetaRecord> for ThetaSchedule {
    type Error = Error;

    fn try_from(r: ThetaRecord) -> Result<Self> {
        Self::piecewise(r.breaks, r.values)
    }
}

impl ThetaSchedule {
    pub fn constant(theta: f64) -> Self {
        Self {
            breaks: Vec::new(),
            values: vec![theta],
        }
    }

    pub fn piecewise(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != breaks.len() + 1 {
            return Err(Error::Invariant(format!(
                "{} break points need {} theta values, got {}",
                breaks.len(),
                breaks.len() + 1,
                values.len()
            )));
        }
        if breaks.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Invariant("theta schedule must be finite".into()));
        }
        if breaks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("theta break points must increase".into()));
        }
        Ok(Self { breaks, values })
    }

    pub fn at(&self, t: f64) -> f64 {
        let i = self.breaks.partition_point(|b| *b <= t);
        self.values[i]
    }

    pub fn is_constant(&self) -> bool {
        self.breaks.is_empty()
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

impl fmt::Display for ThetaSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            write!(f, "{}", self.values[0])
        } else {
            write!(f, "{:?} at breaks {:?}", self.values, self.breaks)
        }
    }
}

/// The pricing measure: market price of risk and risk-free rate (per minute).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRecord")]
pub struct MarketMeasure {
    pub theta: ThetaSchedule,
    pub r: f64,
}

#[derive(Deserialize)]
struct MeasureRecord {
    theta: ThetaSchedule,
    r: f64,
}

impl TryFrom<MeasureRecord> for MarketMeasure {
    type Error = Error;

    fn try_from(m: MeasureRecord) -> Result<Self> {
        Self::new(m.theta, m.r)
    }
}

impl MarketMeasure {
    pub fn new(theta: ThetaSchedule, r: f64) -> Result<Self> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::Invariant(format!("rate must be non-negative, got {r}")));
        }
        Ok(Self { theta, r })
    }

    pub fn constant(theta: f64, r: f64) -> Result<Self> {
        Self::new(ThetaSchedule::constant(theta), r)
    }

    /// The physical measure with discounting at `r`.
    pub fn physical(r: f64) -> Result<Self> {
        Self::constant(0.0, r)
    }

    pub fn discount(&self, from: f64, to: f64) -> f64 {
        (-self.r * (to - from)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mc,
    ClosedForm,
    Pde,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mc => "mc",
            Method::ClosedForm => "closed_form",
            Method::Pde => "pde",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub price: f64,
    pub std_error: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    pub theta: ThetaSchedule,
    pub r: f64,
}

/// Stochastic part of the travel time, with its state at valuation time.
#[derive(Debug, Clone, PartialEq)]
pub enum Driver {
    /// `Y = Bᵀ X` when `integrated` is false; otherwise the residual level
    /// `R(t) = level + (1/h) ∫_{t0}^t Bᵀ X du`, the continuous analogue of
    /// summing the differenced series.
    Carma {
        model: CarmaModel,
        integrated: bool,
        state: Vec<f64>,
        level: f64,
    },
    /// Discrete ARIMA simulation for models without a continuous form.
    /// `history` holds recent values of the differenced series, oldest first;
    /// `level` is the current residual level.
    Arima {
        model: ArimaModel,
        history: Vec<f64>,
        level: f64,
    },
}

/// Everything needed to simulate the travel time forward from `t0`:
/// `T_t = c_t + (stochastic part)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub seasonal: SeasonalTrendModel,
    /// Sampling interval of the series (minutes per sample index).
    pub h: f64,
    /// Minutes past midnight at clock zero.
    pub day_offset: f64,
    pub driver: Driver,
}

impl Dynamics {
    pub fn new(seasonal: SeasonalTrendModel, h: f64, day_offset: f64, driver: Driver) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("h must be positive, got {h}")));
        }
        match &driver {
            Driver::Carma { model, state, level, .. } => {
                if state.len() != model.p() {
                    return Err(Error::invalid(format!(
                        "CARMA state needs {} entries, got {}",
                        model.p(),
                        state.len()
                    )));
                }
                if !model.is_stationary() {
                    return Err(Error::NonStationary(
                        "risk-neutral simulation needs a stationary CARMA model".into(),
                    ));
                }
                if state.iter().any(|v| !v.is_finite()) || !level.is_finite() {
                    return Err(Error::invalid("initial state must be finite"));
                }
            }
            Driver::Arima { model, history, level } => {
                model.validate()?;
                if model.d > 1 {
                    return Err(Error::Unsupported(format!("ARIMA simulation with d = {}", model.d)));
                }
                if history.iter().any(|v| !v.is_finite()) || !level.is_finite() {
                    return Err(Error::invalid("ARIMA history must be finite"));
                }
            }
        }
        Ok(Self {
            seasonal,
            h,
            day_offset,
            driver,
        })
    }

    /// Deterministic level `c_t` at clock time `t` (minutes).
    pub fn seasonal_at(&self, t: f64) -> f64 {
        self.seasonal.reconstruct(t / self.h)
    }

    /// `∫_{t1}^{t2} c_t dt` in minutes.
    pub fn seasonal_integral(&self, t1: f64, t2: f64) -> f64 {
        self.h * self.seasonal.integral(t1 / self.h, t2 / self.h)
    }
}

/// CARMA dynamics under the pricing measure.
#[derive(Debug, Clone)]
pub struct RiskNeutralCarma {
    pub a: DMatrix<f64>,
    pub e: DVector<f64>,
    pub sigma: f64,
    pub theta: ThetaSchedule,
}

impl RiskNeutralCarma {
    /// Drift `A x + θ(t) σ e`.
    pub fn drift(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.e * (self.theta.at(t) * self.sigma)
    }

    /// Stationary mean of the observation under a constant `θ`:
    /// `−Bᵀ A⁻¹ e θ σ`.
    pub fn stationary_mean(&self, b: &DVector<f64>, theta: f64) -> Result<f64> {
        let shift = &self.e * (theta * self.sigma);
        let m = self
            .a
            .clone()
            .lu()
            .solve(&(-shift))
            .ok_or_else(|| Error::Numerical("singular companion matrix".into()))?;
        Ok(b.dot(&m))
    }
}

pub fn risk_neutral_model(model: &CarmaModel, measure: &MarketMeasure) -> Result<RiskNeutralCarma> {
    if !model.is_stationary() {
        return Err(Error::NonStationary("pricing needs a stationary CARMA model".into()));
    }
    let (a, e) = model.companion_matrix();
    Ok(RiskNeutralCarma {
        a,
        e,
        sigma: model.sigma(),
        theta: measure.theta.clone(),
    })
}

/// Discretized Girsanov density `exp(Σ θ_k ΔW_k − ½ Σ θ_k² h)` for P-measure
/// Brownian increments `ΔW_k` over steps of length `h`.
pub fn girsanov_density(increments: &[f64], theta: &[f64], h: f64) -> f64 {
    if theta.iter().all(|t| *t == 0.0) {
        return 1.0;
    }
    let log_z: f64 = increments
        .iter()
        .zip(theta)
        .map(|(dw, th)| th * dw - 0.5 * th * th * h)
        .sum();
    log_z.exp()
}

/// Gaussian law of the augmented state `(x, y, z)` after `tau` minutes under
/// constant `θ`, where `dy = Bᵀx dt` and `dz = y dt`, started from `state`.
pub fn integrated_moments(
    model: &CarmaModel,
    theta: f64,
    tau: f64,
    state: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = model.p();
    if state.len() != p + 2 {
        return Err(Error::invalid(format!("augmented state needs {} entries", p + 2)));
    }
    let (a, e) = model.companion_matrix();
    let b = model.observation();
    let n = p + 2;
    let mut big = DMatrix::<f64>::zeros(n, n);
    big.view_mut((0, 0), (p, p)).copy_from(&a);
    for j in 0..p {
        big[(p, j)] = b[j];
    }
    big[(p + 1, p)] = 1.0;
    let mut g = DVector::<f64>::zeros(n);
    g.rows_mut(0, p).copy_from(&e);
    let diffusion = &g * g.transpose() * (model.sigma() * model.sigma());
    let (f, cov) = van_loan(&big, &diffusion, tau);
    let drift = integrated_exponential(&big, &(g * (theta * model.sigma())), tau);
    let mean = f * DVector::from_column_slice(state) + drift;
    Ok((mean, cov))
}
