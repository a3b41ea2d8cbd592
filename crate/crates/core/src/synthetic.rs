//! Synthetic travel-time series shaped like the I-80E loop-detector data.
//!
//! The raw detector extract cannot be redistributed, so examples and tests
//! use series built from the published deterministic part (mean level and
//! weekly/daily harmonics) plus an ARIMA residual.

use chrono::NaiveDateTime;

use crate::arima::{simulate_arima, ArimaModel, ArimaOrder};
use crate::decomposition::{SeasonalBlock, SeasonalTrendModel, DAILY_PERIOD, WEEKLY_PERIOD};
use crate::error::{Error, Result};
use crate::series_io::{parse_timestamp, TravelTimeSeries, DEFAULT_H};

/// Mean level of the I-80E travel time, minutes.
pub const I80E_LEVEL: f64 = 2.23;
/// AR coefficient of the ARIMA(1,1,0) residual model.
pub const I80E_AR: f64 = -0.0326;
/// Innovation standard deviation of the residual model, minutes.
pub const I80E_INNOVATION_SD: f64 = 0.005;
/// Three weeks of 5-minute samples.
pub const I80E_LENGTH: usize = 3 * 7 * 288;
pub const I80E_START: &str = "2024-01-01T00:00:00";

pub fn i80e_seasonal() -> SeasonalTrendModel {
    SeasonalTrendModel {
        a: I80E_LEVEL,
        b: 0.0,
        weekly: Some(SeasonalBlock {
            k: 0.0927,
            a: vec![-0.0135, 0.0794, -0.0902],
            b: vec![0.0477, -0.0873, -0.0228],
            period: WEEKLY_PERIOD,
        }),
        daily: Some(SeasonalBlock {
            k: 0.0002,
            a: vec![0.0240, 0.1143, -0.0795],
            b: vec![-0.1509, 0.0127, -0.0204],
            period: DAILY_PERIOD,
        }),
    }
}

pub fn i80e_residual_model() -> ArimaModel {
    ArimaModel::new(
        ArimaOrder::new(1, 1, 0),
        vec![I80E_AR],
        vec![],
        I80E_INNOVATION_SD * I80E_INNOVATION_SD,
    )
    .expect("published coefficients are causal")
}

/// `c_t + X_t` sampled every `h` minutes from `start`, with `X` simulated
/// from `residual`.
pub fn synthetic_series(
    path_id: &str,
    start: NaiveDateTime,
    h: f64,
    seasonal: &SeasonalTrendModel,
    residual: &ArimaModel,
    n: usize,
    seed: u64,
) -> Result<TravelTimeSeries> {
    let noise = simulate_arima(residual, n, seed);
    let values: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(i, x)| seasonal.reconstruct(i as f64) + x)
        .collect();
    if let Some(i) = values.iter().position(|v| *v <= 0.0) {
        return Err(Error::invalid(format!(
            "synthetic travel time at sample {i} is not positive; pick another seed"
        )));
    }
    TravelTimeSeries::new(path_id.to_string(), start, h, values)
}

/// The I-80E-like series: published deterministic part plus ARIMA(1,1,0)
/// noise, three weeks at 5-minute resolution.
pub fn i80e_like(seed: u64) -> Result<TravelTimeSeries> {
    let start = parse_timestamp(I80E_START).expect("valid constant");
    synthetic_series(
        "80E-synthetic",
        start,
        DEFAULT_H,
        &i80e_seasonal(),
        &i80e_residual_model(),
        I80E_LENGTH,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::difference;

    #[test]
    fn i80e_series_has_published_shape() {
        let s = i80e_like(7).unwrap();
        assert_eq!(s.len(), I80E_LENGTH);
        assert_eq!(s.h(), 5.0);
        let seasonal = i80e_seasonal();
        let residual: Vec<f64> = s
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v - seasonal.reconstruct(i as f64))
            .collect();
        let diffs = difference(&residual, 1).unwrap();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        // Var of an AR(1) with coefficient φ: σ²/(1 − φ²).
        let expected = I80E_INNOVATION_SD.powi(2) / (1.0 - I80E_AR * I80E_AR);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn same_seed_same_series() {
        assert_eq!(i80e_like(3).unwrap(), i80e_like(3).unwrap());
        assert_ne!(i80e_like(3).unwrap().values(), i80e_like(4).unwrap().values());
    }
}
