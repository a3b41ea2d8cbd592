//! Deterministic part of a travel-time series: a linear trend plus weekly and
//! daily trigonometric seasonality, `c_t = a + b·t + s_t`, with `t` the sample
//! index.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series_io::TravelTimeSeries;

pub const DAILY_PERIOD: f64 = 288.0;
pub const WEEKLY_PERIOD: f64 = 2064.0;
pub const DEFAULT_HARMONICS: usize = 3;
pub const DEFAULT_T_THRESHOLD: f64 = 1.96;

/// `k + Σ_i a_i·sin(2πit/T) + Σ_i b_i·cos(2πit/T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalBlock {
    pub k: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub period: f64,
}

impl SeasonalBlock {
    pub fn zero(period: f64, harmonics: usize) -> Self {
        Self {
            k: 0.0,
            a: vec![0.0; harmonics],
            b: vec![0.0; harmonics],
            period,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let w = 2.0 * PI * t / self.period;
        let mut v = self.k;
        for (i, a) in self.a.iter().enumerate() {
            v += a * (w * (i + 1) as f64).sin();
        }
        for (i, b) in self.b.iter().enumerate() {
            v += b * (w * (i + 1) as f64).cos();
        }
        v
    }

    /// `∫_{t1}^{t2}` of the block in sample-index units.
    pub fn integral(&self, t1: f64, t2: f64) -> f64 {
        let mut v = self.k * (t2 - t1);
        for (i, a) in self.a.iter().enumerate() {
            let w = 2.0 * PI * (i + 1) as f64 / self.period;
            v += a * ((w * t1).cos() - (w * t2).cos()) / w;
        }
        for (i, b) in self.b.iter().enumerate() {
            let w = 2.0 * PI * (i + 1) as f64 / self.period;
            v += b * ((w * t2).sin() - (w * t1).sin()) / w;
        }
        v
    }

    pub fn coefficients(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.k).chain(self.a.iter().copied()).chain(self.b.iter().copied())
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::Invariant(format!("{name} period must be positive")));
        }
        if self.a.is_empty() || self.b.is_empty() {
            return Err(Error::Invariant(format!("{name} block needs at least one harmonic")));
        }
        if self.coefficients().any(|c| !c.is_finite()) {
            return Err(Error::Invariant(format!("{name} coefficients must be finite")));
        }
        Ok(())
    }
}

/// Trend line plus seasonal blocks; maps a sample index to the mean level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SeasonalTrendRecord")]
pub struct SeasonalTrendModel {
    /// Intercept, minutes.
    pub a: f64,
    /// Slope, minutes per sample.
    pub b: f64,
    pub weekly: Option<SeasonalBlock>,
    pub daily: Option<SeasonalBlock>,
}

#[derive(Deserialize)]
struct SeasonalTrendRecord {
    a: f64,
    b: f64,
    weekly: Option<SeasonalBlock>,
    daily: Option<SeasonalBlock>,
}

impl TryFrom<SeasonalTrendRecord> for SeasonalTrendModel {
    type Error = Error;

    fn try_from(r: SeasonalTrendRecord) -> Result<Self> {
        let m = SeasonalTrendModel {
            a: r.a,
            b: r.b,
            weekly: r.weekly,
            daily: r.daily,
        };
        m.validate()?;
        Ok(m)
    }
}

impl SeasonalTrendModel {
    pub fn constant(level: f64) -> Self {
        Self {
            a: level,
            b: 0.0,
            weekly: None,
            daily: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Invariant("trend coefficients must be finite".into()));
        }
        if let Some(w) = &self.weekly {
            w.validate("weekly")?;
        }
        if let Some(d) = &self.daily {
            d.validate("daily")?;
        }
        if let (Some(w), Some(d)) = (&self.weekly, &self.daily) {
            if w.period <= d.period {
                return Err(Error::Invariant(
                    "weekly period must exceed the daily period".into(),
                ));
            }
        }
        Ok(())
    }

    /// Mean level at sample index `t`.
    pub fn reconstruct(&self, t: f64) -> f64 {
        let mut v = self.a + self.b * t;
        if let Some(w) = &self.weekly {
            v += w.eval(t);
        }
        if let Some(d) = &self.daily {
            v += d.eval(t);
        }
        v
    }

    /// `∫_{t1}^{t2} c_t dt` with `t` in samples.
    pub fn integral(&self, t1: f64, t2: f64) -> f64 {
        let mut v = self.a * (t2 - t1) + 0.5 * self.b * (t2 * t2 - t1 * t1);
        if let Some(w) = &self.weekly {
            v += w.integral(t1, t2);
        }
        if let Some(d) = &self.daily {
            v += d.integral(t1, t2);
        }
        v
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = vec![self.a, self.b];
        for block in [&self.weekly, &self.daily].into_iter().flatten() {
            c.extend(block.coefficients());
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendFit {
    pub a: f64,
    pub b: f64,
    pub slope_estimate: f64,
    pub slope_std_error: f64,
    pub t_statistic: f64,
    /// False when the slope was not significant and has been set to zero.
    pub slope_retained: bool,
}

/// Least-squares line over the sample index. A slope whose |t| falls below
/// `t_threshold` is dropped and only the mean is kept.
pub fn fit_trend(values: &[f64], t_threshold: f64) -> Result<TrendFit> {
    let n = values.len();
    if n < 3 {
        return Err(Error::invalid("trend fit needs at least three observations"));
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, y) in values.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * t_mean;
    let sse: f64 = values
        .iter()
        .enumerate()
        .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
        .sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t_stat = if se > 0.0 {
        slope / se
    } else if slope == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(slope)
    };
    let retained = t_stat.abs() >= t_threshold;
    let (a, b) = if retained { (intercept, slope) } else { (y_mean, 0.0) };
    Ok(TrendFit {
        a,
        b,
        slope_estimate: slope,
        slope_std_error: se,
        t_statistic: t_stat,
        slope_retained: retained,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalFit {
    pub block: SeasonalBlock,
    pub r_squared: f64,
}

/// Least-squares harmonic regression with `harmonics` sine/cosine pairs;
/// `values[i]` is taken at sample index `i`.
pub fn fit_seasonal(values: &[f64], period: f64, harmonics: usize) -> Result<SeasonalFit> {
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::invalid(format!("period must be positive, got {period}")));
    }
    if harmonics == 0 {
        return Err(Error::invalid("at least one harmonic is required"));
    }
    if (values.len() as f64) < 2.0 * period {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than two periods of {period}",
            values.len()
        )));
    }
    let n = values.len();
    let cols = 2 * harmonics + 1;
    let x = DMatrix::from_fn(n, cols, |i, j| {
        if j == 0 {
            return 1.0;
        }
        let h = ((j - 1) % harmonics + 1) as f64;
        let w = 2.0 * PI * h * i as f64 / period;
        if j <= harmonics {
            w.sin()
        } else {
            w.cos()
        }
    });
    let y = DVector::from_column_slice(values);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::RankDeficient(format!(
            "{harmonics} harmonics over period {period} give a singular design"
        )));
    }
    let coef = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let fitted = &x * &coef;
    let y_mean = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(SeasonalFit {
        block: SeasonalBlock {
            k: coef[0],
            a: coef.rows(1, harmonics).iter().copied().collect(),
            b: coef.rows(1 + harmonics, harmonics).iter().copied().collect(),
            period,
        },
        r_squared,
    })
}

#[derive(Debug, Clone)]
pub struct DecomposeOptions {
    pub daily_period: f64,
    pub weekly_period: f64,
    pub harmonics: usize,
    pub t_threshold: f64,
    /// Skip the weekly block; for series shorter than two weeks.
    pub daily_only: bool,
    pub max_sweeps: usize,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            daily_period: DAILY_PERIOD,
            weekly_period: WEEKLY_PERIOD,
            harmonics: DEFAULT_HARMONICS,
            t_threshold: DEFAULT_T_THRESHOLD,
            daily_only: false,
            max_sweeps: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub model: SeasonalTrendModel,
    pub residual: TravelTimeSeries,
    pub trend: TrendFit,
    pub weekly_r_squared: Option<f64>,
    pub daily_r_squared: f64,
    pub sweeps: usize,
}

/// Removes trend, then weekly, then daily seasonality.
///
/// After the sequential pass the three fits are cycled (backfitting) until
/// the coefficients stop moving, so the residual ends orthogonal to every
/// regressor and refitting it returns zero coefficients.
pub fn decompose(series: &TravelTimeSeries, opts: &DecomposeOptions) -> Result<Decomposition> {
    let y = series.values();
    let n = y.len() as f64;
    if !opts.daily_only && n < 2.0 * opts.weekly_period {
        return Err(Error::invalid(format!(
            "series of {} samples is shorter than two weekly periods ({}); fit the daily part only",
            y.len(),
            2.0 * opts.weekly_period
        )));
    }
    if n < 2.0 * opts.daily_period {
        return Err(Error::invalid(format!(
            "series of {} samples is shorter than two daily periods",
            y.len()
        )));
    }

    let sub = |base: &[f64], f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        base.iter().enumerate().map(|(i, v)| v - f(i as f64)).collect()
    };

    let trend = fit_trend(y, opts.t_threshold)?;
    let mut line = (trend.a, trend.b);
    let after_trend = sub(y, &|t| line.0 + line.1 * t);
    let mut weekly = if opts.daily_only {
        None
    } else {
        Some(fit_seasonal(&after_trend, opts.weekly_period, opts.harmonics)?)
    };
    let after_weekly = match &weekly {
        Some(w) => sub(&after_trend, &|t| w.block.eval(t)),
        None => after_trend,
    };
    let mut daily = fit_seasonal(&after_weekly, opts.daily_period, opts.harmonics)?;

    let mut sweeps = 0;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = coefficient_vector(line, weekly.as_ref(), &daily);

        let w_eval = |t: f64| weekly.as_ref().map_or(0.0, |w| w.block.eval(t));
        let target = sub(y, &|t| w_eval(t) + daily.block.eval(t));
        line = refit_line(&target, trend.slope_retained);

        if let Some(w) = weekly.as_mut() {
            let target = sub(y, &|t| line.0 + line.1 * t + daily.block.eval(t));
            *w = fit_seasonal(&target, opts.weekly_period, opts.harmonics)?;
        }
        let w_eval = |t: f64| weekly.as_ref().map_or(0.0, |w| w.block.eval(t));
        let target = sub(y, &|t| line.0 + line.1 * t + w_eval(t));
        daily = fit_seasonal(&target, opts.daily_period, opts.harmonics)?;

        let after = coefficient_vector(line, weekly.as_ref(), &daily);
        let change = before
            .iter()
            .zip(&after)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if change <= 1e-13 * scale {
            break;
        }
    }

    let model = SeasonalTrendModel {
        a: line.0,
        b: line.1,
        weekly: weekly.as_ref().map(|w| w.block.clone()),
        daily: Some(daily.block.clone()),
    };
    model.validate()?;
    let residual_values = sub(y, &|t| model.reconstruct(t));
    let residual = series.derive_residual(residual_values)?;
    Ok(Decomposition {
        model,
        residual,
        trend,
        weekly_r_squared: weekly.map(|w| w.r_squared),
        daily_r_squared: daily.r_squared,
        sweeps,
    })
}

fn refit_line(values: &[f64], with_slope: bool) -> (f64, f64) {
    let n = values.len() as f64;
    let y_mean = values.iter().sum::<f64>() / n;
    if !with_slope {
        return (y_mean, 0.0);
    }
    let t_mean = (n - 1.0) / 2.0;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (y - y_mean);
    }
    let slope = sxy / sxx;
    (y_mean - slope * t_mean, slope)
}

fn coefficient_vector(line: (f64, f64), weekly: Option<&SeasonalFit>, daily: &SeasonalFit) -> Vec<f64> {
    let mut v = vec![line.0, line.1];
    if let Some(w) = weekly {
        v.extend(w.block.coefficients());
    }
    v.extend(daily.block.coefficients());
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series_io::parse_timestamp;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn published_daily() -> SeasonalBlock {
        SeasonalBlock {
            k: 0.0002,
            a: vec![0.0240, 0.1143, -0.0795],
            b: vec![-0.1509, 0.0127, -0.0204],
            period: 288.0,
        }
    }

    fn published_weekly() -> SeasonalBlock {
        SeasonalBlock {
            k: 0.0927,
            a: vec![-0.0135, 0.0794, -0.0902],
            b: vec![0.0477, -0.0873, -0.0228],
            period: 2064.0,
        }
    }

    fn series(values: Vec<f64>) -> TravelTimeSeries {
        TravelTimeSeries::residual("t", parse_timestamp("2011-01-03T00:00:00").unwrap(), 5.0, values)
            .unwrap()
    }

    #[test]
    fn trend_of_constant_keeps_mean_only() {
        let fit = fit_trend(&vec![2.23; 500], DEFAULT_T_THRESHOLD).unwrap();
        assert!((fit.a - 2.23).abs() < 1e-12);
        assert_eq!(fit.b, 0.0);
        assert!(!fit.slope_retained);
    }

    #[test]
    fn trend_of_exact_line() {
        let v: Vec<f64> = (0..100).map(|t| 1.0 + 0.5 * t as f64).collect();
        let fit = fit_trend(&v, DEFAULT_T_THRESHOLD).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-10);
        assert!((fit.b - 0.5).abs() < 1e-10);
        assert!(fit.slope_retained);
    }

    #[test]
    fn trend_with_noise_within_three_standard_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let v: Vec<f64> = (0..2000)
            .map(|t| 3.0 + 0.01 * t as f64 + noise.sample(&mut rng))
            .collect();
        let fit = fit_trend(&v, DEFAULT_T_THRESHOLD).unwrap();
        assert!((fit.slope_estimate - 0.01).abs() < 3.0 * fit.slope_std_error);
        assert!(fit_trend(&[1.0, 2.0], 1.96).is_err());
    }

    #[test]
    fn seasonal_recovers_pure_sine() {
        let v: Vec<f64> = (0..576).map(|t| (2.0 * PI * t as f64 / 288.0).sin()).collect();
        let fit = fit_seasonal(&v, 288.0, 3).unwrap();
        assert!((fit.block.a[0] - 1.0).abs() < 1e-8);
        for c in fit.block.a[1..].iter().chain(&fit.block.b).chain([&fit.block.k]) {
            assert!(c.abs() < 1e-8);
        }
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seasonal_recovers_published_daily_and_weekly_rows() {
        for block in [published_daily(), published_weekly()] {
            let n = (3.0 * block.period) as usize;
            let v: Vec<f64> = (0..n).map(|t| block.eval(t as f64)).collect();
            let fit = fit_seasonal(&v, block.period, 3).unwrap();
            for (got, want) in fit.block.coefficients().zip(block.coefficients()) {
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn seasonal_rejects_bad_inputs() {
        let v = vec![1.0; 600];
        assert!(fit_seasonal(&v, 0.0, 3).is_err());
        assert!(fit_seasonal(&v, 288.0, 0).is_err());
        assert!(fit_seasonal(&v, 400.0, 1).is_err());
        assert!(matches!(fit_seasonal(&v, 8.0, 4), Err(Error::RankDeficient(_))));
    }

    fn published_model() -> SeasonalTrendModel {
        SeasonalTrendModel {
            a: 2.23,
            b: 0.0,
            weekly: Some(published_weekly()),
            daily: Some(published_daily()),
        }
    }

    #[test]
    fn decompose_exact_deterministic_series() {
        let model = published_model();
        let v: Vec<f64> = (0..2 * 2064 + 500).map(|t| model.reconstruct(t as f64)).collect();
        let d = decompose(&series(v.clone()), &DecomposeOptions::default()).unwrap();
        let sup = d.residual.values().iter().fold(0.0f64, |m, r| m.max(r.abs()));
        assert!(sup < 1e-8, "sup residual {sup}");
        for (i, y) in v.iter().enumerate() {
            assert!((d.model.reconstruct(i as f64) + d.residual.values()[i] - y).abs() < 1e-10);
        }
        assert!(d.residual.is_residual());
    }

    #[test]
    fn decompose_white_noise_residual_mean() {
        let model = published_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let sd = 0.2;
        let noise = Normal::new(0.0, sd).unwrap();
        let v: Vec<f64> = (0..3 * 2064)
            .map(|t| model.reconstruct(t as f64) + noise.sample(&mut rng))
            .collect();
        let d = decompose(&series(v), &DecomposeOptions::default()).unwrap();
        let n = d.residual.len() as f64;
        assert!(d.residual.mean().abs() < 3.0 * sd / n.sqrt());
    }

    #[test]
    fn decompose_ar1_noise_keeps_ar_shape() {
        let model = published_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let phi = 0.6;
        let mut x = 0.0;
        let v: Vec<f64> = (0..4 * 2064)
            .map(|t| {
                x = phi * x + noise.sample(&mut rng);
                model.reconstruct(t as f64) + x
            })
            .collect();
        let d = decompose(&series(v), &DecomposeOptions::default()).unwrap();
        let r = d.residual.values();
        let m = d.residual.mean();
        let c0: f64 = r.iter().map(|v| (v - m).powi(2)).sum();
        for lag in 1..=3 {
            let ck: f64 = (lag..r.len()).map(|i| (r[i] - m) * (r[i - lag] - m)).sum();
            let rho = ck / c0;
            assert!((rho - phi.powi(lag as i32)).abs() < 0.05, "lag {lag}: {rho}");
        }
    }

    #[test]
    fn decompose_is_idempotent_on_residual() {
        let model = published_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let v: Vec<f64> = (0..2 * 2064 + 777)
            .map(|t| model.reconstruct(t as f64) + 0.0004 * t as f64 + noise.sample(&mut rng))
            .collect();
        let first = decompose(&series(v), &DecomposeOptions::default()).unwrap();
        let second = decompose(&first.residual, &DecomposeOptions::default()).unwrap();
        for c in second.model.coefficients() {
            assert!(c.abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn decompose_requires_two_weeks_unless_daily_only() {
        let v: Vec<f64> = (0..1000).map(|t| 2.0 + 0.01 * (t % 9) as f64).collect();
        assert!(decompose(&series(v.clone()), &DecomposeOptions::default()).is_err());
        let opts = DecomposeOptions {
            daily_only: true,
            ..Default::default()
        };
        let d = decompose(&series(v), &opts).unwrap();
        assert!(d.model.weekly.is_none());
    }

    #[test]
    fn reconstruct_cases() {
        let zero = SeasonalTrendModel {
            a: 0.0,
            b: 0.0,
            weekly: Some(SeasonalBlock::zero(2064.0, 3)),
            daily: Some(SeasonalBlock::zero(288.0, 3)),
        };
        assert_eq!(zero.reconstruct(17.0), 0.0);
        let flat = SeasonalTrendModel::constant(2.23);
        assert_eq!(flat.reconstruct(0.0), 2.23);
        assert_eq!(flat.reconstruct(12345.0), 2.23);
        // lcm(288, 2064) = 24768
        let m = published_model();
        for t in [0.0, 13.0, 999.0] {
            assert!((m.reconstruct(t) - m.reconstruct(t + 24768.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn integral_matches_fine_quadrature() {
        let m = SeasonalTrendModel { b: 0.001, ..published_model() };
        let (t1, t2) = (13.3, 701.9);
        let n = 200_000;
        let dt = (t2 - t1) / n as f64;
        let mut q = 0.5 * (m.reconstruct(t1) + m.reconstruct(t2));
        for i in 1..n {
            q += m.reconstruct(t1 + i as f64 * dt);
        }
        q *= dt;
        assert!((m.integral(t1, t2) - q).abs() < 1e-8);
    }

    #[test]
    fn model_validation_on_load() {
        let mut bad = published_model();
        bad.weekly.as_mut().unwrap().period = 100.0;
        assert!(bad.validate().is_err());
    }
}
