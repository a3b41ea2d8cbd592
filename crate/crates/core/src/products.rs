//! Payoff functionals of the travel-time products: instant options,
//! congestion-day (HCD/LCD) futures and options, and cumulative travel time
//! (CTT) futures and options.
//!
//! Times are minutes on the clock of the underlying series. Continuous
//! settlement integrates the piecewise-linear interpolant of the path;
//! discrete settlement sums calendar-day means of the grid samples.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series_io::{parse_timestamp, TravelTimeSeries};

pub const MINUTES_PER_DAY: f64 = 1440.0;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    InstantCall,
    InstantPut,
    HcdFuture,
    LcdFuture,
    HcdCall,
    HcdPut,
    LcdCall,
    LcdPut,
    CttFuture,
    CttCall,
    CttPut,
}

/// The quantity a contract is written on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Underlying {
    Instant,
    Hcd,
    Lcd,
    Ctt,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::InstantCall,
        Family::InstantPut,
        Family::HcdFuture,
        Family::LcdFuture,
        Family::HcdCall,
        Family::HcdPut,
        Family::LcdCall,
        Family::LcdPut,
        Family::CttFuture,
        Family::CttCall,
        Family::CttPut,
    ];

    pub fn underlying(self) -> Underlying {
        use Family::*;
        match self {
            InstantCall | InstantPut => Underlying::Instant,
            HcdFuture | HcdCall | HcdPut => Underlying::Hcd,
            LcdFuture | LcdCall | LcdPut => Underlying::Lcd,
            CttFuture | CttCall | CttPut => Underlying::Ctt,
        }
    }

    pub fn is_future(self) -> bool {
        matches!(self, Family::HcdFuture | Family::LcdFuture | Family::CttFuture)
    }

    pub fn is_call(self) -> bool {
        matches!(
            self,
            Family::InstantCall | Family::HcdCall | Family::LcdCall | Family::CttCall
        )
    }

    pub fn needs_threshold(self) -> bool {
        matches!(self.underlying(), Underlying::Hcd | Underlying::Lcd)
    }

    /// The put with the same underlying, for calls; the call, for puts.
    pub fn parity_partner(self) -> Option<Family> {
        use Family::*;
        Some(match self {
            InstantCall => InstantPut,
            InstantPut => InstantCall,
            HcdCall => HcdPut,
            HcdPut => HcdCall,
            LcdCall => LcdPut,
            LcdPut => LcdCall,
            CttCall => CttPut,
            CttPut => CttCall,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Settlement {
    /// Sum over calendar days of the daily mean travel time.
    Discrete,
    /// Integral of the travel time over the window.
    #[default]
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeContract {
    family: Family,
    exercise: Option<f64>,
    window: Option<(f64, f64)>,
    threshold: Option<f64>,
    strike: Option<f64>,
    leverage: f64,
    settlement: Settlement,
}

impl DerivativeContract {
    pub fn instant(family: Family, t: f64, strike: f64, leverage: f64) -> Result<Self> {
        Self::new(family, Some(t), None, None, Some(strike), leverage, Settlement::Continuous)
    }

    /// Window contract; `threshold` is required for HCD/LCD families and
    /// `strike` for options.
    pub fn windowed(
        family: Family,
        window: (f64, f64),
        threshold: Option<f64>,
        strike: Option<f64>,
        leverage: f64,
        settlement: Settlement,
    ) -> Result<Self> {
        Self::new(family, None, Some(window), threshold, strike, leverage, settlement)
    }

    pub fn new(
        family: Family,
        exercise: Option<f64>,
        window: Option<(f64, f64)>,
        threshold: Option<f64>,
        strike: Option<f64>,
        leverage: f64,
        settlement: Settlement,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::invalid(format!("{family:?}: {m}")));
        if !(leverage.is_finite() && leverage > 0.0) {
            return bad(format!("leverage must be positive, got {leverage}"));
        }
        if family.underlying() == Underlying::Instant {
            match exercise {
                Some(t) if t.is_finite() => {}
                _ => return bad("an exercise time is required".into()),
            }
            if window.is_some() {
                return bad("instant options take an exercise time, not a window".into());
            }
        } else {
            match window {
                Some((t1, t2)) if t1.is_finite() && t2.is_finite() && t1 < t2 => {}
                Some((t1, t2)) => return bad(format!("window [{t1}, {t2}] must have t1 < t2")),
                None => return bad("a window is required".into()),
            }
            if exercise.is_some() {
                return bad("window contracts do not take an exercise time".into());
            }
        }
        match (family.needs_threshold(), threshold) {
            (true, Some(c)) if c.is_finite() => {}
            (true, _) => return bad("a finite threshold is required".into()),
            (false, Some(_)) => return bad("a threshold only applies to HCD/LCD contracts".into()),
            (false, None) => {}
        }
        match (family.is_future(), strike) {
            (true, Some(_)) => return bad("futures carry no strike".into()),
            (false, Some(k)) if k.is_finite() => {}
            (false, _) => return bad("a finite strike is required".into()),
            (true, None) => {}
        }
        Ok(Self {
            family,
            exercise,
            window,
            threshold,
            strike,
            leverage,
            settlement,
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn window(&self) -> Option<(f64, f64)> {
        self.window
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn strike(&self) -> Option<f64> {
        self.strike
    }

    pub fn leverage(&self) -> f64 {
        self.leverage
    }

    pub fn settlement(&self) -> Settlement {
        self.settlement
    }

    /// Earliest time the payoff looks at.
    pub fn start_time(&self) -> f64 {
        self.window.map_or_else(|| self.exercise.unwrap_or(0.0), |w| w.0)
    }

    /// Time at which the payoff is paid (end of the window for window
    /// contracts).
    pub fn exercise_time(&self) -> f64 {
        self.window.map_or_else(|| self.exercise.unwrap_or(0.0), |w| w.1)
    }

    /// Window length in minutes (zero for instant options).
    pub fn duration(&self) -> f64 {
        self.window.map_or(0.0, |(a, b)| b - a)
    }

    /// The same contract with a different family (and strike), used to build
    /// parity pairs.
    pub fn with_family(&self, family: Family, strike: Option<f64>) -> Result<Self> {
        Self::new(
            family,
            self.exercise,
            self.window,
            self.threshold,
            strike,
            self.leverage,
            self.settlement,
        )
    }

    pub fn with_strike(&self, strike: f64) -> Result<Self> {
        self.with_family(self.family, Some(strike))
    }

    /// The value of the underlying on a path.
    pub fn index(&self, path: &RealizedPath) -> Result<f64> {
        match self.family.underlying() {
            Underlying::Instant => path.value_at(self.exercise.unwrap_or(0.0)),
            Underlying::Hcd => hcd(path, self.window.unwrap_or_default(), self.threshold.unwrap_or(0.0), self.settlement),
            Underlying::Lcd => lcd(path, self.window.unwrap_or_default(), self.threshold.unwrap_or(0.0), self.settlement),
            Underlying::Ctt => ctt(path, self.window.unwrap_or_default(), self.settlement),
        }
    }

    /// Payoff in dollars given the underlying's value.
    pub fn payoff_from_index(&self, index: f64) -> f64 {
        let alpha = self.leverage;
        if self.family.is_future() {
            return alpha * index;
        }
        let k = self.strike.unwrap_or(0.0);
        if self.family.is_call() {
            alpha * (index - k).max(0.0)
        } else {
            alpha * (k - index).max(0.0)
        }
    }
}

/// Payoff of `contract` on a realized or simulated path.
pub fn payoff(contract: &DerivativeContract, path: &RealizedPath) -> Result<f64> {
    Ok(contract.payoff_from_index(contract.index(path)?))
}

/// Travel times on a uniform grid `t0 + k·h` (minutes).
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedPath {
    t0: f64,
    h: f64,
    values: Vec<f64>,
    /// Minutes past midnight at clock time zero; fixes calendar days.
    day_offset: f64,
}

impl RealizedPath {
    pub fn new(t0: f64, h: f64, values: Vec<f64>, day_offset: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("grid step must be positive, got {h}")));
        }
        if values.len() < 2 {
            return Err(Error::invalid("a path needs at least two points"));
        }
        if !t0.is_finite() || !day_offset.is_finite() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path times and values must be finite"));
        }
        Ok(Self {
            t0,
            h,
            values,
            day_offset,
        })
    }

    /// The whole series on its own clock (time zero at the first sample).
    pub fn from_series(series: &TravelTimeSeries) -> Result<Self> {
        Self::new(0.0, series.h(), series.values().to_vec(), series.start_minute_of_day())
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn end(&self) -> f64 {
        self.t0 + (self.values.len() - 1) as f64 * self.h
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |k| self.t0 + k as f64 * self.h)
    }

    fn check_window(&self, (t1, t2): (f64, f64)) -> Result<()> {
        let tol = TIME_EPS * self.h.max(1.0);
        if !(t1 < t2) {
            return Err(Error::invalid(format!("window [{t1}, {t2}] is empty")));
        }
        if t1 < self.t0 - tol || t2 > self.end() + tol {
            return Err(Error::invalid(format!(
                "window [{t1}, {t2}] is outside the path span [{}, {}]",
                self.t0,
                self.end()
            )));
        }
        Ok(())
    }

    /// Linear interpolation between grid points.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let tol = TIME_EPS * self.h.max(1.0);
        if t < self.t0 - tol || t > self.end() + tol {
            return Err(Error::invalid(format!(
                "time {t} is outside the path span [{}, {}]",
                self.t0,
                self.end()
            )));
        }
        let u = ((t - self.t0) / self.h).clamp(0.0, (self.values.len() - 1) as f64);
        let k = (u.floor() as usize).min(self.values.len() - 2);
        let w = u - k as f64;
        Ok(self.values[k] + w * (self.values[k + 1] - self.values[k]))
    }

    /// Pieces `(t_a, v_a, t_b, v_b)` of the interpolant restricted to the window.
    fn segments(&self, (t1, t2): (f64, f64)) -> Result<Vec<(f64, f64, f64, f64)>> {
        self.check_window((t1, t2))?;
        let t1 = t1.max(self.t0);
        let t2 = t2.min(self.end());
        let mut knots = vec![t1];
        let first = ((t1 - self.t0) / self.h).floor() as usize + 1;
        let mut k = first;
        while k < self.values.len() {
            let t = self.t0 + k as f64 * self.h;
            if t >= t2 {
                break;
            }
            if t > t1 {
                knots.push(t);
            }
            k += 1;
        }
        knots.push(t2);
        let mut out = Vec::with_capacity(knots.len());
        let mut prev = (knots[0], self.value_at(knots[0])?);
        for &t in &knots[1..] {
            let v = self.value_at(t)?;
            if t > prev.0 {
                out.push((prev.0, prev.1, t, v));
            }
            prev = (t, v);
        }
        Ok(out)
    }

    /// Means of the grid samples in `[t1, t2)` grouped by calendar day.
    pub fn daily_means(&self, (t1, t2): (f64, f64)) -> Result<Vec<f64>> {
        self.check_window((t1, t2))?;
        let tol = TIME_EPS * self.h.max(1.0);
        let mut means = Vec::new();
        let mut current: Option<(i64, f64, usize)> = None;
        for (t, v) in self.times().zip(&self.values) {
            if t < t1 - tol || t >= t2 - tol {
                continue;
            }
            let day = ((t + self.day_offset) / MINUTES_PER_DAY + TIME_EPS).floor() as i64;
            match current.as_mut() {
                Some((d, sum, n)) if *d == day => {
                    *sum += v;
                    *n += 1;
                }
                _ => {
                    if let Some((_, sum, n)) = current {
                        means.push(sum / n as f64);
                    }
                    current = Some((day, *v, 1));
                }
            }
        }
        if let Some((_, sum, n)) = current {
            means.push(sum / n as f64);
        }
        if means.is_empty() {
            return Err(Error::invalid(format!("no grid sample falls in [{t1}, {t2})")));
        }
        Ok(means)
    }
}

/// `∫ max(v − c, 0)` over one linear piece.
fn excess_area(ta: f64, va: f64, tb: f64, vb: f64, c: f64) -> f64 {
    let (da, db) = (va - c, vb - c);
    let dt = tb - ta;
    if da >= 0.0 && db >= 0.0 {
        0.5 * (da + db) * dt
    } else if da <= 0.0 && db <= 0.0 {
        0.0
    } else {
        // One sign change: only the triangle above the threshold counts.
        let (pos, neg) = if da > 0.0 { (da, db) } else { (db, da) };
        0.5 * pos * pos / (pos - neg) * dt
    }
}

/// Cumulative travel time over the window.
pub fn ctt(path: &RealizedPath, window: (f64, f64), settlement: Settlement) -> Result<f64> {
    match settlement {
        Settlement::Continuous => Ok(path
            .segments(window)?
            .iter()
            .map(|(ta, va, tb, vb)| 0.5 * (va + vb) * (tb - ta))
            .sum()),
        Settlement::Discrete => Ok(path.daily_means(window)?.iter().sum()),
    }
}

/// High-congestion index: accumulated excess of travel time over `c`.
pub fn hcd(path: &RealizedPath, window: (f64, f64), c: f64, settlement: Settlement) -> Result<f64> {
    match settlement {
        Settlement::Continuous => Ok(path
            .segments(window)?
            .iter()
            .map(|&(ta, va, tb, vb)| excess_area(ta, va, tb, vb, c))
            .sum()),
        Settlement::Discrete => Ok(path.daily_means(window)?.iter().map(|m| (m - c).max(0.0)).sum()),
    }
}

/// Low-congestion index: accumulated shortfall of travel time below `c`.
pub fn lcd(path: &RealizedPath, window: (f64, f64), c: f64, settlement: Settlement) -> Result<f64> {
    match settlement {
        Settlement::Continuous => Ok(path
            .segments(window)?
            .iter()
            .map(|&(ta, va, tb, vb)| excess_area(ta, -va, tb, -vb, -c))
            .sum()),
        Settlement::Discrete => Ok(path.daily_means(window)?.iter().map(|m| (c - m).max(0.0)).sum()),
    }
}

/// Contract file contents, with calendar timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_end: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    pub leverage: f64,
    #[serde(default)]
    pub settlement: Settlement,
}

impl ContractSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::series_io::parse_error(text, &e))
    }

    /// Converts timestamps to minutes since `clock_start`.
    pub fn resolve(&self, clock_start: NaiveDateTime) -> Result<DerivativeContract> {
        let minutes = |field: &str, text: &Option<String>| -> Result<Option<f64>> {
            text.as_ref()
                .map(|s| {
                    parse_timestamp(s)
                        .map(|t| crate::series_io::minutes_between(clock_start, t))
                        .ok_or_else(|| Error::invalid(format!("{field}: cannot parse timestamp `{s}`")))
                })
                .transpose()
        };
        let exercise = minutes("exercise", &self.exercise)?;
        let window = match (minutes("window_start", &self.window_start)?, minutes("window_end", &self.window_end)?) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::invalid("window_start and window_end must be given together")),
        };
        DerivativeContract::new(
            self.family,
            exercise,
            window,
            self.threshold,
            self.strike,
            self.leverage,
            self.settlement,
        )
    }
}
