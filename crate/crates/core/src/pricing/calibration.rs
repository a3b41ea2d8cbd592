//! Market price of risk implied by quoted prices.

use super::{closed_form_ctt_future, mc_price_many, Dynamics, MarketMeasure, McOptions, ThetaSchedule};
use crate::error::{Error, Result};
use crate::optim::{bracket_minimum, golden_section};
use crate::products::DerivativeContract;

/// Relative RMS pricing error above which the fit is flagged.
const WARN_RMS_RELATIVE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Quote {
    pub contract: DerivativeContract,
    pub price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuotePricer {
    /// Closed form; CTT futures under CARMA drivers only.
    ClosedForm,
    /// Monte Carlo with one seed for every trial θ.
    Mc(McOptions),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub pricer: QuotePricer,
    /// Break points of a piecewise-constant θ; empty for a scalar θ.
    pub breaks: Vec<f64>,
    /// Initial search interval, expanded as needed.
    pub initial: (f64, f64),
    pub tol: f64,
    pub max_evaluations: usize,
    /// Coordinate-descent sweeps for piecewise schedules.
    pub max_sweeps: usize,
}

impl CalibrationOptions {
    pub fn new(pricer: QuotePricer) -> Self {
        Self {
            pricer,
            breaks: Vec::new(),
            initial: (-1.0, 1.0),
            tol: 1e-6,
            max_evaluations: 400,
            max_sweeps: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub theta: ThetaSchedule,
    /// Sum of squared pricing errors at the optimum.
    pub residual: f64,
    pub rms_relative_error: f64,
    pub model_prices: Vec<f64>,
    pub evaluations: usize,
    pub warning: Option<String>,
}

struct Objective<'a> {
    quotes: &'a [Quote],
    contracts: Vec<DerivativeContract>,
    dynamics: &'a Dynamics,
    r: f64,
    t0: f64,
    pricer: QuotePricer,
    evaluations: usize,
    budget: usize,
}

impl Objective<'_> {
    fn prices(&mut self, theta: &ThetaSchedule) -> Result<Vec<f64>> {
        self.evaluations += 1;
        if self.evaluations > self.budget {
            return Err(Error::NotConverged {
                evaluations: self.evaluations - 1,
                objective: f64::NAN,
                best: theta.values().to_vec(),
            });
        }
        let measure = MarketMeasure::new(theta.clone(), self.r)?;
        match self.pricer {
            QuotePricer::ClosedForm => self
                .contracts
                .iter()
                .map(|c| closed_form_ctt_future(c, self.dynamics, &measure, self.t0).map(|q| q.price))
                .collect(),
            QuotePricer::Mc(opts) => Ok(mc_price_many(&self.contracts, self.dynamics, &measure, self.t0, opts)?
                .into_iter()
                .map(|q| q.price)
                .collect()),
        }
    }

    fn residuals(&mut self, theta: &ThetaSchedule) -> Result<Vec<f64>> {
        Ok(self
            .prices(theta)?
            .iter()
            .zip(self.quotes)
            .map(|(m, q)| m - q.price)
            .collect())
    }

    fn value(&mut self, theta: &ThetaSchedule) -> Result<f64> {
        Ok(self.residuals(theta)?.iter().map(|e| e * e).sum())
    }
}

/// Schedule with segment `i` replaced by `value`.
fn with_segment(base: &ThetaSchedule, i: usize, value: f64) -> Result<ThetaSchedule> {
    let mut values = base.values().to_vec();
    values[i] = value;
    ThetaSchedule::piecewise(base.breaks().to_vec(), values)
}

/// Bracketed golden-section search over segment `i`, then Gauss–Newton
/// polishing on the same segment.
fn line_search(obj: &mut Objective<'_>, base: &ThetaSchedule, i: usize, opts: &CalibrationOptions) -> Result<ThetaSchedule> {
    let mut failure = None;
    let mut f = |x: f64| match with_segment(base, i, x).and_then(|s| obj.value(&s)) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::INFINITY
        }
    };
    let centre = base.values()[i];
    let half = 0.5 * (opts.initial.1 - opts.initial.0);
    let (lo, hi) = if base.is_constant() && centre == 0.0 {
        opts.initial
    } else {
        (centre - half, centre + half)
    };
    let (a, b) = bracket_minimum(&mut f, lo, hi, 30);
    let (mut x, mut fx) = golden_section(&mut f, a, b, opts.tol, 200);
    if let Some(e) = failure {
        return Err(e);
    }

    for _ in 0..5 {
        let step = 1e-6 * (1.0 + x.abs());
        let r0 = obj.residuals(&with_segment(base, i, x)?)?;
        let r1 = obj.residuals(&with_segment(base, i, x + step)?)?;
        let (mut jr, mut jj) = (0.0, 0.0);
        for (a, b) in r0.iter().zip(&r1) {
            let j = (b - a) / step;
            jr += j * a;
            jj += j * j;
        }
        if jj == 0.0 {
            break;
        }
        let candidate = x - jr / jj;
        let fc = obj.value(&with_segment(base, i, candidate)?)?;
        if !(fc < fx) {
            break;
        }
        let moved = (candidate - x).abs();
        x = candidate;
        fx = fc;
        if moved < 1e-12 * (1.0 + x.abs()) {
            break;
        }
    }
    with_segment(base, i, x)
}

/// Finds the θ schedule minimising the squared distance between model and
/// quoted prices. Monte Carlo pricing reuses the seed for every trial value,
/// which keeps the objective smooth in θ.
pub fn calibrate_theta(
    quotes: &[Quote],
    dynamics: &Dynamics,
    r: f64,
    t0: f64,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if quotes.is_empty() {
        return Err(Error::Empty("no quotes to calibrate against".into()));
    }
    if quotes.iter().any(|q| !q.price.is_finite()) {
        return Err(Error::invalid("quoted prices must be finite"));
    }
    if !(opts.tol > 0.0) || opts.initial.1 <= opts.initial.0 {
        return Err(Error::invalid("calibration needs a positive tolerance and an increasing interval"));
    }
    let mut obj = Objective {
        quotes,
        contracts: quotes.iter().map(|q| q.contract.clone()).collect(),
        dynamics,
        r,
        t0,
        pricer: opts.pricer,
        evaluations: 0,
        budget: opts.max_evaluations,
    };
    let mut theta = ThetaSchedule::piecewise(opts.breaks.clone(), vec![0.0; opts.breaks.len() + 1])?;
    let segments = theta.values().len();
    let sweeps = if segments == 1 { 1 } else { opts.max_sweeps.max(1) };
    let mut converged = segments == 1;
    for _ in 0..sweeps {
        let before = theta.values().to_vec();
        for i in 0..segments {
            theta = line_search(&mut obj, &theta, i, opts)?;
        }
        let change = before
            .iter()
            .zip(theta.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if segments > 1 && change < 10.0 * opts.tol {
            converged = true;
            break;
        }
    }

    let model_prices = obj.prices(&theta)?;
    let residual: f64 = model_prices.iter().zip(quotes).map(|(m, q)| (m - q.price).powi(2)).sum();
    let rms_relative_error = (model_prices
        .iter()
        .zip(quotes)
        .map(|(m, q)| ((m - q.price) / q.price.abs().max(f64::MIN_POSITIVE)).powi(2))
        .sum::<f64>()
        / quotes.len() as f64)
        .sqrt();
    let mut warning = None;
    if rms_relative_error > WARN_RMS_RELATIVE {
        warning = Some(format!(
            "quotes are not matched by any theta: RMS relative pricing error {:.3}%",
            100.0 * rms_relative_error
        ));
    } else if !converged {
        warning = Some("coordinate descent stopped before the schedule settled".into());
    }
    Ok(Calibration {
        theta,
        residual,
        rms_relative_error,
        model_prices,
        evaluations: obj.evaluations,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::carma::CarmaModel;
    use crate::decomposition::SeasonalTrendModel;
    use crate::pricing::{mc_price_many, Driver};
    use crate::products::{Family, Settlement};

    fn dynamics() -> Dynamics {
        Dynamics::new(
            SeasonalTrendModel::constant(20.0),
            5.0,
            0.0,
            Driver::Carma {
                model: CarmaModel::car1(0.25, 1.0, 5.0).unwrap(),
                integrated: false,
                state: vec![0.5],
                level: 0.0,
            },
        )
        .unwrap()
    }

    fn future(t1: f64, t2: f64) -> DerivativeContract {
        DerivativeContract::windowed(Family::CttFuture, (t1, t2), None, None, 1.0, Settlement::Continuous).unwrap()
    }

    #[test]
    fn single_closed_form_quote_is_solved_exactly() {
        let d = dynamics();
        let c = future(10.0, 110.0);
        let q = Quote {
            contract: c.clone(),
            price: 2150.0,
        };
        let cal = calibrate_theta(&[q], &d, 0.0, 0.0, &CalibrationOptions::new(QuotePricer::ClosedForm)).unwrap();
        let theta = cal.theta.values()[0];
        let back = closed_form_ctt_future(&c, &d, &MarketMeasure::constant(theta, 0.0).unwrap(), 0.0).unwrap();
        assert!((back.price - 2150.0).abs() < 1e-8, "{}", back.price);
        assert!(cal.warning.is_none());
    }

    #[test]
    fn recovers_theta_from_mc_quotes() {
        let d = dynamics();
        let contracts = vec![
            future(0.0, 60.0),
            DerivativeContract::windowed(Family::HcdFuture, (0.0, 120.0), Some(20.0), None, 1.0, Settlement::Continuous)
                .unwrap(),
        ];
        let mc = McOptions::new(2000, 11);
        let truth = MarketMeasure::constant(0.3, 0.0).unwrap();
        let quotes: Vec<Quote> = mc_price_many(&contracts, &d, &truth, 0.0, mc)
            .unwrap()
            .into_iter()
            .zip(&contracts)
            .map(|(q, c)| Quote {
                contract: c.clone(),
                price: q.price,
            })
            .collect();
        let cal = calibrate_theta(&quotes, &d, 0.0, 0.0, &CalibrationOptions::new(QuotePricer::Mc(mc))).unwrap();
        assert!((cal.theta.values()[0] - 0.3).abs() < 1e-4, "{:?}", cal.theta);
    }

    #[test]
    fn piecewise_schedule_fits_two_windows() {
        let d = dynamics();
        let truth = ThetaSchedule::piecewise(vec![100.0], vec![0.1, -0.2]).unwrap();
        let measure = MarketMeasure::new(truth, 0.0).unwrap();
        let contracts = [future(0.0, 100.0), future(100.0, 200.0)];
        let mc = McOptions::new(1000, 2);
        let quotes: Vec<Quote> = mc_price_many(&contracts, &d, &measure, 0.0, mc)
            .unwrap()
            .into_iter()
            .zip(&contracts)
            .map(|(q, c)| Quote {
                contract: c.clone(),
                price: q.price,
            })
            .collect();
        let mut opts = CalibrationOptions::new(QuotePricer::Mc(mc));
        opts.breaks = vec![100.0];
        let cal = calibrate_theta(&quotes, &d, 0.0, 0.0, &opts).unwrap();
        let v = cal.theta.values();
        assert!((v[0] - 0.1).abs() < 1e-3 && (v[1] + 0.2).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn inconsistent_quotes_warn() {
        let d = dynamics();
        let c = future(0.0, 60.0);
        let quotes = [
            Quote {
                contract: c.clone(),
                price: 1100.0,
            },
            Quote {
                contract: c,
                price: 1300.0,
            },
        ];
        let cal = calibrate_theta(&quotes, &d, 0.0, 0.0, &CalibrationOptions::new(QuotePricer::ClosedForm)).unwrap();
        assert!(cal.warning.is_some());
        assert!(calibrate_theta(&[], &d, 0.0, 0.0, &CalibrationOptions::new(QuotePricer::ClosedForm)).is_err());
    }
}
