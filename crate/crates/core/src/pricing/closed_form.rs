use super::{integrated_moments, Driver, Dynamics, MarketMeasure, Method, PriceQuote};
use crate::error::{Error, Result};
use crate::products::{DerivativeContract, Family, Settlement};

/// Closed-form price of a continuously settled CTT future under a constant
/// market price of risk.
///
/// The expected integral of the CARMA output is read off the Gaussian
/// moments of the augmented state `(x, ∫Y, ∫∫Y)`; for CAR(1) this is
/// `(Y0/a)(e^{−aτ1} − e^{−aτ2}) + (θσ/a)(τ2 − τ1 − (e^{−aτ1} − e^{−aτ2})/a)`.
pub fn closed_form_ctt_future(
    contract: &DerivativeContract,
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
) -> Result<PriceQuote> {
    if contract.family() != Family::CttFuture {
        return Err(Error::Unsupported(format!(
            "closed form only covers CTT futures, not {:?}",
            contract.family()
        )));
    }
    if contract.settlement() != Settlement::Continuous {
        return Err(Error::Unsupported("closed form needs continuous settlement".into()));
    }
    if !measure.theta.is_constant() {
        return Err(Error::Unsupported("closed form needs a constant theta".into()));
    }
    let Driver::Carma {
        model,
        integrated,
        state,
        level,
    } = &dynamics.driver
    else {
        return Err(Error::Unsupported("closed form needs a CARMA driver".into()));
    };
    let (t1, t2) = contract
        .window()
        .ok_or_else(|| Error::invalid("CTT future without a window"))?;
    if t1 < t0 - 1e-9 {
        return Err(Error::invalid(format!("window starts at {t1}, before valuation time {t0}")));
    }
    let theta = measure.theta.values()[0];
    let p = model.p();
    let mut start = state.clone();
    start.extend([0.0, 0.0]);
    let moments = |tau: f64| integrated_moments(model, theta, tau.max(0.0), &start).map(|(m, _)| m);
    let (m1, m2) = (moments(t1 - t0)?, moments(t2 - t0)?);
    let stochastic = if *integrated {
        level * (t2 - t1) + (m2[p + 1] - m1[p + 1]) / dynamics.h
    } else {
        m2[p] - m1[p]
    };
    let price = contract.leverage() * (dynamics.seasonal_integral(t1, t2) + stochastic);
    Ok(PriceQuote {
        price,
        std_error: 0.0,
        method: Method::ClosedForm,
        n_paths: None,
        grid: None,
        theta: measure.theta.clone(),
        r: measure.r,
    })
}
