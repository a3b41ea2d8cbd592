//! Monte Carlo pricing engine.
//!
//! Each path draws from its own random stream keyed by `(seed, path_index)`
//! and per-path results are reduced in index order, so prices are
//! bit-identical whatever the number of worker threads.
//!
//! Paths under the pricing measure reuse the physical-measure shocks (common
//! random numbers): for CARMA drivers the pricing path is the physical path
//! plus a deterministic drift response, so `θ = 0` reproduces the physical
//! path exactly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Driver, Dynamics, MarketMeasure, Method, PriceQuote};
use crate::arima::ArmaRecursion;
use crate::error::{Error, Result};
use crate::linalg::{integrated_exponential, psd_sqrt, van_loan};
use crate::products::{DerivativeContract, RealizedPath};
use crate::rng::{path_rng, standard_normal};

pub const MIN_PATHS: usize = 100;
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Simulation steps per sampling interval `h` (CARMA drivers only).
    pub substeps: usize,
}

impl McOptions {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            substeps: 1,
        }
    }
}

/// Simulation grid and precomputed transition data.
struct Plan {
    t0: f64,
    dt: f64,
    steps: usize,
    thetas: Vec<f64>,
    kind: PlanKind,
}

enum PlanKind {
    Carma {
        dim: usize,
        p: usize,
        f: Vec<f64>,
        l: Vec<f64>,
        start: Vec<f64>,
        obs: Vec<f64>,
        integrated: bool,
        level: f64,
        /// Pricing-measure drift response of the observation at each grid point.
        drift_obs: Vec<f64>,
    },
    Arima {
        d: usize,
        history: Vec<f64>,
        level: f64,
    },
}

impl Plan {
    fn new(dynamics: &Dynamics, measure: &MarketMeasure, t0: f64, t_end: f64, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        let dt = match dynamics.driver {
            Driver::Carma { .. } => dynamics.h / substeps as f64,
            Driver::Arima { .. } => dynamics.h,
        };
        let span = (t_end - t0).max(0.0);
        let steps = ((span / dt) - TIME_EPS).ceil().max(1.0) as usize;
        let thetas: Vec<f64> = (0..steps).map(|k| measure.theta.at(t0 + k as f64 * dt)).collect();

        let kind = match &dynamics.driver {
            Driver::Carma {
                model,
                integrated,
                state,
                level,
            } => {
                let p = model.p();
                let dim = p + 2;
                let (a, e) = model.companion_matrix();
                let b = model.observation();
                // Augmented state (x, ∫Bᵀx, W).
                let mut big = DMatrix::<f64>::zeros(dim, dim);
                big.view_mut((0, 0), (p, p)).copy_from(&a);
                for j in 0..p {
                    big[(p, j)] = b[j];
                }
                let mut g = DVector::<f64>::zeros(dim);
                g.rows_mut(0, p).copy_from(&(e.clone() * model.sigma()));
                g[p + 1] = 1.0;
                let (f, q) = van_loan(&big, &(&g * g.transpose()), dt);
                let l = psd_sqrt(&q);
                let mut drift_in = DVector::<f64>::zeros(dim);
                drift_in.rows_mut(0, p).copy_from(&(e * model.sigma()));
                let unit_drift = integrated_exponential(&big, &drift_in, dt);

                let mut obs = vec![0.0; dim];
                if *integrated {
                    obs[p] = 1.0 / dynamics.h;
                } else {
                    obs[..p].copy_from_slice(b.as_slice());
                }
                let obs_v = DVector::from_column_slice(&obs);
                let mut response = DVector::<f64>::zeros(dim);
                let mut drift_obs = Vec::with_capacity(steps + 1);
                drift_obs.push(0.0);
                for th in &thetas {
                    response = &f * response + &unit_drift * *th;
                    drift_obs.push(obs_v.dot(&response));
                }
                let mut start = vec![0.0; dim];
                start[..p].copy_from_slice(state);
                let flat = |m: &DMatrix<f64>| (0..dim * dim).map(|k| m[(k / dim, k % dim)]).collect();
                PlanKind::Carma {
                    dim,
                    p,
                    f: flat(&f),
                    l: flat(&l),
                    start,
                    obs,
                    integrated: *integrated,
                    level: *level,
                    drift_obs,
                }
            }
            Driver::Arima { model, history, level } => PlanKind::Arima {
                d: model.d,
                history: history.clone(),
                level: *level,
            },
        };
        Ok(Self {
            t0,
            dt,
            steps,
            thetas,
            kind,
        })
    }

    fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Stochastic part of the travel time on the grid under P and Q, and the
    /// log Girsanov density of Q with respect to P.
    fn simulate(&self, dynamics: &Dynamics, seed: u64, index: u64, need_p: bool) -> (Vec<f64>, Vec<f64>, f64) {
        let mut rng = path_rng(seed, index);
        let n = self.steps + 1;
        let mut p_vals = Vec::with_capacity(n);
        let mut q_vals = Vec::with_capacity(n);
        let mut log_z = 0.0;
        match &self.kind {
            PlanKind::Carma {
                dim,
                p,
                f,
                l,
                start,
                obs,
                integrated,
                level,
                drift_obs,
            } => {
                let dim = *dim;
                let mut s = start.clone();
                let mut next = vec![0.0; dim];
                let mut z = vec![0.0; dim];
                let base = if *integrated { *level } else { 0.0 };
                let observe = |s: &[f64]| base + obs.iter().zip(s).map(|(o, v)| o * v).sum::<f64>();
                let y0 = observe(&s);
                p_vals.push(y0);
                q_vals.push(y0 + drift_obs[0]);
                for k in 0..self.steps {
                    for zi in z.iter_mut() {
                        *zi = standard_normal(&mut rng);
                    }
                    for i in 0..dim {
                        let mut acc = 0.0;
                        for j in 0..dim {
                            acc += f[i * dim + j] * s[j] + l[i * dim + j] * z[j];
                        }
                        next[i] = acc;
                    }
                    let dw = next[p + 1] - s[p + 1];
                    std::mem::swap(&mut s, &mut next);
                    let th = self.thetas[k];
                    log_z += th * dw - 0.5 * th * th * self.dt;
                    let y = observe(&s);
                    p_vals.push(y);
                    q_vals.push(y + drift_obs[k + 1]);
                }
            }
            PlanKind::Arima { d, history, level } => {
                let Driver::Arima { model, .. } = &dynamics.driver else {
                    unreachable!("plan kind follows the driver")
                };
                let mut rec_q = ArmaRecursion::new(model, history);
                let mut rec_p = need_p.then(|| rec_q.clone());
                let first = *level;
                let (mut lvl_p, mut lvl_q) = (first, first);
                p_vals.push(first);
                q_vals.push(first);
                let root_h = self.dt.sqrt();
                for k in 0..self.steps {
                    let zk = standard_normal(&mut rng);
                    let th = self.thetas[k];
                    let shift = th * root_h;
                    let xq = rec_q.step(zk + shift);
                    log_z += shift * zk - 0.5 * shift * shift;
                    if *d == 1 {
                        lvl_q += xq;
                        q_vals.push(lvl_q);
                    } else {
                        q_vals.push(xq);
                    }
                    if let Some(rec) = rec_p.as_mut() {
                        let xp = rec.step(zk);
                        if *d == 1 {
                            lvl_p += xp;
                            p_vals.push(lvl_p);
                        } else {
                            p_vals.push(xp);
                        }
                    }
                }
            }
        }
        (p_vals, q_vals, log_z)
    }
}

fn validate(contracts: &[DerivativeContract], t0: f64, opts: &McOptions) -> Result<f64> {
    if opts.n_paths < MIN_PATHS {
        return Err(Error::invalid(format!(
            "{} paths are too few for a meaningful estimate (minimum {MIN_PATHS})",
            opts.n_paths
        )));
    }
    if contracts.is_empty() {
        return Err(Error::Empty("no contracts to price".into()));
    }
    let mut t_end = t0;
    for c in contracts {
        if c.start_time() < t0 - TIME_EPS {
            return Err(Error::invalid(format!(
                "{:?} starts at {} before the valuation time {t0}",
                c.family(),
                c.start_time()
            )));
        }
        t_end = t_end.max(c.exercise_time());
    }
    Ok(t_end)
}

fn travel_times(plan: &Plan, dynamics: &Dynamics, stochastic: &[f64]) -> Vec<f64> {
    stochastic
        .iter()
        .enumerate()
        .map(|(k, y)| dynamics.seasonal_at(plan.time(k)) + y)
        .collect()
}

/// Per-path outcome: discounted payoffs under Q, and (when requested)
/// discounted payoffs under P with the density.
struct PathResult {
    q: Vec<f64>,
    p: Vec<f64>,
    z: f64,
}

fn run(
    contracts: &[DerivativeContract],
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
    opts: &McOptions,
    need_p: bool,
) -> Result<Vec<PathResult>> {
    let t_end = validate(contracts, t0, opts)?;
    let plan = Plan::new(dynamics, measure, t0, t_end, opts.substeps)?;
    let discounts: Vec<f64> = contracts
        .iter()
        .map(|c| if c.family().is_future() { 1.0 } else { measure.discount(t0, c.exercise_time()) })
        .collect();
    (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<PathResult> {
            let (p_y, q_y, log_z) = plan.simulate(dynamics, opts.seed, i, need_p);
            let q_path = RealizedPath::new(t0, plan.dt, travel_times(&plan, dynamics, &q_y), dynamics.day_offset)?;
            let mut q = Vec::with_capacity(contracts.len());
            for (c, d) in contracts.iter().zip(&discounts) {
                q.push(d * crate::products::payoff(c, &q_path)?);
            }
            let mut p = Vec::new();
            if need_p {
                let p_path = RealizedPath::new(t0, plan.dt, travel_times(&plan, dynamics, &p_y), dynamics.day_offset)?;
                for (c, d) in contracts.iter().zip(&discounts) {
                    p.push(d * crate::products::payoff(c, &p_path)?);
                }
            }
            Ok(PathResult { q, p, z: log_z.exp() })
        })
        .collect()
}

/// Discounted payoffs under the pricing measure, `[contract][path]`.
pub fn mc_payoff_samples(
    contracts: &[DerivativeContract],
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
    opts: McOptions,
) -> Result<Vec<Vec<f64>>> {
    let results = run(contracts, dynamics, measure, t0, &opts, false)?;
    Ok((0..contracts.len())
        .map(|j| results.iter().map(|r| r.q[j]).collect())
        .collect())
}

/// Sample mean and standard error, summed in order.
pub(crate) fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Prices several contracts on one set of paths.
pub fn mc_price_many(
    contracts: &[DerivativeContract],
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
    opts: McOptions,
) -> Result<Vec<PriceQuote>> {
    let samples = mc_payoff_samples(contracts, dynamics, measure, t0, opts)?;
    Ok(samples
        .iter()
        .map(|xs| {
            let (price, std_error) = mean_se(xs);
            PriceQuote {
                price,
                std_error,
                method: Method::Mc,
                n_paths: Some(opts.n_paths),
                grid: None,
                theta: measure.theta.clone(),
                r: measure.r,
            }
        })
        .collect())
}

/// Monte Carlo price of one contract: futures undiscounted, options
/// discounted from exercise to `t0`.
pub fn mc_price(
    contract: &DerivativeContract,
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
    opts: McOptions,
) -> Result<PriceQuote> {
    Ok(mc_price_many(std::slice::from_ref(contract), dynamics, measure, t0, opts)?.remove(0))
}

/// Measure-change diagnostics for one contract.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureChange {
    /// `E_Q[payoff]` from drift-shifted paths.
    pub q_price: f64,
    pub q_se: f64,
    /// `E_P[Z · payoff]` from physical paths.
    pub weighted_price: f64,
    pub weighted_se: f64,
    /// `E_P[payoff]`.
    pub p_price: f64,
    /// `E_P[Z]`.
    pub z_mean: f64,
    pub z_se: f64,
}

impl MeasureChange {
    pub fn combined_se(&self) -> f64 {
        (self.q_se * self.q_se + self.weighted_se * self.weighted_se).sqrt()
    }
}

/// Compares pricing-measure expectations with density-weighted physical
/// expectations on the same random streams.
pub fn measure_change_check(
    contracts: &[DerivativeContract],
    dynamics: &Dynamics,
    measure: &MarketMeasure,
    t0: f64,
    opts: McOptions,
) -> Result<Vec<MeasureChange>> {
    let results = run(contracts, dynamics, measure, t0, &opts, true)?;
    let zs: Vec<f64> = results.iter().map(|r| r.z).collect();
    let (z_mean, z_se) = mean_se(&zs);
    Ok((0..contracts.len())
        .map(|j| {
            let q: Vec<f64> = results.iter().map(|r| r.q[j]).collect();
            let p: Vec<f64> = results.iter().map(|r| r.p[j]).collect();
            let w: Vec<f64> = results.iter().map(|r| r.z * r.p[j]).collect();
            let (q_price, q_se) = mean_se(&q);
            let (weighted_price, weighted_se) = mean_se(&w);
            MeasureChange {
                q_price,
                q_se,
                weighted_price,
                weighted_se,
                p_price: mean_se(&p).0,
                z_mean,
                z_se,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::{ArimaModel, ArimaOrder};
    use crate::carma::CarmaModel;
    use crate::decomposition::SeasonalTrendModel;
    use crate::pricing::closed_form_ctt_future;
    use crate::products::{Family, Settlement};

    fn car1_dynamics(sigma: f64, level: f64, x0: f64) -> Dynamics {
        Dynamics::new(
            SeasonalTrendModel::constant(level),
            5.0,
            0.0,
            Driver::Carma {
                model: CarmaModel::car1(0.25, sigma, 5.0).unwrap(),
                integrated: false,
                state: vec![x0],
                level: 0.0,
            },
        )
        .unwrap()
    }

    fn ctt_future(t1: f64, t2: f64) -> DerivativeContract {
        DerivativeContract::windowed(Family::CttFuture, (t1, t2), None, None, 1.0, Settlement::Continuous).unwrap()
    }

    #[test]
    fn deterministic_path_prices_exactly() {
        let dynamics = car1_dynamics(1e-12, 7.0, 0.0);
        let q = mc_price(
            &ctt_future(100.0, 400.0),
            &dynamics,
            &MarketMeasure::physical(0.0).unwrap(),
            0.0,
            McOptions::new(200, 1),
        )
        .unwrap();
        assert!((q.price - 2100.0).abs() < 1e-9 * 2100.0);
        assert!(q.std_error < 1e-6);
    }

    #[test]
    fn car1_ctt_future_matches_closed_form() {
        let dynamics = car1_dynamics(1.0, 30.0, 1.5);
        let measure = MarketMeasure::constant(0.2, 0.0).unwrap();
        let contract = ctt_future(40.0, 240.0);
        let mc = mc_price(&contract, &dynamics, &measure, 0.0, McOptions::new(20_000, 3)).unwrap();
        let exact = closed_form_ctt_future(&contract, &dynamics, &measure, 0.0).unwrap();
        assert!((mc.price - exact.price).abs() < 3.0 * mc.std_error, "{mc:?} vs {exact:?}");
    }

    #[test]
    fn standard_error_scales_with_paths() {
        let dynamics = car1_dynamics(1.0, 30.0, 0.0);
        let measure = MarketMeasure::physical(0.0).unwrap();
        let c = ctt_future(0.0, 100.0);
        let a = mc_price(&c, &dynamics, &measure, 0.0, McOptions::new(4000, 5)).unwrap();
        let b = mc_price(&c, &dynamics, &measure, 0.0, McOptions::new(16_000, 5)).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn zero_theta_matches_physical_exactly() {
        let dynamics = car1_dynamics(1.0, 30.0, 0.5);
        let c = DerivativeContract::windowed(Family::HcdCall, (0.0, 200.0), Some(30.0), Some(50.0), 2.0, Settlement::Continuous)
            .unwrap();
        let checks = measure_change_check(
            std::slice::from_ref(&c),
            &dynamics,
            &MarketMeasure::physical(0.0).unwrap(),
            0.0,
            McOptions::new(500, 8),
        )
        .unwrap();
        assert_eq!(checks[0].q_price, checks[0].p_price);
        assert_eq!(checks[0].q_price, checks[0].weighted_price);
        assert_eq!(checks[0].z_mean, 1.0);
    }

    #[test]
    fn density_has_unit_mean() {
        let dynamics = car1_dynamics(1.0, 30.0, 0.0);
        let checks = measure_change_check(
            &[ctt_future(0.0, 200.0)],
            &dynamics,
            &MarketMeasure::constant(0.05, 0.0).unwrap(),
            0.0,
            McOptions::new(20_000, 4),
        )
        .unwrap();
        assert!((checks[0].z_mean - 1.0).abs() < 3.0 * checks[0].z_se);
        assert!((checks[0].q_price - checks[0].weighted_price).abs() < 3.0 * checks[0].combined_se());
    }

    #[test]
    fn futures_are_monotone_in_theta() {
        let dynamics = car1_dynamics(1.0, 30.0, 0.0);
        let w = (20.0, 200.0);
        let contracts = [
            DerivativeContract::windowed(Family::HcdFuture, w, Some(30.0), None, 1.0, Settlement::Continuous).unwrap(),
            DerivativeContract::windowed(Family::LcdFuture, w, Some(30.0), None, 1.0, Settlement::Continuous).unwrap(),
            ctt_future(w.0, w.1),
        ];
        let mut last: Option<Vec<f64>> = None;
        for theta in [-0.2, 0.0, 0.2, 0.4] {
            let m = MarketMeasure::constant(theta, 0.0).unwrap();
            let prices: Vec<f64> = mc_price_many(&contracts, &dynamics, &m, 0.0, McOptions::new(2000, 6))
                .unwrap()
                .iter()
                .map(|q| q.price)
                .collect();
            if let Some(prev) = &last {
                assert!(prices[0] >= prev[0]);
                assert!(prices[1] <= prev[1]);
                assert!(prices[2] >= prev[2]);
            }
            last = Some(prices);
        }
    }

    #[test]
    fn options_are_discounted_futures_are_not() {
        let dynamics = car1_dynamics(1e-9, 10.0, 0.0);
        let r = 1e-4;
        let m = MarketMeasure::physical(r).unwrap();
        let fut = ctt_future(0.0, 100.0);
        let call = DerivativeContract::windowed(Family::CttCall, (0.0, 100.0), None, Some(500.0), 1.0, Settlement::Continuous)
            .unwrap();
        let q = mc_price_many(&[fut, call], &dynamics, &m, 0.0, McOptions::new(100, 1)).unwrap();
        assert!((q[0].price - 1000.0).abs() < 1e-6);
        assert!((q[1].price - 500.0 * (-r * 100.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn past_windows_and_few_paths_are_rejected() {
        let dynamics = car1_dynamics(1.0, 10.0, 0.0);
        let m = MarketMeasure::physical(0.0).unwrap();
        assert!(mc_price(&ctt_future(0.0, 10.0), &dynamics, &m, 5.0, McOptions::new(1000, 1)).is_err());
        assert!(mc_price(&ctt_future(10.0, 20.0), &dynamics, &m, 0.0, McOptions::new(99, 1)).is_err());
    }

    #[test]
    fn arima_route_matches_measure_change() {
        let model = ArimaModel::new(ArimaOrder::new(1, 0, 1), vec![0.5], vec![0.4], 0.04).unwrap();
        let dynamics = Dynamics::new(
            SeasonalTrendModel::constant(20.0),
            5.0,
            0.0,
            Driver::Arima {
                model,
                history: vec![0.1],
                level: 0.1,
            },
        )
        .unwrap();
        let checks = measure_change_check(
            &[ctt_future(0.0, 300.0)],
            &dynamics,
            &MarketMeasure::constant(0.05, 0.0).unwrap(),
            0.0,
            McOptions::new(20_000, 2),
        )
        .unwrap();
        let c = &checks[0];
        assert!((c.q_price - c.weighted_price).abs() < 3.0 * c.combined_se());
        assert!(c.q_price > c.p_price);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let dynamics = car1_dynamics(1.0, 30.0, 0.2);
        let m = MarketMeasure::constant(0.1, 1e-5).unwrap();
        let c = ctt_future(0.0, 120.0);
        let price = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_price(&c, &dynamics, &m, 0.0, McOptions::new(3000, 77)).unwrap())
        };
        let (a, b) = (price(1), price(4));
        assert_eq!(a.price.to_bits(), b.price.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }
}
