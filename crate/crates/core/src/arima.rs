//! Discrete ARIMA(p,d,q) models: exact Gaussian likelihood through a
//! state-space recursion, Box–Ljung diagnostics, AIC-based order selection
//! and seeded simulation.
//!
//! Sign conventions follow the usual statistical packages:
//! `x_t − μ = Σ a_i (x_{t−i} − μ) + e_t + Σ b_j e_{t−j}`.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{polynomial_roots, solve_discrete_lyapunov};
use crate::optim::{nelder_mead, SimplexOptions};
use crate::rng::{path_rng, standard_normal};

pub const DEFAULT_LJUNG_LAGS: usize = 20;
pub const DEFAULT_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

impl fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ARIMA({},{},{})", self.p, self.d, self.q)
    }
}

/// The candidate orders compared for the I-80E path.
pub const DEFAULT_CANDIDATES: [ArimaOrder; 4] = [
    ArimaOrder::new(1, 0, 0),
    ArimaOrder::new(1, 1, 0),
    ArimaOrder::new(1, 1, 1),
    ArimaOrder::new(2, 1, 1),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArimaRecord")]
pub struct ArimaModel {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Mean of the differenced series; only estimated when `d = 0`.
    pub mean: f64,
    pub include_mean: bool,
    pub sigma2: f64,
    pub loglik: f64,
    pub n_obs: usize,
}

#[derive(Deserialize)]
struct ArimaRecord {
    p: usize,
    d: usize,
    q: usize,
    ar: Vec<f64>,
    ma: Vec<f64>,
    mean: f64,
    include_mean: bool,
    sigma2: f64,
    loglik: f64,
    n_obs: usize,
}

impl TryFrom<ArimaRecord> for ArimaModel {
    type Error = Error;

    fn try_from(r: ArimaRecord) -> Result<Self> {
        let m = ArimaModel {
            p: r.p,
            d: r.d,
            q: r.q,
            ar: r.ar,
            ma: r.ma,
            mean: r.mean,
            include_mean: r.include_mean,
            sigma2: r.sigma2,
            loglik: r.loglik,
            n_obs: r.n_obs,
        };
        m.validate()?;
        Ok(m)
    }
}

impl ArimaModel {
    /// A model with given coefficients and no fit statistics attached.
    pub fn new(order: ArimaOrder, ar: Vec<f64>, ma: Vec<f64>, sigma2: f64) -> Result<Self> {
        let m = Self {
            p: order.p,
            d: order.d,
            q: order.q,
            ar,
            ma,
            mean: 0.0,
            include_mean: false,
            sigma2,
            loglik: 0.0,
            n_obs: 0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn order(&self) -> ArimaOrder {
        ArimaOrder::new(self.p, self.d, self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ar.len() != self.p || self.ma.len() != self.q {
            return Err(Error::Invariant(format!(
                "{} needs {} AR and {} MA coefficients, found {} and {}",
                self.order(),
                self.p,
                self.q,
                self.ar.len(),
                self.ma.len()
            )));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::Invariant("innovation variance must be positive".into()));
        }
        if self
            .ar
            .iter()
            .chain(&self.ma)
            .chain([&self.mean, &self.loglik])
            .any(|v| !v.is_finite())
        {
            return Err(Error::Invariant("ARIMA coefficients must be finite".into()));
        }
        Ok(())
    }

    /// All roots of `1 − Σ a_i z^i` lie outside the unit circle.
    pub fn is_causal(&self) -> bool {
        let mut poly = vec![1.0];
        poly.extend(self.ar.iter().map(|a| -a));
        polynomial_roots(&poly).iter().all(|(_, modulus)| *modulus > 1.0)
    }

    /// Estimated parameters counted by the information criterion: the ARMA
    /// coefficients, the innovation variance, and the mean when one is fitted.
    pub fn n_params(&self) -> usize {
        self.p + self.q + 1 + usize::from(self.include_mean)
    }
}

/// `−2·loglik + 2·k`.
pub fn aic_value(loglik: f64, k: usize) -> f64 {
    -2.0 * loglik + 2.0 * k as f64
}

pub fn aic(model: &ArimaModel) -> f64 {
    aic_value(model.loglik, model.n_params())
}

/// `d`-fold first differences.
pub fn difference(values: &[f64], d: usize) -> Result<Vec<f64>> {
    if d >= values.len() {
        return Err(Error::invalid(format!(
            "cannot difference {} observations {d} times",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    for _ in 0..d {
        v = v.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(v)
}

/// Inverse of [`difference`]: `initial[j]` is the first value of the series
/// differenced `j` times.
pub fn undifference(diffs: &[f64], initial: &[f64]) -> Vec<f64> {
    let mut v = diffs.to_vec();
    for start in initial.iter().rev() {
        let mut out = Vec::with_capacity(v.len() + 1);
        let mut acc = *start;
        out.push(acc);
        for x in &v {
            acc += x;
            out.push(acc);
        }
        v = out;
    }
    v
}

/// Sample autocorrelations at lags `0..=max_lag` (mean removed).
pub fn sample_acf(values: &[f64], max_lag: usize) -> Vec<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let c0: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if c0 == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            let ck: f64 = (k..n).map(|t| (values[t] - mean) * (values[t - k] - mean)).sum();
            ck / c0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLjung {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: usize,
}

/// Portmanteau test `Q = n(n+2)·Σ ρ̂_k²/(n−k)` against χ² with
/// `lags − fitted` degrees of freedom.
pub fn box_ljung(residuals: &[f64], lags: usize, fitted: usize) -> Result<BoxLjung> {
    if lags == 0 {
        return Err(Error::invalid("Box-Ljung needs at least one lag"));
    }
    if lags <= fitted {
        return Err(Error::invalid(format!(
            "{lags} lags leave no degrees of freedom after {fitted} fitted parameters"
        )));
    }
    let n = residuals.len();
    if n <= lags {
        return Err(Error::invalid(format!("{n} residuals are too few for {lags} lags")));
    }
    let rho = sample_acf(residuals, lags);
    let nf = n as f64;
    let q = nf * (nf + 2.0)
        * (1..=lags)
            .map(|k| rho[k] * rho[k] / (nf - k as f64))
            .sum::<f64>();
    let dof = lags - fitted;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(BoxLjung {
        statistic: q,
        p_value: chi.sf(q),
        dof,
    })
}

/// Partial autocorrelations (through `tanh`) to coefficients of a stationary
/// `1 − Σ φ_i z^i`, via the Durbin–Levinson recursion.
fn unconstrained_to_coeffs(u: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(u.len());
    for (k, raw) in u.iter().enumerate() {
        let r = raw.clamp(-8.0, 8.0).tanh();
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        phi.push(r);
    }
    phi
}

#[cfg(test)]
fn coeffs_to_unconstrained(phi: &[f64]) -> Option<Vec<f64>> {
    let p = phi.len();
    let mut cur = phi.to_vec();
    let mut partial = vec![0.0; p];
    for k in (0..p).rev() {
        let r = cur[k];
        if r.abs() >= 1.0 {
            return None;
        }
        partial[k] = r.atanh();
        let denom = 1.0 - r * r;
        let prev: Vec<f64> = (0..k).map(|j| (cur[j] + r * cur[k - 1 - j]) / denom).collect();
        cur = prev;
    }
    Some(partial)
}

/// Innovations of the exact Gaussian likelihood for a zero-mean ARMA.
struct Innovations {
    /// Prediction errors `v_t`.
    errors: Vec<f64>,
    /// Prediction variances `F_t` in units of the innovation variance.
    variances: Vec<f64>,
}

impl Innovations {
    fn concentrated_loglik(&self) -> (f64, f64) {
        let n = self.errors.len() as f64;
        let sumsq: f64 = self
            .errors
            .iter()
            .zip(&self.variances)
            .map(|(v, f)| v * v / f)
            .sum();
        let sumlog: f64 = self.variances.iter().map(|f| f.ln()).sum();
        let sigma2 = sumsq / n;
        let ll = -0.5 * (n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0) + sumlog);
        (ll, sigma2)
    }

    fn standardized(&self) -> Vec<f64> {
        self.errors
            .iter()
            .zip(&self.variances)
            .map(|(v, f)| v / f.sqrt())
            .collect()
    }
}

/// Kalman recursion on the state-space form with state dimension
/// `r = max(p, q+1)`, transition with the AR coefficients in the first
/// column and loading `(1, b_1, …, b_{r−1})`.
fn arma_innovations(y: &[f64], ar: &[f64], ma: &[f64]) -> Result<Innovations> {
    let r = ar.len().max(ma.len() + 1);
    let mut phi = vec![0.0; r];
    phi[..ar.len()].copy_from_slice(ar);
    let mut load = vec![0.0; r];
    load[0] = 1.0;
    load[1..=ma.len()].copy_from_slice(ma);

    let t = DMatrix::from_fn(r, r, |i, j| {
        if j == 0 {
            phi[i]
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    });
    let rr = DMatrix::from_fn(r, r, |i, j| load[i] * load[j]);
    let p0 = solve_discrete_lyapunov(&t, &rr)?;

    let mut a = vec![0.0; r];
    let mut p: Vec<f64> = (0..r * r).map(|k| p0[(k / r, k % r)]).collect();
    let mut af = vec![0.0; r];
    let mut pf = vec![0.0; r * r];
    let mut tmp = vec![0.0; r * r];
    let mut errors = Vec::with_capacity(y.len());
    let mut variances = Vec::with_capacity(y.len());

    for &obs in y {
        let f = p[0];
        if !(f.is_finite() && f > 1e-12) {
            return Err(Error::Numerical(format!("prediction variance collapsed to {f}")));
        }
        let v = obs - a[0];
        errors.push(v);
        variances.push(f);
        // update: a_f = a + P e1 v / F, P_f = P − P e1 e1ᵀ P / F
        for i in 0..r {
            af[i] = a[i] + p[i * r] * v / f;
        }
        for i in 0..r {
            for j in 0..r {
                pf[i * r + j] = p[i * r + j] - p[i * r] * p[j * r] / f;
            }
        }
        // predict: a = T a_f, P = T P_f Tᵀ + R Rᵀ
        for i in 0..r {
            a[i] = phi[i] * af[0] + if i + 1 < r { af[i + 1] } else { 0.0 };
        }
        // tmp = T P_f
        for i in 0..r {
            for j in 0..r {
                let next = if i + 1 < r { pf[(i + 1) * r + j] } else { 0.0 };
                tmp[i * r + j] = phi[i] * pf[j] + next;
            }
        }
        // P = tmp Tᵀ + R Rᵀ
        for i in 0..r {
            for j in 0..r {
                let next = if j + 1 < r { tmp[i * r + j + 1] } else { 0.0 };
                p[i * r + j] = tmp[i * r] * phi[j] + next + load[i] * load[j];
            }
        }
    }
    Ok(Innovations { errors, variances })
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub include_mean: bool,
    pub max_evaluations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            include_mean: true,
            max_evaluations: 6000,
        }
    }
}

/// Maximum-likelihood ARMA(p,q) fit by simplex search over transformed
/// (stationary, invertible) coefficients with the variance concentrated out.
pub fn fit_arma(values: &[f64], p: usize, q: usize, opts: FitOptions) -> Result<ArimaModel> {
    let n = values.len();
    if n < 10 * (p + q + 1) {
        return Err(Error::invalid(format!(
            "ARMA({p},{q}) needs at least {} observations, got {n}",
            10 * (p + q + 1)
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let sample_mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - sample_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::RankDeficient("series has zero variance".into()));
    }

    let unpack = |x: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let ar = unconstrained_to_coeffs(&x[..p]);
        let ma: Vec<f64> = unconstrained_to_coeffs(&x[p..p + q]).iter().map(|c| -c).collect();
        let mean = if opts.include_mean { x[p + q] } else { 0.0 };
        (ar, ma, mean)
    };
    let objective = |x: &[f64]| -> f64 {
        let (ar, ma, mean) = unpack(x);
        let y: Vec<f64> = values.iter().map(|v| v - mean).collect();
        match arma_innovations(&y, &ar, &ma) {
            Ok(inn) => -inn.concentrated_loglik().0,
            Err(_) => f64::INFINITY,
        }
    };

    let dim = p + q + usize::from(opts.include_mean);
    let mut steps = vec![0.3; p + q];
    if opts.include_mean {
        steps.push(0.5 * sd);
    }
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let base = |ar_u: f64, ma_u: f64| {
        let mut x = vec![ar_u; p];
        x.extend(std::iter::repeat_n(ma_u, q));
        if opts.include_mean {
            x.push(sample_mean);
        }
        x
    };
    starts.push(base(0.0, 0.0));
    if p > 0 && q > 0 {
        starts.push(base(0.6, 0.6));
        starts.push(base(0.6, -0.6));
        starts.push(base(-0.6, 0.6));
    } else if p + q > 0 {
        starts.push(base(0.8, 0.8));
    }

    let simplex = SimplexOptions {
        max_evaluations: opts.max_evaluations,
        f_tol: 1e-12,
        x_tol: 1e-7,
        restarts: 3,
    };
    let mut best: Option<crate::optim::Minimum> = None;
    for start in &starts {
        if dim == 0 {
            break;
        }
        let m = nelder_mead(objective, start, &steps, simplex);
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let x = match best {
        Some(m) => {
            if !m.value.is_finite() {
                return Err(Error::NotConverged {
                    evaluations: m.evaluations,
                    objective: m.value,
                    best: m.x,
                });
            }
            if !m.converged {
                return Err(Error::NotConverged {
                    evaluations: m.evaluations,
                    objective: m.value,
                    best: m.x,
                });
            }
            m.x
        }
        None => Vec::new(),
    };

    let (ar, ma, mean) = unpack(&x);
    let y: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let inn = arma_innovations(&y, &ar, &ma)?;
    let (loglik, sigma2) = inn.concentrated_loglik();
    let model = ArimaModel {
        p,
        d: 0,
        q,
        ar,
        ma,
        mean,
        include_mean: opts.include_mean,
        sigma2,
        loglik,
        n_obs: n,
    };
    model.validate()?;
    Ok(model)
}

/// Standardized one-step prediction errors of `model` on the (already
/// differenced) series.
pub fn standardized_residuals(model: &ArimaModel, differenced: &[f64]) -> Result<Vec<f64>> {
    let y: Vec<f64> = differenced.iter().map(|v| v - model.mean).collect();
    Ok(arma_innovations(&y, &model.ar, &model.ma)?.standardized())
}

#[derive(Debug, Clone)]
pub struct FittedArima {
    pub model: ArimaModel,
    pub residuals: Vec<f64>,
}

/// Differences `d` times and fits the ARMA part; a mean is estimated only
/// for `d = 0`.
pub fn fit_arima(values: &[f64], order: ArimaOrder) -> Result<FittedArima> {
    let diffed = difference(values, order.d)?;
    let opts = FitOptions {
        include_mean: order.d == 0,
        ..Default::default()
    };
    let mut model = fit_arma(&diffed, order.p, order.q, opts)?;
    model.d = order.d;
    let residuals = standardized_residuals(&model, &diffed)?;
    Ok(FittedArima { model, residuals })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRow {
    pub order: ArimaOrder,
    pub loglik: f64,
    pub aic: f64,
    pub boxljung_p: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub model: ArimaModel,
    pub residuals: Vec<f64>,
    pub table: Vec<DiagnosticsRow>,
    /// Set when no candidate passed the Box–Ljung test.
    pub warning: Option<String>,
    /// Candidates that failed to fit, with the reason.
    pub failures: Vec<(ArimaOrder, String)>,
}

#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    pub lags: usize,
    pub level: f64,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            lags: DEFAULT_LJUNG_LAGS,
            level: DEFAULT_LEVEL,
        }
    }
}

/// Fits every candidate and keeps the lowest AIC among those whose residuals
/// pass Box–Ljung at `level`; falls back to the lowest AIC overall.
pub fn select_model(values: &[f64], candidates: &[ArimaOrder], opts: SelectOptions) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate orders".into()));
    }
    let fits: Vec<(ArimaOrder, Result<(FittedArima, BoxLjung)>)> = candidates
        .par_iter()
        .map(|&order| {
            let res = fit_arima(values, order).and_then(|fit| {
                let bl = box_ljung(&fit.residuals, opts.lags, order.p + order.q)?;
                Ok((fit, bl))
            });
            (order, res)
        })
        .collect();

    let mut table = Vec::new();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (order, res) in fits {
        match res {
            Ok((fit, bl)) => {
                table.push(DiagnosticsRow {
                    order,
                    loglik: fit.model.loglik,
                    aic: aic(&fit.model),
                    boxljung_p: bl.p_value,
                });
                ok.push((fit, bl));
            }
            Err(e) => failures.push((order, e.to_string())),
        }
    }
    if ok.is_empty() {
        let detail = failures
            .iter()
            .map(|(o, e)| format!("{o}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Numerical(format!("every candidate failed to fit ({detail})")));
    }

    let best_of = |pool: Vec<&(FittedArima, BoxLjung)>| {
        pool.into_iter()
            .min_by(|a, b| aic(&a.0.model).total_cmp(&aic(&b.0.model)))
            .cloned()
    };
    let passing: Vec<_> = ok.iter().filter(|(_, bl)| bl.p_value > opts.level).collect();
    let (chosen, warning) = if passing.is_empty() {
        (
            best_of(ok.iter().collect()),
            Some(format!(
                "no candidate passed the Box-Ljung test at level {}; using the lowest AIC",
                opts.level
            )),
        )
    } else {
        (best_of(passing), None)
    };
    let (fit, _) = chosen.expect("non-empty pool");
    Ok(Selection {
        model: fit.model,
        residuals: fit.residuals,
        table,
        warning,
        failures,
    })
}

/// CSV with columns `model,loglik,aic,boxljung_p`; `preamble` lines become
/// `#` comments.
pub fn write_diagnostics_csv<W: std::io::Write>(
    rows: &[DiagnosticsRow],
    mut out: W,
    preamble: &[String],
) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "model,loglik,aic,boxljung_p")?;
    for r in rows {
        writeln!(out, "\"{}\",{},{},{}", r.order, r.loglik, r.aic, r.boxljung_p)?;
    }
    Ok(())
}

/// One-step ARMA recursion on the differenced scale.
#[derive(Debug, Clone)]
pub struct ArmaRecursion {
    ar: Vec<f64>,
    ma: Vec<f64>,
    mean: f64,
    sigma: f64,
    past_x: VecDeque<f64>,
    past_e: VecDeque<f64>,
}

impl ArmaRecursion {
    /// `past` holds the most recent observations, oldest first; missing
    /// history is taken at the mean. Past innovations start at zero.
    pub fn new(model: &ArimaModel, past: &[f64]) -> Self {
        let mut past_x: VecDeque<f64> = std::iter::repeat_n(model.mean, model.p).collect();
        for v in past.iter().rev().take(model.p).collect::<Vec<_>>().into_iter().rev() {
            past_x.pop_front();
            past_x.push_back(*v);
        }
        Self {
            ar: model.ar.clone(),
            ma: model.ma.clone(),
            mean: model.mean,
            sigma: model.sigma2.sqrt(),
            past_x,
            past_e: std::iter::repeat_n(0.0, model.q).collect(),
        }
    }

    /// Advances one step with standardized shock `z` (innovation `σ·z`).
    pub fn step(&mut self, z: f64) -> f64 {
        let e = self.sigma * z;
        let mut x = self.mean + e;
        let np = self.past_x.len();
        for (i, a) in self.ar.iter().enumerate() {
            x += a * (self.past_x[np - 1 - i] - self.mean);
        }
        let nq = self.past_e.len();
        for (j, b) in self.ma.iter().enumerate() {
            x += b * self.past_e[nq - 1 - j];
        }
        if np > 0 {
            self.past_x.pop_front();
            self.past_x.push_back(x);
        }
        if nq > 0 {
            self.past_e.pop_front();
            self.past_e.push_back(e);
        }
        x
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Simulates `n` observations: Gaussian innovations, a burn-in of
/// `10·(p+q+1)` steps discarded, then `d`-fold cumulative summation from
/// zero.
pub fn simulate_arima(model: &ArimaModel, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = path_rng(seed, 0);
    let mut rec = ArmaRecursion::new(model, &[]);
    for _ in 0..10 * (model.p + model.q + 1) {
        rec.step(standard_normal(&mut rng));
    }
    let diffs: Vec<f64> = (0..n).map(|_| rec.step(standard_normal(&mut rng))).collect();
    integrate_levels(diffs, model.d)
}

/// Simulation started from the given history (oldest first) with no burn-in.
pub fn simulate_arima_from(model: &ArimaModel, n: usize, seed: u64, past: &[f64]) -> Vec<f64> {
    let mut rng = path_rng(seed, 0);
    let mut rec = ArmaRecursion::new(model, past);
    let diffs: Vec<f64> = (0..n).map(|_| rec.step(standard_normal(&mut rng))).collect();
    integrate_levels(diffs, model.d)
}

fn integrate_levels(mut v: Vec<f64>, d: usize) -> Vec<f64> {
    for _ in 0..d {
        let mut acc = 0.0;
        for x in v.iter_mut() {
            acc += *x;
            *x = acc;
        }
    }
    v
}
