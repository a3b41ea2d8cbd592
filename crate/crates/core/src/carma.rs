//! Continuous-time ARMA processes in state-space form.
//!
//! A CARMA(p,q) process is `Y_t = Bᵀ X_t` with `dX = A X dt + σ e dW`, where
//! `A` is the companion matrix of `α(z) = z^p + α_1 z^{p−1} + … + α_p`,
//! `e = (0,…,0,1)` and `B = (b_0,…,b_q,0,…,0)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arima::ArimaModel;
use crate::error::{Error, Result};
use crate::linalg::{expm, polynomial_roots, psd_sqrt, solve_continuous_lyapunov, van_loan};
use crate::optim::{golden_section, nelder_mead, Minimum, SimplexOptions};
use crate::rng::{path_rng, standard_normal};

/// Rates with `α·h` beyond this are indistinguishable from white noise on
/// the sampling grid; the estimator does not search past it.
const MAX_RATE_STEPS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CarmaRecord", into = "CarmaRecord")]
pub struct CarmaModel {
    p: usize,
    q: usize,
    alpha: Vec<f64>,
    b: Vec<f64>,
    sigma: f64,
    h_native: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct CarmaRecord {
    p: usize,
    q: usize,
    alpha: Vec<f64>,
    b: Vec<f64>,
    sigma: f64,
    h_native: f64,
    stationary: bool,
}

impl From<CarmaModel> for CarmaRecord {
    fn from(m: CarmaModel) -> Self {
        let stationary = m.is_stationary();
        CarmaRecord {
            p: m.p,
            q: m.q,
            alpha: m.alpha,
            b: m.b,
            sigma: m.sigma,
            h_native: m.h_native,
            stationary,
        }
    }
}

impl TryFrom<CarmaRecord> for CarmaModel {
    type Error = Error;

    fn try_from(r: CarmaRecord) -> Result<Self> {
        if r.alpha.len() != r.p || r.b.len() != r.q + 1 {
            return Err(Error::Invariant(format!(
                "CARMA({},{}) needs {} alpha and {} b coefficients, found {} and {}",
                r.p,
                r.q,
                r.p,
                r.q + 1,
                r.alpha.len(),
                r.b.len()
            )));
        }
        let m = CarmaModel::new(r.alpha, r.b, r.sigma, r.h_native)?;
        if r.stationary && !m.is_stationary() {
            return Err(Error::Invariant(
                "model is flagged stationary but its companion matrix has eigenvalues with non-negative real part".into(),
            ));
        }
        Ok(m)
    }
}

impl CarmaModel {
    /// `b` holds `b_0..b_q`. Models with `p ≤ q` are refused: such processes
    /// are priced with the discrete ARIMA simulation instead.
    pub fn new(alpha: Vec<f64>, b: Vec<f64>, sigma: f64, h_native: f64) -> Result<Self> {
        let p = alpha.len();
        if p == 0 {
            return Err(Error::Invariant("a CARMA model needs p ≥ 1".into()));
        }
        if b.is_empty() {
            return Err(Error::Invariant("b must hold at least b_0".into()));
        }
        let q = b.len() - 1;
        if p <= q {
            return Err(Error::Unsupported(format!(
                "CARMA({p},{q}) has p ≤ q and no continuous state-space form; \
                 use Monte Carlo on the discrete ARMA model"
            )));
        }
        if alpha.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Invariant("CARMA coefficients must be finite".into()));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::Invariant(format!("sigma must be non-negative, got {sigma}")));
        }
        if !(h_native.is_finite() && h_native > 0.0) {
            return Err(Error::Invariant(format!("h_native must be positive, got {h_native}")));
        }
        Ok(Self {
            p,
            q,
            alpha,
            b,
            sigma,
            h_native,
        })
    }

    /// CAR(1), i.e. an Ornstein–Uhlenbeck process with mean-reversion `a`.
    pub fn car1(a: f64, sigma: f64, h_native: f64) -> Result<Self> {
        Self::new(vec![a], vec![1.0], sigma, h_native)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn h_native(&self) -> f64 {
        self.h_native
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.alpha.clone(), self.b.clone(), sigma, self.h_native)
    }

    /// All roots of `α(z)` (the eigenvalues of `A`) have negative real part.
    pub fn is_stationary(&self) -> bool {
        // α(z) in ascending powers: α_p, α_{p−1}, …, α_1, 1
        let mut coeffs: Vec<f64> = self.alpha.iter().rev().copied().collect();
        coeffs.push(1.0);
        polynomial_roots(&coeffs).iter().all(|(re, _)| *re < 0.0)
    }

    fn require_stationary(&self) -> Result<()> {
        if self.is_stationary() {
            Ok(())
        } else {
            Err(Error::NonStationary(format!("alpha = {:?}", self.alpha)))
        }
    }

    /// `(A, e)`.
    pub fn companion_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p;
        let mut a = DMatrix::<f64>::zeros(p, p);
        for i in 0..p - 1 {
            a[(i, i + 1)] = 1.0;
        }
        for j in 0..p {
            a[(p - 1, j)] = -self.alpha[p - 1 - j];
        }
        let mut e = DVector::<f64>::zeros(p);
        e[p - 1] = 1.0;
        (a, e)
    }

    /// Observation row `B = (b_0, …, b_q, 0, …, 0)`.
    pub fn observation(&self) -> DVector<f64> {
        let mut b = DVector::<f64>::zeros(self.p);
        for (i, v) in self.b.iter().enumerate() {
            b[i] = *v;
        }
        b
    }

    /// Solves `AΣ + ΣAᵀ + σ² e eᵀ = 0`.
    pub fn stationary_covariance(&self) -> Result<DMatrix<f64>> {
        self.require_stationary()?;
        let (a, e) = self.companion_matrix();
        let q = &e * e.transpose() * (self.sigma * self.sigma);
        solve_continuous_lyapunov(&a, &q)
    }

    /// Autocovariances `γ(s) = Bᵀ e^{A|s|} Σ B` at the given lags (minutes).
    pub fn acf(&self, lags: &[f64]) -> Result<Acf> {
        self.require_stationary()?;
        let (a, _) = self.companion_matrix();
        let sigma = self.stationary_covariance()?;
        let b = self.observation();
        let sb = &sigma * &b;
        let gamma0 = b.dot(&sb);
        let autocovariance: Vec<f64> = lags
            .iter()
            .map(|s| {
                if *s == 0.0 {
                    gamma0
                } else {
                    b.dot(&(expm(&(&a * s.abs())) * &sb))
                }
            })
            .collect();
        let autocorrelation = autocovariance
            .iter()
            .map(|g| if gamma0 > 0.0 { g / gamma0 } else { f64::NAN })
            .collect();
        Ok(Acf {
            autocovariance,
            autocorrelation,
        })
    }

    /// `f(ω) = σ² |β(iω)|² / (2π |α(iω)|²)`.
    pub fn spectral_density(&self, omega: f64) -> Result<f64> {
        self.require_stationary()?;
        // α(z) = z^p + α_1 z^{p−1} + … + α_p
        let mut alpha_poly = vec![1.0];
        alpha_poly.extend(&self.alpha);
        let num = poly_abs2_at_imag(&self.b.iter().rev().copied().collect::<Vec<_>>(), omega);
        let den = poly_abs2_at_imag(&alpha_poly, omega);
        Ok(self.sigma * self.sigma * num / (2.0 * std::f64::consts::PI * den))
    }

    /// Exact transition `(e^{Ah}, ∫_0^h e^{Au} σ² e eᵀ e^{Aᵀu} du)`.
    pub fn discretize(&self, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, e) = self.companion_matrix();
        let d = &e * e.transpose() * (self.sigma * self.sigma);
        van_loan(&a, &d, h)
    }

    /// First-order discrete AR coefficients on grid `h`; the inverse of
    /// [`map_discrete_to_continuous`] for `p ∈ {1, 2}`.
    pub fn forward_map(&self, h: f64) -> Result<Vec<f64>> {
        match self.alpha.as_slice() {
            [a1] => Ok(vec![1.0 - a1 * h]),
            [a1, a2] => Ok(vec![2.0 - a1 * h, a1 * h - 1.0 - a2 * h]),
            _ => Err(Error::Unsupported(format!(
                "the first-order coefficient map covers p ∈ {{1, 2}}, not p = {}",
                self.p
            ))),
        }
    }
}

/// `|c(iω)|²` for a real polynomial given highest power first.
fn poly_abs2_at_imag(coeffs_desc: &[f64], omega: f64) -> f64 {
    let (mut re, mut im) = (0.0f64, 0.0f64);
    for c in coeffs_desc {
        // (re + i·im)·(iω) + c
        let nre = -im * omega + c;
        let nim = re * omega;
        re = nre;
        im = nim;
    }
    re * re + im * im
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    pub autocovariance: Vec<f64>,
    pub autocorrelation: Vec<f64>,
}

/// Warm start for [`estimate_carma`] from a fitted discrete model.
///
/// The AR part is inverted from the first-order map; the MA part is fitted to
/// `empirical_acf` (lags `0, h, 2h, …`) when given, otherwise `b_1..b_q` start
/// at zero; `σ = √(σ²_innov / h)`. The result may be non-stationary.
pub fn map_discrete_to_continuous(
    arima: &ArimaModel,
    h: f64,
    q: usize,
    empirical_acf: Option<&[f64]>,
) -> Result<CarmaModel> {
    if arima.d > 1 {
        return Err(Error::Unsupported(format!(
            "only d ∈ {{0, 1}} is mapped to continuous time, got d = {}",
            arima.d
        )));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("h must be positive, got {h}")));
    }
    let alpha = match arima.ar.as_slice() {
        [a1] => vec![(1.0 - a1) / h],
        [a1, a2] => {
            let alpha1 = (2.0 - a1) / h;
            vec![alpha1, (alpha1 * h - 1.0 - a2) / h]
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "no closed coefficient map for p = {}; estimate the CARMA model directly with the Kalman filter",
                arima.p
            )))
        }
    };
    let p = alpha.len();
    if q >= p {
        return Err(Error::Unsupported(format!(
            "CARMA({p},{q}) has p ≤ q; use Monte Carlo on the discrete ARMA model"
        )));
    }
    let sigma = (arima.sigma2 / h).sqrt();
    let mut b = vec![1.0];
    match empirical_acf {
        Some(acf) if q > 0 => {
            let probe = CarmaModel::new(alpha.clone(), vec![1.0], 1.0, h)?;
            if probe.is_stationary() {
                b = estimate_ma_from_acf(acf, h, &alpha, q)?;
            } else {
                b.extend(std::iter::repeat_n(0.0, q));
            }
        }
        _ => b.extend(std::iter::repeat_n(0.0, q)),
    }
    CarmaModel::new(alpha, b, sigma, h)
}

/// Normalized model autocorrelations at lags `h, 2h, …, m·h`, computed with
/// one matrix exponential and repeated multiplication.
fn model_autocorrelations(alpha: &[f64], b: &[f64], h: f64, m: usize) -> Option<Vec<f64>> {
    let model = CarmaModel::new(alpha.to_vec(), b.to_vec(), 1.0, h).ok()?;
    if !model.is_stationary() {
        return None;
    }
    let (a, _) = model.companion_matrix();
    let sigma = model.stationary_covariance().ok()?;
    let obs = model.observation();
    let f = expm(&(&a * h));
    let mut v = &sigma * &obs;
    let gamma0 = obs.dot(&v);
    if !(gamma0 > 0.0) {
        return None;
    }
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        v = &f * v;
        out.push(obs.dot(&v) / gamma0);
    }
    Some(out)
}

fn minimum_phase(b: &[f64]) -> bool {
    polynomial_roots(b).iter().all(|(re, _)| *re < 0.0)
}

/// Least-absolute-deviation fit of `b_1..b_q` (with `b_0 = 1`) to the
/// empirical autocorrelations at lags `h, 2h, …`.
///
/// The autocorrelation function only identifies `β` up to reflection of its
/// roots, so the search is restricted to minimum-phase `β` (all roots in the
/// left half-plane). `empirical_acf[0]` is the lag-zero value.
pub fn estimate_ma_from_acf(empirical_acf: &[f64], h: f64, alpha: &[f64], q: usize) -> Result<Vec<f64>> {
    let p = alpha.len();
    if q >= p {
        return Err(Error::Unsupported(format!("MA order {q} must be below the AR order {p}")));
    }
    if q == 0 {
        return Ok(vec![1.0]);
    }
    if empirical_acf.len() < 2 * (q + 1) + 1 {
        return Err(Error::invalid(format!(
            "need the empirical ACF at {} lags beyond zero, got {}",
            2 * (q + 1),
            empirical_acf.len().saturating_sub(1)
        )));
    }
    let g0 = empirical_acf[0];
    if !(g0.is_finite() && g0 > 0.0) {
        return Err(Error::invalid("empirical ACF must have a positive lag-zero value"));
    }
    let target: Vec<f64> = empirical_acf[1..].iter().map(|g| g / g0).collect();
    let m = target.len();
    let objective = |x: &[f64]| -> f64 {
        let mut b = vec![1.0];
        if q == 1 {
            b.push(x[0].abs());
        } else {
            b.extend_from_slice(x);
            if !minimum_phase(&b) {
                return f64::INFINITY;
            }
        }
        match model_autocorrelations(alpha, &b, h, m) {
            Some(rho) => rho.iter().zip(&target).map(|(a, t)| (a - t).abs()).sum(),
            None => f64::INFINITY,
        }
    };

    // A fixed grid of starting points keeps the result deterministic.
    let grid = [0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 15.0];
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if q == 1 {
        starts.extend(grid.iter().map(|g| vec![*g]));
    } else {
        for g in grid {
            // β(z) = (1 + g z)^q has all roots at −1/g.
            let mut c = vec![1.0];
            for _ in 0..q {
                let mut next = vec![0.0; c.len() + 1];
                for (i, v) in c.iter().enumerate() {
                    next[i] += v;
                    next[i + 1] += v * g;
                }
                c = next;
            }
            starts.push(c[1..].to_vec());
        }
    }
    let opts = SimplexOptions {
        max_evaluations: 2000,
        f_tol: 1e-14,
        x_tol: 1e-10,
        restarts: 3,
    };
    let mut best: Option<Minimum> = None;
    for s in &starts {
        let steps: Vec<f64> = s.iter().map(|v| 0.25 * v.abs().max(0.05)).collect();
        let m = nelder_mead(objective, s, &steps, opts);
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start");
    if !best.value.is_finite() {
        return Err(Error::NotConverged {
            evaluations: best.evaluations,
            objective: best.value,
            best: best.x,
        });
    }
    let mut b = vec![1.0];
    if q == 1 {
        b.push(best.x[0].abs());
    } else {
        b.extend_from_slice(&best.x);
    }
    Ok(b)
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    /// Filtered state after each observation.
    pub filtered_states: Vec<Vec<f64>>,
    /// `E[y_t | y_0..y_{t−1}]`.
    pub one_step_predictions: Vec<f64>,
    /// Prediction-error variances.
    pub prediction_variances: Vec<f64>,
    pub innovation_mse: f64,
}

impl KalmanOutput {
    pub fn innovations<'a>(&'a self, values: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        values.iter().zip(&self.one_step_predictions).map(|(y, f)| y - f)
    }

    /// Innovations divided by their predicted standard deviation.
    pub fn standardized_innovations(&self, values: &[f64]) -> Vec<f64> {
        self.innovations(values)
            .zip(&self.prediction_variances)
            .map(|(v, f)| if *f > 0.0 { v / f.sqrt() } else { 0.0 })
            .collect()
    }
}

/// Variances below this fraction of the stationary variance are treated as
/// exact knowledge and the update is skipped.
const DEGENERATE_VARIANCE: f64 = 1e-14;

/// Kalman filter for noise-free observations `y = Bᵀx` of the exactly
/// discretized state on grid `h`, started from the stationary law.
pub fn kalman_filter(values: &[f64], model: &CarmaModel, h: f64) -> Result<KalmanOutput> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    model.require_stationary()?;
    let run = KalmanRun::new(model, h)?;
    Ok(run.filter(values, true))
}

struct KalmanRun {
    p: usize,
    f: Vec<f64>,
    q: Vec<f64>,
    p0: Vec<f64>,
    b: Vec<f64>,
    scale: f64,
}

impl KalmanRun {
    fn new(model: &CarmaModel, h: f64) -> Result<Self> {
        let p = model.p;
        let (f, q) = model.discretize(h);
        let sigma = model.stationary_covariance()?;
        let b = model.observation();
        let scale = b.dot(&(&sigma * &b));
        let flat = |m: &DMatrix<f64>| (0..p * p).map(|k| m[(k / p, k % p)]).collect::<Vec<_>>();
        Ok(Self {
            p,
            f: flat(&f),
            q: flat(&q),
            p0: flat(&sigma),
            b: b.iter().copied().collect(),
            scale,
        })
    }

    fn filter(&self, values: &[f64], keep_states: bool) -> KalmanOutput {
        let p = self.p;
        let mut a = vec![0.0; p];
        let mut pm = self.p0.clone();
        let mut pb = vec![0.0; p];
        let mut af = vec![0.0; p];
        let mut pf = vec![0.0; p * p];
        let mut tmp = vec![0.0; p * p];
        let mut states = Vec::with_capacity(if keep_states { values.len() } else { 0 });
        let mut preds = Vec::with_capacity(values.len());
        let mut vars = Vec::with_capacity(values.len());
        let mut sse = 0.0;
        let tiny = DEGENERATE_VARIANCE * self.scale.max(f64::MIN_POSITIVE);

        for &y in values {
            for i in 0..p {
                pb[i] = (0..p).map(|j| pm[i * p + j] * self.b[j]).sum();
            }
            let pred: f64 = (0..p).map(|i| self.b[i] * a[i]).sum();
            let fvar: f64 = (0..p).map(|i| self.b[i] * pb[i]).sum();
            let v = y - pred;
            preds.push(pred);
            vars.push(fvar.max(0.0));
            sse += v * v;
            if fvar > tiny {
                for i in 0..p {
                    af[i] = a[i] + pb[i] * v / fvar;
                }
                for i in 0..p {
                    for j in 0..p {
                        pf[i * p + j] = pm[i * p + j] - pb[i] * pb[j] / fvar;
                    }
                }
            } else {
                af.copy_from_slice(&a);
                pf.copy_from_slice(&pm);
            }
            if keep_states {
                states.push(af.clone());
            }
            for i in 0..p {
                a[i] = (0..p).map(|j| self.f[i * p + j] * af[j]).sum();
            }
            for i in 0..p {
                for j in 0..p {
                    tmp[i * p + j] = (0..p).map(|k| self.f[i * p + k] * pf[k * p + j]).sum();
                }
            }
            for i in 0..p {
                for j in 0..p {
                    let v: f64 = (0..p).map(|k| tmp[i * p + k] * self.f[j * p + k]).sum();
                    pm[i * p + j] = v + self.q[i * p + j];
                }
            }
        }
        KalmanOutput {
            filtered_states: states,
            one_step_predictions: preds,
            prediction_variances: vars,
            innovation_mse: if values.is_empty() { 0.0 } else { sse / values.len() as f64 },
        }
    }
}

/// Innovation MSE of the filter for the given model, or `+∞` when the model
/// is not admissible.
pub fn innovation_mse(values: &[f64], model: &CarmaModel, h: f64) -> f64 {
    if !model.is_stationary() {
        return f64::INFINITY;
    }
    match KalmanRun::new(model, h) {
        Ok(run) => run.filter(values, false).innovation_mse,
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct CarmaEstimate {
    pub model: CarmaModel,
    pub objective: f64,
    pub init_objective: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    pub max_evaluations: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            max_evaluations: 2000,
        }
    }
}

/// Minimizes the Kalman innovation MSE over `(α, b_1..b_q)` from `init`.
///
/// The noise-free filter's predictions do not depend on `σ`, so `σ` is set
/// afterwards to the value that makes the standardized innovations unit
/// variance (the Gaussian maximum-likelihood scale for the fitted `α, b`).
pub fn estimate_carma(
    values: &[f64],
    p: usize,
    q: usize,
    h: f64,
    init: &CarmaModel,
    opts: EstimateOptions,
) -> Result<CarmaEstimate> {
    if init.p != p || init.q != q {
        return Err(Error::invalid(format!(
            "initial model is CARMA({},{}), requested CARMA({p},{q})",
            init.p, init.q
        )));
    }
    if values.len() < 10 * (p + q + 1) {
        return Err(Error::invalid(format!(
            "{} observations are too few for CARMA({p},{q})",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("series contains non-finite values"));
    }
    let reference_sigma = if init.sigma > 0.0 { init.sigma } else { 1.0 };
    let build = |x: &[f64]| -> Option<CarmaModel> {
        let alpha = x[..p].to_vec();
        if alpha.iter().any(|a| a * h > MAX_RATE_STEPS) {
            return None;
        }
        let mut b = vec![1.0];
        b.extend_from_slice(&x[p..]);
        if q > 0 && !minimum_phase(&b) {
            return None;
        }
        CarmaModel::new(alpha, b, reference_sigma, h).ok()
    };
    let objective = |x: &[f64]| -> f64 {
        match build(x) {
            Some(m) => innovation_mse(values, &m, h),
            None => f64::INFINITY,
        }
    };

    let mut x0: Vec<f64> = init.alpha.clone();
    x0.extend_from_slice(&init.b[1..]);
    let init_objective = objective(&x0);
    let steps: Vec<f64> = x0.iter().map(|v| 0.1 * v.abs().max(0.01)).collect();

    let simplex = SimplexOptions {
        max_evaluations: opts.max_evaluations,
        f_tol: 1e-12,
        x_tol: 1e-9,
        restarts: 3,
    };
    let result = if p + q == 1 {
        one_dimensional(&objective, x0[0], opts.max_evaluations)
    } else {
        nelder_mead(&objective, &x0, &steps, simplex)
    };
    let (x, objective_value) = if result.value <= init_objective || !init_objective.is_finite() {
        (result.x.clone(), result.value)
    } else {
        (x0.clone(), init_objective)
    };
    let model = build(&x).ok_or_else(|| {
        Error::NonStationary("no stationary CARMA model found near the initial value".into())
    })?;
    if !objective_value.is_finite() {
        return Err(Error::NonStationary(
            "the Kalman objective is infinite at every visited point".into(),
        ));
    }

    let run = KalmanRun::new(&model, h)?;
    let out = run.filter(values, false);
    let ratio = out
        .innovations(values)
        .zip(&out.prediction_variances)
        .filter(|(_, f)| **f > 0.0)
        .map(|(v, f)| v * v / f)
        .sum::<f64>()
        / values.len() as f64;
    let sigma = reference_sigma * ratio.sqrt();
    let model = model.with_sigma(sigma)?;

    let mut warning = (!result.converged).then(|| {
        format!(
            "CARMA search stopped after {} evaluations without meeting the tolerance",
            result.evaluations
        )
    });
    if model.alpha.iter().any(|a| a * h > 0.99 * MAX_RATE_STEPS) {
        // A sampled CAR process cannot have negative lag-one correlation, so
        // data that does ends up at the fastest admissible rate.
        warning = Some(format!(
            "CARMA rate reached the bound alpha*h = {MAX_RATE_STEPS}; the sampled series is close to white noise"
        ));
    }
    Ok(CarmaEstimate {
        model,
        objective: objective_value,
        init_objective,
        evaluations: result.evaluations,
        converged: result.converged,
        warning,
    })
}

/// Bracketing plus golden-section search for the single-rate case.
fn one_dimensional<F: Fn(&[f64]) -> f64>(f: &F, x0: f64, budget: usize) -> Minimum {
    let g = |x: f64| f(&[x]);
    let mut evals = 0usize;
    let start = if x0.is_finite() && x0 > 0.0 { x0 } else { 0.1 };
    let mut lo = start / 4.0;
    let mut hi = start * 4.0;
    // Grow the interval until the interior point beats both ends.
    let mut mid = start;
    let (mut flo, mut fmid, mut fhi) = (g(lo), g(mid), g(hi));
    evals += 3;
    while evals < budget / 2 && !(fmid <= flo && fmid <= fhi) {
        if flo < fmid {
            hi = mid;
            fhi = fmid;
            mid = lo;
            fmid = flo;
            lo /= 4.0;
            flo = g(lo);
        } else {
            lo = mid;
            flo = fmid;
            mid = hi;
            fmid = fhi;
            hi *= 4.0;
            fhi = g(hi);
        }
        evals += 1;
        if lo < 1e-12 || !hi.is_finite() {
            break;
        }
    }
    let converged = fmid <= flo && fmid <= fhi;
    let mut count = 0usize;
    let (x, fx) = golden_section(
        |x| {
            count += 1;
            g(x)
        },
        lo,
        hi,
        1e-10 * mid.abs().max(1e-8),
        (budget - evals.min(budget)).max(10),
    );
    let (x, fx) = [(x, fx), (mid, fmid), (lo, flo), (hi, fhi)]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    Minimum {
        x: vec![x],
        value: fx,
        evaluations: evals + count,
        converged,
    }
}

/// A simulated CARMA path on a uniform grid.
#[derive(Debug, Clone)]
pub struct CarmaPath {
    pub h: f64,
    pub p: usize,
    /// `Y_k = Bᵀ X_k`, `k = 0..n`.
    pub values: Vec<f64>,
    /// Row-major `n × p` states.
    pub states: Vec<f64>,
}

impl CarmaPath {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.p..(k + 1) * self.p]
    }

    /// CSV with columns `t,value,state_0..state_{p−1}`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}")?;
        }
        write!(out, "t,value")?;
        for i in 0..self.p {
            write!(out, ",state_{i}")?;
        }
        writeln!(out)?;
        for (k, v) in self.values.iter().enumerate() {
            write!(out, "{},{}", k as f64 * self.h, v)?;
            for s in self.state(k) {
                write!(out, ",{s}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Exact simulation on grid `h`: `X_{k+1} = e^{Ah} X_k + η_k` with
/// Gaussian `η_k` of the integrated covariance. Without `x0` the path starts
/// from a draw of the stationary law.
pub fn simulate_carma(model: &CarmaModel, h: f64, n: usize, seed: u64, x0: Option<&[f64]>) -> Result<CarmaPath> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("h must be positive, got {h}")));
    }
    model.require_stationary()?;
    let p = model.p;
    let (f, q) = model.discretize(h);
    let l = psd_sqrt(&q);
    let obs = model.observation();
    let mut rng = path_rng(seed, 0);

    let mut x = match x0 {
        Some(x0) => {
            if x0.len() != p {
                return Err(Error::invalid(format!("initial state needs {p} entries, got {}", x0.len())));
            }
            DVector::from_column_slice(x0)
        }
        None => {
            let ls = psd_sqrt(&model.stationary_covariance()?);
            let z = DVector::from_fn(p, |_, _| standard_normal(&mut rng));
            ls * z
        }
    };
    let mut values = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n * p);
    let mut z = DVector::<f64>::zeros(p);
    for k in 0..n {
        if k > 0 {
            for zi in z.iter_mut() {
                *zi = standard_normal(&mut rng);
            }
            x = &f * &x + &l * &z;
        }
        values.push(obs.dot(&x));
        states.extend(x.iter());
    }
    Ok(CarmaPath { h, p, values, states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::{sample_acf, ArimaOrder};

    fn car2() -> CarmaModel {
        CarmaModel::new(vec![0.2071, 0.0326], vec![1.0], 1.0, 5.0).unwrap()
    }

    fn carma21() -> CarmaModel {
        CarmaModel::new(vec![1.2, 0.3], vec![1.0, 0.8], 1.0, 1.0).unwrap()
    }

    #[test]
    fn companion_layouts() {
        let (a, e) = CarmaModel::car1(0.25, 1.0, 5.0).unwrap().companion_matrix();
        assert_eq!(a[(0, 0)], -0.25);
        assert_eq!(e[0], 1.0);
        let (a, e) = CarmaModel::new(vec![0.3, 0.7], vec![1.0], 1.0, 1.0).unwrap().companion_matrix();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.7, -0.3]));
        assert_eq!(e.as_slice(), &[0.0, 1.0]);
        let (a, _) = CarmaModel::new(vec![1.0, 2.0, 3.0], vec![1.0], 1.0, 1.0).unwrap().companion_matrix();
        assert_eq!(a.row(2).iter().copied().collect::<Vec<_>>(), vec![-3.0, -2.0, -1.0]);
        assert_eq!((a[(0, 1)], a[(1, 2)]), (1.0, 1.0));
    }

    #[test]
    fn p_not_above_q_is_refused() {
        let err = CarmaModel::new(vec![0.5], vec![1.0, 0.3], 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn published_coefficient_maps() {
        let ar1 = ArimaModel::new(ArimaOrder::new(1, 1, 0), vec![-0.0326], vec![], 1.0).unwrap();
        let m = map_discrete_to_continuous(&ar1, 5.0, 0, None).unwrap();
        assert!((m.alpha()[0] - 0.20652).abs() < 1e-12);
        let ar2 = ArimaModel::new(ArimaOrder::new(2, 0, 0), vec![0.9646, -0.1275], vec![], 1.0).unwrap();
        let m = map_discrete_to_continuous(&ar2, 5.0, 0, None).unwrap();
        assert!((m.alpha()[0] - 0.20708).abs() < 1e-12);
        assert!((m.alpha()[1] - 0.03258).abs() < 1e-12);
        let fwd = CarmaModel::car1(0.5, 1.0, 0.1).unwrap().forward_map(0.1).unwrap();
        assert!((fwd[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn forward_then_inverse_map_is_identity() {
        for alpha in [vec![0.37], vec![0.21, 0.033]] {
            let m = CarmaModel::new(alpha.clone(), vec![1.0], 1.0, 5.0).unwrap();
            let ar = m.forward_map(5.0).unwrap();
            let order = ArimaOrder::new(ar.len(), 0, 0);
            let back = map_discrete_to_continuous(&ArimaModel::new(order, ar, vec![], 1.0).unwrap(), 5.0, 0, None)
                .unwrap();
            for (a, b) in back.alpha().iter().zip(&alpha) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mapped_sigma_scales_innovation_variance() {
        let ar = ArimaModel::new(ArimaOrder::new(1, 0, 0), vec![0.5], vec![], 2.5).unwrap();
        let m = map_discrete_to_continuous(&ar, 5.0, 0, None).unwrap();
        assert!((m.sigma() - 0.5f64.sqrt()).abs() < 1e-15);
        let ar3 = ArimaModel::new(ArimaOrder::new(3, 0, 0), vec![0.1, 0.1, 0.1], vec![], 1.0).unwrap();
        assert!(matches!(map_discrete_to_continuous(&ar3, 5.0, 0, None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn non_stationary_warm_start_is_returned() {
        // a_1 = 1.5 maps to a negative rate.
        let ar = ArimaModel::new(ArimaOrder::new(1, 0, 0), vec![1.5], vec![], 1.0).unwrap();
        let m = map_discrete_to_continuous(&ar, 5.0, 0, None).unwrap();
        assert!(!m.is_stationary());
        assert!(m.stationary_covariance().is_err());
    }

    #[test]
    fn car1_covariance_is_scalar_lyapunov() {
        let m = CarmaModel::car1(0.25, 1.5, 5.0).unwrap();
        let s = m.stationary_covariance().unwrap();
        assert!((s[(0, 0)] - 1.5 * 1.5 / 0.5).abs() < 1e-13);
    }

    #[test]
    fn car2_covariance_matches_quadrature() {
        let m = car2();
        let s = m.stationary_covariance().unwrap();
        let (a, e) = m.companion_matrix();
        // Simpson's rule on [0, 500] with a step small against every time scale.
        let n = 50_000;
        let du = 500.0 / n as f64;
        let step = expm(&(&a * du));
        let mut phi = DMatrix::<f64>::identity(2, 2);
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for k in 0..=n {
            let v = &phi * &e;
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += &v * v.transpose() * w;
            phi = &step * phi;
        }
        acc *= du / 3.0;
        assert!((acc - s).abs().max() < 1e-6);
    }

    #[test]
    fn acf_car1_is_exponential_and_symmetric() {
        let m = CarmaModel::car1(0.25, 1.0, 5.0).unwrap();
        let acf = m.acf(&[0.0, 5.0, -5.0, 12.5]).unwrap();
        assert!((acf.autocorrelation[1] - (-1.25f64).exp()).abs() < 1e-14);
        assert_eq!(acf.autocovariance[1], acf.autocovariance[2]);
        assert!((acf.autocorrelation[3] - (-3.125f64).exp()).abs() < 1e-14);
        assert!(acf.autocovariance[0] > 0.0);
    }

    #[test]
    fn acf_at_zero_is_quadratic_form() {
        let m = carma21();
        let s = m.stationary_covariance().unwrap();
        let b = m.observation();
        let g0 = m.acf(&[0.0]).unwrap().autocovariance[0];
        assert!((g0 - b.dot(&(&s * &b))).abs() < 1e-12);
    }

    #[test]
    fn carma21_acf_matches_long_simulation() {
        let m = carma21();
        let path = simulate_carma(&m, 1.0, 1_000_000, 21, None).unwrap();
        let theory = m.acf(&[0.0, 5.0, 10.0]).unwrap();
        let n = path.values.len() as f64;
        let mean = path.values.iter().sum::<f64>() / n;
        let cov = |k: usize| {
            path.values
                .iter()
                .zip(&path.values[k..])
                .map(|(a, b)| (a - mean) * (b - mean))
                .sum::<f64>()
                / n
        };
        // Bartlett-style standard error for a short-memory process.
        let rho: Vec<f64> = m
            .acf(&(1..200).map(|k| k as f64).collect::<Vec<_>>())
            .unwrap()
            .autocorrelation;
        let long_run: f64 = 1.0 + 2.0 * rho.iter().map(|r| r * r).sum::<f64>();
        for (i, k) in [0usize, 5, 10].into_iter().enumerate() {
            let se = theory.autocovariance[0] * (2.0 * long_run / n).sqrt();
            let diff = (cov(k) - theory.autocovariance[i]).abs();
            assert!(diff < 3.0 * se, "lag {k}: {diff} vs se {se}");
        }
    }

    #[test]
    fn spectral_density_closed_form_and_parity() {
        let m = CarmaModel::car1(0.25, 1.3, 5.0).unwrap();
        for w in [0.0, 0.1, 2.0] {
            let f = m.spectral_density(w).unwrap();
            let exact = 1.69 / (2.0 * std::f64::consts::PI * (0.0625 + w * w));
            assert!((f - exact).abs() < 1e-14);
        }
        let m = carma21();
        assert_eq!(m.spectral_density(0.7).unwrap(), m.spectral_density(-0.7).unwrap());
    }

    #[test]
    fn spectral_density_integrates_to_variance() {
        let m = carma21();
        let g0 = m.acf(&[0.0]).unwrap().autocovariance[0];
        // Substitute ω = tan(u) to map the real line onto (−π/2, π/2).
        let n = 200_000;
        let du = std::f64::consts::PI / n as f64;
        let total: f64 = (0..n)
            .map(|k| {
                let u = -std::f64::consts::FRAC_PI_2 + (k as f64 + 0.5) * du;
                let w = u.tan();
                m.spectral_density(w).unwrap() * (1.0 + w * w) * du
            })
            .sum();
        assert!((total - g0).abs() < 1e-4 * g0);
    }

    #[test]
    fn ma_from_exact_acf_recovers_b() {
        let m = carma21();
        let lags: Vec<f64> = (0..=8).map(|k| k as f64).collect();
        let acf = m.acf(&lags).unwrap().autocovariance;
        let b = estimate_ma_from_acf(&acf, 1.0, m.alpha(), 1).unwrap();
        assert!((b[1] - 0.8).abs() < 1e-4, "{b:?}");
        assert_eq!(estimate_ma_from_acf(&acf, 1.0, &[0.3], 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn ma_from_simulated_acf() {
        let m = carma21();
        let hits = (0..10u64)
            .filter(|seed| {
                let path = simulate_carma(&m, 1.0, 100_000, 300 + seed, None).unwrap();
                let acf = sample_acf(&path.values, 8);
                let b = estimate_ma_from_acf(&acf, 1.0, m.alpha(), 1).unwrap();
                (b[1] - 0.8).abs() < 0.1
            })
            .count();
        assert!(hits >= 8, "{hits}/10");
    }

    #[test]
    fn zero_noise_simulation_is_deterministic_decay() {
        let m = CarmaModel::new(vec![0.5, 0.2], vec![1.0], 0.0, 1.0).unwrap();
        let path = simulate_carma(&m, 1.0, 6, 3, Some(&[1.0, -0.5])).unwrap();
        let (a, _) = m.companion_matrix();
        let x0 = DVector::from_column_slice(&[1.0, -0.5]);
        for k in 0..6 {
            let x = expm(&(&a * k as f64)) * &x0;
            assert!((path.state(k)[0] - x[0]).abs() < 1e-12);
            assert!((path.state(k)[1] - x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn simulation_is_seeded() {
        let m = car2();
        let a = simulate_carma(&m, 5.0, 100, 4, None).unwrap();
        let b = simulate_carma(&m, 5.0, 100, 4, None).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn subsampled_simulation_matches_coarse_grid() {
        let m = car2();
        let fine = simulate_carma(&m, 5.0, 400_000, 8, None).unwrap();
        let sub: Vec<f64> = fine.values.iter().step_by(2).copied().collect();
        let coarse = simulate_carma(&m, 10.0, 200_000, 9, None).unwrap().values;
        let stats = |v: &[f64]| {
            let acf = sample_acf(v, 1);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (var, acf[1])
        };
        let (v1, r1) = stats(&sub);
        let (v2, r2) = stats(&coarse);
        assert!((v1 - v2).abs() < 0.05 * v2, "{v1} vs {v2}");
        assert!((r1 - r2).abs() < 0.02, "{r1} vs {r2}");
    }

    #[test]
    fn car1_variance_from_simulation() {
        let m = CarmaModel::car1(0.25, 1.0, 5.0).unwrap();
        let path = simulate_carma(&m, 5.0, 200_000, 17, None).unwrap();
        let n = path.values.len() as f64;
        let mean = path.values.iter().sum::<f64>() / n;
        let var = path.values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 2.0).abs() < 0.05 * 2.0);
    }

    #[test]
    fn kalman_tracks_noiseless_car1() {
        let m = CarmaModel::car1(0.25, 1.0, 5.0).unwrap();
        let path = simulate_carma(&m, 5.0, 500, 2, None).unwrap();
        let out = kalman_filter(&path.values, &m, 5.0).unwrap();
        for (s, y) in out.filtered_states.iter().zip(&path.values) {
            assert!((s[0] - y).abs() < 1e-9);
        }
        for (k, pred) in out.one_step_predictions.iter().enumerate().skip(1) {
            assert!((pred - (-1.25f64).exp() * path.values[k - 1]).abs() < 1e-12);
        }
        assert!(out.innovation_mse >= 0.0);
    }

    #[test]
    fn kalman_on_zero_data_stays_at_zero() {
        let m = CarmaModel::new(vec![0.5, 0.2], vec![1.0, 0.4], 1e6, 1.0).unwrap();
        let out = kalman_filter(&[0.0; 50], &m, 1.0).unwrap();
        for s in &out.filtered_states {
            assert!(s.iter().all(|v| v.abs() < 1e-6));
        }
        assert!(kalman_filter(&[0.0, f64::NAN], &m, 1.0).is_err());
    }

    #[test]
    fn kalman_innovations_are_white_for_true_model() {
        let m = carma21();
        let passes = (0..10u64)
            .filter(|seed| {
                let path = simulate_carma(&m, 1.0, 3000, 900 + seed, None).unwrap();
                let out = kalman_filter(&path.values, &m, 1.0).unwrap();
                let z = out.standardized_innovations(&path.values);
                crate::arima::box_ljung(&z, 20, 0).unwrap().p_value > 0.05
            })
            .count();
        assert!(passes > 5, "{passes}/10");
    }

    #[test]
    fn estimate_car1_matches_scan() {
        let truth = CarmaModel::car1(0.25, 1.0, 5.0).unwrap();
        let path = simulate_carma(&truth, 5.0, 4000, 5, None).unwrap();
        let init = CarmaModel::car1(0.2, 1.0, 5.0).unwrap();
        let est = estimate_carma(&path.values, 1, 0, 5.0, &init, EstimateOptions::default()).unwrap();
        let (scan, _) = golden_section(
            |a| innovation_mse(&path.values, &CarmaModel::car1(a, 1.0, 5.0).unwrap(), 5.0),
            0.01,
            2.0,
            1e-9,
            500,
        );
        assert!((est.model.alpha()[0] - scan).abs() < 1e-3);
        assert!(est.objective <= est.init_objective);
        assert!((est.model.sigma() - 1.0).abs() < 0.1, "{}", est.model.sigma());
    }

    #[test]
    fn estimate_from_truth_barely_moves() {
        let truth = CarmaModel::new(vec![0.5, 0.1], vec![1.0, 2.0], 1.0, 1.0).unwrap();
        let path = simulate_carma(&truth, 1.0, 80_000, 12, None).unwrap();
        let est = estimate_carma(&path.values, 2, 1, 1.0, &truth, EstimateOptions::default()).unwrap();
        let moved = est
            .model
            .alpha()
            .iter()
            .chain(&est.model.b()[1..])
            .zip(truth.alpha().iter().chain(&truth.b()[1..]))
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 0.05, "{:?} {:?}", est.model.alpha(), est.model.b());
        assert!(est.objective <= est.init_objective);
    }

    #[test]
    fn true_parameters_nearly_minimize_mse() {
        let truth = CarmaModel::car1(0.25, 1.0, 5.0).unwrap();
        let path = simulate_carma(&truth, 5.0, 8640, 31, None).unwrap();
        let at_truth = innovation_mse(&path.values, &truth, 5.0);
        let best = (0..41)
            .map(|i| 0.15 + 0.005 * i as f64)
            .map(|a| innovation_mse(&path.values, &CarmaModel::car1(a, 1.0, 5.0).unwrap(), 5.0))
            .fold(f64::INFINITY, f64::min);
        assert!(at_truth <= 1.05 * best);
    }

    #[test]
    fn record_flags_are_checked() {
        let m = CarmaModel::new(vec![-0.1], vec![1.0], 1.0, 5.0).unwrap();
        let rec = CarmaRecord {
            stationary: true,
            ..CarmaRecord::from(m)
        };
        assert!(CarmaModel::try_from(rec).is_err());
    }
}
