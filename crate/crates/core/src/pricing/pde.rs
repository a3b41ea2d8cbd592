//! Explicit finite-difference solver for the CAR(1) Asian call.
//!
//! State `(x, y, z)`: `dx = (−a x + θσ) dt + σ dW`, `dy = x dt`, and
//! `dz = y dt` while the averaging window is open. The value solves
//!
//! `v_τ = ½σ² v_xx + (−a x + θσ) v_x + x v_y + 1_window · y v_z − r v`
//!
//! with `v(τ = 0) = (z − K)⁺`. Diffusion and drift in `x` use central
//! differences; the pure transport in `y` and `z` is upwinded (second
//! order, first order next to the edges). Time stepping is SSP-RK3.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Method, PriceQuote, ThetaSchedule};
use crate::error::{Error, Result};
use crate::linalg::{integrated_exponential, van_loan};

/// Largest admissible `dt·(σ²/dx² + max|drift|/dx + max|x|/dy + max|y|/dz)`.
pub const CFL_LIMIT: f64 = 0.5;
/// Safety factor used when the time step is chosen automatically.
const AUTO_CFL: f64 = 0.4;
/// Refuse problems whose stability bound needs more time steps than this.
pub const MAX_STEPS: usize = 200_000;
const COVERAGE_SD: f64 = 4.0;
const MIN_NODES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, n: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::invalid(format!("axis bounds [{min}, {max}] are not increasing")));
        }
        if n < MIN_NODES {
            return Err(Error::invalid(format!("an axis needs at least {MIN_NODES} nodes, got {n}")));
        }
        Ok(Self { min, max, n })
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step()
    }

    fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    /// Lower cell index and weight of the upper node.
    fn locate(&self, v: f64) -> (usize, f64) {
        let s = (v - self.min) / self.step();
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64)
    }
}

/// The CAR(1) Asian call: pays `(z_T − K)⁺` at the end of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct AsianCall {
    pub a: f64,
    pub sigma: f64,
    pub theta: f64,
    /// Rate per unit time.
    pub r: f64,
    pub strike: f64,
    /// `(x, y, z)` at valuation time.
    pub spot: [f64; 3],
    /// Time from valuation to the window start.
    pub delay: f64,
    /// Window length.
    pub duration: f64,
}

impl AsianCall {
    fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::NonStationary(format!("CAR(1) rate must be positive, got {}", self.a)));
        }
        let finite = [self.sigma, self.theta, self.r, self.strike, self.delay, self.duration]
            .iter()
            .chain(&self.spot)
            .all(|v| v.is_finite());
        if !finite || self.sigma < 0.0 || self.r < 0.0 || self.delay < 0.0 || self.duration <= 0.0 {
            return Err(Error::invalid("Asian call parameters must be finite with a positive window"));
        }
        Ok(())
    }

    /// Mean and standard deviation of `(x, y, z)` at the end of the window.
    pub fn terminal_moments(&self) -> ([f64; 3], [f64; 3]) {
        let phase = |accumulate: bool, tau: f64, mean: &DVector<f64>, cov: &DMatrix<f64>| {
            let mut m = DMatrix::<f64>::zeros(3, 3);
            m[(0, 0)] = -self.a;
            m[(1, 0)] = 1.0;
            if accumulate {
                m[(2, 1)] = 1.0;
            }
            let mut g = DVector::<f64>::zeros(3);
            g[0] = self.sigma;
            let (f, q) = van_loan(&m, &(&g * g.transpose()), tau);
            let drift = integrated_exponential(&m, &(&g * self.theta), tau);
            (&f * mean + drift, &f * cov * f.transpose() + q)
        };
        let m0 = DVector::from_column_slice(&self.spot);
        let c0 = DMatrix::<f64>::zeros(3, 3);
        let (m1, c1) = phase(false, self.delay, &m0, &c0);
        let (m2, c2) = phase(true, self.duration, &m1, &c1);
        let sd = |i: usize| c2[(i, i)].max(0.0).sqrt();
        ([m2[0], m2[1], m2[2]], [sd(0), sd(1), sd(2)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeGrid {
    pub x: Axis,
    pub y: Axis,
    pub z: Axis,
    /// Time step; chosen from the stability bound when absent.
    pub dt: Option<f64>,
}

impl PdeGrid {
    /// Grid spanning the spot and `n_sd` terminal standard deviations about
    /// the terminal mean on every axis (at least `n_sd` stationary standard
    /// deviations in `x`).
    pub fn covering(problem: &AsianCall, nodes: [usize; 3], n_sd: f64) -> Result<Self> {
        problem.validate()?;
        let (mean, sd) = problem.terminal_moments();
        let stationary_x = problem.sigma / (2.0 * problem.a).sqrt();
        let axis = |i: usize, n: usize, spread: f64| {
            let spread = spread.max(1e-6 * (1.0 + mean[i].abs()));
            let lo = mean[i].min(problem.spot[i]) - n_sd * spread;
            let hi = mean[i].max(problem.spot[i]) + n_sd * spread;
            Axis::new(lo, hi, n)
        };
        Ok(Self {
            x: axis(0, nodes[0], sd[0].max(stationary_x))?,
            y: axis(1, nodes[1], sd[1])?,
            z: axis(2, nodes[2], sd[2])?,
            dt: None,
        })
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.x.n, self.y.n, self.z.n)
    }

    fn stability_rate(&self, problem: &AsianCall) -> f64 {
        let (dx, dy, dz) = (self.x.step(), self.y.step(), self.z.step());
        let drift = |x: f64| (-problem.a * x + problem.theta * problem.sigma).abs();
        let max_drift = drift(self.x.min).max(drift(self.x.max));
        let max_x = self.x.min.abs().max(self.x.max.abs());
        let max_y = self.y.min.abs().max(self.y.max.abs());
        problem.sigma * problem.sigma / (dx * dx) + max_drift / dx + max_x / dy + max_y / dz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeOutcome {
    pub price: f64,
    pub grid: String,
    pub dt: f64,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl PdeOutcome {
    pub fn quote(&self, r: f64, theta: f64) -> PriceQuote {
        PriceQuote {
            price: self.price,
            std_error: 0.0,
            method: Method::Pde,
            n_paths: None,
            grid: Some(self.grid.clone()),
            theta: ThetaSchedule::constant(theta),
            r,
        }
    }
}

struct Solver<'a> {
    problem: &'a AsianCall,
    grid: &'a PdeGrid,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Solver<'_> {
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.grid.y.n + j) * self.grid.z.n + k
    }

    /// Writes `L v` on interior nodes into `out` (boundary entries are zero).
    fn operator(&self, v: &[f64], out: &mut [f64], window: bool) {
        let (nx, ny, nz) = (self.grid.x.n, self.grid.y.n, self.grid.z.n);
        let (dx, dy, dz) = (self.grid.x.step(), self.grid.y.step(), self.grid.z.step());
        let p = self.problem;
        let half_var = 0.5 * p.sigma * p.sigma;
        let plane = ny * nz;
        out.par_chunks_mut(plane).enumerate().for_each(|(i, slab)| {
            if i == 0 || i == nx - 1 {
                slab.fill(0.0);
                return;
            }
            let x = self.xs[i];
            let drift = -p.a * x + p.theta * p.sigma;
            for j in 0..ny {
                for k in 0..nz {
                    let o = j * nz + k;
                    if j == 0 || j == ny - 1 || k == 0 || k == nz - 1 {
                        slab[o] = 0.0;
                        continue;
                    }
                    let c = self.idx(i, j, k);
                    let vc = v[c];
                    let (vxm, vxp) = (v[c - plane], v[c + plane]);
                    let mut l = half_var * (vxp - 2.0 * vc + vxm) / (dx * dx) + drift * (vxp - vxm) / (2.0 * dx) - p.r * vc;
                    l += x * upwind(v, c, nz, j, ny, x, dy);
                    if window {
                        let y = self.ys[j];
                        l += y * upwind(v, c, 1, k, nz, y, dz);
                    }
                    slab[o] = l;
                }
            }
        });
    }

    fn apply_boundaries(&self, v: &mut [f64]) {
        let (nx, ny, nz) = (self.grid.x.n, self.grid.y.n, self.grid.z.n);
        for j in 0..ny {
            for k in 0..nz {
                let (a, b) = (self.idx(1, j, k), self.idx(2, j, k));
                v[self.idx(0, j, k)] = 2.0 * v[a] - v[b];
                let (a, b) = (self.idx(nx - 2, j, k), self.idx(nx - 3, j, k));
                v[self.idx(nx - 1, j, k)] = 2.0 * v[a] - v[b];
            }
        }
        for i in 0..nx {
            for k in 0..nz {
                let (a, b) = (self.idx(i, 1, k), self.idx(i, 2, k));
                v[self.idx(i, 0, k)] = 2.0 * v[a] - v[b];
                let (a, b) = (self.idx(i, ny - 2, k), self.idx(i, ny - 3, k));
                v[self.idx(i, ny - 1, k)] = 2.0 * v[a] - v[b];
            }
        }
        for i in 0..nx {
            for j in 0..ny {
                v[self.idx(i, j, 0)] = 0.0;
                let (a, b) = (self.idx(i, j, nz - 2), self.idx(i, j, nz - 3));
                v[self.idx(i, j, nz - 1)] = 2.0 * v[a] - v[b];
            }
        }
    }

    /// Advances `v` by `steps` SSP-RK3 steps of size `dt`.
    fn evolve(&self, v: &mut Vec<f64>, dt: f64, steps: usize, window: bool) {
        let n = v.len();
        let mut l = vec![0.0; n];
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n];
        for _ in 0..steps {
            self.operator(v, &mut l, window);
            for m in 0..n {
                s1[m] = v[m] + dt * l[m];
            }
            self.apply_boundaries(&mut s1);
            self.operator(&s1, &mut l, window);
            for m in 0..n {
                s2[m] = 0.75 * v[m] + 0.25 * (s1[m] + dt * l[m]);
            }
            self.apply_boundaries(&mut s2);
            self.operator(&s2, &mut l, window);
            for m in 0..n {
                v[m] = v[m] / 3.0 + 2.0 / 3.0 * (s2[m] + dt * l[m]);
            }
            self.apply_boundaries(v);
        }
    }

    fn interpolate(&self, v: &[f64], at: [f64; 3]) -> f64 {
        let (i, wx) = self.grid.x.locate(at[0]);
        let (j, wy) = self.grid.y.locate(at[1]);
        let (k, wz) = self.grid.z.locate(at[2]);
        let mut acc = 0.0;
        for (di, fx) in [(0, 1.0 - wx), (1, wx)] {
            for (dj, fy) in [(0, 1.0 - wy), (1, wy)] {
                for (dk, fz) in [(0, 1.0 - wz), (1, wz)] {
                    acc += fx * fy * fz * v[self.idx(i + di, j + dj, k + dk)];
                }
            }
        }
        acc
    }
}

/// Derivative of `v` along an axis with stride `stride` at position `pos`
/// (of `len`), upwinded for speed `speed` in the backward equation.
#[inline]
fn upwind(v: &[f64], c: usize, stride: usize, pos: usize, len: usize, speed: f64, d: f64) -> f64 {
    if speed > 0.0 {
        if pos + 2 < len {
            (-3.0 * v[c] + 4.0 * v[c + stride] - v[c + 2 * stride]) / (2.0 * d)
        } else {
            (v[c + stride] - v[c]) / d
        }
    } else if pos >= 2 {
        (3.0 * v[c] - 4.0 * v[c - stride] + v[c - 2 * stride]) / (2.0 * d)
    } else {
        (v[c] - v[c - stride]) / d
    }
}

/// Prices the Asian call on `grid`.
pub fn pde_price_asian_call(problem: &AsianCall, grid: &PdeGrid) -> Result<PdeOutcome> {
    problem.validate()?;
    for (name, axis, v) in [("x", &grid.x, problem.spot[0]), ("y", &grid.y, problem.spot[1]), ("z", &grid.z, problem.spot[2])] {
        Axis::new(axis.min, axis.max, axis.n)?;
        if !axis.contains(v) {
            return Err(Error::invalid(format!("spot {name} = {v} lies outside [{}, {}]", axis.min, axis.max)));
        }
    }
    let rate = grid.stability_rate(problem);
    let dt_max = AUTO_CFL / rate;
    let dt = match grid.dt {
        Some(dt) if !(dt.is_finite() && dt > 0.0) => {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")))
        }
        Some(dt) if dt * rate > CFL_LIMIT => {
            return Err(Error::Numerical(format!(
                "time step {dt} violates the stability bound (CFL number {:.3} > {CFL_LIMIT})",
                dt * rate
            )))
        }
        Some(dt) => dt,
        None => dt_max,
    };

    let needed: f64 = [problem.duration, problem.delay].iter().map(|l| (l.max(0.0) / dt).ceil()).sum();
    if needed > MAX_STEPS as f64 {
        return Err(Error::Numerical(format!(
            "the stability bound needs {needed:.0} time steps (limit {MAX_STEPS}); use a coarser grid or Monte Carlo"
        )));
    }

    let mut warnings = Vec::new();
    let (mean, sd) = problem.terminal_moments();
    for (name, axis, i) in [("x", &grid.x, 0), ("y", &grid.y, 1), ("z", &grid.z, 2)] {
        let (lo, hi) = (mean[i] - COVERAGE_SD * sd[i], mean[i] + COVERAGE_SD * sd[i]);
        if axis.min > lo || axis.max < hi {
            warnings.push(format!(
                "{name} axis [{:.4}, {:.4}] covers less than {COVERAGE_SD} standard deviations of the terminal law [{lo:.4}, {hi:.4}]",
                axis.min, axis.max
            ));
        }
    }
    if problem.strike <= grid.z.min {
        warnings.push("strike lies below the z axis; the lower boundary value is inexact".into());
    }

    let solver = Solver {
        problem,
        grid,
        xs: (0..grid.x.n).map(|i| grid.x.node(i)).collect(),
        ys: (0..grid.y.n).map(|j| grid.y.node(j)).collect(),
    };
    let mut v = vec![0.0; grid.x.n * grid.y.n * grid.z.n];
    for i in 0..grid.x.n {
        for j in 0..grid.y.n {
            for k in 0..grid.z.n {
                v[solver.idx(i, j, k)] = (grid.z.node(k) - problem.strike).max(0.0);
            }
        }
    }
    let mut steps = 0;
    for (length, window) in [(problem.duration, true), (problem.delay, false)] {
        if length <= 0.0 {
            continue;
        }
        let n = (length / dt).ceil() as usize;
        solver.evolve(&mut v, length / n as f64, n, window);
        steps += n;
    }
    let price = solver.interpolate(&v, problem.spot);
    if !price.is_finite() {
        return Err(Error::Numerical("finite-difference solution diverged".into()));
    }
    // Far out of the money the extrapolated boundaries can leave a value a
    // rounding error below zero.
    let price = price.max(0.0);
    Ok(PdeOutcome {
        price,
        grid: grid.label(),
        dt,
        steps,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    /// Bachelier price of a call on a Gaussian underlying.
    fn gaussian_call(mean: f64, sd: f64, strike: f64, discount: f64) -> f64 {
        let n = Normal::new(0.0, 1.0).unwrap();
        let d = (mean - strike) / sd;
        discount * ((mean - strike) * n.cdf(d) + sd * (-0.5 * d * d).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }

    fn problem() -> AsianCall {
        AsianCall {
            a: 0.5,
            sigma: 0.6,
            theta: 0.2,
            r: 0.01,
            strike: 0.0,
            spot: [0.3, 0.0, 0.0],
            delay: 0.5,
            duration: 2.0,
        }
    }

    #[test]
    fn terminal_moments_of_car1() {
        let p = AsianCall {
            sigma: 0.0,
            theta: 0.0,
            delay: 0.0,
            ..problem()
        };
        let (mean, sd) = p.terminal_moments();
        // x = x0 e^{−at}, y = x0 (1 − e^{−at})/a, z = x0 (t − (1 − e^{−at})/a)/a
        let (a, t, x0): (f64, f64, f64) = (0.5, 2.0, 0.3);
        let e = (-a * t).exp();
        assert!((mean[0] - x0 * e).abs() < 1e-12);
        assert!((mean[1] - x0 * (1.0 - e) / a).abs() < 1e-12);
        assert!((mean[2] - x0 * (t - (1.0 - e) / a) / a).abs() < 1e-12);
        assert!(sd.iter().all(|s| *s < 1e-12));
    }

    #[test]
    fn matches_gaussian_call_price() {
        // z_T is Gaussian, so the call has a Bachelier closed form.
        let p = problem();
        let (mean, sd) = p.terminal_moments();
        let grid = PdeGrid::covering(&p, [41, 41, 41], 5.0).unwrap();
        let out = pde_price_asian_call(&p, &grid).unwrap();
        let exact = gaussian_call(mean[2], sd[2], p.strike, (-p.r * 2.5f64).exp());
        assert!((out.price - exact).abs() < 0.03 * exact, "{} vs {exact}", out.price);
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
    }

    #[test]
    fn deep_in_the_money_is_discounted_forward() {
        let p = AsianCall {
            strike: -5.0,
            ..problem()
        };
        let (mean, _) = p.terminal_moments();
        let grid = PdeGrid::covering(&p, [31, 31, 31], 5.0).unwrap();
        let out = pde_price_asian_call(&p, &grid).unwrap();
        let exact = (-p.r * 2.5f64).exp() * (mean[2] - p.strike);
        assert!((out.price - exact).abs() < 1e-3 * exact, "{} vs {exact}", out.price);
    }

    #[test]
    fn rejects_unstable_time_step() {
        let p = problem();
        let mut grid = PdeGrid::covering(&p, [21, 21, 21], 5.0).unwrap();
        grid.dt = Some(10.0);
        let err = pde_price_asian_call(&p, &grid).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn warns_on_narrow_domain() {
        let p = problem();
        let mut grid = PdeGrid::covering(&p, [21, 21, 21], 5.0).unwrap();
        let (mean, sd) = p.terminal_moments();
        grid.z = Axis::new(mean[2] - sd[2], mean[2] + sd[2], 21).unwrap();
        let out = pde_price_asian_call(&p, &grid).unwrap();
        assert!(out.warnings.iter().any(|w| w.starts_with("z axis")));
    }

    #[test]
    fn spot_outside_grid_is_rejected() {
        let p = problem();
        let mut grid = PdeGrid::covering(&p, [21, 21, 21], 5.0).unwrap();
        grid.x = Axis::new(5.0, 6.0, 21).unwrap();
        assert!(pde_price_asian_call(&p, &grid).is_err());
    }

    #[test]
    fn without_noise_the_accrued_value_is_locked_in() {
        let p = AsianCall {
            sigma: 0.0,
            theta: 0.0,
            r: 0.0,
            strike: 1.0,
            spot: [0.0, 0.0, 1.5],
            ..problem()
        };
        let grid = PdeGrid {
            x: Axis::new(-1.0, 1.0, 21).unwrap(),
            y: Axis::new(-1.0, 1.0, 21).unwrap(),
            z: Axis::new(0.0, 3.0, 31).unwrap(),
            dt: None,
        };
        let out = pde_price_asian_call(&p, &grid).unwrap();
        assert!((out.price - 0.5).abs() < 1e-12, "{}", out.price);
    }

    #[test]
    fn price_is_nondecreasing_in_accrued_value() {
        let p = problem();
        let base = PdeGrid::covering(&p, [21, 21, 21], 5.0).unwrap();
        let mut last = f64::NEG_INFINITY;
        for z0 in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let q = AsianCall {
                spot: [0.3, 0.0, z0],
                ..p.clone()
            };
            let price = pde_price_asian_call(&q, &base).unwrap().price;
            assert!(price >= last, "{price} after {last} at z0 = {z0}");
            last = price;
        }
    }

    #[test]
    fn refuses_grids_needing_too_many_steps() {
        let p = AsianCall {
            a: 50.0,
            duration: 500.0,
            ..problem()
        };
        let grid = PdeGrid::covering(&p, [41, 41, 41], 4.0).unwrap();
        assert!(matches!(pde_price_asian_call(&p, &grid), Err(Error::Numerical(_))));
    }
}
