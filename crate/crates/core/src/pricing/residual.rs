//! Residual of the general CARMA Asian-option PDE for a candidate value
//! function sampled on a grid.

use super::pde::Axis;
use crate::carma::CarmaModel;
use crate::error::{Error, Result};

/// Largest supported number of state dimensions `(x_0..x_{p−1}, y, z)`.
const MAX_STATE_DIMS: usize = 5;

/// Values of `v(t, x_0, …, x_{p−1}, y, z)` on a tensor grid, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    axes: Vec<Axis>,
    values: Vec<f64>,
}

impl GridFunction {
    /// Axes are time first, then the state axes.
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        let n: usize = axes.iter().map(|a| a.n).product();
        if axes.len() < 2 {
            return Err(Error::invalid("a grid function needs a time axis and state axes"));
        }
        if values.len() != n {
            return Err(Error::invalid(format!("grid has {n} nodes but {} values", values.len())));
        }
        Ok(Self { axes, values })
    }

    /// Samples `f(t, state)` on the grid.
    pub fn from_fn(axes: Vec<Axis>, mut f: impl FnMut(f64, &[f64]) -> f64) -> Result<Self> {
        let n: usize = axes.iter().map(|a| a.n).product();
        let mut values = Vec::with_capacity(n);
        let mut point = vec![0.0; axes.len()];
        for flat in 0..n {
            let mut rem = flat;
            for (d, axis) in axes.iter().enumerate().rev() {
                point[d] = axis.node(rem % axis.n);
                rem /= axis.n;
            }
            values.push(f(point[0], &point[1..]));
        }
        Self::new(axes, values)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise difference, for comparing two estimates on the same grid.
    pub fn difference(&self, other: &GridFunction) -> Result<GridFunction> {
        if self.axes != other.axes {
            return Err(Error::invalid("grid functions live on different grids"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self {
            axes: self.axes.clone(),
            values,
        })
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.axes.len()];
        for d in (0..self.axes.len() - 1).rev() {
            strides[d] = strides[d + 1] * self.axes[d + 1].n;
        }
        strides
    }
}

/// Sup-norm over interior nodes of
///
/// `v_t + Σ_{i<p−1} x_{i+1} v_{x_i} + (−Σ_j α_{p−j} x_j + θσ) v_{x_{p−1}}
///  + ½σ² v_{x_{p−1}x_{p−1}} + (Σ_i b_i x_i) v_y + y v_z − r v`
///
/// evaluated with central differences.
pub fn pde_residual_check(model: &CarmaModel, theta: f64, r: f64, v: &GridFunction) -> Result<f64> {
    let p = model.p();
    let state_dims = p + 2;
    if state_dims > MAX_STATE_DIMS {
        return Err(Error::Unsupported(format!(
            "residual check supports at most {MAX_STATE_DIMS} state dimensions, model needs {state_dims}"
        )));
    }
    if v.axes.len() != state_dims + 1 {
        return Err(Error::invalid(format!(
            "grid has {} axes, model needs time plus {state_dims}",
            v.axes.len()
        )));
    }
    if v.axes.iter().any(|a| a.n < 3) {
        return Err(Error::invalid("central differences need three nodes per axis"));
    }
    let (a, _) = model.companion_matrix();
    let b = model.observation();
    let sigma = model.sigma();
    let strides = v.strides();
    let steps: Vec<f64> = v.axes.iter().map(|a| a.step()).collect();
    let dims = v.axes.len();

    let mut index = vec![0usize; dims];
    let mut point = vec![0.0; dims];
    let mut worst = 0.0f64;
    let n = v.values.len();
    'nodes: for flat in 0..n {
        let mut rem = flat;
        for d in (0..dims).rev() {
            index[d] = rem % v.axes[d].n;
            rem /= v.axes[d].n;
            if index[d] == 0 || index[d] == v.axes[d].n - 1 {
                continue 'nodes;
            }
            point[d] = v.axes[d].node(index[d]);
        }
        let val = v.values[flat];
        let d1 = |d: usize| (v.values[flat + strides[d]] - v.values[flat - strides[d]]) / (2.0 * steps[d]);
        let x = &point[1..=p];
        let y = point[p + 1];
        let mut l = d1(0) - r * val;
        for i in 0..p - 1 {
            l += x[i + 1] * d1(1 + i);
        }
        let last = 1 + p - 1;
        let drift: f64 = (0..p).map(|j| a[(p - 1, j)] * x[j]).sum::<f64>() + theta * sigma;
        l += drift * d1(last);
        let s = strides[last];
        let vxx = (v.values[flat + s] - 2.0 * val + v.values[flat - s]) / (steps[last] * steps[last]);
        l += 0.5 * sigma * sigma * vxx;
        let bx: f64 = (0..p).map(|i| b[i] * x[i]).sum();
        l += bx * d1(p + 1) + y * d1(p + 2);
        worst = worst.max(l.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::integrated_moments;
    use crate::rng::{path_rng, standard_normal};

    fn axes(p: usize, n: usize) -> Vec<Axis> {
        let mut v = vec![Axis::new(0.0, 1.0, n).unwrap()];
        for _ in 0..p {
            v.push(Axis::new(-1.0, 1.0, n).unwrap());
        }
        v.push(Axis::new(-1.0, 1.0, n).unwrap());
        v.push(Axis::new(2.0, 4.0, n).unwrap());
        v
    }

    #[test]
    fn zero_function_has_zero_residual() {
        let m = CarmaModel::new(vec![1.2, 0.3], vec![1.0, 0.5], 0.7, 1.0).unwrap();
        let v = GridFunction::from_fn(axes(2, 5), |_, _| 0.0).unwrap();
        assert_eq!(pde_residual_check(&m, 0.2, 0.05, &v).unwrap(), 0.0);
    }

    #[test]
    fn too_many_dimensions_is_unsupported() {
        let m = CarmaModel::new(vec![2.0, 1.5, 0.5, 0.1], vec![1.0], 1.0, 1.0).unwrap();
        let v = GridFunction::from_fn(axes(4, 5), |_, _| 0.0).unwrap();
        assert!(matches!(pde_residual_check(&m, 0.0, 0.0, &v), Err(Error::Unsupported(_))));
    }

    /// Deep in the money the call equals the discounted conditional forward
    /// of `z`, an exact solution of the PDE.
    #[test]
    fn discounted_forward_solves_carma21_pde() {
        let m = CarmaModel::new(vec![1.2, 0.3], vec![1.0, 0.5], 0.7, 1.0).unwrap();
        let (maturity, strike, theta, r) = (2.0, -50.0, 0.2, 0.05);
        let forward = |t: f64, s: &[f64]| {
            let (mean, _) = integrated_moments(&m, theta, maturity - t, s).unwrap();
            (-r * (maturity - t)).exp() * (mean[3] - strike)
        };
        let v = GridFunction::from_fn(axes(2, 9), forward).unwrap();
        let res = pde_residual_check(&m, theta, r, &v).unwrap();
        assert!(res < 1e-2, "{res}");
        // The intrinsic value alone is not a solution.
        let naive = GridFunction::from_fn(axes(2, 9), |t, s| (-r * (maturity - t)).exp() * (s[3] - strike)).unwrap();
        assert!(pde_residual_check(&m, theta, r, &naive).unwrap() > 0.1);
    }

    /// Conditional call value of CAR(1) by Monte Carlo with common draws
    /// across grid nodes: `z_T` given the state is Gaussian with a mean
    /// affine in the state and a variance depending only on time to expiry.
    fn mc_value(m: &CarmaModel, maturity: f64, strike: f64, r: f64, seed: u64, paths: usize) -> GridFunction {
        let mut rng = path_rng(seed, 0);
        let draws: Vec<f64> = (0..paths).map(|_| standard_normal(&mut rng)).collect();
        let grid = vec![
            Axis::new(0.0, 1.0, 5).unwrap(),
            Axis::new(-1.0, 1.0, 5).unwrap(),
            Axis::new(-1.0, 1.0, 5).unwrap(),
            Axis::new(-1.0, 1.0, 5).unwrap(),
        ];
        GridFunction::from_fn(grid, |t, s| {
            let (mean, cov) = integrated_moments(m, 0.0, maturity - t, s).unwrap();
            let sd = cov[(2, 2)].sqrt();
            let sum: f64 = draws.iter().map(|g| (mean[2] + sd * g - strike).max(0.0)).sum();
            (-r * (maturity - t)).exp() * sum / paths as f64
        })
        .unwrap()
    }

    #[test]
    fn mc_value_function_is_within_noise_of_a_solution() {
        // A wide terminal law keeps the truncation error of the coarse grid
        // below the sampling noise.
        let m = CarmaModel::car1(0.5, 2.0, 1.0).unwrap();
        let (maturity, strike, r) = (4.0, 0.0, 0.02);
        let v1 = mc_value(&m, maturity, strike, r, 1, 20_000);
        let v2 = mc_value(&m, maturity, strike, r, 2, 20_000);
        let floor = pde_residual_check(&m, 0.0, r, &v1.difference(&v2).unwrap()).unwrap() / 2f64.sqrt();
        let res = pde_residual_check(&m, 0.0, r, &v1).unwrap();
        assert!(res < 5.0 * floor, "residual {res}, noise floor {floor}");
    }
}
