//! Small dense linear-algebra kernels: matrix exponential, Lyapunov solvers,
//! Van Loan integrals and PSD square roots. Matrices here are tiny (state
//! dimension rarely above six), so Kronecker-product formulations are fine.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Matrix exponential (scaling and squaring with a degree-13 Padé approximant).
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().exp()
}

/// Solves `A X + X Aᵀ + Q = 0` for symmetric `Q`.
pub fn solve_continuous_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let x = solve_refined(&op, &rhs)
        .ok_or_else(|| Error::Numerical("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Solves `X = T X Tᵀ + Q`.
pub fn solve_discrete_lyapunov(t: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let op = DMatrix::<f64>::identity(n * n, n * n) - t.kronecker(t);
    let rhs = DVector::from_column_slice(q.as_slice());
    let x = solve_refined(&op, &rhs)
        .ok_or_else(|| Error::Numerical("singular discrete Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// LU solve followed by two rounds of iterative refinement.
fn solve_refined(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = m.clone().lu();
    let mut x = lu.solve(b)?;
    for _ in 0..2 {
        let r = b - m * &x;
        let dx = lu.solve(&r)?;
        x += dx;
    }
    Some(x)
}

/// Exact discretization of `dX = A X dt + G dW` over a step `h`:
/// returns `(e^{Ah}, ∫_0^h e^{Au} G Gᵀ e^{Aᵀu} du)` via the block-exponential
/// identity of Van Loan.
///
/// The block exponential contains `e^{−Aᵀh}`, which overflows for fast
/// modes, so long steps are split into `2^k` pieces with `‖A‖h/2^k ≤ 1` and
/// recombined by doubling: `F₂ = F²`, `Q₂ = F Q Fᵀ + Q`.
pub fn van_loan(a: &DMatrix<f64>, diffusion: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let scale = a.abs().row_sum().max() * h.abs();
    let halvings = if scale > 1.0 { scale.log2().ceil() as i32 } else { 0 };
    let (mut f, mut q) = van_loan_block(a, diffusion, h / 2f64.powi(halvings));
    for _ in 0..halvings {
        q = &f * &q * f.transpose() + &q;
        f = &f * &f;
    }
    let q = (&q + q.transpose()) * 0.5;
    (f, q)
}

fn van_loan_block(a: &DMatrix<f64>, diffusion: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut block = DMatrix::<f64>::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, n)).copy_from(diffusion);
    block.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let e = expm(&(block * h));
    let f = e.view((0, 0), (n, n)).into_owned();
    let g = e.view((0, n), (n, n)).into_owned();
    (f.clone(), &g * f.transpose())
}

/// `∫_0^h e^{Au} du · g`, computed from the exponential of `[[A, g], [0, 0]]·h`.
pub fn integrated_exponential(a: &DMatrix<f64>, g: &DVector<f64>, h: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut block = DMatrix::<f64>::zeros(n + 1, n + 1);
    block.view_mut((0, 0), (n, n)).copy_from(a);
    block.view_mut((0, n), (n, 1)).copy_from(g);
    let e = expm(&(block * h));
    e.view((0, n), (n, 1)).column(0).into_owned()
}

/// A factor `L` with `L Lᵀ = S` for a symmetric positive semidefinite `S`.
/// Tiny negative eigenvalues from rounding are clipped to zero.
pub fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let root = lam.max(0.0).sqrt();
        for i in 0..l.nrows() {
            l[(i, j)] *= root;
        }
    }
    l
}

/// Real parts and moduli of the roots of `c_0 + c_1 z + ... + c_n z^n`.
/// Returns an empty list for constant polynomials.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<(f64, f64)> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().is_some_and(|v| *v == 0.0) {
        c.pop();
    }
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        m[(i, n - 1)] = -c[i] / lead;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.norm()))
        .collect()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_lyapunov() {
        let a = DMatrix::from_element(1, 1, -0.25);
        let q = DMatrix::from_element(1, 1, 4.0);
        let x = solve_continuous_lyapunov(&a, &q).unwrap();
        assert!((x[(0, 0)] - 8.0).abs() < 1e-14);
    }

    #[test]
    fn discrete_lyapunov_ar1() {
        let t = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = solve_discrete_lyapunov(&t, &q).unwrap();
        assert!((x[(0, 0)] - 1.0 / 0.75).abs() < 1e-14);
    }

    #[test]
    fn van_loan_scalar_matches_closed_form() {
        let a = DMatrix::from_element(1, 1, -0.3);
        let g = DMatrix::from_element(1, 1, 2.0);
        let (f, q) = van_loan(&a, &g, 1.7);
        assert!((f[(0, 0)] - (-0.3f64 * 1.7).exp()).abs() < 1e-14);
        let exact = 2.0 * (1.0 - (-0.6f64 * 1.7).exp()) / 0.6;
        assert!((q[(0, 0)] - exact).abs() < 1e-13);
    }

    #[test]
    fn van_loan_stays_finite_for_fast_modes() {
        let a = DMatrix::from_element(1, 1, -10.0);
        let g = DMatrix::from_element(1, 1, 1.0);
        let (f, q) = van_loan(&a, &g, 420.0);
        assert_eq!(f[(0, 0)], 0.0);
        assert!((q[(0, 0)] - 0.05).abs() < 1e-14, "{}", q[(0, 0)]);
        let (_, q) = van_loan(&a, &g, 5.0);
        assert!((q[(0, 0)] - (1.0 - (-100.0f64).exp()) / 20.0).abs() < 1e-14);
    }

    #[test]
    fn integrated_exponential_scalar() {
        let a = DMatrix::from_element(1, 1, -0.5);
        let g = DVector::from_element(1, 3.0);
        let v = integrated_exponential(&a, &g, 2.0);
        let exact = 3.0 * (1.0 - (-1.0f64).exp()) / 0.5;
        assert!((v[0] - exact).abs() < 1e-13);
    }

    #[test]
    fn psd_sqrt_reconstructs() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let l = psd_sqrt(&s);
        assert!((&l * l.transpose() - s).norm() < 1e-13);
    }

    #[test]
    fn roots_of_quadratic() {
        // (z + 1)(z + 2)
        let mut r = polynomial_roots(&[2.0, 3.0, 1.0]);
        r.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((r[0].0 + 2.0).abs() < 1e-12);
        assert!((r[1].0 + 1.0).abs() < 1e-12);
        assert!(polynomial_roots(&[5.0]).is_empty());
    }
}
