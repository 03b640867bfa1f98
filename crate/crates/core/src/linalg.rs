//! Matrix-free Krylov helpers over matrix-shaped vectors (Frobenius inner product).

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};

pub fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn frob_norm(a: &Array2<f64>) -> f64 {
    frob_dot(a, a).sqrt()
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Array2<f64>,
    pub iterations: usize,
    /// `‖r_k‖ / ‖b‖` after every iteration, starting with the initial residual.
    pub residuals: Vec<f64>,
}

/// Conjugate gradient for a symmetric positive definite operator, from x = 0.
/// Stops when `‖r‖ ≤ tol · ‖b‖`.
pub fn conjugate_gradient<F>(
    mut apply: F,
    rhs: &Array2<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    let b_norm = frob_norm(rhs);
    let mut x = Array2::zeros(rhs.dim());
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            solution: x,
            iterations: 0,
            residuals: vec![0.0],
        });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs_old = frob_dot(&r, &r);
    let mut residuals = vec![1.0];
    for it in 1..=max_iters {
        let ap = apply(&p)?;
        let pap = frob_dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::CgNotConverged {
                iterations: it,
                residual: rs_old.sqrt() / b_norm,
            });
        }
        let alpha = rs_old / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rs_new = frob_dot(&r, &r);
        let rel = rs_new.sqrt() / b_norm;
        residuals.push(rel);
        if rel <= tol {
            return Ok(CgOutcome {
                solution: x,
                iterations: it,
                residuals,
            });
        }
        p *= rs_new / rs_old;
        p += &r;
        rs_old = rs_new;
    }
    Err(Error::CgNotConverged {
        iterations: max_iters,
        residual: *residuals.last().unwrap_or(&f64::NAN),
    })
}

/// Largest eigenvalue magnitude of a symmetric operator by power iteration.
/// Stops after `max_iters` or when the Rayleigh estimate changes by less
/// than `rel_tol` relative.
pub fn power_iteration<F>(
    mut apply: F,
    start: &Array2<f64>,
    max_iters: usize,
    rel_tol: f64,
) -> Result<f64>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    let norm = frob_norm(start);
    if norm == 0.0 {
        return Err(Error::EstimationFailed("zero start vector".into()));
    }
    let mut v = start / norm;
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = apply(&v)?;
        let next = frob_norm(&w);
        if !next.is_finite() {
            return Err(Error::EstimationFailed("non-finite operator output".into()));
        }
        if next == 0.0 {
            return Ok(0.0);
        }
        let change = (next - estimate).abs() / next;
        estimate = next;
        v = w / next;
        if change < rel_tol {
            break;
        }
    }
    Ok(estimate)
}

/// Extreme eigenvalues `(min, max)` of a symmetric operator by Lanczos with
/// full reorthogonalization. Runs at most `max_steps` (capped at the
/// dimension) and stops early on an invariant subspace.
pub fn lanczos_extremes<F>(
    mut apply: F,
    start: &Array2<f64>,
    max_steps: usize,
) -> Result<(f64, f64)>
where
    F: FnMut(&Array2<f64>) -> Result<Array2<f64>>,
{
    let dim = start.len();
    let steps = max_steps.min(dim).max(1);
    let norm = frob_norm(start);
    if norm == 0.0 {
        return Err(Error::EstimationFailed("zero start vector".into()));
    }
    let mut basis: Vec<Array2<f64>> = vec![start / norm];
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut w = apply(&basis[k])?;
        let alpha = frob_dot(&w, &basis[k]);
        alphas.push(alpha);
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let proj = frob_dot(&w, q);
                w.scaled_add(-proj, q);
            }
        }
        let beta = frob_norm(&w);
        if !beta.is_finite() {
            return Err(Error::EstimationFailed("non-finite Lanczos vector".into()));
        }
        if k + 1 == steps || beta <= 1e-12 * alpha.abs().max(1.0) {
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    let n = alphas.len();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = alphas[i];
        if i + 1 < n {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn spd() -> Array2<f64> {
        array![[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]]
    }

    fn as_col(v: &Array2<f64>) -> Array2<f64> {
        v.clone().into_shape_with_order((3, 1)).unwrap()
    }

    #[test]
    fn cg_solves_spd_system() {
        let a = spd();
        let b = array![[1.0], [2.0], [3.0]];
        let out = conjugate_gradient(|v| Ok(a.dot(&as_col(v))), &b, 1e-12, 50).unwrap();
        let back = a.dot(&out.solution);
        assert!((&back - &b).iter().all(|r| r.abs() < 1e-10));
        assert!(out.iterations <= 3);
    }

    #[test]
    fn cg_zero_rhs_and_failure() {
        let a = spd();
        let zero = Array2::zeros((3, 1));
        let out = conjugate_gradient(|v| Ok(a.dot(&as_col(v))), &zero, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 0);
        let b = array![[1.0], [2.0], [3.0]];
        assert!(matches!(
            conjugate_gradient(|v| Ok(a.dot(&as_col(v))), &b, 1e-14, 1),
            Err(Error::CgNotConverged { .. })
        ));
    }

    #[test]
    fn spectral_estimates_match_dense_eigen() {
        let a = spd();
        let dense = SymmetricEigen::new(DMatrix::from_row_slice(3, 3, a.as_slice().unwrap()));
        let true_max = dense.eigenvalues.max();
        let true_min = dense.eigenvalues.min();
        let start = array![[1.0], [0.3], [-0.2]];
        let pmax = power_iteration(|v| Ok(a.dot(&as_col(v))), &start, 500, 1e-14).unwrap();
        assert!((pmax - true_max).abs() < 1e-8);
        let (lmin, lmax) = lanczos_extremes(|v| Ok(a.dot(&as_col(v))), &start, 10).unwrap();
        assert!((lmin - true_min).abs() < 1e-10);
        assert!((lmax - true_max).abs() < 1e-10);
    }
}
