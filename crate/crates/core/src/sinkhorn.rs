//! Entropy-regularized optimal transport in the dual.
//!
//! Potentials are updated by block coordinate ascent on
//! `⟨f,a⟩ + ⟨g,b⟩ − ε Σᵢⱼ exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`, written as log-sum-exp
//! soft-min updates so that the Gibbs kernel `exp(−C/ε)` is never formed.
//! The implied coupling is `Pᵢⱼ = exp((fᵢ + gⱼ − Cᵢⱼ)/ε)`.
//!
//! Sweeps converge linearly and can crawl when the unregularized plan is
//! degenerate. After a fixed number of sweeps at the target ε, each sweep is
//! followed by a damped Newton step on the dual, whose Hessian is only
//! `(n + m)`-dimensional.
//!
//! Reported losses equal the primal value `⟨C,P⟩ − εH(P)` with
//! `H(P) = −Σ P log P`; at the optimum this is the dual objective above plus
//! the constant `ε`. The constant cancels in the Sinkhorn divergence.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{cost_matrix, CostSpec, DiscreteMeasure};

/// Annealing stages halve ε from the cost scale down to the target.
const ANNEAL_FACTOR: f64 = 0.5;
const ANNEAL_STAGE_SWEEPS: usize = 10;
const ANNEAL_STAGE_TOL: f64 = 1e-3;
/// Plain sweeps at the target ε before Newton steps on the dual are interleaved.
const NEWTON_AFTER_SWEEPS: usize = 100;
/// Newton steps are skipped above this many unknowns (n + m).
const NEWTON_MAX_DIM: usize = 600;
const NEWTON_MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornParams {
    /// Entropic regularization, absolute (not scaled by the cost).
    pub epsilon: f64,
    pub max_iters: usize,
    /// Sup-norm bound on the marginal violation of the implied coupling.
    pub tol: f64,
    /// ε-scaling on cold starts: solve a sequence of decreasing ε first.
    pub anneal: bool,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: 2000,
            tol: 1e-6,
            anneal: true,
        }
    }
}

impl SinkhornParams {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "max_iters must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Dual potentials and convergence metadata of one entropic OT problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// Debiased divergence `L(a,b) − ½L(a,a) − ½L(b,b)` with the three sub-solutions.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSolution {
    pub value: f64,
    pub xy: SinkhornSolution,
    pub xx: SinkhornSolution,
    pub yy: SinkhornSolution,
}

impl DivergenceSolution {
    pub fn converged(&self) -> bool {
        self.xy.converged && self.xx.converged && self.yy.converged
    }
}

fn lse_update(row: &[f64], pot: &[f64], eps: f64, log_w: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (c, p) in row.iter().zip(pot) {
        let z = (p - c) / eps;
        if z > max {
            max = z;
        }
    }
    let sum: f64 = row
        .iter()
        .zip(pot)
        .map(|(c, p)| ((p - c) / eps - max).exp())
        .sum();
    eps * log_w - eps * (max + sum.ln())
}

/// Row-major cost and its transpose, both contiguous.
struct Problem<'a> {
    n: usize,
    m: usize,
    c: Array2<f64>,
    ct: Array2<f64>,
    a: ArrayView1<'a, f64>,
    b: ArrayView1<'a, f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(a: ArrayView1<'a, f64>, b: ArrayView1<'a, f64>, c: ArrayView2<'_, f64>) -> Self {
        let c = c.as_standard_layout().into_owned();
        let ct = c.t().as_standard_layout().into_owned();
        Self {
            n: a.len(),
            m: b.len(),
            c,
            ct,
            log_a: a.iter().map(|w| w.ln()).collect(),
            log_b: b.iter().map(|w| w.ln()).collect(),
            a,
            b,
        }
    }

    fn update_f(&self, g: &[f64], eps: f64, f: &mut [f64]) {
        let c = self.c.as_slice().expect("standard layout");
        for i in 0..self.n {
            f[i] = lse_update(&c[i * self.m..(i + 1) * self.m], g, eps, self.log_a[i]);
        }
    }

    fn update_g(&self, f: &[f64], eps: f64, g: &mut [f64]) {
        let ct = self.ct.as_slice().expect("standard layout");
        for j in 0..self.m {
            g[j] = lse_update(&ct[j * self.n..(j + 1) * self.n], f, eps, self.log_b[j]);
        }
    }

    /// Row-marginal violation of the coupling at `(f_old, g)`, where `f_new`
    /// is the f-update from `g`: row sums are `aᵢ exp((f_oldᵢ − f_newᵢ)/ε)`.
    fn row_error(&self, f_old: &[f64], f_new: &[f64], eps: f64) -> f64 {
        f_old
            .iter()
            .zip(f_new)
            .zip(self.a.iter())
            .map(|((fo, fn_), a)| (a * (((fo - fn_) / eps).exp() - 1.0)).abs())
            .fold(0.0, f64::max)
    }

    fn coupling(&self, f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let c = self.c.as_slice().expect("standard layout");
        let mut p = vec![0.0; self.n * self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                p[i * self.m + j] = ((f[i] + g[j] - c[i * self.m + j]) / eps).exp();
            }
        }
        p
    }

    /// Largest violation of either marginal.
    fn merit(&self, p: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        let mut cols = vec![0.0; self.m];
        for i in 0..self.n {
            let row = &p[i * self.m..(i + 1) * self.m];
            worst = worst.max((row.iter().sum::<f64>() - self.a[i]).abs());
            for (acc, v) in cols.iter_mut().zip(row) {
                *acc += v;
            }
        }
        cols.iter()
            .zip(self.b.iter())
            .fold(worst, |w, (s, b)| w.max((s - b).abs()))
    }

    /// One damped Newton step on the dual. Returns false when no step was taken.
    ///
    /// The Hessian is `−K/ε` with `K = [[diag(P1), P], [Pᵀ, diag(Pᵀ1)]]`,
    /// singular along `(1, −1)`; that direction is lifted by a rank-one term,
    /// which leaves the step unchanged since the gradient is orthogonal to it.
    fn newton_step(&self, f: &mut [f64], g: &mut [f64], eps: f64) -> bool {
        let (n, m) = (self.n, self.m);
        let dim = n + m;
        if dim > NEWTON_MAX_DIM {
            return false;
        }
        let p = self.coupling(f, g, eps);
        let merit0 = self.merit(&p);
        let dual0 = self.objective(f, g, eps);
        let mut k = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let mut cols = vec![0.0; m];
        for i in 0..n {
            let row = &p[i * m..(i + 1) * m];
            let r: f64 = row.iter().sum();
            k[(i, i)] = r;
            rhs[i] = eps * (self.a[i] - r);
            for j in 0..m {
                k[(i, n + j)] = row[j];
                k[(n + j, i)] = row[j];
                cols[j] += row[j];
            }
        }
        for j in 0..m {
            k[(n + j, n + j)] = cols[j];
            rhs[n + j] = eps * (self.b[j] - cols[j]);
        }
        let scale = (0..dim).fold(0.0_f64, |acc, i| acc.max(k[(i, i)]));
        for i in 0..dim {
            k[(i, i)] += 1e-13 * scale;
            for j in 0..dim {
                let (si, sj) = (
                    if i < n { 1.0 } else { -1.0 },
                    if j < n { 1.0 } else { -1.0 },
                );
                k[(i, j)] += scale * si * sj / dim as f64;
            }
        }
        let Some(chol) = Cholesky::new(k) else {
            return false;
        };
        let delta = chol.solve(&rhs);
        if delta.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let mut t = 1.0;
        let mut f_try = vec![0.0; n];
        let mut g_try = vec![0.0; m];
        for _ in 0..NEWTON_MAX_HALVINGS {
            for i in 0..n {
                f_try[i] = f[i] + t * delta[i];
            }
            for j in 0..m {
                g_try[j] = g[j] + t * delta[n + j];
            }
            let merit = self.merit(&self.coupling(&f_try, &g_try, eps));
            if merit < merit0
                && self.objective(&f_try, &g_try, eps) >= dual0 - 1e-14 * dual0.abs().max(1.0)
            {
                f.copy_from_slice(&f_try);
                g.copy_from_slice(&g_try);
                return true;
            }
            t *= 0.5;
        }
        false
    }

    fn objective(&self, f: &[f64], g: &[f64], eps: f64) -> f64 {
        let c = self.c.as_slice().expect("standard layout");
        let mut mass = 0.0;
        for i in 0..self.n {
            let row = &c[i * self.m..(i + 1) * self.m];
            for j in 0..self.m {
                mass += ((f[i] + g[j] - row[j]) / eps).exp();
            }
        }
        let fa: f64 = f.iter().zip(self.a.iter()).map(|(x, w)| x * w).sum();
        let gb: f64 = g.iter().zip(self.b.iter()).map(|(x, w)| x * w).sum();
        fa + gb - eps * (mass - 1.0)
    }
}

fn validate_inputs(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    c: ArrayView2<'_, f64>,
) -> Result<()> {
    if c.dim() != (a.len(), b.len()) {
        let (found, expected) = if c.nrows() != a.len() {
            (c.nrows(), a.len())
        } else {
            (c.ncols(), b.len())
        };
        return Err(Error::DimensionMismatch {
            context: "sinkhorn cost matrix",
            expected,
            found,
        });
    }
    if a.iter().chain(b.iter()).any(|w| *w <= 0.0) {
        return Err(Error::InvalidWeights(
            "sinkhorn requires strictly positive weights".into(),
        ));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn cost matrix"));
    }
    Ok(())
}

/// Solves the entropic OT problem between `mu` and `nu` for cost `c`.
///
/// Non-convergence within `max_iters` is reported through
/// `converged = false`, never as an error.
pub fn sinkhorn_solve(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    params: &SinkhornParams,
) -> Result<SinkhornSolution> {
    sinkhorn_solve_warm(mu, nu, c, params, None)
}

/// As [`sinkhorn_solve`], starting from the column potential `g0` when given.
/// A warm start disables annealing.
pub fn sinkhorn_solve_warm(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    params: &SinkhornParams,
    g0: Option<ArrayView1<'_, f64>>,
) -> Result<SinkhornSolution> {
    solve_weights(mu.weights(), nu.weights(), c, params, g0)
}

pub(crate) fn solve_weights(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    c: ArrayView2<'_, f64>,
    params: &SinkhornParams,
    g0: Option<ArrayView1<'_, f64>>,
) -> Result<SinkhornSolution> {
    params.validate()?;
    validate_inputs(a, b, c)?;
    let problem = Problem::new(a, b, c);
    let eps = params.epsilon;

    let mut g = match g0 {
        Some(g0) if g0.len() == problem.m && g0.iter().all(|v| v.is_finite()) => g0.to_vec(),
        Some(g0) if g0.len() != problem.m => {
            return Err(Error::DimensionMismatch {
                context: "sinkhorn warm start",
                expected: problem.m,
                found: g0.len(),
            })
        }
        _ => vec![0.0; problem.m],
    };
    let mut f = vec![0.0; problem.n];
    let mut f_next = vec![0.0; problem.n];
    let mut iterations = 0;

    if params.anneal && g0.is_none() {
        let scale = problem.c.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let mut stage_eps = scale;
        problem.update_f(&g, stage_eps.max(eps), &mut f);
        while stage_eps > eps && iterations + 1 < params.max_iters {
            for _ in 0..ANNEAL_STAGE_SWEEPS {
                problem.update_g(&f, stage_eps, &mut g);
                problem.update_f(&g, stage_eps, &mut f_next);
                let err = problem.row_error(&f, &f_next, stage_eps);
                std::mem::swap(&mut f, &mut f_next);
                iterations += 1;
                if err <= ANNEAL_STAGE_TOL || iterations + 1 >= params.max_iters {
                    break;
                }
            }
            stage_eps *= ANNEAL_FACTOR;
            if stage_eps > eps {
                problem.update_f(&g, stage_eps, &mut f);
            }
        }
    }
    problem.update_f(&g, eps, &mut f);

    let mut converged = false;
    let mut marginal_error;
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        iterations += 1;
        problem.update_g(&f, eps, &mut g);
        problem.update_f(&g, eps, &mut f_next);
        marginal_error = problem.row_error(&f, &f_next, eps);
        if marginal_error <= params.tol {
            converged = true;
            break;
        }
        if iterations >= params.max_iters || !marginal_error.is_finite() {
            break;
        }
        std::mem::swap(&mut f, &mut f_next);
        if sweeps >= NEWTON_AFTER_SWEEPS {
            problem.newton_step(&mut f, &mut g, eps);
        }
    }
    if !marginal_error.is_finite() || f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        converged = false;
    }

    let loss = problem.objective(&f, &g, eps);
    Ok(SinkhornSolution {
        f: Array1::from(f),
        g: Array1::from(g),
        loss,
        iterations,
        converged,
        marginal_error,
    })
}

/// Dual objective `⟨f,a⟩ + ⟨g,b⟩ − ε(Σ exp((f ⊕ g − C)/ε) − 1)` at arbitrary potentials.
pub fn dual_objective(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    epsilon: f64,
) -> Result<f64> {
    validate_inputs(mu.weights(), nu.weights(), c)?;
    let problem = Problem::new(mu.weights(), nu.weights(), c);
    Ok(problem.objective(&f.to_vec(), &g.to_vec(), epsilon))
}

pub(crate) fn coupling_unchecked(
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    c: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Array2<f64> {
    let mut p = Array2::zeros(c.dim());
    for ((i, j), v) in p.indexed_iter_mut() {
        *v = ((f[i] + g[j] - c[[i, j]]) / epsilon).exp();
    }
    p
}

/// Optimal coupling `Pᵢⱼ = exp((fᵢ + gⱼ − Cᵢⱼ)/ε)` of a converged solution.
pub fn coupling_from_potentials(
    sol: &SinkhornSolution,
    c: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Result<Array2<f64>> {
    if !sol.converged {
        return Err(Error::SinkhornNotConverged {
            iterations: sol.iterations,
            marginal_error: sol.marginal_error,
        });
    }
    if c.dim() != (sol.f.len(), sol.g.len()) {
        return Err(Error::DimensionMismatch {
            context: "coupling cost matrix",
            expected: sol.f.len(),
            found: c.nrows(),
        });
    }
    Ok(coupling_unchecked(sol.f.view(), sol.g.view(), c, epsilon))
}

/// Column potentials to warm-start the cross and self problems of a divergence.
#[derive(Debug, Clone, Default)]
pub struct DivergenceWarmStart {
    pub xy: Option<Array1<f64>>,
    pub xx: Option<Array1<f64>>,
    pub yy: Option<Array1<f64>>,
}

impl DivergenceWarmStart {
    pub fn from_solution(sol: &DivergenceSolution) -> Self {
        Self {
            xy: Some(sol.xy.g.clone()),
            xx: Some(sol.xx.g.clone()),
            yy: Some(sol.yy.g.clone()),
        }
    }
}

/// Sinkhorn divergence between `mu` and `nu`, solving all three problems.
pub fn sinkhorn_divergence(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &CostSpec,
    params: &SinkhornParams,
) -> Result<DivergenceSolution> {
    sinkhorn_divergence_warm(mu, nu, spec, params, &DivergenceWarmStart::default())
}

pub fn sinkhorn_divergence_warm(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    spec: &CostSpec,
    params: &SinkhornParams,
    warm: &DivergenceWarmStart,
) -> Result<DivergenceSolution> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            context: "divergence feature dimension",
            expected: mu.dim(),
            found: nu.dim(),
        });
    }
    let cxy = cost_matrix(mu.points(), nu.points(), spec)?;
    let cxx = cost_matrix(mu.points(), mu.points(), spec)?;
    let cyy = cost_matrix(nu.points(), nu.points(), spec)?;
    let xy = sinkhorn_solve_warm(
        mu,
        nu,
        cxy.view(),
        params,
        warm.xy.as_ref().map(|g| g.view()),
    )?;
    let xx = sinkhorn_solve_warm(
        mu,
        mu,
        cxx.view(),
        params,
        warm.xx.as_ref().map(|g| g.view()),
    )?;
    let yy = sinkhorn_solve_warm(
        nu,
        nu,
        cyy.view(),
        params,
        warm.yy.as_ref().map(|g| g.view()),
    )?;
    let value = xy.loss - 0.5 * xx.loss - 0.5 * yy.loss;
    Ok(DivergenceSolution { value, xy, xx, yy })
}
