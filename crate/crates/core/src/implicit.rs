//! Backward pass through the pooling flow.
//!
//! Second-order quantities are never materialized. The Hessian-vector
//! product `∇²ₓL·V` and the cross products `∂_Y∇ₓL·D` and `(∂_Y∇ₓL)ᵀ·W`
//! are central directional differences of envelope gradients at re-solved
//! Sinkhorn potentials, i.e. derivatives taken through the Sinkhorn fixed
//! point.
//!
//! At a fixed point `∇ₓF(X*, Y) = 0` of the flowed objective F, with
//! `H = ∇²ₓF` and `B = ∂_Y∇ₓF`, the Jacobian solves
//! `(HᵀH + λI) J = −HᵀB`. A cotangent V is pulled back with one CG solve
//! `(HᵀH + λI) U = V` followed by `Vᵀ J = −Bᵀ(H U)`.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{sup_norm, FlowParams};
use crate::grad::{Evaluation, Objective, ObjectiveEvaluator};
use crate::linalg::{conjugate_gradient, frob_norm, lanczos_extremes, power_iteration};
use crate::measures::CostSpec;
use crate::sinkhorn::{DivergenceWarmStart, SinkhornParams};

const POWER_ITERS: usize = 30;
const POWER_REL_TOL: f64 = 1e-6;
const LANCZOS_MAX_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImplicitDiffParams {
    /// Tikhonov shift λ added to `HᵀH`.
    pub lambda: f64,
    pub cg_max_iters: usize,
    /// Relative residual target of the CG solve.
    pub cg_tol: f64,
    /// Finite-difference step, relative to `1 + ‖X‖∞`.
    pub fd_step: f64,
    /// Sinkhorn tolerance used for all second-order solves.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Largest `‖∇ₓF‖∞` accepted as a fixed point.
    pub fixed_point_tol: f64,
    /// Byte budget for stored iterates when unrolling.
    pub unroll_memory_budget: usize,
}

impl Default for ImplicitDiffParams {
    fn default() -> Self {
        Self {
            lambda: 1e-6,
            cg_max_iters: 500,
            cg_tol: 1e-8,
            fd_step: 1e-4,
            inner_tol: 1e-12,
            inner_max_iters: 20_000,
            fixed_point_tol: 1e-4,
            unroll_memory_budget: 256 << 20,
        }
    }
}

impl ImplicitDiffParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return Err(Error::InvalidParameter(
                "cg_tol and cg_max_iters must be positive".into(),
            ));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fd_step must be positive, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }

    /// Sinkhorn settings for second-order solves derived from the forward ones.
    pub fn tightened(&self, base: &SinkhornParams) -> SinkhornParams {
        SinkhornParams {
            tol: base.tol.min(self.inner_tol),
            max_iters: base.max_iters.max(self.inner_max_iters),
            ..*base
        }
    }
}

/// Matrix-free second-order operators of an objective at `(X, Y)`.
#[derive(Debug, Clone)]
pub struct SecondOrderProbe {
    evaluator: ObjectiveEvaluator,
    x: Array2<f64>,
    base: Evaluation,
    fd_step: f64,
}

impl SecondOrderProbe {
    pub fn new(
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        objective: Objective,
        cost: CostSpec,
        sinkhorn: SinkhornParams,
        fd_step: f64,
    ) -> Result<Self> {
        let evaluator = ObjectiveEvaluator::new(y, objective, cost, sinkhorn)?;
        Self::with_evaluator(evaluator, x, &DivergenceWarmStart::default(), fd_step)
    }

    /// Probe for the objective flowed under `flow`, with tightened Sinkhorn solves.
    pub fn for_flow(
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        flow: &FlowParams,
        idp: &ImplicitDiffParams,
    ) -> Result<Self> {
        Self::new(
            x,
            y,
            flow.objective,
            flow.cost.clone(),
            idp.tightened(&flow.sinkhorn),
            idp.fd_step,
        )
    }

    pub fn with_evaluator(
        evaluator: ObjectiveEvaluator,
        x: ArrayView2<'_, f64>,
        warm: &DivergenceWarmStart,
        fd_step: f64,
    ) -> Result<Self> {
        if x.ncols() != evaluator.target().ncols() {
            return Err(Error::DimensionMismatch {
                context: "probe features",
                expected: evaluator.target().ncols(),
                found: x.ncols(),
            });
        }
        let base = evaluator.evaluate(x, warm)?;
        Ok(Self {
            evaluator,
            x: x.to_owned(),
            base,
            fd_step,
        })
    }

    /// `∇ₓF` at the probe point.
    pub fn gradient(&self) -> &Array2<f64> {
        &self.base.grad
    }

    pub fn energy(&self) -> f64 {
        self.base.energy
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.evaluator.target()
    }

    fn step_for(&self, anchor: f64, direction: &Array2<f64>) -> f64 {
        self.fd_step * (1.0 + anchor) / sup_norm(direction)
    }

    fn check_shape(
        &self,
        v: &Array2<f64>,
        expected: (usize, usize),
        context: &'static str,
    ) -> Result<()> {
        if v.dim() != expected {
            return Err(Error::DimensionMismatch {
                context,
                expected: expected.0 * expected.1,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `∇²ₓF · v` for v of shape M×d.
    pub fn hvp(&self, v: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(v, self.x.dim(), "hvp direction")?;
        if sup_norm(v) == 0.0 {
            return Ok(Array2::zeros(self.x.dim()));
        }
        let h = self.step_for(sup_norm(&self.x), v);
        let plus = &self.x + &(v * h);
        let minus = &self.x - &(v * h);
        let gp = self.evaluator.evaluate(plus.view(), &self.base.warm)?.grad;
        let gm = self.evaluator.evaluate(minus.view(), &self.base.warm)?.grad;
        Ok((gp - gm) / (2.0 * h))
    }

    /// `∂_Y∇ₓF · dy` for dy of shape N×d; only the cross term depends on Y.
    pub fn cross_jvp(&self, dy: &Array2<f64>) -> Result<Array2<f64>> {
        let y = self.evaluator.target();
        self.check_shape(dy, y.dim(), "cross jvp direction")?;
        if sup_norm(dy) == 0.0 {
            return Ok(Array2::zeros(self.x.dim()));
        }
        let h = self.step_for(sup_norm(&y.to_owned()), dy);
        let warm = DivergenceWarmStart {
            xy: self.base.warm.xy.clone(),
            xx: None,
            yy: None,
        };
        let grad_at = |y_pert: Array2<f64>| -> Result<Array2<f64>> {
            let ev = ObjectiveEvaluator::new(
                y_pert.view(),
                Objective::LossOnly,
                self.evaluator.cost().clone(),
                *self.evaluator.sinkhorn(),
            )?;
            Ok(ev.evaluate(self.x.view(), &warm)?.grad)
        };
        let gp = grad_at(&y + &(dy * h))?;
        let gm = grad_at(&y - &(dy * h))?;
        Ok((gp - gm) / (2.0 * h))
    }

    /// `(∂_Y∇ₓF)ᵀ · w` for w of shape M×d, via the mixed-partial identity
    /// `∂_Y⟨w, ∇ₓL⟩ = d/dt ∇_Y L(X + t w, Y)`.
    pub fn cross_vjp(&self, w: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_shape(w, self.x.dim(), "cross vjp cotangent")?;
        let n = self.evaluator.target().dim();
        if sup_norm(w) == 0.0 {
            return Ok(Array2::zeros(n));
        }
        let h = self.step_for(sup_norm(&self.x), w);
        let plus = &self.x + &(w * h);
        let minus = &self.x - &(w * h);
        let gp = self.evaluator.grad_y_cross(plus.view(), &self.base.warm)?;
        let gm = self.evaluator.grad_y_cross(minus.view(), &self.base.warm)?;
        Ok((gp - gm) / (2.0 * h))
    }
}

fn loss_probe(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &CostSpec,
    sinkhorn: &SinkhornParams,
) -> Result<SecondOrderProbe> {
    SecondOrderProbe::new(
        x,
        y,
        Objective::LossOnly,
        spec.clone(),
        *sinkhorn,
        ImplicitDiffParams::default().fd_step,
    )
}

/// `∇²ₓL(X, Y) · direction` through re-solved potentials.
pub fn hessian_vector_product(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    direction: &Array2<f64>,
    spec: &CostSpec,
    sinkhorn: &SinkhornParams,
) -> Result<Array2<f64>> {
    loss_probe(x, y, spec, sinkhorn)?.hvp(direction)
}

/// `∂_Y∇ₓL(X, Y) · direction` through re-solved potentials.
pub fn cross_jacobian_vector_product(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    direction: &Array2<f64>,
    spec: &CostSpec,
    sinkhorn: &SinkhornParams,
) -> Result<Array2<f64>> {
    loss_probe(x, y, spec, sinkhorn)?.cross_jvp(direction)
}

/// Pull-back of a cotangent through the fixed point, with solver diagnostics.
#[derive(Debug, Clone)]
pub struct ImplicitVjp {
    pub grad_y: Array2<f64>,
    pub cg_iterations: usize,
    pub cg_residuals: Vec<f64>,
    pub objective: Objective,
}

/// `vᵀ ∂_Y X*(Y)` at a converged fixed point `x_star` of the flow.
pub fn implicit_vjp(
    x_star: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    v: &Array2<f64>,
    flow: &FlowParams,
    idp: &ImplicitDiffParams,
) -> Result<Array2<f64>> {
    Ok(implicit_vjp_detailed(x_star, y, v, flow, idp)?.grad_y)
}

pub fn implicit_vjp_detailed(
    x_star: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    v: &Array2<f64>,
    flow: &FlowParams,
    idp: &ImplicitDiffParams,
) -> Result<ImplicitVjp> {
    idp.validate()?;
    let probe = SecondOrderProbe::for_flow(x_star, y, flow, idp)?;
    implicit_vjp_with_probe(&probe, v, idp, flow.objective)
}

pub(crate) fn implicit_vjp_with_probe(
    probe: &SecondOrderProbe,
    v: &Array2<f64>,
    idp: &ImplicitDiffParams,
    objective: Objective,
) -> Result<ImplicitVjp> {
    let grad_norm = sup_norm(probe.gradient());
    if grad_norm > idp.fixed_point_tol {
        return Err(Error::NotAFixedPoint {
            grad_norm,
            tol: idp.fixed_point_tol,
        });
    }
    probe.check_shape(v, probe.x().dim(), "implicit vjp cotangent")?;
    let lambda = idp.lambda;
    let normal = |u: &Array2<f64>| -> Result<Array2<f64>> {
        let hu = probe.hvp(u)?;
        let mut out = probe.hvp(&hu)?;
        out.scaled_add(lambda, u);
        Ok(out)
    };
    let cg = conjugate_gradient(normal, v, idp.cg_tol, idp.cg_max_iters)?;
    let hu = probe.hvp(&cg.solution)?;
    let grad_y = -probe.cross_vjp(&hu)?;
    Ok(ImplicitVjp {
        grad_y,
        cg_iterations: cg.iterations,
        cg_residuals: cg.residuals,
        objective,
    })
}

/// Reverse accumulation through every step of a fixed-length flow.
#[derive(Debug, Clone)]
pub struct UnrolledVjp {
    pub grad_y: Array2<f64>,
    /// `‖v_l‖_F` for l = L, L−1, …, 1, where `v_L` is the incoming cotangent.
    pub cotangent_norms: Vec<f64>,
    pub steps: usize,
}

/// Runs exactly `flow.max_steps` gradient steps from `x0`, storing every
/// iterate, then back-propagates `v` through `X ← X − τ∇ₓF(X, Y)`.
pub fn unrolled_vjp(
    y: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    v: &Array2<f64>,
    flow: &FlowParams,
    idp: &ImplicitDiffParams,
) -> Result<UnrolledVjp> {
    flow.validate()?;
    idp.validate()?;
    if v.dim() != x0.dim() {
        return Err(Error::DimensionMismatch {
            context: "unrolled cotangent",
            expected: x0.len(),
            found: v.len(),
        });
    }
    let steps = flow.max_steps;
    let needed = (steps + 1) * x0.len() * std::mem::size_of::<f64>() * 2;
    if needed > idp.unroll_memory_budget {
        return Err(Error::MemoryBudget {
            needed,
            budget: idp.unroll_memory_budget,
        });
    }
    let evaluator = ObjectiveEvaluator::new(
        y,
        flow.objective,
        flow.cost.clone(),
        idp.tightened(&flow.sinkhorn),
    )?;

    let mut iterates = Vec::with_capacity(steps);
    let mut warms = Vec::with_capacity(steps);
    let mut x = x0.to_owned();
    let mut warm = DivergenceWarmStart::default();
    for step in 0..steps {
        let eval = evaluator
            .evaluate(x.view(), &warm)
            .map_err(|e| Error::FlowStep {
                step,
                source: Box::new(e),
            })?;
        iterates.push(x.clone());
        warms.push(warm);
        x.scaled_add(-flow.tau, &eval.grad);
        warm = eval.warm;
    }

    let mut cot = v.clone();
    let mut grad_y = Array2::zeros(y.dim());
    let mut cotangent_norms = Vec::with_capacity(steps);
    for l in (0..steps).rev() {
        cotangent_norms.push(frob_norm(&cot));
        let probe = SecondOrderProbe::with_evaluator(
            evaluator.clone(),
            iterates[l].view(),
            &warms[l],
            idp.fd_step,
        )?;
        grad_y.scaled_add(-flow.tau, &probe.cross_vjp(&cot)?);
        if l > 0 {
            let hv = probe.hvp(&cot)?;
            cot.scaled_add(-flow.tau, &hv);
        }
    }
    Ok(UnrolledVjp {
        grad_y,
        cotangent_norms,
        steps,
    })
}

/// `(1 − 2τ/M)^(L−1)`: the unrolled Jacobian's scale when the coupling is
/// frozen and the cost is squared Euclidean (Hessian `(2/M)·I`).
pub fn frozen_coupling_decay(tau: f64, m: usize, steps: usize) -> f64 {
    (1.0 - 2.0 * tau / m as f64).powi(steps as i32 - 1)
}

fn start_vector(shape: (usize, usize)) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Condition numbers `(κ_x, κ_y)` of `∇ₓL(X, Y)` with respect to X and Y:
/// `σ_max(operator) · ‖input‖_F / ‖∇ₓL‖_F`.
pub fn condition_numbers(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &CostSpec,
    sinkhorn: &SinkhornParams,
    idp: &ImplicitDiffParams,
) -> Result<(f64, f64)> {
    let probe = SecondOrderProbe::new(
        x,
        y,
        Objective::LossOnly,
        spec.clone(),
        idp.tightened(sinkhorn),
        idp.fd_step,
    )?;
    let grad_norm = frob_norm(probe.gradient());
    if grad_norm == 0.0 || !grad_norm.is_finite() {
        return Err(Error::ZeroGradient);
    }
    let sigma_x = power_iteration(
        |v| probe.hvp(v),
        &start_vector(x.dim()),
        POWER_ITERS,
        POWER_REL_TOL,
    )?;
    let sigma_y_sq = power_iteration(
        |d| probe.cross_vjp(&probe.cross_jvp(d)?),
        &start_vector(y.dim()),
        POWER_ITERS,
        POWER_REL_TOL,
    )?;
    let x_norm = frob_norm(&x.to_owned());
    let y_norm = frob_norm(&y.to_owned());
    Ok((
        sigma_x * x_norm / grad_norm,
        sigma_y_sq.sqrt() * y_norm / grad_norm,
    ))
}

/// Condition number `(σ_max + λ)/(σ_min + λ)` of the implicit system
/// operator `HᵀH + λI` at `x_star`, from Lanczos extremes of `HᵀH`.
pub fn linear_operator_condition(
    x_star: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    flow: &FlowParams,
    idp: &ImplicitDiffParams,
) -> Result<f64> {
    let probe = SecondOrderProbe::for_flow(x_star, y, flow, idp)?;
    let (lo, hi) = normal_operator_extremes(&probe)?;
    condition_from_extremes(lo, hi, idp.lambda)
}

/// Extreme eigenvalues of `HᵀH` for a probe, clamped at zero from below.
pub fn normal_operator_extremes(probe: &SecondOrderProbe) -> Result<(f64, f64)> {
    let (lo, hi) = lanczos_extremes(
        |u| probe.hvp(&probe.hvp(u)?),
        &start_vector(probe.x().dim()),
        LANCZOS_MAX_STEPS,
    )?;
    if !(hi > 0.0) {
        return Err(Error::EstimationFailed(format!(
            "non-positive largest eigenvalue {hi}"
        )));
    }
    Ok((lo.max(0.0), hi))
}

pub fn condition_from_extremes(lo: f64, hi: f64, lambda: f64) -> Result<f64> {
    let denom = lo + lambda;
    if !(denom > 0.0) {
        return Err(Error::EstimationFailed(
            "singular operator with λ = 0".into(),
        ));
    }
    Ok((hi + lambda) / denom)
}
