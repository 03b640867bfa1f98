//! The pooling forward pass: gradient descent of the pooled support X on
//! `S(X, Y)` (or `L(X, Y)`), starting from a shared reference `X⁽⁰⁾`.
//!
//! The output depends on Y only up to row permutation provided every call
//! uses the same reference, which is why [`init_reference`] is deterministic.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Objective, ObjectiveEvaluator};
use crate::measures::CostSpec;
use crate::sinkhorn::{DivergenceWarmStart, SinkhornParams};

/// Energy growth beyond this multiple of the initial energy aborts the flow.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Step size τ of `X ← X − τ∇`.
    pub tau: f64,
    /// Maximum number of updates L.
    pub max_steps: usize,
    /// Stop once `‖∇‖∞ < grad_tol`.
    pub grad_tol: f64,
    pub objective: Objective,
    pub sinkhorn: SinkhornParams,
    pub cost: CostSpec,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            max_steps: 500,
            grad_tol: 1e-5,
            objective: Objective::Divergence,
            sinkhorn: SinkhornParams::default(),
            cost: CostSpec::SquaredEuclidean,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter(
                "max_steps must be at least 1".into(),
            ));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        self.cost.validate()?;
        self.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub x_star: Array2<f64>,
    /// Objective value at every visited iterate, the last one at `x_star`.
    pub energies: Vec<f64>,
    pub steps_taken: usize,
    /// `‖∇‖∞` at `x_star`.
    pub final_grad_norm: f64,
    /// True when the flow stopped on `grad_tol` rather than `max_steps`.
    pub converged: bool,
}

pub(crate) fn sup_norm(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Standard-normal M×d reference drawn from a seeded ChaCha8 stream, row-major.
pub fn init_reference(m: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut rng))
}

fn check_inputs(y: ArrayView2<'_, f64>, x0: ArrayView2<'_, f64>) -> Result<()> {
    if y.nrows() == 0 {
        return Err(Error::EmptyInput("graph representation"));
    }
    if x0.nrows() == 0 {
        return Err(Error::EmptyInput("pooling reference"));
    }
    if y.ncols() != x0.ncols() {
        return Err(Error::DimensionMismatch {
            context: "reference vs representation features",
            expected: y.ncols(),
            found: x0.ncols(),
        });
    }
    Ok(())
}

/// Runs the flow from `x0` against `y`.
pub fn flowpool(
    y: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    params: &FlowParams,
) -> Result<FlowResult> {
    params.validate()?;
    check_inputs(y, x0)?;
    let evaluator =
        ObjectiveEvaluator::new(y, params.objective, params.cost.clone(), params.sinkhorn)
            .map_err(|e| Error::FlowStep {
                step: 0,
                source: Box::new(e),
            })?;
    run_flow(&evaluator, x0, params)
}

pub(crate) fn run_flow(
    evaluator: &ObjectiveEvaluator,
    x0: ArrayView2<'_, f64>,
    params: &FlowParams,
) -> Result<FlowResult> {
    let mut x = x0.to_owned();
    let mut warm = DivergenceWarmStart::default();
    let mut energies = Vec::new();
    let mut initial = f64::NAN;
    let mut step = 0;
    loop {
        let eval = evaluator
            .evaluate(x.view(), &warm)
            .map_err(|e| Error::FlowStep {
                step,
                source: Box::new(e),
            })?;
        let grad_norm = sup_norm(&eval.grad);
        if step == 0 {
            initial = eval.energy;
        } else if !eval.energy.is_finite()
            || !grad_norm.is_finite()
            || eval.energy - initial > DIVERGENCE_FACTOR * initial.abs().max(1e-8)
        {
            return Err(Error::FlowDiverged {
                step,
                energy: eval.energy,
                initial,
            });
        }
        energies.push(eval.energy);
        let converged = grad_norm < params.grad_tol;
        if converged || step == params.max_steps {
            return Ok(FlowResult {
                x_star: x,
                energies,
                steps_taken: step,
                final_grad_norm: grad_norm,
                converged,
            });
        }
        x.scaled_add(-params.tau, &eval.grad);
        warm = eval.warm;
        step += 1;
    }
}

/// [`flowpool`] over a batch with a shared reference; output order matches input.
pub fn pool_batch(
    reps: &[Array2<f64>],
    x0: ArrayView2<'_, f64>,
    params: &FlowParams,
) -> Result<Vec<FlowResult>> {
    let results: Vec<Result<FlowResult>> = reps
        .par_iter()
        .map(|y| flowpool(y.view(), x0, params))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Batch {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reference_is_deterministic() {
        assert_eq!(init_reference(5, 8, 0), init_reference(5, 8, 0));
        assert_ne!(init_reference(5, 8, 0), init_reference(5, 8, 1));
        let single = init_reference(1, 1, 42);
        assert_eq!(single.dim(), (1, 1));
        assert!(single[[0, 0]].is_finite());
    }

    #[test]
    fn singleton_flow_reaches_target() {
        let y = array![[0.7, -1.2]];
        let x0 = array![[-1.0, 2.0]];
        let params = FlowParams {
            tau: 0.3,
            grad_tol: 1e-9,
            objective: Objective::LossOnly,
            ..FlowParams::default()
        };
        let res = flowpool(y.view(), x0.view(), &params).unwrap();
        assert!(res.converged);
        assert!((&res.x_star - &y).iter().all(|v| v.abs() < 1e-9));
        assert!(res.energies.last().unwrap() <= res.energies.first().unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let y = Array2::zeros((0, 2));
        assert!(flowpool(y.view(), array![[0.0, 0.0]].view(), &FlowParams::default()).is_err());
        let y = array![[0.0, 1.0, 2.0]];
        assert!(matches!(
            flowpool(y.view(), array![[0.0, 0.0]].view(), &FlowParams::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad = FlowParams {
            tau: 0.0,
            ..FlowParams::default()
        };
        assert!(flowpool(array![[0.0]].view(), array![[1.0]].view(), &bad).is_err());
    }

    #[test]
    fn oversized_step_is_reported() {
        let y = array![[0.0], [1.0], [2.0]];
        let x0 = array![[5.0], [-3.0]];
        let params = FlowParams {
            tau: 50.0,
            objective: Objective::LossOnly,
            ..FlowParams::default()
        };
        assert!(matches!(
            flowpool(y.view(), x0.view(), &params),
            Err(Error::FlowDiverged { .. })
        ));
    }

    #[test]
    fn batch_edges() {
        let x0 = init_reference(2, 2, 3);
        assert!(pool_batch(&[], x0.view(), &FlowParams::default())
            .unwrap()
            .is_empty());
        let y = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let direct = flowpool(y.view(), x0.view(), &FlowParams::default()).unwrap();
        let batched =
            pool_batch(std::slice::from_ref(&y), x0.view(), &FlowParams::default()).unwrap();
        assert_eq!(batched, vec![direct]);

        let bad = vec![y.clone(), array![[0.0, 0.0, 0.0]]];
        match pool_batch(&bad, x0.view(), &FlowParams::default()) {
            Err(Error::Batch { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected batch error, got {other:?}"),
        }
    }
}
