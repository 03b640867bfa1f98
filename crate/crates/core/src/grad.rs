//! First-order gradients of the Sinkhorn loss and divergence with respect to
//! support positions.
//!
//! By the envelope theorem the optimal potentials are held fixed, so
//! `∂L/∂Cᵢⱼ = P*ᵢⱼ` and `∇ₓL = [∂ₓC(X,Y)]ᵀ P*`. For the divergence the
//! self-transport term `−½ L(X,X)` depends on X through both cost slots and
//! both contributions are kept.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{cost_matrix, CostSpec, DiscreteMeasure, PairwiseCost};
use crate::sinkhorn::{
    coupling_unchecked, sinkhorn_solve_warm, DivergenceSolution, DivergenceWarmStart,
    SinkhornParams, SinkhornSolution,
};

/// Energy minimized by the pooling flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Debiased Sinkhorn divergence `S(X, Y)`.
    #[default]
    Divergence,
    /// Cross term `L(X, Y)` only.
    LossOnly,
}

fn require_converged(sol: &SinkhornSolution) -> Result<()> {
    if sol.converged {
        Ok(())
    } else {
        Err(Error::SinkhornNotConverged {
            iterations: sol.iterations,
            marginal_error: sol.marginal_error,
        })
    }
}

fn check_shapes(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sol: &SinkhornSolution,
) -> Result<()> {
    if sol.f.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            context: "potential f vs rows of X",
            expected: x.nrows(),
            found: sol.f.len(),
        });
    }
    if sol.g.len() != y.nrows() {
        return Err(Error::DimensionMismatch {
            context: "potential g vs rows of Y",
            expected: y.nrows(),
            found: sol.g.len(),
        });
    }
    Ok(())
}

/// Row i: `Σⱼ Pᵢⱼ ∂c/∂x (xᵢ, yⱼ)`.
pub(crate) fn transport_grad_x(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    spec: &CostSpec,
) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("fresh array is contiguous");
        for (j, yj) in y.outer_iter().enumerate() {
            spec.add_grad_x(x.row(i), yj, p[[i, j]], row);
        }
    }
    out
}

/// Row j: `Σᵢ Pᵢⱼ ∂c/∂y (xᵢ, yⱼ)`.
pub(crate) fn transport_grad_y(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    p: ArrayView2<'_, f64>,
    spec: &CostSpec,
) -> Array2<f64> {
    let mut out = Array2::zeros(y.dim());
    for (j, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("fresh array is contiguous");
        for (i, xi) in x.outer_iter().enumerate() {
            spec.add_grad_y(xi, y.row(j), p[[i, j]], row);
        }
    }
    out
}

/// `∇ₓ L(X, Y)` from converged potentials of the cross problem.
pub fn grad_x_loss(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sol: &SinkhornSolution,
    spec: &CostSpec,
    epsilon: f64,
) -> Result<Array2<f64>> {
    require_converged(sol)?;
    check_shapes(x, y, sol)?;
    let c = cost_matrix(x, y, spec)?;
    let p = coupling_unchecked(sol.f.view(), sol.g.view(), c.view(), epsilon);
    Ok(transport_grad_x(x, y, p.view(), spec))
}

/// `∇_Y L(X, Y)`, the same envelope argument applied to the second support.
pub fn grad_y_loss(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    sol: &SinkhornSolution,
    spec: &CostSpec,
    epsilon: f64,
) -> Result<Array2<f64>> {
    require_converged(sol)?;
    check_shapes(x, y, sol)?;
    let c = cost_matrix(x, y, spec)?;
    let p = coupling_unchecked(sol.f.view(), sol.g.view(), c.view(), epsilon);
    Ok(transport_grad_y(x, y, p.view(), spec))
}

/// Total derivative of `½ L(X, X)` with respect to X (both cost slots).
fn half_self_grad(
    x: ArrayView2<'_, f64>,
    sol: &SinkhornSolution,
    spec: &CostSpec,
    epsilon: f64,
) -> Result<Array2<f64>> {
    require_converged(sol)?;
    check_shapes(x, x, sol)?;
    let c = cost_matrix(x, x, spec)?;
    let p = coupling_unchecked(sol.f.view(), sol.g.view(), c.view(), epsilon);
    let mut both = transport_grad_x(x, x, p.view(), spec);
    both += &transport_grad_y(x, x, p.view(), spec);
    both *= 0.5;
    Ok(both)
}

/// `∇ₓ S(X, Y) = ∇ₓ L(X, Y) − ½ ∇ₓ L(X, X)`.
pub fn grad_x_divergence(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    div: &DivergenceSolution,
    spec: &CostSpec,
    epsilon: f64,
) -> Result<Array2<f64>> {
    let mut grad = grad_x_loss(x, y, &div.xy, spec, epsilon)?;
    grad -= &half_self_grad(x, &div.xx, spec, epsilon)?;
    Ok(grad)
}

/// Energy and X-gradient of an [`Objective`] at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub energy: f64,
    pub grad: Array2<f64>,
    pub warm: DivergenceWarmStart,
}

/// Evaluates an objective for varying X against a fixed target Y.
///
/// The self-transport value `L(Y, Y)` does not depend on X and is solved
/// once on construction.
#[derive(Debug, Clone)]
pub struct ObjectiveEvaluator {
    target: DiscreteMeasure,
    objective: Objective,
    cost: CostSpec,
    sinkhorn: SinkhornParams,
    yy_loss: f64,
    yy_solution: Option<SinkhornSolution>,
}

impl ObjectiveEvaluator {
    pub fn new(
        y: ArrayView2<'_, f64>,
        objective: Objective,
        cost: CostSpec,
        sinkhorn: SinkhornParams,
    ) -> Result<Self> {
        let target = DiscreteMeasure::uniform(y.to_owned())?;
        let (yy_loss, yy_solution) = match objective {
            Objective::LossOnly => (0.0, None),
            Objective::Divergence => {
                let cyy = cost_matrix(y, y, &cost)?;
                let sol = sinkhorn_solve_warm(&target, &target, cyy.view(), &sinkhorn, None)?;
                require_converged(&sol)?;
                (sol.loss, Some(sol))
            }
        };
        Ok(Self {
            target,
            objective,
            cost,
            sinkhorn,
            yy_loss,
            yy_solution,
        })
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn sinkhorn(&self) -> &SinkhornParams {
        &self.sinkhorn
    }

    pub fn target(&self) -> ArrayView2<'_, f64> {
        self.target.points()
    }

    fn solve_cross(
        &self,
        mu: &DiscreteMeasure,
        warm: &DivergenceWarmStart,
    ) -> Result<SinkhornSolution> {
        let c = cost_matrix(mu.points(), self.target.points(), &self.cost)?;
        let sol = sinkhorn_solve_warm(
            mu,
            &self.target,
            c.view(),
            &self.sinkhorn,
            warm.xy.as_ref().map(|g| g.view()),
        )?;
        require_converged(&sol)?;
        Ok(sol)
    }

    fn solve_self(
        &self,
        mu: &DiscreteMeasure,
        warm: &DivergenceWarmStart,
    ) -> Result<SinkhornSolution> {
        let c = cost_matrix(mu.points(), mu.points(), &self.cost)?;
        let sol = sinkhorn_solve_warm(
            mu,
            mu,
            c.view(),
            &self.sinkhorn,
            warm.xx.as_ref().map(|g| g.view()),
        )?;
        require_converged(&sol)?;
        Ok(sol)
    }

    /// Energy and gradient at `x`. Fails if any Sinkhorn solve does not converge.
    pub fn evaluate(
        &self,
        x: ArrayView2<'_, f64>,
        warm: &DivergenceWarmStart,
    ) -> Result<Evaluation> {
        let mu = DiscreteMeasure::uniform(x.to_owned())?;
        let eps = self.sinkhorn.epsilon;
        let xy = self.solve_cross(&mu, warm)?;
        let mut grad = grad_x_loss(x, self.target.points(), &xy, &self.cost, eps)?;
        match self.objective {
            Objective::LossOnly => Ok(Evaluation {
                energy: xy.loss,
                grad,
                warm: DivergenceWarmStart {
                    xy: Some(xy.g),
                    xx: None,
                    yy: None,
                },
            }),
            Objective::Divergence => {
                let xx = self.solve_self(&mu, warm)?;
                grad -= &half_self_grad(x, &xx, &self.cost, eps)?;
                let energy = xy.loss - 0.5 * xx.loss - 0.5 * self.yy_loss;
                Ok(Evaluation {
                    energy,
                    grad,
                    warm: DivergenceWarmStart {
                        xy: Some(xy.g),
                        xx: Some(xx.g),
                        yy: self.yy_solution.as_ref().map(|s| s.g.clone()),
                    },
                })
            }
        }
    }

    /// `∇_Y` of the objective at `x`. Only the cross term depends on Y through X.
    pub fn grad_y_cross(
        &self,
        x: ArrayView2<'_, f64>,
        warm: &DivergenceWarmStart,
    ) -> Result<Array2<f64>> {
        let mu = DiscreteMeasure::uniform(x.to_owned())?;
        let xy = self.solve_cross(&mu, warm)?;
        grad_y_loss(
            x,
            self.target.points(),
            &xy,
            &self.cost,
            self.sinkhorn.epsilon,
        )
    }
}
