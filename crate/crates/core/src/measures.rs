//! Discrete probability measures over ℝᵈ and ground costs between their supports.
//!
//! A graph representation `Y` (one row per node) becomes the measure
//! `ν = Σⱼ bⱼ δ_{yⱼ}`. Weights are stored explicitly even when uniform so that
//! non-uniform node importances need no API change.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted point set: `points` is n×d, `weights` lies on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(Error::EmptyInput("measure support"));
        }
        if d == 0 {
            return Err(Error::EmptyInput("feature dimension"));
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                context: "measure weights",
                expected: n,
                found: weights.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("measure support"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/n` on the given support.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::EmptyInput("measure support"));
        }
        let weights = Array1::from_elem(n, 1.0 / n as f64);
        Self::new(points, weights)
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>) {
        (self.points, self.weights)
    }
}

/// Uniform measure over the rows of `points`.
pub fn uniform_measure(points: &Array2<f64>) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(points.to_owned())
}

/// A pairwise ground cost `c(x, y)` together with its partial derivatives.
///
/// Implementors must be differentiable wherever the flow evaluates them.
/// The default `grad_y` assumes `c(x, y) = c(y, x)`.
pub trait PairwiseCost: fmt::Debug + Send + Sync {
    fn cost(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64;

    /// Adds `scale · ∂c/∂x (x, y)` into `out`.
    fn add_grad_x(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
        scale: f64,
        out: &mut [f64],
    );

    /// Adds `scale · ∂c/∂y (x, y)` into `out`.
    fn add_grad_y(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
        scale: f64,
        out: &mut [f64],
    ) {
        self.add_grad_x(y, x, scale, out);
    }
}

/// Metric underlying a [`CostSpec::MetricPower`] cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Manhattan,
}

/// Ground cost selection. `SquaredEuclidean` is the same cost as
/// `MetricPower { metric: Euclidean, p: 2.0 }` with a cheaper evaluation.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSpec {
    #[default]
    SquaredEuclidean,
    MetricPower {
        metric: Metric,
        p: f64,
    },
    #[serde(skip)]
    Custom(Arc<dyn PairwiseCost>),
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostSpec::SquaredEuclidean => write!(f, "SquaredEuclidean"),
            CostSpec::MetricPower { metric, p } => write!(f, "MetricPower({metric:?}, {p})"),
            CostSpec::Custom(c) => write!(f, "Custom({c:?})"),
        }
    }
}

impl CostSpec {
    pub fn metric_power(metric: Metric, p: f64) -> Result<Self> {
        let spec = CostSpec::MetricPower { metric, p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CostSpec::MetricPower { p, .. } if !(*p > 0.0 && p.is_finite()) => Err(
                Error::InvalidParameter(format!("cost exponent must be positive, got {p}")),
            ),
            _ => Ok(()),
        }
    }
}

fn euclidean(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn manhattan(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum()
}

impl PairwiseCost for CostSpec {
    fn cost(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        match self {
            CostSpec::SquaredEuclidean => {
                x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
            }
            CostSpec::MetricPower { metric, p } => {
                let dist = match metric {
                    Metric::Euclidean => euclidean(x, y),
                    Metric::Manhattan => manhattan(x, y),
                };
                dist.powf(*p)
            }
            CostSpec::Custom(c) => c.cost(x, y),
        }
    }

    fn add_grad_x(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
        scale: f64,
        out: &mut [f64],
    ) {
        match self {
            CostSpec::SquaredEuclidean => {
                for ((o, a), b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
                    *o += scale * 2.0 * (a - b);
                }
            }
            CostSpec::MetricPower { metric, p } => {
                // the derivative at x = y is taken as zero (exact for p > 1)
                match metric {
                    Metric::Euclidean => {
                        let dist = euclidean(x, y);
                        if dist == 0.0 {
                            return;
                        }
                        let coef = scale * p * dist.powf(p - 2.0);
                        for ((o, a), b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
                            *o += coef * (a - b);
                        }
                    }
                    Metric::Manhattan => {
                        let dist = manhattan(x, y);
                        if dist == 0.0 {
                            return;
                        }
                        let coef = scale * p * dist.powf(p - 1.0);
                        for ((o, a), b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
                            let diff: f64 = a - b;
                            if diff != 0.0 {
                                *o += coef * diff.signum();
                            }
                        }
                    }
                }
            }
            CostSpec::Custom(c) => c.add_grad_x(x, y, scale, out),
        }
    }

    fn add_grad_y(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
        scale: f64,
        out: &mut [f64],
    ) {
        match self {
            CostSpec::Custom(c) => c.add_grad_y(x, y, scale, out),
            _ => self.add_grad_x(y, x, scale, out),
        }
    }
}

fn check_points(points: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput(what));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// `C[i, j] = c(xᵢ, yⱼ)` for the rows of `x` (n×d) and `y` (m×d).
pub fn cost_matrix(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    spec: &CostSpec,
) -> Result<Array2<f64>> {
    check_points(x, "cost matrix rows")?;
    check_points(y, "cost matrix columns")?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            context: "cost matrix feature dimension",
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    spec.validate()?;
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.outer_iter().enumerate() {
        for (j, yj) in y.outer_iter().enumerate() {
            c[[i, j]] = spec.cost(xi, yj);
        }
    }
    Ok(c)
}
