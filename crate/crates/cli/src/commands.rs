//! Experiment drivers behind the subcommands. Each returns its results so
//! they can be checked without going through files.

use std::path::Path;

use anyhow::{Context, Result};
use flowpool::flow::{flowpool, init_reference, FlowParams, FlowResult};
use flowpool::grad::Objective;
use flowpool::graphs::GraphDataset;
use flowpool::implicit::{
    condition_from_extremes, condition_numbers, implicit_vjp, normal_operator_extremes,
    ImplicitDiffParams, SecondOrderProbe,
};
use flowpool::pipeline::{
    prepare_graph, train_eval_cv, AdamState, CvReport, ModelParams, ModelSpec, Pooling, TrainConfig,
};
use flowpool::sinkhorn::SinkhornParams;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{ensure_dir, fmt, write_json, write_pointcloud, write_table};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub m: usize,
    pub seed: u64,
    pub flow: FlowParams,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            m: 5,
            seed: 0,
            flow: FlowParams::default(),
        }
    }
}

/// Pools `y` from the seeded reference and writes `x_star.csv` and `energy_trace.csv`.
pub fn run_pool(y: &Array2<f64>, cfg: &PoolConfig, out: &Path) -> Result<FlowResult> {
    let x0 = init_reference(cfg.m, y.ncols(), cfg.seed);
    let res = flowpool(y.view(), x0.view(), &cfg.flow)?;
    ensure_dir(out)?;
    write_pointcloud(&out.join("x_star.csv"), cfg, &res.x_star)?;
    write_table(
        &out.join("energy_trace.csv"),
        cfg,
        &["step".to_string(), "energy".to_string()],
        res.energies
            .iter()
            .enumerate()
            .map(|(i, e)| vec![i.to_string(), fmt(*e)]),
    )?;
    Ok(res)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleConfig {
    pub n: usize,
    pub m: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Trajectory rows are written every this many iterations.
    pub record_every: usize,
    pub flow: FlowParams,
    pub implicit: ImplicitDiffParams,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self {
            n: 20,
            m: 12,
            lr: 0.01,
            iters: 400,
            seed: 0,
            record_every: 10,
            flow: FlowParams {
                max_steps: 5000,
                sinkhorn: SinkhornParams {
                    epsilon: 0.01,
                    ..SinkhornParams::default()
                },
                ..FlowParams::default()
            },
            implicit: ImplicitDiffParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircleSummary {
    pub iterations: usize,
    pub final_loss: f64,
    /// `max |‖xᵢ‖ − 1|` over the pooled points.
    pub max_x_deviation: f64,
    /// `mean |‖yⱼ‖ − 1|` over the input points.
    pub mean_y_deviation: f64,
    pub config: CircleConfig,
}

/// `(iteration, X, Y)`.
pub type Snapshot = (usize, Array2<f64>, Array2<f64>);

#[derive(Debug, Clone)]
pub struct CircleRun {
    pub summary: CircleSummary,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub trajectory: Vec<Snapshot>,
}

fn ring_loss(x: &Array2<f64>) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(x.dim());
    let mut loss = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let r = row.dot(&row) - 1.0;
        loss += r * r;
        grad.row_mut(i).assign(&(&row * (4.0 * r)));
    }
    (loss, grad)
}

fn norm_deviations(p: &Array2<f64>) -> Vec<f64> {
    p.rows()
        .into_iter()
        .map(|r| (r.dot(&r).sqrt() - 1.0).abs())
        .collect()
}

/// Moves Y by Adam so that every pooled point lands on the unit circle,
/// differentiating the pooled points through the flow's fixed point.
pub fn circle_demo(cfg: &CircleConfig) -> Result<CircleRun> {
    let mut y = init_reference(cfg.n, 2, cfg.seed);
    let x0 = init_reference(cfg.m, 2, cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new(y.dim());
    let mut trajectory = Vec::new();
    let mut it = 0;
    loop {
        let res = flowpool(y.view(), x0.view(), &cfg.flow)
            .with_context(|| format!("flow failed at iteration {it}"))?;
        let (loss, gx) = ring_loss(&res.x_star);
        if it % cfg.record_every.max(1) == 0 || it == cfg.iters {
            trajectory.push((it, res.x_star.clone(), y.clone()));
        }
        if it == cfg.iters {
            let x_dev = norm_deviations(&res.x_star);
            let y_dev = norm_deviations(&y);
            let summary = CircleSummary {
                iterations: it,
                final_loss: loss,
                max_x_deviation: x_dev.iter().copied().fold(0.0, f64::max),
                mean_y_deviation: y_dev.iter().sum::<f64>() / y_dev.len() as f64,
                config: cfg.clone(),
            };
            return Ok(CircleRun {
                summary,
                x: res.x_star,
                y,
                trajectory,
            });
        }
        let gy = implicit_vjp(res.x_star.view(), y.view(), &gx, &cfg.flow, &cfg.implicit)
            .with_context(|| format!("implicit gradient failed at iteration {it}"))?;
        adam.step(&mut y, &gy, cfg.lr, 0.9, 0.999, 1e-8);
        it += 1;
    }
}

pub fn write_circle(run: &CircleRun, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let cfg = &run.summary.config;
    let header: Vec<String> = ["iteration", "point", "x0", "x1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = |pick: fn(&Snapshot) -> &Array2<f64>| {
        run.trajectory
            .iter()
            .flat_map(move |snap| {
                pick(snap)
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(move |(p, r)| {
                        vec![snap.0.to_string(), p.to_string(), fmt(r[0]), fmt(r[1])]
                    })
            })
            .collect::<Vec<_>>()
    };
    write_table(&out.join("x_trajectory.csv"), cfg, &header, rows(|s| &s.1))?;
    write_table(&out.join("y_trajectory.csv"), cfg, &header, rows(|s| &s.2))?;
    write_json(&out.join("circle_summary.json"), &run.summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionConfig {
    pub clouds: usize,
    pub eps_grid: Vec<f64>,
    /// Rows of the pooled cloud X.
    pub m: usize,
    /// Rows of the input cloud Y.
    pub n: usize,
    pub d: usize,
    pub lambda: f64,
    pub seed: u64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iters: usize,
    /// Flow used to reach the fixed point for the implicit operator.
    pub flow_tau: f64,
    pub flow_steps: usize,
    pub flow_grad_tol: f64,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            clouds: 70,
            eps_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            m: 5,
            n: 10,
            d: 2,
            lambda: 1e-6,
            seed: 0,
            sinkhorn_tol: 1e-9,
            sinkhorn_max_iters: 200_000,
            flow_tau: 1.0,
            flow_steps: 5000,
            flow_grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self {
            mean,
            std,
            median,
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub epsilon: f64,
    pub kappa_x: Stats,
    pub kappa_y: Stats,
    pub kappa_operator: Stats,
    pub failed_kappa: usize,
    pub failed_operator: usize,
}

/// κ_x and κ_y at independent random clouds, and κ(A + λI) at the LossOnly
/// fixed point pooled from each Y, for every ε in the grid.
pub fn condition_study(cfg: &ConditionConfig) -> Result<Vec<ConditionRow>> {
    let idp = ImplicitDiffParams {
        lambda: cfg.lambda,
        ..ImplicitDiffParams::default()
    };
    let mut rows = Vec::with_capacity(cfg.eps_grid.len());
    for &epsilon in &cfg.eps_grid {
        let sinkhorn = SinkhornParams {
            epsilon,
            tol: cfg.sinkhorn_tol,
            max_iters: cfg.sinkhorn_max_iters,
            anneal: true,
        };
        let flow = FlowParams {
            tau: cfg.flow_tau,
            max_steps: cfg.flow_steps,
            grad_tol: cfg.flow_grad_tol,
            objective: Objective::LossOnly,
            sinkhorn,
            ..FlowParams::default()
        };
        let (mut kx, mut ky, mut ka) = (Vec::new(), Vec::new(), Vec::new());
        let (mut failed_kappa, mut failed_operator) = (0, 0);
        for c in 0..cfg.clouds as u64 {
            let y = init_reference(cfg.n, cfg.d, cfg.seed.wrapping_add(2 * c));
            let x = init_reference(cfg.m, cfg.d, cfg.seed.wrapping_add(2 * c + 1));
            match condition_numbers(x.view(), y.view(), &flow.cost, &sinkhorn, &idp) {
                Ok((a, b)) => {
                    kx.push(a);
                    ky.push(b);
                }
                Err(e) => {
                    log::warn!("eps {epsilon}, cloud {c}: {e}");
                    failed_kappa += 1;
                }
            }
            let operator = flowpool(y.view(), x.view(), &flow)
                .map_err(anyhow::Error::from)
                .and_then(|r| {
                    anyhow::ensure!(
                        r.converged,
                        "flow did not reach grad_tol in {} steps",
                        r.steps_taken
                    );
                    let probe = SecondOrderProbe::for_flow(r.x_star.view(), y.view(), &flow, &idp)?;
                    let (lo, hi) = normal_operator_extremes(&probe)?;
                    Ok(condition_from_extremes(lo, hi, cfg.lambda)?)
                });
            match operator {
                Ok(k) => ka.push(k),
                Err(e) => {
                    log::warn!("eps {epsilon}, cloud {c}: {e:#}");
                    failed_operator += 1;
                }
            }
        }
        rows.push(ConditionRow {
            epsilon,
            kappa_x: Stats::of(&kx),
            kappa_y: Stats::of(&ky),
            kappa_operator: Stats::of(&ka),
            failed_kappa,
            failed_operator,
        });
    }
    Ok(rows)
}

pub fn write_condition(rows: &[ConditionRow], cfg: &ConditionConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let stat_cols = |name: &str| ["mean", "std", "median"].map(|s| format!("{name}_{s}"));
    let mut header = vec!["epsilon".to_string()];
    header.extend(stat_cols("kappa_x"));
    header.extend(stat_cols("kappa_y"));
    header.extend(["ok".to_string(), "failed".to_string()]);
    let stat_fields = |s: &Stats| [fmt(s.mean), fmt(s.std), fmt(s.median)];
    write_table(
        &out.join("condition_numbers.csv"),
        cfg,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![fmt(r.epsilon)];
            v.extend(stat_fields(&r.kappa_x));
            v.extend(stat_fields(&r.kappa_y));
            v.extend([r.kappa_x.count.to_string(), r.failed_kappa.to_string()]);
            v
        }),
    )?;
    let mut header = vec!["epsilon".to_string()];
    header.extend(stat_cols("kappa"));
    header.extend(["ok".to_string(), "failed".to_string()]);
    write_table(
        &out.join("operator_condition.csv"),
        cfg,
        &header,
        rows.iter().map(|r| {
            let mut v = vec![fmt(r.epsilon)];
            v.extend(stat_fields(&r.kappa_operator));
            v.extend([
                r.kappa_operator.count.to_string(),
                r.failed_operator.to_string(),
            ]);
            v
        }),
    )
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
}

/// Commit of the working directory, if it is a git checkout.
pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

pub fn run_classify(ds: &GraphDataset, cfg: &ClassifyConfig) -> Result<CvReport> {
    let mut report = train_eval_cv(ds, &cfg.train, &cfg.model)?;
    report.manifest.git_revision = git_revision();
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PermConfig {
    pub trials: usize,
    pub seed: u64,
    /// Use a different reference for every permuted copy (negative control).
    pub break_reference: bool,
    pub max_graphs: Option<usize>,
    pub tolerance: f64,
    pub model: ModelSpec,
}

impl Default for PermConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            break_reference: false,
            max_graphs: None,
            tolerance: 1e-6,
            model: ModelSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermReport {
    pub pairs: usize,
    pub max_deviation: f64,
    pub passed: bool,
    pub dataset: String,
    pub config: PermConfig,
}

/// Pools every graph and `trials` random node permutations of it, through
/// one-hot features, SGC and a seeded Glorot `W`, and compares pooled supports.
pub fn perm_check(ds: &GraphDataset, cfg: &PermConfig) -> Result<PermReport> {
    let spec = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(ds.num_node_label_kinds, ds.num_classes, spec, &mut rng);
    let count = cfg
        .max_graphs
        .unwrap_or(ds.graphs.len())
        .min(ds.graphs.len());
    let mut max_deviation: f64 = 0.0;
    let mut pairs = 0;
    for (gi, g) in ds.graphs.iter().take(count).enumerate() {
        if cfg.trials == 0 {
            break;
        }
        let pool =
            |graph: &flowpool::graphs::LabeledGraph, x0: &Array2<f64>| -> Result<Array2<f64>> {
                let prepared = prepare_graph(graph, ds.num_node_label_kinds, spec.sgc_power)?;
                let y = prepared.propagated.dot(&params.w);
                Ok(flowpool(y.view(), x0.view(), &spec.flow)?.x_star)
            };
        let base = pool(g, &params.x0).with_context(|| format!("graph {gi}"))?;
        for t in 0..cfg.trials {
            let mut perm: Vec<usize> = (0..g.num_nodes).collect();
            perm.shuffle(&mut rng);
            let permuted = g.permuted(&perm)?;
            let x0 = if cfg.break_reference {
                init_reference(
                    spec.pooled_rows,
                    spec.hidden,
                    spec.reference_seed.wrapping_add(1 + t as u64),
                )
            } else {
                params.x0.clone()
            };
            let other =
                pool(&permuted, &x0).with_context(|| format!("graph {gi}, permutation {t}"))?;
            let dev = (&base - &other).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            max_deviation = max_deviation.max(dev);
            pairs += 1;
        }
    }
    Ok(PermReport {
        pairs,
        max_deviation,
        passed: max_deviation < cfg.tolerance,
        dataset: ds.name.clone(),
        config: cfg.clone(),
    })
}

pub fn pooling_tag(p: Pooling) -> &'static str {
    match p {
        Pooling::FlowPool => "flowpool",
        Pooling::SortPool => "sortpool",
    }
}
