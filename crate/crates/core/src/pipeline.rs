//! Graph classification: `ŜᴷF·W` → pooling → row-major flatten + bias →
//! softmax regression, trained with Adam under stratified k-fold
//! cross-validation and early stopping on validation loss.
//!
//! Gradients with respect to `W` pass through the pooled support by the
//! implicit vector-Jacobian product at the flow's fixed point. The SGC stage
//! is linear in `W`, so `∂L/∂W = (ŜᴷF)ᵀ ∂L/∂Y` exactly.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{flowpool, init_reference, FlowParams};
use crate::graphs::{
    one_hot_features, sgc_propagate, sortpool_indices, GraphDataset, LabeledGraph,
};
use crate::implicit::{implicit_vjp, ImplicitDiffParams};

/// Flow step budget for classification; near-exact fits of small graphs
/// converge slowly.
pub const PIPELINE_FLOW_STEPS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FlowPool,
    SortPool,
}

/// Architecture and pooling settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub pooling: Pooling,
    /// Pooled rows M.
    pub pooled_rows: usize,
    /// Channels d of the SGC output.
    pub hidden: usize,
    /// Propagation power K.
    pub sgc_power: usize,
    /// Seed of the shared pooling reference `X⁽⁰⁾`.
    pub reference_seed: u64,
    pub flow: FlowParams,
    pub implicit: ImplicitDiffParams,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            pooling: Pooling::FlowPool,
            pooled_rows: 5,
            hidden: 8,
            sgc_power: 2,
            reference_seed: 0,
            flow: FlowParams {
                max_steps: PIPELINE_FLOW_STEPS,
                ..FlowParams::default()
            },
            implicit: ImplicitDiffParams::default(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pooled_rows == 0 || self.hidden == 0 {
            return Err(Error::InvalidParameter(
                "pooled_rows and hidden must be positive".into(),
            ));
        }
        self.flow.validate()?;
        self.implicit.validate()
    }

    /// Classifier input width `M·d + 1`.
    pub fn flat_width(&self) -> usize {
        self.pooled_rows * self.hidden + 1
    }

    pub fn reference(&self) -> Array2<f64> {
        init_reference(self.pooled_rows, self.hidden, self.reference_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
    /// Stratified share of each training fold held out for early stopping.
    pub val_fraction: f64,
    /// Largest tolerated share of skipped graph evaluations.
    pub max_skip_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.01,
            max_epochs: 300,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            folds: 10,
            val_fraction: 0.1,
            max_skip_rate: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.learning_rate > 0.0
            && self.max_epochs > 0
            && self.patience > 0
            && self.adam_eps > 0.0
            && self.folds >= 2;
        let fractions = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && (0.0..1.0).contains(&self.val_fraction)
            && (0.0..=1.0).contains(&self.max_skip_rate);
        if !(positive && fractions) {
            return Err(Error::InvalidParameter(format!(
                "invalid training configuration {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trainable weights plus the fixed reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// kinds × d.
    pub w: Array2<f64>,
    /// (M·d + 1) × classes; the last row is the bias.
    pub w_clf: Array2<f64>,
    /// M × d, never trained.
    pub x0: Array2<f64>,
}

impl ModelParams {
    /// Glorot-uniform `W`, zero classifier.
    pub fn init(kinds: usize, classes: usize, spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (kinds + spec.hidden) as f64).sqrt();
        let w =
            Array2::from_shape_simple_fn((kinds, spec.hidden), || rng.random_range(-limit..limit));
        Self {
            w,
            w_clf: Array2::zeros((spec.flat_width(), classes)),
            x0: spec.reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Array2<f64>,
    pub w_clf: Array2<f64>,
}

impl Gradients {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            w: Array2::zeros(params.w.dim()),
            w_clf: Array2::zeros(params.w_clf.dim()),
        }
    }
}

/// A graph with its fixed propagated features `ŜᴷF`.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub propagated: Array2<f64>,
    pub class_label: usize,
}

pub fn prepare_graph(g: &LabeledGraph, kinds: usize, sgc_power: usize) -> Result<PreparedGraph> {
    let f = one_hot_features(g, kinds)?;
    Ok(PreparedGraph {
        propagated: sgc_propagate(g, f.view(), sgc_power)?,
        class_label: g.class_label,
    })
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub y: Array2<f64>,
    pub pooled: Array2<f64>,
    /// SortPool rows, in pooled order.
    pub selected: Option<Vec<usize>>,
    pub flat: Array1<f64>,
    pub logits: Array1<f64>,
}

fn check_shapes(params: &ModelParams, spec: &ModelSpec, kinds: usize) -> Result<()> {
    let expect = |ok: bool, context: &'static str, expected: usize, found: usize| {
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected,
                found,
            })
        }
    };
    expect(params.w.nrows() == kinds, "W rows", kinds, params.w.nrows())?;
    expect(
        params.w.ncols() == spec.hidden,
        "W columns",
        spec.hidden,
        params.w.ncols(),
    )?;
    expect(
        params.w_clf.nrows() == spec.flat_width(),
        "classifier rows",
        spec.flat_width(),
        params.w_clf.nrows(),
    )?;
    expect(
        params.x0.dim() == (spec.pooled_rows, spec.hidden),
        "reference",
        spec.pooled_rows * spec.hidden,
        params.x0.len(),
    )
}

/// Scores of one prepared graph.
pub fn forward_prepared(
    g: &PreparedGraph,
    params: &ModelParams,
    spec: &ModelSpec,
) -> Result<ForwardCache> {
    check_shapes(params, spec, g.propagated.ncols())?;
    let y = g.propagated.dot(&params.w);
    let (pooled, selected) = match spec.pooling {
        Pooling::FlowPool => {
            let res = flowpool(y.view(), params.x0.view(), &spec.flow)?;
            if !res.converged {
                return Err(Error::NotAFixedPoint {
                    grad_norm: res.final_grad_norm,
                    tol: spec.flow.grad_tol,
                });
            }
            (res.x_star, None)
        }
        Pooling::SortPool => {
            let idx = sortpool_indices(y.view(), spec.pooled_rows)?;
            let mut out = Array2::zeros((spec.pooled_rows, spec.hidden));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&y.row(i));
            }
            (out, Some(idx))
        }
    };
    let mut flat = Array1::ones(spec.flat_width());
    flat.slice_mut(s![..spec.flat_width() - 1])
        .assign(&Array1::from_iter(pooled.iter().copied()));
    let logits = params.w_clf.t().dot(&flat);
    Ok(ForwardCache {
        y,
        pooled,
        selected,
        flat,
        logits,
    })
}

/// Logits and cache for a raw graph.
pub fn forward(
    g: &LabeledGraph,
    params: &ModelParams,
    spec: &ModelSpec,
) -> Result<(Array1<f64>, ForwardCache)> {
    let prepared = prepare_graph(g, params.w.nrows(), spec.sgc_power)?;
    let cache = forward_prepared(&prepared, params, spec)?;
    Ok((cache.logits.clone(), cache))
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Cross-entropy of one example.
pub fn cross_entropy(logits: &Array1<f64>, class: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    lse - logits[class]
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and parameter gradients of one example, scaled by `weight`.
fn example_gradients(
    g: &PreparedGraph,
    params: &ModelParams,
    spec: &ModelSpec,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let cache = forward_prepared(g, params, spec)?;
    let loss = cross_entropy(&cache.logits, g.class_label);
    let mut dlogits = softmax(&cache.logits);
    dlogits[g.class_label] -= 1.0;
    dlogits *= weight;

    let mut grads = Gradients::zeros(params);
    let flat_col = cache.flat.view().insert_axis(Axis(1));
    grads.w_clf = flat_col.dot(&dlogits.view().insert_axis(Axis(0)));

    let dflat = params.w_clf.dot(&dlogits);
    let dpooled = Array2::from_shape_vec(
        (spec.pooled_rows, spec.hidden),
        dflat.slice(s![..spec.flat_width() - 1]).to_vec(),
    )
    .expect("flat width matches pooled shape");
    let dy = match (&cache.selected, spec.pooling) {
        (Some(idx), _) => {
            let mut dy = Array2::zeros(cache.y.dim());
            for (r, &i) in idx.iter().enumerate() {
                dy.row_mut(i).assign(&dpooled.row(r));
            }
            dy
        }
        (None, _) if dpooled.iter().all(|v| *v == 0.0) => Array2::zeros(cache.y.dim()),
        (None, _) => implicit_vjp(
            cache.pooled.view(),
            cache.y.view(),
            &dpooled,
            &spec.flow,
            &spec.implicit,
        )?,
    };
    grads.w = g.propagated.t().dot(&dy);
    Ok((loss * weight, grads))
}

/// Outcome of a batch: summed weighted loss and gradients over the graphs
/// that evaluated, and the batch positions that were skipped.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
    pub skipped: Vec<usize>,
}

/// Mean cross-entropy and its gradient over the graphs of `batch` whose
/// forward and backward passes succeed. Accumulation follows batch order.
pub fn backward(
    batch: &[&PreparedGraph],
    params: &ModelParams,
    spec: &ModelSpec,
) -> Result<BatchOutcome> {
    let per: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|g| example_gradients(g, params, spec, 1.0))
        .collect();
    let mut grads = Gradients::zeros(params);
    let mut loss = 0.0;
    let mut skipped = Vec::new();
    let mut used = 0usize;
    for (i, r) in per.into_iter().enumerate() {
        match r {
            Ok((l, g)) => {
                loss += l;
                grads.w += &g.w;
                grads.w_clf += &g.w_clf;
                used += 1;
            }
            Err(e) => {
                log::warn!("skipping batch element {i}: {e}");
                skipped.push(i);
            }
        }
    }
    if used > 0 {
        let scale = 1.0 / used as f64;
        loss *= scale;
        grads.w *= scale;
        grads.w_clf *= scale;
    }
    Ok(BatchOutcome {
        loss,
        grads,
        skipped,
    })
}

/// Index sets of one cross-validation fold, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn by_class(labels: &[usize], subset: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); classes];
    for &i in subset {
        out[labels[i]].push(i);
    }
    out
}

/// Stratified k-fold split with a stratified validation holdout carved from
/// each training part.
pub fn stratified_kfold(
    labels: &[usize],
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 folds, got {k}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidParameter(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let groups = by_class(labels, &all);
    for (class, members) in groups.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::ClassTooRare {
                class,
                count: members.len(),
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); k];
    let mut slot = 0;
    for members in &groups {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for i in shuffled {
            tests[slot % k].push(i);
            slot += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for (f, test) in tests.iter().enumerate() {
        let mut in_test = vec![false; labels.len()];
        for &i in test {
            in_test[i] = true;
        }
        let rest: Vec<usize> = all.iter().copied().filter(|&i| !in_test[i]).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for members in by_class(labels, &rest) {
            let mut shuffled = members;
            shuffled.shuffle(&mut rng);
            let mut n_val = (shuffled.len() as f64 * val_fraction).round() as usize;
            if val_fraction > 0.0 && n_val == 0 && shuffled.len() > 1 {
                n_val = 1;
            }
            val.extend_from_slice(&shuffled[..n_val]);
            train.extend_from_slice(&shuffled[n_val..]);
        }
        let mut test = test.clone();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        log::debug!(
            "fold {f}: {} train, {} val, {} test",
            train.len(),
            val.len(),
            test.len()
        );
        folds.push(Fold { train, val, test });
    }
    Ok(folds)
}

/// Adam moments for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(dim: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `param` along `grad`.
    pub fn step(
        &mut self,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }
}

struct Adam {
    w: AdamState,
    clf: AdamState,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Self {
            w: AdamState::new(params.w.dim()),
            clf: AdamState::new(params.w_clf.dim()),
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        let (lr, b1, b2, eps) = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        self.w.step(&mut params.w, &grads.w, lr, b1, b2, eps);
        self.clf
            .step(&mut params.w_clf, &grads.w_clf, lr, b1, b2, eps);
    }
}

/// Seeds, reference digest and revision of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub reference_seed: u64,
    /// SHA-256 of the reference's little-endian f64 bytes, row-major.
    pub x0_sha256: String,
    pub git_revision: Option<String>,
    pub version: String,
}

pub fn reference_digest(x0: ArrayView2<'_, f64>) -> String {
    let mut hasher = Sha256::new();
    for v in x0.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub dataset: String,
    pub pooling: Pooling,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub epochs_run: Vec<usize>,
    pub best_epochs: Vec<usize>,
    /// Graph evaluations skipped after flow or backward failures.
    pub skipped: usize,
    pub evaluations: usize,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub manifest: RunManifest,
}

#[derive(Default)]
struct SkipCounter {
    skipped: usize,
    evaluations: usize,
}

fn evaluate(
    graphs: &[PreparedGraph],
    idx: &[usize],
    params: &ModelParams,
    spec: &ModelSpec,
    counter: &mut SkipCounter,
) -> (f64, usize, usize) {
    let results: Vec<Result<ForwardCache>> = idx
        .par_iter()
        .map(|&i| forward_prepared(&graphs[i], params, spec))
        .collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut used = 0;
    for (&i, r) in idx.iter().zip(results) {
        counter.evaluations += 1;
        match r {
            Ok(cache) => {
                loss += cross_entropy(&cache.logits, graphs[i].class_label);
                if argmax(&cache.logits) == graphs[i].class_label {
                    correct += 1;
                }
                used += 1;
            }
            Err(e) => {
                log::warn!("skipping graph {i}: {e}");
                counter.skipped += 1;
            }
        }
    }
    let mean = if used > 0 {
        loss / used as f64
    } else {
        f64::INFINITY
    };
    (mean, correct, used)
}

struct FoldOutcome {
    accuracy: f64,
    epochs: usize,
    best_epoch: usize,
}

fn train_fold(
    graphs: &[PreparedGraph],
    fold: &Fold,
    fold_index: usize,
    ds: &GraphDataset,
    cfg: &TrainConfig,
    spec: &ModelSpec,
    counter: &mut SkipCounter,
) -> Result<FoldOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + fold_index as u64));
    let mut params = ModelParams::init(ds.num_node_label_kinds, ds.num_classes, spec, &mut rng);
    let mut adam = Adam::new(&params);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = 0;
    let mut order = fold.train.clone();
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let out = backward(&batch, &params, spec)?;
            counter.evaluations += chunk.len();
            counter.skipped += out.skipped.len();
            if out.skipped.len() < chunk.len() {
                adam.step(&mut params, &out.grads, cfg);
            }
        }
        let monitor = if fold.val.is_empty() {
            &fold.train
        } else {
            &fold.val
        };
        let (val_loss, _, _) = evaluate(graphs, monitor, &params, spec, counter);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, correct, _) = evaluate(graphs, &fold.test, &best, spec, counter);
    Ok(FoldOutcome {
        accuracy: correct as f64 / fold.test.len() as f64,
        epochs,
        best_epoch,
    })
}

/// Cross-validated test accuracy. Skipped test graphs count as misclassified.
pub fn train_eval_cv(ds: &GraphDataset, cfg: &TrainConfig, spec: &ModelSpec) -> Result<CvReport> {
    cfg.validate()?;
    spec.validate()?;
    let graphs = ds
        .graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            prepare_graph(g, ds.num_node_label_kinds, spec.sgc_power).map_err(|e| Error::Graph {
                graph: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let folds = stratified_kfold(&ds.class_labels(), cfg.folds, cfg.val_fraction, cfg.seed)?;
    let mut counter = SkipCounter::default();
    let mut fold_accuracies = Vec::with_capacity(folds.len());
    let mut epochs_run = Vec::with_capacity(folds.len());
    let mut best_epochs = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let out = train_fold(&graphs, fold, f, ds, cfg, spec, &mut counter)?;
        log::info!(
            "fold {f}: accuracy {:.4} after {} epochs",
            out.accuracy,
            out.epochs
        );
        fold_accuracies.push(out.accuracy);
        epochs_run.push(out.epochs);
        best_epochs.push(out.best_epoch);
        if counter.skipped as f64 > cfg.max_skip_rate * counter.evaluations as f64 {
            return Err(Error::TooManySkips {
                skipped: counter.skipped,
                total: counter.evaluations,
            });
        }
    }
    let n = fold_accuracies.len() as f64;
    let mean = fold_accuracies.iter().sum::<f64>() / n;
    let std = (fold_accuracies
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let x0 = spec.reference();
    Ok(CvReport {
        dataset: ds.name.clone(),
        pooling: spec.pooling,
        fold_accuracies,
        mean,
        std,
        epochs_run,
        best_epochs,
        skipped: counter.skipped,
        evaluations: counter.evaluations,
        train: *cfg,
        model: spec.clone(),
        manifest: RunManifest {
            seed: cfg.seed,
            reference_seed: spec.reference_seed,
            x0_sha256: reference_digest(x0.view()),
            git_revision: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}
