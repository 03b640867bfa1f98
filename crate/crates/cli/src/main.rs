use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use flowpool::grad::Objective;
use flowpool::graphs::parse_tu_dataset;
use flowpool::pipeline::Pooling;
use flowpool_cli::commands::{
    circle_demo, condition_study, perm_check, pooling_tag, run_classify, run_pool, write_circle,
    write_condition, CircleConfig, ClassifyConfig, ConditionConfig, PermConfig, PoolConfig,
};
use flowpool_cli::io::{ensure_dir, load_config, read_pointcloud, write_json};

/// Optimal-transport graph pooling experiments.
///
/// Every subcommand accepts `--config <json>`; explicit flags override the
/// file, and absent fields keep their defaults.
#[derive(Parser)]
#[command(name = "flowpool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Divergence,
    LossOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Flowpool,
    Sortpool,
}

#[derive(Subcommand)]
enum Command {
    /// Pool a pointcloud CSV into M points.
    Pool {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/pool")]
        out: PathBuf,
    },
    /// Move an input cloud so that its pooled points lie on the unit circle.
    DemoCircle {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/circle")]
        out: PathBuf,
    },
    /// Condition numbers of the Sinkhorn Hessians and the implicit operator over ε.
    ConditionStudy {
        #[arg(long)]
        clouds: Option<usize>,
        /// Comma-separated ε values.
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/condition")]
        out: PathBuf,
    },
    /// Stratified k-fold graph classification on a TU-format dataset.
    Classify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        pooling: Option<PoolingArg>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/classify")]
        out: PathBuf,
    },
    /// Check that pooling is invariant to node relabeling.
    PermCheck {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// Give each permuted copy its own reference (expected to fail).
        #[arg(long)]
        break_reference: bool,
        #[arg(long)]
        max_graphs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out/perm")]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Ok(true) on success, Ok(false) when a check ran but failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pool {
            input,
            m,
            epsilon,
            tau,
            steps,
            objective,
            seed,
            config,
            out,
        } => {
            let mut cfg: PoolConfig = load_config(config.as_deref())?;
            set(&mut cfg.m, m);
            set(&mut cfg.flow.sinkhorn.epsilon, epsilon);
            set(&mut cfg.flow.tau, tau);
            set(&mut cfg.flow.max_steps, steps);
            set(&mut cfg.seed, seed);
            set(
                &mut cfg.flow.objective,
                objective.map(|o| match o {
                    ObjectiveArg::Divergence => Objective::Divergence,
                    ObjectiveArg::LossOnly => Objective::LossOnly,
                }),
            );
            let y = read_pointcloud(&input)?;
            let res = run_pool(&y, &cfg, &out)?;
            println!(
                "pooled {} points into {}: {} steps, converged {}, final energy {:.6e}",
                y.nrows(),
                cfg.m,
                res.steps_taken,
                res.converged,
                res.energies.last().copied().unwrap_or(f64::NAN)
            );
            Ok(true)
        }
        Command::DemoCircle {
            n,
            m,
            lr,
            iters,
            seed,
            config,
            out,
        } => {
            let mut cfg: CircleConfig = load_config(config.as_deref())?;
            set(&mut cfg.n, n);
            set(&mut cfg.m, m);
            set(&mut cfg.lr, lr);
            set(&mut cfg.iters, iters);
            set(&mut cfg.seed, seed);
            let run = circle_demo(&cfg)?;
            write_circle(&run, &out)?;
            let s = &run.summary;
            println!(
                "{} iterations: loss {:.3e}, max |‖x‖-1| {:.4e}, mean |‖y‖-1| {:.4e}",
                s.iterations, s.final_loss, s.max_x_deviation, s.mean_y_deviation
            );
            Ok(true)
        }
        Command::ConditionStudy {
            clouds,
            eps_grid,
            seed,
            config,
            out,
        } => {
            let mut cfg: ConditionConfig = load_config(config.as_deref())?;
            set(&mut cfg.clouds, clouds);
            set(&mut cfg.eps_grid, eps_grid);
            set(&mut cfg.seed, seed);
            let rows = condition_study(&cfg)?;
            write_condition(&rows, &cfg, &out)?;
            for r in &rows {
                println!(
                    "eps {:<8} kappa_x {:.4} kappa_y {:.4} kappa_op {:.4} (medians; failures {}/{})",
                    r.epsilon,
                    r.kappa_x.median,
                    r.kappa_y.median,
                    r.kappa_operator.median,
                    r.failed_kappa,
                    r.failed_operator
                );
            }
            Ok(true)
        }
        Command::Classify {
            dataset,
            pooling,
            folds,
            seed,
            config,
            out,
        } => {
            let mut cfg: ClassifyConfig = load_config(config.as_deref())?;
            set(
                &mut cfg.model.pooling,
                pooling.map(|p| match p {
                    PoolingArg::Flowpool => Pooling::FlowPool,
                    PoolingArg::Sortpool => Pooling::SortPool,
                }),
            );
            set(&mut cfg.train.folds, folds);
            set(&mut cfg.train.seed, seed);
            let ds = parse_tu_dataset(&dataset)?;
            let report = run_classify(&ds, &cfg)?;
            ensure_dir(&out)?;
            let path = out.join(format!(
                "cv_{}_{}.json",
                ds.name,
                pooling_tag(cfg.model.pooling)
            ));
            write_json(&path, &report)?;
            println!(
                "{} {}: accuracy {:.4} ± {:.4} over {} folds ({} skipped evaluations) -> {}",
                ds.name,
                pooling_tag(cfg.model.pooling),
                report.mean,
                report.std,
                report.fold_accuracies.len(),
                report.skipped,
                path.display()
            );
            Ok(true)
        }
        Command::PermCheck {
            dataset,
            trials,
            break_reference,
            max_graphs,
            seed,
            config,
            out,
        } => {
            let mut cfg: PermConfig = load_config(config.as_deref())?;
            set(&mut cfg.trials, trials);
            set(&mut cfg.seed, seed);
            cfg.break_reference |= break_reference;
            if max_graphs.is_some() {
                cfg.max_graphs = max_graphs;
            }
            let ds = parse_tu_dataset(&dataset)?;
            let report = perm_check(&ds, &cfg)?;
            ensure_dir(&out)?;
            write_json(&out.join("perm_check.json"), &report)?;
            println!(
                "{}: {} permuted pairs, max deviation {:.3e} (tolerance {:.1e}): {}",
                report.dataset,
                report.pairs,
                report.max_deviation,
                cfg.tolerance,
                if report.passed { "PASS" } else { "FAIL" }
            );
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            // library errors already embed their sources in the message
            let mut message = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    message = if message.is_empty() {
                        cause
                    } else {
                        format!("{message}: {cause}")
                    };
                }
            }
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
