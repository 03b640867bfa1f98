use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowpool::flow::init_reference;
use flowpool::graphs::write_tu_dataset;
use flowpool_cli::io::read_pointcloud;
use flowpool_cli::synthetic::{molecule_like, separable};

fn flowpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpool"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_body(file: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(file)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn pool_singleton_lands_on_the_input_point() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("y.csv");
    fs::write(&input, "# one point\nx0,x1\n0.3,-1.2\n").unwrap();
    let out = dir.path().join("out");
    let res = flowpool(&[
        "pool",
        "--input",
        path(&input),
        "--m",
        "1",
        "--tau",
        "0.5",
        "--objective",
        "loss-only",
        "--out",
        path(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let x = read_pointcloud(&out.join("x_star.csv")).unwrap();
    assert!(
        (x[[0, 0]] - 0.3).abs() < 1e-4 && (x[[0, 1]] + 1.2).abs() < 1e-4,
        "{x}"
    );
    let config = fs::read_to_string(out.join("energy_trace.csv")).unwrap();
    assert!(config.starts_with("# config: {"));
}

#[test]
fn pool_is_reproducible_and_energy_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("y.csv");
    let y = init_reference(20, 2, 3);
    let mut text = String::from("x0,x1\n");
    for r in y.rows() {
        text.push_str(&format!("{:?},{:?}\n", r[0], r[1]));
    }
    fs::write(&input, text).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = flowpool(&[
            "pool",
            "--input",
            path(&input),
            "--m",
            "12",
            "--seed",
            "5",
            "--out",
            path(&out),
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["x_star.csv", "energy_trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let energies: Vec<f64> = csv_body(&a.join("energy_trace.csv"))
        .iter()
        .map(|r| r[1])
        .collect();
    assert!(energies.len() > 2);
    assert!(
        energies.windows(2).all(|w| w[1] <= w[0] + 1e-12),
        "{energies:?}"
    );
}

#[test]
fn malformed_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "x0,x1\n1.0,2.0\n3.0,oops\n").unwrap();
    let res = flowpool(&[
        "pool",
        "--input",
        path(&input),
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains(":3:"));

    let config = dir.path().join("c.json");
    fs::write(&config, "{\"m\": \"five\"}").unwrap();
    let res = flowpool(&["pool", "--input", path(&input), "--config", path(&config)]);
    assert_eq!(res.status.code(), Some(2));

    let res = flowpool(&["classify", "--dataset", path(&dir.path().join("nowhere"))]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(flowpool(&["pool"]).status.code(), Some(2));
}

#[test]
fn perm_check_passes_and_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("SYN");
    write_tu_dataset(&molecule_like(8, 2).unwrap(), &data).unwrap();
    let out = dir.path().join("perm");
    let common = [
        "perm-check",
        "--dataset",
        path(&data),
        "--trials",
        "2",
        "--max-graphs",
        "3",
        "--out",
        path(&out),
    ];
    let res = flowpool(&common);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stdout)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("perm_check.json")).unwrap()).unwrap();
    assert_eq!(report["pairs"], 6);
    assert_eq!(report["passed"], true);

    let mut broken = common.to_vec();
    broken.push("--break-reference");
    assert_eq!(flowpool(&broken).status.code(), Some(1));

    let res = flowpool(&[
        "perm-check",
        "--dataset",
        path(&data),
        "--trials",
        "0",
        "--out",
        path(&out),
    ]);
    assert!(res.status.success());
}

#[test]
fn condition_study_with_one_cloud_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cond");
    let res = flowpool(&[
        "condition-study",
        "--clouds",
        "1",
        "--eps-grid",
        "0.5,5",
        "--out",
        path(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows = csv_body(&out.join("condition_numbers.csv"));
    assert_eq!(rows.len(), 2);
    for r in &rows {
        // epsilon, kappa_x mean/std/median, kappa_y mean/std/median, ok, failed
        assert_eq!((r[2], r[5]), (0.0, 0.0));
        assert_eq!(r[1], r[3]);
        assert_eq!((r[7], r[8]), (1.0, 0.0));
    }
    assert_eq!(csv_body(&out.join("operator_condition.csv")).len(), 2);
}

#[test]
fn circle_demo_without_iterations_returns_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("circle");
    let res = flowpool(&[
        "demo-circle",
        "--iters",
        "0",
        "--seed",
        "3",
        "--out",
        path(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let y0 = init_reference(20, 2, 3);
    let rows = csv_body(&out.join("y_trajectory.csv"));
    assert_eq!(rows.len(), 20);
    for (r, want) in rows.iter().zip(y0.rows()) {
        assert_eq!(r[0], 0.0);
        assert_eq!((r[2], r[3]), (want[0], want[1]));
    }
    assert_eq!(csv_body(&out.join("x_trajectory.csv")).len(), 12);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("circle_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 0);
}

#[test]
fn classify_separates_a_toy_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("TOY");
    write_tu_dataset(&separable(24, 1).unwrap(), &data).unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(
        &config,
        r#"{"train": {"folds": 3, "max_epochs": 60, "learning_rate": 0.05, "patience": 60},
            "model": {"pooled_rows": 3, "hidden": 4}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    for pooling in ["flowpool", "sortpool"] {
        let res = flowpool(&[
            "classify",
            "--dataset",
            path(&data),
            "--pooling",
            pooling,
            "--config",
            path(&config),
            "--out",
            path(&out),
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        let report: serde_json::Value = serde_json::from_slice(
            &fs::read(out.join(format!("cv_SEPARABLE_{pooling}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(
            report["mean"], 1.0,
            "{pooling}: {}",
            report["fold_accuracies"]
        );
        assert_eq!(report["manifest"]["x0_sha256"].as_str().unwrap().len(), 64);
    }
}
