//! End-to-end tests of the `cdsa` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn cdsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdsa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cdsa(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn gen_seasonal(dir: &Path, shape: &str, seed: &str) -> PathBuf {
    let out = dir.join("gen");
    ok(&[
        "gen-data",
        "--kind",
        "seasonal",
        "--shape",
        shape,
        "--seed",
        seed,
        "--noise",
        "0.1",
        "--out",
        &p(&out),
    ]);
    out.join("cube.csv")
}

#[test]
fn gen_data_row_count_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cube = gen_seasonal(dir.path(), "48x4x2", "7");
    let body = std::fs::read_to_string(&cube).unwrap();
    assert_eq!(body.lines().count(), 1 + 48 * 4 * 2);

    // Same flags again (forced) produce identical bytes.
    let out2 = dir.path().join("gen2");
    ok(&[
        "gen-data",
        "--kind",
        "seasonal",
        "--shape",
        "48x4x2",
        "--seed",
        "7",
        "--noise",
        "0.1",
        "--out",
        &p(&out2),
    ]);
    assert_eq!(
        std::fs::read(&cube).unwrap(),
        std::fs::read(out2.join("cube.csv")).unwrap()
    );

    // Existing output without --force is refused; with --force it succeeds.
    let refused = cdsa(&[
        "gen-data",
        "--kind",
        "seasonal",
        "--shape",
        "48x4x2",
        "--seed",
        "7",
        "--out",
        &p(&dir.path().join("gen")),
    ]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&[
        "gen-data",
        "--kind",
        "seasonal",
        "--shape",
        "48x4x2",
        "--seed",
        "7",
        "--out",
        &p(&dir.path().join("gen")),
        "--force",
    ]);
}

#[test]
fn gen_data_rejects_unknown_kind() {
    let dir = TempDir::new().unwrap();
    let out = cdsa(&[
        "gen-data",
        "--kind",
        "sinusoid",
        "--shape",
        "4x2x2",
        "--out",
        &p(&dir.path().join("g")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seasonal|cross-measurement|spatial"), "stderr: {err}");
}

fn write_config(dir: &Path, epochs: usize, seed: u64) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"encoder": {{"variant": "decomposed", "n_layers": 1, "c": 6, "d": 4, "v": 4,
                 "d_t": 4, "d_l": 4, "d_m": 4, "ff_hidden": 8, "window_len_t": 8,
                 "epochs": {epochs}, "learning_rate": 0.002, "seed": {seed}}}}}"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn train_epochs_zero_and_reproducibility() {
    let dir = TempDir::new().unwrap();
    let cube = gen_seasonal(dir.path(), "16x2x2", "3");
    let cfg = write_config(dir.path(), 0, 5);

    let run = dir.path().join("run0");
    ok(&[
        "train",
        "--config",
        &p(&cfg),
        "--cube",
        &p(&cube),
        "--missing-rate",
        "0.3",
        "--out",
        &p(&run),
    ]);
    assert!(run.join("model.cdsa").exists());
    assert!(run.join("mask.csv").exists());
    assert!(run.join("manifest.json").exists());
    assert_eq!(
        std::fs::read_to_string(run.join("trace.csv")).unwrap(),
        "epoch,loss\n"
    );

    // Same seed twice: identical trace files.
    let cfg2 = write_config(dir.path(), 3, 5);
    let (ra, rb) = (dir.path().join("runA"), dir.path().join("runB"));
    for out in [&ra, &rb] {
        ok(&[
            "train",
            "--config",
            &p(&cfg2),
            "--cube",
            &p(&cube),
            "--missing-rate",
            "0.3",
            "--out",
            &p(out),
        ]);
    }
    let ta = std::fs::read(ra.join("trace.csv")).unwrap();
    let tb = std::fs::read(rb.join("trace.csv")).unwrap();
    assert!(!ta.is_empty() && ta == tb);
}

#[test]
fn train_rejects_unknown_config_keys_and_bad_dims() {
    let dir = TempDir::new().unwrap();
    let cube = gen_seasonal(dir.path(), "16x2x2", "3");

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"encoder": {"c": 4}, "transmogrify": true}"#).unwrap();
    let out = cdsa(&[
        "train",
        "--config",
        &p(&bad_cfg),
        "--cube",
        &p(&cube),
        "--missing-rate",
        "0.3",
        "--out",
        &p(&dir.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("transmogrify"));

    // Window longer than the cube: validation error before training.
    let cfg = write_config(dir.path(), 1, 5);
    let wide = dir.path().join("wide.json");
    let body = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"window_len_t\": 8", "\"window_len_t\": 99");
    std::fs::write(&wide, body).unwrap();
    let out = cdsa(&[
        "train",
        "--config",
        &p(&wide),
        "--cube",
        &p(&cube),
        "--missing-rate",
        "0.3",
        "--out",
        &p(&dir.path().join("y")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("window length"));
}

#[test]
fn impute_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let cube = gen_seasonal(dir.path(), "16x2x2", "9");
    let cfg = write_config(dir.path(), 5, 1);
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        &p(&cfg),
        "--cube",
        &p(&cube),
        "--missing-rate",
        "0.3",
        "--out",
        &p(&run),
    ]);

    let imp = dir.path().join("imp");
    ok(&[
        "impute",
        "--checkpoint",
        &p(&run.join("model.cdsa")),
        "--cube",
        &p(&cube),
        "--mask",
        &p(&run.join("mask.csv")),
        "--out",
        &p(&imp),
    ]);
    let body = std::fs::read_to_string(imp.join("imputed.csv")).unwrap();
    assert_eq!(body.lines().count(), 1 + 16 * 2 * 2);
    // Imputed cubes are dense: every row observed with a value.
    for line in body.lines().skip(1) {
        assert!(line.ends_with(",1"), "non-dense row {line:?}");
    }

    let ev = dir.path().join("ev");
    ok(&[
        "eval",
        "--checkpoint",
        &p(&run.join("model.cdsa")),
        "--cube",
        &p(&cube),
        "--mask",
        &p(&run.join("mask.csv")),
        "--out",
        &p(&ev),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["rmse", "mae", "mre", "mse", "mape", "n_eval", "excluded_near_zero"] {
        assert!(metrics.get(key).is_some(), "metrics missing {key}");
    }
    assert!(metrics["rmse"].as_f64().unwrap().is_finite());
    assert!(metrics["n_eval"].as_u64().unwrap() >= 1);
}

#[test]
fn eval_pred_equals_truth_gives_zero_metrics() {
    let dir = TempDir::new().unwrap();
    let cube = gen_seasonal(dir.path(), "12x2x2", "4");

    // A mask marking a handful of cells.
    let mask_path = dir.path().join("mask.csv");
    let mut body = String::from("t,l,m,removed\n");
    for t in 0..12 {
        for l in 0..2 {
            for m in 0..2 {
                let removed = usize::from(t < 3 && l == 0);
                body.push_str(&format!("{t},{l},{m},{removed}\n"));
            }
        }
    }
    std::fs::write(&mask_path, &body).unwrap();

    let ev = dir.path().join("ev");
    ok(&[
        "eval",
        "--pred",
        &p(&cube),
        "--cube",
        &p(&cube),
        "--mask",
        &p(&mask_path),
        "--out",
        &p(&ev),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["rmse", "mae", "mre", "mse", "mape"] {
        assert_eq!(metrics[key].as_f64().unwrap(), 0.0, "{key} nonzero");
    }

    // An all-zero mask leaves nothing to evaluate.
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, body.replace(",1\n", ",0\n")).unwrap();
    let out = cdsa(&[
        "eval",
        "--pred",
        &p(&cube),
        "--cube",
        &p(&cube),
        "--mask",
        &p(&empty),
        "--out",
        &p(&dir.path().join("ev2")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn bench_cardinality_and_joint_guard() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "bench",
        "--dims",
        "2x2x2x2",
        "--dims",
        "3x2x2x2",
        "--dims",
        "4x2x2x2",
        "--dims",
        "17x16x16x1",
        "--reps",
        "5",
        "--out",
        &p(&out),
    ]);
    let body = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = body.lines().skip(1).collect();
    assert_eq!(rows.len(), 16, "4 dim settings x 4 variants");
    // The joint variant at 4352 cells is over the capacity guard: flagged,
    // not crashed.
    let skipped: Vec<&&str> = rows
        .iter()
        .filter(|r| r.starts_with("joint,17,"))
        .collect();
    assert_eq!(skipped.len(), 1);
    assert!(skipped[0].contains("capacity guard"), "row: {}", skipped[0]);
    assert!(out.join("bench.json").exists());
}

#[test]
fn export_attention_single_cell_and_row_sums() {
    let dir = TempDir::new().unwrap();

    // 1x1x1 cube: train a window-1 model with zero epochs, then export.
    let cube1 = dir.path().join("one.csv");
    std::fs::write(&cube1, "t,l,m,value,observed\n0,0,0,2.5,1\n").unwrap();
    let cfg = dir.path().join("cfg1.json");
    std::fs::write(
        &cfg,
        r#"{"encoder": {"variant": "decomposed", "n_layers": 1, "c": 4, "d": 2, "v": 2,
             "d_t": 2, "d_l": 2, "d_m": 2, "ff_hidden": 4, "window_len_t": 1,
             "epochs": 0, "seed": 2}}"#,
    )
    .unwrap();
    let run = dir.path().join("run1");
    ok(&[
        "train",
        "--config",
        &p(&cfg),
        "--cube",
        &p(&cube1),
        "--missing-rate",
        "0.0",
        "--out",
        &p(&run),
    ]);
    let maps = dir.path().join("maps1");
    ok(&[
        "export-attention",
        "--checkpoint",
        &p(&run.join("model.cdsa")),
        "--cube",
        &p(&cube1),
        "--out",
        &p(&maps),
    ]);
    for label in ["a_t", "a_l", "a_m"] {
        let body = std::fs::read_to_string(maps.join(format!("layer0_{label}.csv"))).unwrap();
        assert_eq!(body, "idx,0\n0,1\n", "{label} map");
    }

    // Bigger cube: re-read the time map and check the rows sum to one.
    let cube = gen_seasonal(dir.path(), "16x2x2", "8");
    let cfg2 = write_config(dir.path(), 2, 3);
    let run2 = dir.path().join("run2");
    ok(&[
        "train",
        "--config",
        &p(&cfg2),
        "--cube",
        &p(&cube),
        "--missing-rate",
        "0.2",
        "--out",
        &p(&run2),
    ]);
    let maps2 = dir.path().join("maps2");
    ok(&[
        "export-attention",
        "--checkpoint",
        &p(&run2.join("model.cdsa")),
        "--cube",
        &p(&cube),
        "--mask",
        &p(&run2.join("mask.csv")),
        "--out",
        &p(&maps2),
    ]);
    let body = std::fs::read_to_string(maps2.join("layer0_a_t.csv")).unwrap();
    let mut rows = 0;
    for line in body.lines().skip(1) {
        let sum: f64 = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() <= 1e-9, "row sums to {sum}");
        rows += 1;
    }
    assert_eq!(rows, 8, "one row per window time stamp");
}
