use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn gcrb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcrb")).args(args).env_remove("GCRB_THREADS").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, format!("out = {:?}\n{body}", dir.join("out"))).unwrap();
    p
}

fn run(cmd: &str, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    gcrb(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// (θ, metric, value, status) of every row.
fn rows(path: &Path) -> Vec<(Vec<f64>, String, f64, String)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    let k = headers.iter().filter(|h| h.starts_with("theta_")).count();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let theta = (0..k).map(|i| rec[1 + i].parse().unwrap()).collect();
            (theta, rec[1 + k].to_string(), rec[2 + k].parse().unwrap(), rec[6 + k].to_string())
        })
        .collect()
}

const LINEAR: &str = "[channel]\ntype = \"linear_gaussian\"\nd = 8\nk = 2\nseed = 3\n";
const SCALE: &str = "[channel]\ntype = \"scale\"\n";

#[test]
fn eval_with_the_exact_linear_generator() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{LINEAR}[eval]\nm = 64000\ngrid = {{ type = \"line\", lo = [-2.0, -2.0], hi = [2.0, 2.0], points = 4 }}\n"));
    let o = run("eval", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = rows(&dir.path().join("out/eval.csv"));
    let re: Vec<f64> = rows.iter().filter(|r| r.1 == "rel_error").map(|r| r.2).collect();
    assert_eq!(re.len(), 4);
    assert!(re.iter().all(|&e| e < 0.02), "{re:?}");
    for metric in ["egcrb_00", "egcrb_01", "egcrb_11", "egcrb_trace", "condition", "crb_trace", "retention"] {
        assert_eq!(rows.iter().filter(|r| r.1 == metric).count(), 4, "{metric}");
    }
    assert!(dir.path().join("out/eval.manifest.json").exists());
}

#[test]
fn scale_trace_follows_the_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SCALE);
    let o = run("eval", &cfg, &["--m", "64000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (theta, metric, v, _) in rows(&dir.path().join("out/eval.csv")) {
        if metric == "egcrb_trace" {
            let truth = theta[0] * theta[0] / 18.0;
            assert!((v - truth).abs() / truth < 0.03, "{theta:?}: {v} vs {truth}");
        }
    }
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SCALE}[eval]\nm = 5000\n"));
    let csv = dir.path().join("out/eval.csv");
    assert_eq!(code(&run("eval", &cfg, &["--deterministic"])), 0);
    let first = fs::read(&csv).unwrap();
    assert_eq!(code(&run("eval", &cfg, &["--deterministic"])), 0);
    assert_eq!(first, fs::read(&csv).unwrap());
    // a different evaluation seed changes the numbers
    assert_eq!(code(&run("eval", &cfg, &["--deterministic", "--eval-seed", "9"])), 0);
    assert_ne!(first, fs::read(&csv).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[channel]\ntype = \"scale\"\nsigmaa = 1.0\n");
    let o = run("eval", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sigmaa"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{SCALE}[eval]\ngrid = {{ type = \"list\", values = [] }}\n"));
    assert_eq!(code(&run("eval", &cfg, &[])), 2);

    let cfg = write_config(dir.path(), &format!("{LINEAR}[sweep]\nrepeats = 0\n"));
    assert_eq!(code(&run("sweep-m", &cfg, &[])), 2);

    let cfg = write_config(dir.path(), &format!("{LINEAR}[sweep]\nsizes = [1000, 2000000]\n"));
    assert_eq!(code(&run("sweep-dataset", &cfg, &[])), 2);

    assert_eq!(code(&gcrb(&["eval", "--config", "/nonexistent/config.toml"])), 2);
    assert_eq!(code(&gcrb(&["eval", "--bogus"])), 2);
}

#[test]
fn theorem1_needs_a_scalar_measurement() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), LINEAR);
    let o = run("theorem1", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("one-dimensional"), "{}", stderr(&o));
}

#[test]
fn theorem1_on_the_exact_scale_generator() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{SCALE}[eval]\ngrid = {{ type = \"list\", values = [[3.0], [6.0]] }}\n"));
    let o = run("theorem1", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = rows(&dir.path().join("out/theorem1.csv"));
    for (theta, metric, v, _) in &rows {
        match metric.as_str() {
            "eta" => assert!(*v < 1e-6, "{theta:?}: η = {v}"),
            "holds" => assert_eq!(*v, 1.0),
            _ => {}
        }
    }
}

#[test]
fn failing_points_set_the_eval_exit_code() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{LINEAR}[eval]\ngrid = {{ type = \"list\", values = [[0.0, 0.0]] }}\n"));
    // m must exceed the parameter count
    let o = run("eval", &cfg, &["--m", "2"]);
    assert_eq!(code(&o), 4);
    let rows = rows(&dir.path().join("out/eval.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].3, "InvalidArgument");
}

#[test]
fn small_training_run_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let body = "[channel]\ntype = \"linear_gaussian\"\nd = 2\nk = 1\n[train]\nepochs = 2\ndataset_size = 500\nseed = 4\n";
    let cfg = write_config(dir.path(), body);
    let model = dir.path().join("out/model.flow");
    let o = run("train", &cfg, &["--deterministic"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read(&model).unwrap();
    let loss = fs::read_to_string(dir.path().join("out/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_nll\n"));
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(code(&run("train", &cfg, &["--deterministic"])), 0);
    assert_eq!(first, fs::read(&model).unwrap());
    assert_eq!(code(&run("train", &cfg, &["--seed", "5"])), 0);
    assert_ne!(first, fs::read(&model).unwrap());

    // the saved model evaluates with its trusted region
    let model_arg = model.to_str().unwrap();
    let o = run("eval", &cfg, &["--model", model_arg, "--m", "2000"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let retention: Vec<f64> =
        rows(&dir.path().join("out/eval.csv")).into_iter().filter(|r| r.1 == "retention").map(|r| r.2).collect();
    assert!(retention.iter().all(|&r| r > 0.5 && r <= 1.0), "{retention:?}");
}

#[test]
fn edge_training_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[channel]\ntype = \"edge_wgn\"\nh = 8\np_high = [0.9]\np_low = [0.1]\nsigma = 0.1\n");
    assert_eq!(code(&run("train", &cfg, &[])), 2);
}

#[test]
fn wgn_position_variance_is_mirror_symmetric() {
    let dir = TempDir::new().unwrap();
    let body = "[channel]\ntype = \"edge_wgn\"\nh = 16\nw = 4\np_high = [0.9]\np_low = [0.1]\nsigma = 0.1\n\
                [edge]\ntheta_w = [1.0, 4.0]\npositions = 16\nnoise = \"wgn\"\n";
    let cfg = write_config(dir.path(), body);
    let o = run("edge-curves", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = rows(&dir.path().join("out/edge_curves.csv"));
    for w in [1.0, 4.0] {
        let var: Vec<f64> =
            rows.iter().filter(|r| r.1 == "var_position" && r.0[1] == w).map(|r| r.2).collect();
        assert_eq!(var.len(), 16);
        for i in 0..8 {
            let (a, b) = (var[i], var[15 - i]);
            assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()), "θ_w = {w}, {i}: {a} vs {b}");
        }
    }
    assert!(rows.iter().filter(|r| r.1 == "pearson").all(|r| r.2.abs() <= 1.0));
}

#[test]
fn noise_model_must_match_the_channel() {
    let dir = TempDir::new().unwrap();
    let body = "[channel]\ntype = \"edge_wgn\"\nh = 8\np_high = [0.9]\np_low = [0.1]\nsigma = 0.1\n[edge]\nnoise = \"nlf\"\n";
    let cfg = write_config(dir.path(), body);
    assert_eq!(code(&run("edge-curves", &cfg, &[])), 2);
}

#[test]
fn sweep_m_writes_one_row_per_repeat() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{LINEAR}[sweep]\ntheta = [0.2, 0.2]\nm_list = [1000, 4000]\nrepeats = 3\n"));
    let o = run("sweep-m", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = rows(&dir.path().join("out/sweep_m.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.1 == "rel_error" && r.0 == vec![0.2, 0.2]));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = TempDir::new().unwrap();
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let o = run("eval", &p, &["--m", "200", "--out", out.path().to_str().unwrap()]);
            assert_eq!(code(&o), 0, "{}: {}", p.display(), stderr(&o));
            n += 1;
        }
    }
    assert!(n >= 4);
}
