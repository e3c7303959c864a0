use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn tiltrotor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiltrotor")).args(args).output().expect("spawn tiltrotor")
}

fn ok(args: &[&str]) -> Output {
    let out = tiltrotor(args);
    assert!(out.status.success(), "tiltrotor {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One smoke-preset training run shared by the tests that need a policy.
fn smoke_run() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["train", "--preset", "smoke", "--seed", "3", "--out", s(dir.path())]);
        dir
    })
    .path()
}

fn checkpoint() -> PathBuf {
    smoke_run().join("period_1000/policy.bin")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (headers, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (headers, rows) = read_csv(path);
    let i = headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name} in {headers:?}"));
    rows.into_iter().map(|r| r[i].clone()).collect()
}

#[test]
fn smoke_training_writes_metrics_and_checkpoint() {
    let dir = smoke_run();
    for f in ["manifest.json", "config.toml", "period_1000/metrics.csv", "period_1000/policy.bin", "period_1000/policy.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let steps: Vec<u64> = column(&dir.join("period_1000/metrics.csv"), "env_steps").iter().map(|v| v.parse().unwrap()).collect();
    assert!(!steps.is_empty());
    assert!(steps.windows(2).all(|w| w[1] > w[0]), "{steps:?}");
    assert!(*steps.last().unwrap() >= 10_000);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("period_1000/policy.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["env_steps"].as_u64(), steps.last().copied());
}

#[test]
fn training_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--preset", "smoke", "--seed", "3", "--out", s(dir.path())]);
    for f in ["period_1000/metrics.csv", "period_1000/policy.bin", "manifest.json"] {
        let a = std::fs::read(smoke_run().join(f)).unwrap();
        let b = std::fs::read(dir.path().join(f)).unwrap();
        if f == "manifest.json" {
            // only the output directory differs
            let strip = |v: Vec<u8>| {
                let mut j: serde_json::Value = serde_json::from_slice(&v).unwrap();
                j["out_dir"] = serde_json::Value::Null;
                j
            };
            assert_eq!(strip(a), strip(b));
        } else {
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }
}

#[test]
fn period_sweep_writes_one_curve_per_period() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(&cfg, "sweep_periods = [250, 500]\n[trainer]\ntotal_steps = 2048\n").unwrap();
    ok(&["train", "--preset", "smoke", "--config", s(&cfg), "--out", s(dir.path())]);
    for p in [250, 500] {
        assert!(dir.path().join(format!("period_{p}/metrics.csv")).exists());
        assert!(dir.path().join(format!("period_{p}/policy.bin")).exists());
    }
    assert!(!dir.path().join("period_1000").exists());
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[trainer]\nclip = -0.5\n").unwrap();
    let out = tiltrotor(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[trainer]"), "{err}");

    std::fs::write(&cfg, "[env]\nepisode_len = 500\ntypo_key = 1\n").unwrap();
    let out = tiltrotor(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_key"));
}

#[test]
fn nominal_eval_logs_finite_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["eval", "--scenario", "hover-regular", "--controller", "nominal", "--episodes", "2", "--out", s(dir.path())]);
    let ep = dir.path().join("episode_000.csv");
    let (headers, rows) = read_csv(&ep);
    assert_eq!(rows.len(), 500);
    for h in ["t", "x", "pos_error", "reward", "kl_raw", "weight"] {
        assert!(headers.iter().any(|x| x == h), "missing {h}");
    }
    assert!(column(&ep, "pos_error").iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    assert!(column(&ep, "weight").iter().all(String::is_empty));
    assert!(dir.path().join("lyapunov_001.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["episodes"].as_array().unwrap().len(), 2);
    assert!(summary["mean_position_rmse"].as_f64().unwrap() < 0.2);
    assert!(summary["episodes"][0]["stability"]["fraction_negative"].as_f64().is_some());
}

#[test]
fn policy_controllers_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = tiltrotor(&["eval", "--controller", "retro", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn retro_eval_logs_bounded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint();
    ok(&[
        "eval", "--scenario", "lemniscate", "--controller", "retro", "--checkpoint", s(&ckpt), "--episodes", "1", "--hold-30hz",
        "--out", s(dir.path()),
    ]);
    let weights = column(&dir.path().join("episode_000.csv"), "weight");
    assert!(!weights.is_empty());
    for w in weights {
        let w: f64 = w.parse().unwrap();
        assert!((0.0..=1.0).contains(&w), "{w}");
    }
}

#[test]
fn eval_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ckpt = checkpoint();
    for d in [&a, &b] {
        ok(&["eval", "--scenario", "hover-near-wall", "--controller", "retro", "--checkpoint", s(&ckpt), "--episodes", "1", "--seed", "4", "--out", s(d.path())]);
    }
    for f in ["episode_000.csv", "lyapunov_000.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn compare_runs() {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str, args: &[&str]| {
        let d = root.path().join(name);
        let mut all = vec!["eval", "--episodes", "3", "--out", s(&d)];
        all.extend_from_slice(args);
        ok(&all);
        d
    };
    let a = run("nominal_a", &["--scenario", "hover-regular"]);
    let b = run("nominal_b", &["--scenario", "hover-regular"]);
    let out = root.path().join("cmp");
    ok(&["compare", s(&a), s(&b), "--out", s(&out)]);
    let (headers, rows) = read_csv(&out.join("compare.csv"));
    assert_eq!(headers[..4], ["scenario", "metric", "run_a", "run_b"]);
    assert_eq!(rows.len(), 2);
    for p in column(&out.join("compare.csv"), "p_value") {
        assert_eq!(p.parse::<f64>().unwrap(), 1.0);
    }
    assert!(out.join("boxplot.csv").exists() && out.join("compare.json").exists());

    let c = run("lemniscate", &["--scenario", "lemniscate"]);
    let bad = tiltrotor(&["compare", s(&a), s(&c), "--out", s(&out)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("mismatched scenarios"));
}

#[test]
fn bench_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["bench", "--n-envs", "8", "--steps", "20", "--out", s(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("env-steps/s"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(r["results"][0]["n_envs"], 8);
    assert!(r["results"][0]["steps_per_sec"].as_f64().unwrap() > 0.0);
}

#[test]
fn mix_demo_sweeps_scales() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint();
    ok(&["mix-demo", "--checkpoint", s(&ckpt), "--points", "4", "--trials", "10", "--out", s(dir.path())]);
    let w = column(&dir.path().join("mix_demo.csv"), "weight_mean");
    assert_eq!(w.len(), 5);
    assert!(w.iter().all(|v| (0.0..=1.0).contains(&v.parse::<f64>().unwrap())));
}
