use std::path::Path;
use std::process::{Command, Output};

fn convexq(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convexq"))
        .args(args)
        .env("CONVEXQ_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_column(text: &str, column: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn oracle_prints_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&convexq(&["oracle", "tiger"], dir.path()));
    assert!(text.contains("r* = 42.105263157895"), "{text}");
    assert!(text.contains("reachable b = 0.500000000: listen"));
    let text = ok(&convexq(&["oracle", "tiger", "--p-obs", "0.5"], dir.path()));
    assert!(text.contains("r* = -10.000000000000"));
    assert!(text.contains("Q(0.5, open) = -54.000000000000"));
    let text = ok(&convexq(&["oracle", "fvrs"], dir.path()));
    assert!(text.contains("r* = 7.290000000000"));
    assert!(text.contains("averaged Q*(east) = 8.597500000000"));
}

#[test]
fn baselines_evaluate_to_csv() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&convexq(&["eval", "--env", "fvrs", "--baseline", "east", "--n-mc", "500"], dir.path()));
    let means = csv_column(&text, "mean");
    assert!((means[0].parse::<f64>().unwrap() - 7.29).abs() < 1e-9);
    let text = ok(&convexq(
        &["cross-eval", "--env", "tiger", "--baseline", "listen", "--n-mc", "100", "--shifts", "0.5,0.9"],
        dir.path(),
    ));
    assert_eq!(csv_column(&text, "eval_env"), ["p0.5", "p0.9"]);
}

#[test]
fn train_then_audit_and_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&convexq(
        &["train", "--env", "tiger", "--method", "hard", "--max-epochs", "60", "--seed", "3", "--out", run_s],
        dir.path(),
    ));
    for f in ["trainlog.csv", "net.json", "config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("trainlog.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,td_loss,convex_loss,total_loss,lr,epsilon");
    assert_eq!(log.lines().count(), 61);
    let ckpt = run.join("net.json");
    let audit = run.join("audit.json");
    ok(&convexq(
        &["audit", "--env", "tiger", "--checkpoint", ckpt.to_str().unwrap(), "--out", audit.to_str().unwrap()],
        dir.path(),
    ));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&audit).unwrap()).unwrap();
    assert!(report["max_violation"].as_f64().unwrap() <= 1e-9);
    let text = ok(&convexq(&["eval", "--env", "tiger", "--checkpoint", ckpt.to_str().unwrap(), "--n-mc", "50"], dir.path()));
    assert_eq!(csv_column(&text, "n_mc"), ["50"]);
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = convexq(&["eval", "--env", "tiger", "--n-mc", "10"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint or --baseline"));
    let o = convexq(&["train", "--env", "fvrs", "--method", "hess1d", "--weight", "1"], dir.path());
    assert!(!o.status.success());
    let o = convexq(&["eval", "--env", "tiger", "--baseline", "east"], dir.path());
    assert!(!o.status.success());
}

const MANIFEST: &str = r#"
name = "tiny"
env = "tiger"
methods = ["none", "point"]
runs_per_method = 2
seed = 17
n_mc = 300
shifts = ["0.8"]
penalty_weight = 0.5
max_epochs = 40
audit_grid = 11
best_seeds = 2
"#;

fn search(dir: &Path, jobs: &str) -> Vec<Vec<u8>> {
    let manifest = dir.join("manifest.toml");
    std::fs::write(&manifest, MANIFEST).unwrap();
    let out = dir.join("out");
    let args = ["--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs];
    ok(&convexq(&[&["search"][..], &args].concat(), dir));
    ok(&convexq(&[&["best-eval"][..], &args].concat(), dir));
    ["results.csv", "runs.csv", "robustness.csv", "best/results.csv", "best/runs.csv"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect()
}

#[test]
fn search_is_byte_reproducible_across_reruns_and_job_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = search(a.path(), "1");
    let second = search(b.path(), "2");
    assert_eq!(first, second);
    let results = String::from_utf8(first[0].clone()).unwrap();
    // 4 runs × (train setting + one shift).
    assert_eq!(csv_column(&results, "eval_env").len(), 8);

    let out = a.path().join("out");
    let before = std::fs::read(out.join("robustness.csv")).unwrap();
    std::fs::remove_file(out.join("robustness.csv")).unwrap();
    ok(&convexq(&["report", "--out", out.to_str().unwrap()], a.path()));
    assert_eq!(std::fs::read(out.join("robustness.csv")).unwrap(), before);
}
