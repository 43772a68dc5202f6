use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bmoll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmoll"))
        .args(args)
        .env_remove("BMOLL_SEED")
        .output()
        .unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

/// File contents with the `time_s` column dropped from CSVs.
fn untimed(path: &Path) -> String {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    let keep: Vec<usize> = (0..h.len()).filter(|&i| &h[i] != "time_s").collect();
    let mut out = String::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let row: Vec<&str> = keep.iter().map(|&i| &rec[i]).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[test]
fn run_writes_documented_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = bmoll(&[
        "run", "--problem", "jos1", "--algo", "ra", "--iterations", "5", "--trials", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&out.join("trace_trial0.csv")), "iter,time_s,f_true,trial");
    assert_eq!(header(&out.join("details_trial1.csv")), "iter,f_rn,stepsize,ll_iters,dir_norm,flagged");
    assert_eq!(header(&out.join("front_trial0.csv")), "lambda1,f1,f2");
    assert_eq!(header(&out.join("marks_trial0.csv")), "kind,lambda1,f1,f2");
    assert_eq!(header(&out.join("aggregate.csv")), "iter,mean,half_width,min,max,trials");
    assert!(out.join("aggregate_rn.csv").exists());

    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["trial_seeds"].as_array().unwrap().len(), 2);
    assert_eq!(m["config"]["algo"], "ra");
    assert!(m["final_mean"].as_f64().unwrap().is_finite());
    // 6 trace rows plus the header
    assert_eq!(fs::read_to_string(out.join("trace_trial0.csv")).unwrap().lines().count(), 7);
}

#[test]
fn manifest_rerun_reproduces_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = bmoll(&[
        "run", "--problem", "gkv1-nonsep", "--nbar", "3", "--algo", "rn", "--iterations", "8", "--trials", "2",
        "--sigma-grad", "1", "--sigma-hess", "0.1", "--ul-step", "0.1", "--ll-step", "0.001", "--Q", "5",
        "--seed", "9", "--out", a.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bmoll(&["run", "--config", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace_trial0.csv", "trace_trial1.csv", "details_trial1.csv", "aggregate.csv", "front_trial0.csv"] {
        assert_eq!(untimed(&a.join(f)), untimed(&b.join(f)), "{f}");
    }
}

#[test]
fn seed_environment_variable_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| -> serde_json::Value {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_bmoll"));
        cmd.args(["run", "--problem", "sp1", "--iterations", "1", "--out", out.to_str().unwrap()]);
        cmd.env_remove("BMOLL_SEED");
        if let Some(s) = env {
            cmd.env("BMOLL_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        assert!(cmd.output().unwrap().status.success());
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(run(None, None, "a")["trial_seeds"][0], 0);
    assert_eq!(run(Some("17"), None, "b")["trial_seeds"][0], 17);
    assert_eq!(run(Some("17"), Some("4"), "c")["trial_seeds"][0], 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    assert_eq!(bmoll(&["run", "--problem", "nope", "--out", &out("a")]).status.code(), Some(1));
    assert_eq!(bmoll(&["run", "--trials", "0", "--out", &out("b")]).status.code(), Some(1));
    assert_eq!(bmoll(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bmoll(&["run", "--config", &out("missing.json")]).status.code(), Some(1));
    let o = bmoll(&["run", "--problem", "sp1", "--ll-step", "1e200", "--iterations", "3", "--out", &out("c")]);
    assert_eq!(o.status.code(), Some(2));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn pareto_sweep_with_marks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("front.csv");
    let o = bmoll(&[
        "pareto", "--problem", "jos1", "--x", "1", "--M", "5", "--optimistic", "0.3,0.7", "--pessimistic", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["lambda1", "f1", "f2", "kind"]);
    let kinds: Vec<String> = r.records().map(|rec| rec.unwrap()[3].to_string()).collect();
    assert_eq!(kinds.iter().filter(|k| *k == "front").count(), 5);
    assert!(kinds.contains(&"optimistic".to_string()));
    assert!(kinds.contains(&"pessimistic".to_string()));
}

#[test]
fn quick_verify_passes() {
    let o = bmoll(&["verify", "--quick"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 8, "{stdout}");
    assert!(!stdout.contains("FAIL"));
}
