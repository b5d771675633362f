use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mvgmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvgmp")).args(args).env_remove("MVGMP_SIM_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

const SMALL: &str = "[workload]\ninitial_users = 8\nframes = 40\nwarmup = 5\n";

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn analytic_prints_closed_forms() {
    let o = mvgmp(&["analytic", "theorem2", "--p", "0.5", "--R", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "formula,p,R,Rtilde,m,s,M,n,desired,analytic,oracle,oracle_se,samples,seed");
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(9).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 2);
    assert!((values[0] - 0.5).abs() < 1e-12);
    // R = 2: (1-p)(1-p + 2(1-p)p + p^2) = 0.5 * 1.25
    assert!((values[1] - 0.625).abs() < 1e-12);
}

#[test]
fn analytic_writes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let o = mvgmp(&["analytic", "corollary2", "--p", "0.5", "--R", "2", "--Rtilde", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    assert!(text.lines().nth(1).unwrap().contains(",0.375,"), "{text}");
}

#[test]
fn unknown_formula_is_a_usage_error() {
    let o = mvgmp(&["analytic", "theorem9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn out_of_range_probability_is_rejected() {
    let o = mvgmp(&["analytic", "theorem2", "--p", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1.5"));
}

#[test]
fn zero_frames_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mvgmp(&["simulate", "--frames", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_config_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "[protocol]\nfailure_threshold = 0.05\nbogus = 1\n");
    let out = dir.path().join("run");
    let o = mvgmp(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    assert!(!out.exists());

    let config = small_config(dir.path(), "[sweep]\nparameter = \"failure-threshold\"\nvalues = [0.05, 2.0]\n");
    let o = mvgmp(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn failed_run_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out = dir.path().join("run");
    // frames.csv cannot be created, after manifest.toml was written.
    fs::create_dir_all(out.join("frames.csv")).unwrap();
    let o = mvgmp(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.join("manifest.toml").exists());
    assert!(!out.join("summary.csv").exists());
}

#[test]
fn simulate_writes_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = mvgmp(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        header(&out.join("frames.csv")),
        "manifest_id,sweep_parameter,sweep_value,seed,frame,warmup,population,mvgmp_views,baseline_views,\
         channel_time_mvgmp,channel_time_baseline,makespan_mvgmp,makespan_baseline,success_mvgmp,success_baseline"
    );
    assert_eq!(
        header(&out.join("summary.csv")),
        "manifest_id,sweep_parameter,sweep_value,seed,status,frames,mean_population,mean_transmitted_views,\
         channel_time_mvgmp,channel_time_mvgmp_ci95,channel_time_baseline,channel_time_baseline_ci95,\
         channel_time_ratio,channel_time_ratio_ci95,makespan_mvgmp,makespan_baseline,success_rate_mvgmp,\
         success_rate_baseline,user_frames"
    );
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let id = manifest.lines().find(|l| l.starts_with("manifest_id")).unwrap().split('"').nth(1).unwrap().to_string();
    let frames = fs::read_to_string(out.join("frames.csv")).unwrap();
    assert_eq!(frames.lines().count(), 1 + 2 * 40);
    assert!(frames.lines().skip(1).all(|l| l.starts_with(&format!("{id},none,,"))));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let seeds: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(seeds, ["3", "4", "all"]);
}

#[test]
fn seed_comes_from_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_mvgmp"))
        .args(["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("MVGMP_SIM_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().nth(1).unwrap().split(',').nth(3), Some("11"));
}

#[test]
fn output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "[sweep]\nparameter = \"views\"\nvalues = [4, 8]\n");
    let mut files = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("run{jobs}"));
        let o = mvgmp(&[
            "simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1,2", "--jobs", jobs,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push((fs::read(out.join("frames.csv")).unwrap(), fs::read(out.join("summary.csv")).unwrap()));
    }
    assert!(files[0] == files[1]);
}

#[test]
fn traces_match_golden_files() {
    for name in ["join_leave", "shared_leave", "reorganize", "silent", "change"] {
        let o = mvgmp(&["trace", data(&format!("{name}.trace")).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let golden = fs::read_to_string(data(&format!("{name}.golden"))).unwrap();
        assert_eq!(stdout(&o), golden, "{name}");
    }
}

#[test]
fn trace_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.trace");
    fs::write(&script, "set views=4\n\n0 user 1 view=9 loss=0.1\n").unwrap();
    let o = mvgmp(&["trace", script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.trace:3:"), "{}", stderr(&o));
}
