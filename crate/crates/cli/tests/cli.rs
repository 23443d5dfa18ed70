use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_springgrasp"));
    c.env_remove("SPRINGGRASP_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Sphere cloud, fitted model and a one-seed plan shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    cloud: PathBuf,
    fit: PathBuf,
    plan: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cloud = dir.path().join("sphere.ply");
        let o = run(&["synth-cloud", "--shape", "sphere", "--out", p(&cloud)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let fit = dir.path().join("fit");
        let o = run(&["fit-gpis", "--cloud", p(&cloud), "--out", p(&fit)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let plan = dir.path().join("plan");
        let model = fit.join("model.gpis");
        let o = run(&["plan", "--cloud", p(&cloud), "--model", p(&model), "--out", p(&plan), "--seeds", "1"]);
        assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
        Fixture { _dir: dir, cloud, fit, plan }
    })
}

fn summary_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .to_string()
}

#[test]
fn fit_reports_training_counts() {
    let f = fixture();
    let s = fs::read_to_string(f.fit.join("fit_summary.txt")).unwrap();
    assert!(s.starts_with("# schema: springgrasp.fit-summary/1"));
    assert_eq!(summary_value(&s, "exterior_points"), "14");
    assert_eq!(summary_value(&s, "interior_points"), "50");
    let residual: f64 = summary_value(&s, "max_training_residual").parse().unwrap();
    assert!(residual.is_finite() && residual < 0.2, "{residual}");
}

#[test]
fn fit_is_repeatable() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["fit-gpis", "--cloud", p(&f.cloud), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    for name in ["model.gpis", "fit_summary.txt"] {
        assert_eq!(fs::read(f.fit.join(name)).unwrap(), fs::read(dir.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_cloud_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.ply");
    let o = run(&["fit-gpis", "--cloud", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere.ply"), "{}", stderr(&o));
}

#[test]
fn malformed_cloud_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.xyz");
    fs::write(&bad, "0 0 0\n1 two 3\n").unwrap();
    let o = run(&["fit-gpis", "--cloud", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn one_seed_plans_one_grasp() {
    let f = fixture();
    let grasps: Vec<_> = fs::read_dir(&f.plan)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("grasp_"))
        .collect();
    assert_eq!(grasps, ["grasp_00.toml"]);
    let rank = fs::read_to_string(f.plan.join("ranking.csv")).unwrap();
    let rows: Vec<&str> = rank.lines().skip(2).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,0,grasp_00.toml,"));
}

#[test]
fn unreachable_plan_writes_diagnostics() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("weights.toml");
    fs::write(&weights, "# schema: springgrasp.weights/1\nw_col = 1e6\ntable_height = 0.2\n").unwrap();
    let out = dir.path().join("plan");
    let model = f.fit.join("model.gpis");
    let o = run(&[
        "plan", "--cloud", p(&f.cloud), "--model", p(&model), "--weights", p(&weights), "--out", p(&out),
        "--seeds", "2", "--iterations", "20",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let diag = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 4);
    assert!(diag.contains("hand-table"));
}

#[test]
fn bad_weights_are_config_errors() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("weights.toml");
    fs::write(&weights, "# schema: springgrasp.weights/1\nw_sp = -1.0\n").unwrap();
    let o = run(&["plan", "--cloud", p(&f.cloud), "--weights", p(&weights), "--out", p(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

/// Rewrites a planned grasp so that every target sits on its contact.
fn relaxed_copy(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let (header, body) = text.split_once('\n').unwrap();
    let mut v: toml::Table = body.parse().unwrap();
    v.insert("targets".into(), v["contacts"].clone());
    let identity = toml::Value::Array([1.0, 0.0, 0.0, 0.0].map(toml::Value::Float).to_vec());
    v.insert("rotation_quaternion".into(), identity);
    v.insert("translation".into(), toml::Value::Array(vec![toml::Value::Float(0.0); 3]));
    fs::write(dst, format!("{header}\n{}", toml::to_string(&v).unwrap())).unwrap();
}

#[test]
fn relaxed_grasp_simulates_to_pass_without_motion() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let grasp = dir.path().join("relaxed.toml");
    relaxed_copy(&f.plan.join("grasp_00.toml"), &grasp);
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--grasp", p(&grasp), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    assert!(verdict.contains("verdict = PASS"));
    let traj = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let rows: Vec<&str> = traj.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 1, "settles at step zero");
}

#[test]
fn corrupted_grasp_is_a_format_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let grasp = dir.path().join("bad.toml");
    let text = fs::read_to_string(f.plan.join("grasp_00.toml")).unwrap();
    fs::write(&grasp, text.replace("gains = [", "gains = [[")).unwrap();
    let o = run(&["simulate", "--grasp", p(&grasp), "--out", p(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn short_horizon_times_out() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--grasp", p(&f.plan.join("grasp_00.toml")), "--out", p(dir.path()), "--t-max", "0.05"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let verdict = fs::read_to_string(dir.path().join("verdict.txt")).unwrap();
    assert!(verdict.contains("verdict = TIMEOUT"));
    assert!(dir.path().join("trajectory.csv").exists());
}

/// Without a motion goal, planned sphere grasps turn the object far from its
/// start pose, and the transient margins go negative.
#[test]
#[ignore = "known failure: transient margins of planned sphere grasps go negative"]
fn planned_sphere_grasp_simulates_to_pass() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--grasp", p(&f.plan.join("grasp_00.toml")), "--out", p(dir.path()), "--t-max", "500"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn lift_goal_grasp_simulates_to_pass() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan");
    let model = f.fit.join("model.gpis");
    let o = run(&[
        "plan", "--cloud", p(&f.cloud), "--model", p(&model), "--out", p(&plan), "--seeds", "1", "--displacement",
        "0,0,0.01",
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--grasp", p(&plan.join("grasp_00.toml")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(fs::read_to_string(out.join("verdict.txt")).unwrap().contains("verdict = PASS"));
}

#[test]
fn displacement_needs_three_values() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = f.fit.join("model.gpis");
    let o = run(&["plan", "--cloud", p(&f.cloud), "--model", p(&model), "--out", p(dir.path()), "--displacement", "0,0.01"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("3 values"));
}

#[test]
fn single_pose_coverage_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["coverage", "--out", p(d.path()), "--n-poses", "1", "--restarts", "50"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for name in ["coverage.csv", "coverage_poses.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_torque_coverage_counts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["coverage", "--out", p(dir.path()), "--n-poses", "2", "--restarts", "20", "--tau-max", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let count_cols: Vec<usize> =
        header.iter().enumerate().filter(|(_, h)| ["compliant", "direct", "direct_only"].contains(h)).map(|(i, _)| i).collect();
    assert_eq!(count_cols.len(), 3, "{csv}");
    for row in lines {
        let cells: Vec<&str> = row.split(',').collect();
        for &i in &count_cols {
            assert_eq!(cells[i], "0", "{row}");
        }
    }
}

#[test]
fn gradcheck_passes_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&["gradcheck", "--instances", "4", "--out", p(dir.path())]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert!(stdout(&a).ends_with("PASS\n"));
    let b = run(&["gradcheck", "--instances", "4"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert!(fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap().ends_with("PASS\n"));
}

#[test]
fn flipped_gradient_fails_naming_the_term() {
    let o = run(&["gradcheck", "--instances", "2", "--flip-term", "tar"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).ends_with("FAIL: tar\n"), "{}", stdout(&o));
    assert!(stderr(&o).contains("tar ("), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let o = bin().env("SPRINGGRASP_THREADS", "zero").args(["gradcheck", "--instances", "1"]).output().unwrap();
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("SPRINGGRASP_THREADS"));
}

#[test]
fn thread_count_does_not_change_results() {
    let one = bin().env("SPRINGGRASP_THREADS", "1").args(["gradcheck", "--instances", "2"]).output().unwrap();
    let two = bin().env("SPRINGGRASP_THREADS", "2").args(["gradcheck", "--instances", "2"]).output().unwrap();
    assert_eq!(code(&one), 0);
    assert_eq!(stdout(&one), stdout(&two));
}

#[test]
fn unknown_arguments_are_config_errors() {
    assert_eq!(code(&run(&["plan", "--no-such-flag"])), 4);
    assert_eq!(code(&run(&["--help"])), 0);
}
