use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynvo")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = "\
frames = 40
static_points = 150
pixel_noise = 0.5
object.0.center = 0.2, 0, 2.5
object.0.points = 100
object.0.velocity = 0.03, 0, 0
object.0.dropout = 20-22
";

#[test]
fn synth_run_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.txt");
    let frames = dir.path().join("frames.jsonl");
    let gt = dir.path().join("gt.txt");
    let labels = dir.path().join("labels.jsonl");
    let traj = dir.path().join("traj.txt");
    let diag = dir.path().join("diag.jsonl");
    let config = dir.path().join("engine.cfg");
    fs::write(&spec, SPEC).unwrap();
    fs::write(&config, "o_th = 0.9\nmode = full\n").unwrap();

    let out = dynvo(&["synth", "--spec", p(&spec), "--seed", "3", "--out", p(&frames), "--out-gt", p(&gt), "--out-labels", p(&labels)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&frames).unwrap().lines().count(), 40);
    assert_eq!(fs::read_to_string(&gt).unwrap().lines().count(), 40);
    assert!(!fs::read_to_string(&labels).unwrap().is_empty());

    let out = dynvo(&[
        "run", "--input", p(&frames), "--config", p(&config), "--out-traj", p(&traj), "--out-diag", p(&diag), "--seed", "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 40);
    assert_eq!(fs::read_to_string(&diag).unwrap().lines().count(), 40);

    for metric in ["ate", "rpe"] {
        let out = dynvo(&["eval", "--est", p(&traj), "--gt", p(&gt), "--metric", metric, "--delta", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        let first: f64 = text.lines().next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(first.is_finite() && first >= 0.0);
        if metric == "ate" {
            assert!(first < 0.05, "ATE {first}");
        }
    }
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.txt");
    let frames = dir.path().join("frames.jsonl");
    fs::write(&spec, SPEC).unwrap();
    assert!(dynvo(&["synth", "--spec", p(&spec), "--out", p(&frames)]).status.success());
    let mut outputs = Vec::new();
    for run in 0..2 {
        let traj = dir.path().join(format!("t{run}.txt"));
        let diag = dir.path().join(format!("d{run}.jsonl"));
        let out = dynvo(&["run", "--input", p(&frames), "--mode", "minus", "--out-traj", p(&traj), "--out-diag", p(&diag)]);
        assert!(out.status.success());
        outputs.push((fs::read(traj).unwrap(), fs::read(diag).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.txt");
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(dynvo(&["run", "--input", p(&missing), "--out-traj", p(&traj)]).status.code(), Some(1));

    let frames = dir.path().join("frames.jsonl");
    fs::write(&frames, "{\"id\":0,\"timestamp\":0.0}\n").unwrap();
    assert_eq!(dynvo(&["run", "--input", p(&frames), "--out-traj", p(&traj)]).status.code(), Some(1));

    let config = dir.path().join("bad.cfg");
    fs::write(&config, "no_such_key = 1\n").unwrap();
    fs::write(&frames, "").unwrap();
    let out = dynvo(&["run", "--input", p(&frames), "--config", p(&config), "--out-traj", p(&traj)]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(dynvo(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(dynvo(&["run", "--input", p(&frames), "--out-traj", p(&traj), "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(dynvo(&["eval", "--est", p(&missing), "--gt", p(&missing)]).status.code(), Some(1));
}

#[test]
fn empty_input_gives_empty_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    let traj = dir.path().join("traj.txt");
    fs::write(&frames, "").unwrap();
    let out = dynvo(&["run", "--input", p(&frames), "--out-traj", p(&traj)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&traj).unwrap(), "");
}

#[test]
fn mostly_lost_tracking_exits_with_two() {
    // Three keypoints per frame cannot constrain a pose.
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    let traj = dir.path().join("traj.txt");
    let mut text = String::new();
    for f in 0..6 {
        let prev = |id: u32| if f == 0 { "null".to_string() } else { id.to_string() };
        text.push_str(&format!(
            "{{\"id\":{f},\"timestamp\":{}.0,\"intrinsics\":[500,500,320,240],\"keypoints\":[\
             {{\"id\":1,\"uv\":[100,100],\"z\":2.0,\"prev\":{}}},\
             {{\"id\":2,\"uv\":[300,200],\"z\":3.0,\"prev\":{}}},\
             {{\"id\":3,\"uv\":[500,400],\"z\":4.0,\"prev\":{}}}],\"detections\":[]}}\n",
            f,
            prev(1),
            prev(2),
            prev(3)
        ));
    }
    fs::write(&frames, text).unwrap();
    let out = dynvo(&["run", "--input", p(&frames), "--out-traj", p(&traj)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&traj).unwrap().lines().count(), 6);
}

#[test]
fn help_exits_cleanly() {
    let out = dynvo(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}
