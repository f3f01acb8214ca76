use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xai(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xai-eval")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

const CONFIG: &str = r#"
[gen_data]
n_images = 8
height = 16
width = 16

[explain]
manifest = "data/manifest.json"
model = "data/model"
methods = ["saliency", "grad_cam", "control_perfect"]

[explain.params]
ig_steps = 8
gs_samples = 4
fp_patch = 4

[evaluate]
manifest = "data/manifest.json"
images_per_seed = 5

[compare]
n_boot = 20
"#;

#[test]
fn pipeline_runs_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    ok(&xai(&["gen-data", "--config", "run.toml", "--seed", "3", "--out", "data"], dir));
    ok(&xai(&["explain", "--config", "run.toml", "--seed", "1", "--out", "ex", "--jobs", "2"], dir));
    ok(&xai(&["explain", "--config", "run.toml", "--seed", "1", "--out", "ex2", "--model-seed", "9", "--model-id", "other"], dir));
    ok(&xai(&["evaluate", "--config", "run.toml", "--seed", "1", "--seed", "2", "--explanations", "ex", "--out", "ev"], dir));
    ok(&xai(&["evaluate", "--config", "run.toml", "--seed", "1", "--seed", "2", "--explanations", "ex2", "--out", "ev2"], dir));
    let out = xai(&["compare", "--config", "run.toml", "--seed", "4", "--scores", "ev", "ev2", "--out", "cmp"], dir);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("tests: 6"));
    let scores = fs::read_to_string(dir.join("ev/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 2 * 5 * 3);
    for f in ["ex/explain_manifest.json", "ev/aggregate.csv", "cmp/comparison.csv", "cmp/run_summary.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    ok(&xai(
        &["sanity", "--seed", "2", "--manifest", "data/manifest.json", "--model", "data/model", "--methods", "saliency", "--batch", "3", "--out", "san"],
        dir,
    ));
    assert!(dir.join("san/sanity.csv").is_file());
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| xai(args, dir).status.code().unwrap();
    assert_eq!(code(&["gen-data", "--out", "d"]), 2, "missing seed");
    assert_eq!(code(&["gen-data", "--seed", "1", "--out", "d", "--signal-area-fraction", "1.5"]), 2);
    fs::write(dir.join("bad.toml"), "[gen_data]\nseeed = 1\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", "bad.toml", "--out", "d"]), 2);
    assert_eq!(code(&["gen-data", "--seed", "1", "--seed", "2", "--out", "d"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["explain", "--seed", "1", "--manifest", "nope.json", "--model-seed", "1", "--out", "e"]), 3);
    assert_eq!(code(&["explain", "--seed", "1", "--manifest", "nope.json", "--model-seed", "1", "--methods", "lime", "--out", "e"]), 2);
}

#[test]
fn reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&xai(&["gen-data", "--seed", "7", "--n-images", "4", "--height", "8", "--width", "8", "--out", "a"], dir));
    ok(&xai(&["gen-data", "--seed", "7", "--n-images", "4", "--height", "8", "--width", "8", "--out", "b"], dir));
    for f in ["manifest.json", "images/img_00003.npy", "masks/img_00002.png", "model/topology.json"] {
        assert_eq!(fs::read(dir.join("a").join(f)).unwrap(), fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}
