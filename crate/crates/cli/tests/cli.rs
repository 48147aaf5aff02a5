use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn finenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finenet")).args(args).env("RUST_LOG", "warn").output().expect("spawn finenet")
}

/// Runs with the toy config, six videos and frequent validation.
fn toy(args: &[&str]) -> Output {
    let cfg = toy_config();
    let mut all = args.to_vec();
    all.extend(["-c", cfg.to_str().unwrap(), "--set", "data.videos=6", "--set", "train.val_every=5"]);
    finenet(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

/// The last stderr line, which carries the error category.
fn error_line(o: &Output) -> String {
    stderr(o).lines().last().unwrap_or_default().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &TempDir) -> PathBuf {
    let data = dir.path().join("data");
    ok(toy(&["synth-data", "--out", p(&data)]));
    data
}

fn train(data: &Path, run: &Path, stage: &str, steps: usize) -> Output {
    toy(&["train", "--stage", stage, "--data", p(data), "--run", p(run), "--steps", &steps.to_string()])
}

#[test]
fn gradcheck_reports_every_op() {
    let o = ok(finenet(&["gradcheck"]));
    let out = stdout(&o);
    for op in ["deform_conv", "foc_forward", "fuse_aligned", "combine", "branch_loss"] {
        let line = out.lines().find(|l| l.starts_with(op)).unwrap_or_else(|| panic!("no line for {op}"));
        assert!(line.contains("max_rel_error") && line.ends_with("ok"), "{line}");
    }
}

#[test]
fn impossible_gradcheck_tolerance_fails_with_category() {
    let o = finenet(&["gradcheck", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[gradcheck]:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    for args in [vec!["frobnicate"], vec!["gradcheck", "--no-such-flag"], vec![], vec!["train", "--stage", "bogus"]] {
        let o = finenet(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[usage]:"), "{err}");
    }
}

#[test]
fn help_exits_0() {
    let o = ok(finenet(&["--help"]));
    assert!(stdout(&o).contains("synth-data"));
    ok(finenet(&["ablate", "--help"]));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nsteps = \"many\"\n").unwrap();
    let o = finenet(&["synth-data", "--out", p(&dir.path().join("d")), "-c", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = toy(&["synth-data", "--out", p(&dir.path().join("d")), "--set", "model.enhance.width=0"]);
    assert!(error_line(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = toy(&["synth-data", "--out", p(&dir.path().join("d")), "--set", "nonsense"]);
    assert!(error_line(&o).starts_with("error[config]:"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let o = train(&dir.path().join("nowhere"), &dir.path().join("run"), "enhance", 1);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[data]:"), "{}", stderr(&o));
}

#[test]
fn combine_without_branches_is_a_dependency_error() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let o = train(&data, &dir.path().join("run"), "combine", 2);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[dependency]:"), "{}", stderr(&o));

    let o = toy(&["eval", "--split", "test", "--data", p(&data), "--run", p(&dir.path().join("run"))]);
    assert!(error_line(&o).starts_with("error[dependency]:"), "{}", stderr(&o));

    let o = toy(&["train", "--stage", "enhance", "--data", p(&data), "--run", p(&dir.path().join("run")), "--set", "train.two_stage=true"]);
    assert!(error_line(&o).starts_with("error[dependency]:"), "{}", stderr(&o));
}

#[test]
fn changed_architecture_is_a_version_error() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let run = dir.path().join("run");
    ok(train(&data, &run, "enhance", 2));
    ok(train(&data, &run, "interp", 2));
    let o = toy(&["train", "--stage", "combine", "--data", p(&data), "--run", p(&run), "--set", "model.enhance.foc_depth=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error[version]:"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let run = dir.path().join("run");
    ok(train(&data, &run, "enhance", 2));
    let path = run.join("enhance.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    fs::write(&path, bytes).unwrap();
    let o = toy(&["train", "--stage", "enhance", "--resume", "--data", p(&data), "--run", p(&run), "--steps", "3"]);
    assert!(error_line(&o).starts_with("error[data]:"), "{}", stderr(&o));
}

#[test]
fn missing_landmark_record_is_data_missing() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let train_ids = fs::read_to_string(data.join("splits/train.txt")).unwrap();
    let id = train_ids.lines().next().unwrap();
    let sidecar = data.join(id).join("landmarks.txt");
    let text = fs::read_to_string(&sidecar).unwrap();
    let kept: String = text.lines().filter(|l| !l.starts_with("000003")).map(|l| format!("{l}\n")).collect();
    assert_ne!(kept, text);
    fs::write(&sidecar, kept).unwrap();
    for o in [finenet(&["gen-heatmaps", "--data", p(&data)]), train(&data, &dir.path().join("run"), "enhance", 1)] {
        assert_eq!(o.status.code(), Some(1));
        let line = error_line(&o);
        assert!(line.starts_with("error[data-missing]:") && line.contains(&format!("{id}/000003")), "{line}");
    }
}

#[test]
fn gen_heatmaps_writes_one_preview_per_frame() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    ok(finenet(&["gen-heatmaps", "--data", p(&data), "--out", p(&dir.path().join("hm"))]));
    let n: usize = (0..6).map(|v| fs::read_dir(dir.path().join(format!("hm/video000{v}"))).unwrap().count()).sum();
    assert_eq!(n, 6 * 8);
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_runs_end_to_end_and_reproduces() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let run = dir.path().join("run");
    for stage in ["enhance", "interp", "combine"] {
        let o = ok(train(&data, &run, stage, 6));
        assert!(stdout(&o).starts_with(stage));
    }
    assert!(run.join("config.toml").is_file());
    assert!(run.join("combine.best.ckpt").is_file());
    let log = fs::read_to_string(run.join("enhance.train.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"loss\"")).count(), 6);

    let o = ok(toy(&["eval", "--split", "test", "--data", p(&data), "--run", p(&run)]));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["split"], "test");
    let report = fs::read_to_string(run.join("eval-test.jsonl")).unwrap();
    assert_eq!(report.lines().count(), summary["frames"].as_u64().unwrap() as usize + 1);

    // One PNG per input frame plus metrics, identical on a re-run.
    let video = data.join("video0002");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(toy(&["deblur", "--in", p(&video), "--out", p(&a), "--run", p(&run)]));
    ok(toy(&["deblur", "--in", p(&video), "--out", p(&b), "--run", p(&run)]));
    let files = read_dir_bytes(&a);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".png")).count(), 8);
    assert!(files.iter().any(|(n, _)| n == "metrics.jsonl"));
    assert_eq!(files, read_dir_bytes(&b));

    // Retraining from scratch reproduces the checkpoint bytes.
    let run2 = dir.path().join("run2");
    ok(train(&data, &run2, "enhance", 6));
    assert_eq!(fs::read(run.join("enhance.ckpt")).unwrap(), fs::read(run2.join("enhance.ckpt")).unwrap());
    assert_eq!(fs::read(run.join("enhance.best.ckpt")).unwrap(), fs::read(run2.join("enhance.best.ckpt")).unwrap());
}

#[test]
fn deblur_without_ground_truth_writes_frames_only() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let run = dir.path().join("run");
    for stage in ["enhance", "interp", "combine"] {
        ok(train(&data, &run, stage, 1));
    }
    let video = dir.path().join("clip");
    fs::create_dir(&video).unwrap();
    for entry in fs::read_dir(data.join("video0001")).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            fs::copy(&path, video.join(path.file_name().unwrap())).unwrap();
        }
    }
    let out = dir.path().join("out");
    ok(toy(&["deblur", "--in", p(&video), "--out", p(&out), "--run", p(&run)]));
    let files = read_dir_bytes(&out);
    assert_eq!(files.len(), 8);
    assert!(files.iter().all(|(n, _)| n.ends_with(".png")));

    fs::remove_file(video.join("landmarks.txt")).unwrap();
    let o = toy(&["deblur", "--in", p(&video), "--out", p(&out), "--run", p(&run)]);
    assert!(error_line(&o).starts_with("error[data-missing]:"), "{}", stderr(&o));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(train(&data, &full, "interp", 8));
    ok(train(&data, &split, "interp", 3));
    ok(toy(&["train", "--stage", "interp", "--resume", "--data", p(&data), "--run", p(&split), "--steps", "8"]));
    assert_eq!(fs::read(full.join("interp.ckpt")).unwrap(), fs::read(split.join("interp.ckpt")).unwrap());
    assert_eq!(fs::read(full.join("interp.best.ckpt")).unwrap(), fs::read(split.join("interp.best.ckpt")).unwrap());
}

#[test]
fn ablate_trains_and_evaluates_a_variant() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir);
    let run = dir.path().join("ablations");
    let o = ok(toy(&["ablate", "--preset", "no-foc", "--data", p(&data), "--run", p(&run), "--steps", "2"]));
    assert!(stdout(&o).contains("\"split\":\"test\""));
    let variant = run.join("no-foc");
    for f in ["enhance.ckpt", "interp.ckpt", "combine.ckpt", "eval-test.jsonl", "config.toml"] {
        assert!(variant.join(f).is_file(), "{f}");
    }
    let cfg = fs::read_to_string(variant.join("config.toml")).unwrap();
    assert!(cfg.contains("offsets = \"plain\"") && cfg.contains("use_heatmaps = false"), "{cfg}");
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(toy(&["synth-data", "--out", p(&a), "--seed", "1"]));
    ok(toy(&["synth-data", "--out", p(&b), "--seed", "2"]));
    assert_ne!(fs::read(a.join("video0000/000000.png")).unwrap(), fs::read(b.join("video0000/000000.png")).unwrap());
}
