use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_radar-mot"));
    c.env_remove("RADAR_MOT_CONFIG").env("RADAR_MOT_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The compact preset with `n` sequences and the given extra top-level lines.
fn small_config(dir: &Path, n: usize, schedule: Option<(usize, usize, f64)>) -> PathBuf {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut text = fs::read_to_string(root).unwrap().replace("n_sequences = 200", &format!("n_sequences = {n}"));
    if let Some((e1, e2, lr)) = schedule {
        text = text.replace(
            "stage1_epochs = 4\nstage2_epochs = 2",
            &format!("stage1_epochs = {e1}\nstage2_epochs = {e2}\nstage1_lr = {lr:e}"),
        );
    }
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn synth(tmp: &TempDir, cfg: &Path) -> PathBuf {
    let data = tmp.path().join("data");
    let o = run(&["--config", s(cfg), "synth", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn cheat_mode_round_trip_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 3, None);
    let data = synth(&tmp, &cfg);
    assert!(data.join("seq_002/labels").is_dir());

    let tracks = tmp.path().join("tracks");
    let o = run(&["--config", s(&cfg), "track", "--cheat", "--flow-dump", "--timing", "--data", s(&data), "--out", s(&tracks)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["tracks.jsonl", "summary.json", "timing.csv", "flow/000000.csv"] {
        assert!(tracks.join("seq_000").join(f).is_file(), "missing {f}");
    }

    let ev = tmp.path().join("eval");
    let o = run(&["--config", s(&cfg), "eval", "--data", s(&data), "--tracks", s(&tracks), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mota"], 1.0);
    assert_eq!(m["moda"], 1.0);
    assert_eq!(m["counts"]["id_switches"], 0);
    for f in ["sweep.csv", "sweep.svg", "recall.svg"] {
        assert!(ev.join(f).is_file(), "missing {f}");
    }
    let sweep = fs::read_to_string(ev.join("sweep.csv")).unwrap();
    assert!(sweep.starts_with("iou_threshold,mota,"));
    assert_eq!(sweep.lines().count(), 10);

    let sw = tmp.path().join("sweep");
    let o = run(&[
        "--config", s(&cfg), "sweep", "--data", s(&data), "--tracks", s(&tracks), "--out", s(&sw),
        "--axis", "min_points_valid", "--values", "1,5,10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(sw.join("sweep.csv")).unwrap().lines().count(), 4);
}

#[test]
fn learned_tracking_is_deterministic_across_job_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, None);
    let data = synth(&tmp, &cfg);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&run(&["--config", s(&cfg), "--jobs", "1", "track", "--data", s(&data), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["--config", s(&cfg), "--jobs", "2", "track", "--data", s(&data), "--out", s(&b)])), 0);
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 5);
    assert_eq!(ta, tb);
}

#[test]
fn zero_epoch_training_returns_the_initial_weights() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 1, Some((0, 0, 1e-3)));
    let data = synth(&tmp, &cfg);
    let first = tmp.path().join("first");
    let o = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&first)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let w = fs::read(first.join("weights.bin")).unwrap();
    assert_eq!(w, fs::read(first.join("weights_stage1.bin")).unwrap());
    assert_eq!(fs::read_to_string(first.join("train_log.csv")).unwrap().lines().count(), 1);

    // Starting from a saved checkpoint reproduces it byte for byte.
    let second = tmp.path().join("second");
    let o = run(&[
        "--config", s(&cfg), "train", "--data", s(&data), "--out", s(&second),
        "--resume-stage1", s(&first.join("weights.bin")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(second.join("weights.bin")).unwrap(), w);
    assert!(!second.join("weights_stage1.bin").exists());
}

#[test]
fn training_writes_logs_and_tracks_with_the_result() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 2, Some((1, 1, 1e-3)));
    let data = synth(&tmp, &cfg);
    let out = tmp.path().join("train");
    let o = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let epochs = fs::read_to_string(out.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    assert!(fs::read_to_string(out.join("loss.svg")).unwrap().contains("<polyline"));

    let tracks = tmp.path().join("tracks");
    let o = run(&[
        "--config", s(&cfg), "track", "--weights", s(&out.join("weights.bin")),
        "--data", s(&data.join("seq_000")), "--out", s(&tracks),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tracks.join("seq_000/tracks.jsonl").is_file());
}

#[test]
fn divergence_exits_with_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 1, Some((2, 0, 1e300)));
    let data = synth(&tmp, &cfg);
    let o = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validation_errors_exit_with_1() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("out");
    assert_eq!(code(&run(&["track", "--data", s(&missing), "--out", s(&out)])), 1);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[detect]\nzeta = 0.5\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&bad), "grad-check"])), 1);

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["eval", "--data", s(&empty), "--tracks", s(&out), "--out", s(&out)])), 1);

    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["sweep", "--axis", "bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn tracks_missing_for_a_sequence_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 1, None);
    let data = synth(&tmp, &cfg);
    let o = run(&["eval", "--data", s(&data), "--tracks", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seq_000"));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), 1, None);
    let data = synth(&tmp, &cfg);
    let file = tmp.path().join("file");
    fs::write(&file, "x").unwrap();
    let o = run(&["--config", s(&cfg), "track", "--cheat", "--data", s(&data), "--out", s(&file)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_passes_on_the_reference_pair() {
    let o = run(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 4);
}
