use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp"))
        .args(args)
        .env_remove("MVP_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mvp(args);
    assert!(
        out.status.success(),
        "mvp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scenes_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenes")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SCENE: &str = r#"
name = "pan"
width = 640
height = 480
frames = 40
seed = 5

[[objects]]
label = "car"
box = [60, 40, 130, 110]
motion = { kind = "translate", u = 3.0, v = 2.0 }
jitter = { kind = "gaussian", sigma = 1.0 }
"#;

/// Writes a scene and a run config pointing at it; returns the config path.
fn setup(dir: &Path, mode: &str, k: u32) -> PathBuf {
    std::fs::write(dir.join("pan.toml"), SCENE).unwrap();
    let cfg = dir.join(format!("{mode}-{k}.toml"));
    std::fs::write(
        &cfg,
        format!(
            "mode = \"{mode}\"\noutput = \"out-{mode}-{k}\"\n\n[mvp]\nkeyframe_interval = {k}\n\n[[inputs]]\nscene = \"pan.toml\"\n"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pan.toml"), SCENE).unwrap();
    let scene = dir.path().join("pan.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", p(&scene), "-o", p(&a)]);
    ok(&["synth", p(&scene), "-o", p(&b)]);
    for f in ["pan.mvs", "pan.gt.jsonl", "pan.dets.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn bundled_scenes_generate() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth".to_string()];
    for entry in std::fs::read_dir(scenes_dir()).unwrap() {
        args.push(entry.unwrap().path().to_string_lossy().into_owned());
    }
    args.extend(["-o".into(), p(dir.path()).into()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ok(&argv);
    assert_eq!(out.lines().count(), args.len() - 3);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pan.toml"), SCENE).unwrap();
    ok(&[
        "synth",
        p(&dir.path().join("pan.toml")),
        "-o",
        p(dir.path()),
    ]);
    let gt = dir.path().join("pan.gt.jsonl");
    let report = dir.path().join("report.json");
    let table = ok(&[
        "eval",
        "--predictions",
        p(&dir.path().join("pan.dets.jsonl")),
        "--ground-truth",
        p(&gt),
        "--output",
        p(&report),
    ]);
    assert!(table.contains("mean IoU 1.000"), "{table}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    for key in ["map_02", "map_03", "map_05", "map_50_95", "mean_iou"] {
        assert!(
            (json[key].as_f64().unwrap() - 1.0).abs() < 1e-12,
            "{key}: {}",
            json[key]
        );
    }
}

#[test]
fn run_writes_outputs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "mvp", 10);
    let stdout = ok(&["run", p(&cfg)]);
    assert!(stdout.contains("4 detector calls"), "{stdout}");
    let out = dir.path().join("out-mvp-10");
    for f in [
        "config.toml",
        "predictions.jsonl",
        "runlog.jsonl",
        "metrics.json",
        "metrics.txt",
        "timings.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("keyframe_interval = 10"), "{echoed}");
    let runlog = std::fs::read_to_string(out.join("runlog.jsonl")).unwrap();
    assert_eq!(runlog.lines().count(), 40);

    // re-scoring the written files reproduces the run's metrics
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    ok(&[
        "synth",
        p(&dir.path().join("pan.toml")),
        "-o",
        p(dir.path()),
    ]);
    let rescored = dir.path().join("rescored.json");
    ok(&[
        "eval",
        "--predictions",
        p(&out.join("predictions.jsonl")),
        "--ground-truth",
        p(&dir.path().join("pan.gt.jsonl")),
        "--run-log",
        p(&out.join("runlog.jsonl")),
        "--output",
        p(&rescored),
    ]);
    let again: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rescored).unwrap()).unwrap();
    assert_eq!(metrics["map_50_95"], again["map_50_95"]);
    assert_eq!(metrics["detector_calls"], again["detector_calls"]);
}

#[test]
fn frozen_every_frame_matches_framewise() {
    let dir = tempfile::tempdir().unwrap();
    let frozen = setup(dir.path(), "frozen", 1);
    let framewise = setup(dir.path(), "framewise", 5);
    ok(&["run", p(&frozen)]);
    ok(&["run", p(&framewise)]);
    let a = std::fs::read(dir.path().join("out-frozen-1/predictions.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("out-framewise-5/predictions.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "mvp", 10);
    let out = dir.path().join("override");
    let stdout = ok(&[
        "run",
        p(&cfg),
        "--keyframe-interval",
        "20",
        "--no-grid",
        "--output",
        p(&out),
        "--workers",
        "2",
    ]);
    assert!(stdout.contains("2 detector calls"), "{stdout}");
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(
        echoed.contains("keyframe_interval = 20") && echoed.contains("grid_enabled = false"),
        "{echoed}"
    );
}

#[test]
fn ablate_prints_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "mvp", 20);
    let table = ok(&["ablate", p(&cfg)]);
    for row in [
        "MVP (full)",
        "w/o single-class",
        "w/o area-growth",
        "w/o 3x3 grid MV",
    ] {
        assert!(table.contains(row), "missing {row}:\n{table}");
    }
    assert!(dir.path().join("out-mvp-20/ablation.json").is_file());
}

#[test]
fn missing_mv_dump_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "prompts = [\"car\"]\n[detector]\nkind = \"precomputed\"\npath = \"dets.jsonl\"\n\
         [[inputs]]\nvideo = \"v\"\nmv_dump = \"absent.mvs\"\nframes = 10\nwidth = 64\nheight = 64\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("dets.jsonl"), "").unwrap();
    let out = mvp(&["run", p(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("absent.mvs"), "{err}");
}

#[test]
fn bad_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "mvp", 10);
    let out = mvp(&["run", p(&cfg), "--keyframe-interval", "0"]);
    assert!(!out.status.success());
    let typo = dir.path().join("typo.toml");
    std::fs::write(
        &typo,
        "[mvp]\nkeyframe_intreval = 5\n[[inputs]]\nscene = \"pan.toml\"\n",
    )
    .unwrap();
    let out = mvp(&["run", p(&typo)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("keyframe_intreval"));
}

#[test]
fn extract_uses_the_configured_tool() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("clip.mp4");
    std::fs::write(&video, b"").unwrap();
    let dump = dir.path().join("clip.mvs");
    ok(&[
        "extract",
        p(&video),
        "-o",
        p(&dump),
        "--extractor",
        "printf",
        "--extractor-arg",
        "framenum,source,blockw,blockh,srcx,srcy,dstx,dsty,flags\\n3,-1,16,16,8,8,10,8,0x0\\n",
    ]);
    let text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(text.lines().nth(1), Some("2,-1,16,16,8,8,10,8,0x0"));

    let out = mvp(&[
        "extract",
        p(&video),
        "-o",
        p(&dump),
        "--extractor",
        "/nonexistent/extract_mvs",
    ]);
    assert!(!out.status.success());
}
