#![allow(dead_code)]

use std::sync::Arc;

use mvp_core::detector::{DetectionStore, PrecomputedDetector};
use mvp_core::evalkit::{evaluate, EvalOptions, MetricsReport};
use mvp_core::geometry::{to_pixel, YoloBox};
use mvp_core::propagate::MvpConfig;
use mvp_core::scheduler::{run_video, PropagationMode, VideoInput, VideoRun};
use mvp_core::synth::{generate, Jitter, MotionModel, ObjectSpec, SceneSpec, SynthScene};

pub fn one_object_scene(
    name: &str,
    (width, height): (u32, u32),
    frames: u32,
    initial: [f64; 4],
    motion: MotionModel,
    jitter: Option<Jitter>,
    seed: u64,
) -> SceneSpec {
    SceneSpec {
        name: name.into(),
        width,
        height,
        frames,
        block: 16,
        seed,
        objects: vec![ObjectSpec {
            label: "object".into(),
            initial,
            motion,
            jitter,
        }],
    }
}

/// Translate(3,4) pan of a 90x90 box in a 1280x720 frame.
pub fn pan_scene(frames: u32, jitter: Option<Jitter>, seed: u64) -> SceneSpec {
    one_object_scene(
        "pan",
        (1280, 720),
        frames,
        [100.0, 50.0, 190.0, 140.0],
        MotionModel::Translate { u: 3.0, v: 4.0 },
        jitter,
        seed,
    )
}

/// Zoom(1.02) on a 640x640 box centered in a 2560x1440 frame.
pub fn zoom_scene(frames: u32) -> SceneSpec {
    one_object_scene(
        "zoom",
        (2560, 1440),
        frames,
        [960.0, 400.0, 1600.0, 1040.0],
        MotionModel::Zoom { s: 1.02 },
        None,
        0,
    )
}

/// Zoom(1.08) on a 150x150 box centered in a 1280x720 frame.
pub fn fast_zoom_scene(frames: u32) -> SceneSpec {
    one_object_scene(
        "fast-zoom",
        (1280, 720),
        frames,
        [565.0, 285.0, 715.0, 435.0],
        MotionModel::Zoom { s: 1.08 },
        None,
        0,
    )
}

/// Static 64x64 box whose vectors are i.i.d. uniform +-20 px noise.
pub fn jitter_scene(seed: u64) -> SceneSpec {
    one_object_scene(
        "jitter",
        (640, 480),
        2,
        [200.0, 150.0, 264.0, 214.0],
        MotionModel::Static,
        Some(Jitter::Uniform { amplitude: 20.0 }),
        seed,
    )
}

pub fn run_scene(scene: &SynthScene, cfg: &MvpConfig, mode: PropagationMode) -> VideoRun {
    let mvs = scene.mv_stream();
    let store = Arc::new(DetectionStore::from_records(scene.detections.clone()));
    let mut detector = PrecomputedDetector::new(store, scene.name.clone());
    let input = VideoInput {
        name: scene.name.clone(),
        frame_size: scene.frame_size,
        frame_count: scene.frame_count,
        image_pattern: "{video}/{frame:06}".into(),
        mvs: &mvs,
        prompts: scene.labels(),
    };
    run_video(&input, &mut detector, cfg, mode).expect("pipeline run")
}

pub fn metrics(scene: &SynthScene, run: &VideoRun) -> MetricsReport {
    evaluate(&run.outputs, &scene.ground_truth, EvalOptions::default())
        .expect("evaluation")
        .with_run_log(&run.log)
}

pub fn generate_ok(spec: &SceneSpec) -> SynthScene {
    generate(spec).expect("valid scene")
}

pub fn cfg_k(k: u32) -> MvpConfig {
    MvpConfig {
        keyframe_interval: k,
        ..MvpConfig::default()
    }
}

/// Largest absolute pixel-corner difference between two boxes.
pub fn max_corner_err(a: &YoloBox, b: &YoloBox, scene: &SynthScene) -> f64 {
    let pa = to_pixel(a, scene.frame_size).unwrap().coords();
    let pb = to_pixel(b, scene.frame_size).unwrap().coords();
    pa.iter()
        .zip(pb.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
