use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use mvp_core::detector::{
    BridgeCommand, BridgeDetector, DetectionStore, Detector, PrecomputedDetector,
};
use mvp_core::evalkit::{
    evaluate, gt_labels, read_gt_records, EvalOptions, GtRecord, MetricsReport,
};
use mvp_core::geometry::FrameSize;
use mvp_core::mvstream::{read_mv_dump, MvStream};
use mvp_core::propagate::MvpConfig;
use mvp_core::scheduler::{run_video, FrameLog, PropagationMode, VideoInput, VideoRun};
use mvp_core::synth::{generate, SceneSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DetectorConfig, InputConfig, RunConfig};

pub struct LoadedVideo {
    pub name: String,
    pub frame_size: FrameSize,
    pub frame_count: u32,
    pub image_pattern: String,
    pub mvs: MvStream,
    /// Detections that came with a synthetic scene.
    pub own_detections: Option<Arc<DetectionStore>>,
}

pub struct Inputs {
    pub videos: Vec<LoadedVideo>,
    pub shared_detections: Option<Arc<DetectionStore>>,
    pub ground_truth: Option<Vec<GtRecord>>,
    pub parse_ms: f64,
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing scene {}", path.display()))
}

pub fn load_gt(path: &Path) -> Result<Vec<GtRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_gt_records(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let started = Instant::now();
    let shared_detections = match &cfg.detector {
        DetectorConfig::Precomputed { path: Some(p), .. } => {
            Some(Arc::new(DetectionStore::load(p).with_context(|| {
                format!("loading detections {}", p.display())
            })?))
        }
        _ => None,
    };
    let mut ground_truth = cfg.ground_truth.as_deref().map(load_gt).transpose()?;
    let mut videos = Vec::with_capacity(cfg.inputs.len());
    for input in &cfg.inputs {
        match input {
            InputConfig::Scene { scene } => {
                let spec = load_scene(scene)?;
                let s =
                    generate(&spec).with_context(|| format!("generating {}", scene.display()))?;
                ground_truth
                    .get_or_insert_with(Vec::new)
                    .extend(s.ground_truth.iter().cloned());
                videos.push(LoadedVideo {
                    mvs: s.mv_stream(),
                    own_detections: Some(Arc::new(DetectionStore::from_records(s.detections))),
                    name: s.name,
                    frame_size: s.frame_size,
                    frame_count: s.frame_count,
                    image_pattern: "{video}/{frame:06}".to_string(),
                });
            }
            InputConfig::Video {
                video,
                mv_dump,
                frames,
                width,
                height,
                image_pattern,
            } => {
                let mvs = read_mv_dump(mv_dump, cfg.future_mvs.into())
                    .with_context(|| format!("reading motion vectors {}", mv_dump.display()))?;
                videos.push(LoadedVideo {
                    name: video.clone(),
                    frame_size: FrameSize::new(*width, *height)?,
                    frame_count: *frames,
                    image_pattern: image_pattern.clone(),
                    mvs,
                    own_detections: None,
                });
            }
        }
    }
    let mut seen = BTreeSet::new();
    for v in &videos {
        if !seen.insert(v.name.as_str()) {
            bail!("video {} is listed twice", v.name);
        }
    }
    Ok(Inputs {
        videos,
        shared_detections,
        ground_truth,
        parse_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

impl Inputs {
    fn store_for(&self, v: &LoadedVideo) -> Option<Arc<DetectionStore>> {
        self.shared_detections
            .clone()
            .or_else(|| v.own_detections.clone())
    }

    fn prompts_for(&self, cfg: &RunConfig, v: &LoadedVideo) -> Result<Vec<String>> {
        if !cfg.prompts.is_empty() {
            return Ok(cfg.prompts.clone());
        }
        let mut labels = self
            .store_for(v)
            .map(|s| s.labels(&v.name))
            .unwrap_or_default();
        if labels.is_empty() {
            if let Some(gt) = &self.ground_truth {
                let own: Vec<GtRecord> = gt.iter().filter(|r| r.video == v.name).cloned().collect();
                labels = gt_labels(&own);
            }
        }
        if labels.is_empty() {
            bail!(
                "no prompts configured and none can be inferred for video {}",
                v.name
            );
        }
        Ok(labels)
    }
}

fn make_detector(cfg: &RunConfig, inputs: &Inputs, v: &LoadedVideo) -> Result<Box<dyn Detector>> {
    Ok(match &cfg.detector {
        DetectorConfig::Precomputed { score_floor, .. } => {
            let store = inputs.store_for(v).ok_or_else(|| {
                anyhow!(
                    "video {} has no precomputed detections; set detector.path",
                    v.name
                )
            })?;
            Box::new(PrecomputedDetector::new(store, v.name.clone()).with_score_floor(*score_floor))
        }
        DetectorConfig::Bridge {
            command,
            timeout_s,
            score_floor,
        } => {
            let mut cmd = BridgeCommand::from_argv(command)
                .ok_or_else(|| anyhow!("detector.command is empty"))?;
            cmd.timeout_s = *timeout_s;
            Box::new(BridgeDetector::spawn(&cmd)?.with_score_floor(*score_floor))
        }
    })
}

/// Run every input video with the given settings, in parallel across videos.
pub fn run_all(
    cfg: &RunConfig,
    inputs: &Inputs,
    mode: PropagationMode,
    mvp: &MvpConfig,
) -> Result<Vec<VideoRun>> {
    let workers = cfg.workers.unwrap_or_else(rayon::current_num_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()?;
    pool.install(|| {
        inputs
            .videos
            .par_iter()
            .map(|v| {
                let prompts = inputs.prompts_for(cfg, v)?;
                let mut detector = make_detector(cfg, inputs, v)?;
                let input = VideoInput {
                    name: v.name.clone(),
                    frame_size: v.frame_size,
                    frame_count: v.frame_count,
                    image_pattern: v.image_pattern.clone(),
                    mvs: &v.mvs,
                    prompts,
                };
                let run = run_video(&input, detector.as_mut(), mvp, mode)
                    .with_context(|| format!("video {}", v.name))?;
                info!(
                    "{}: {} frames, {} detector calls ({} fallbacks)",
                    v.name,
                    v.frame_count,
                    run.detector_calls(),
                    run.fallback_calls()
                );
                Ok(run)
            })
            .collect()
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub parse_ms: f64,
    pub pipeline_ms: f64,
    pub detect_ms: f64,
    pub propagate_ms: f64,
    pub eval_ms: f64,
}

impl StageTimings {
    pub fn add_runs(&mut self, runs: &[VideoRun], pipeline: Duration) {
        self.pipeline_ms += pipeline.as_secs_f64() * 1e3;
        for l in runs.iter().flat_map(|r| &r.log) {
            self.detect_ms += l.detect_ms;
            self.propagate_ms += l.propagate_ms;
        }
    }
}

pub fn all_logs(runs: &[VideoRun]) -> Vec<FrameLog> {
    runs.iter().flat_map(|r| r.log.iter().cloned()).collect()
}

pub fn score(runs: &[VideoRun], gt: &[GtRecord], class_agnostic: bool) -> Result<MetricsReport> {
    let preds: Vec<_> = runs
        .iter()
        .flat_map(|r| r.outputs.iter().cloned())
        .collect();
    Ok(evaluate(&preds, gt, EvalOptions { class_agnostic })?.with_run_log(&all_logs(runs)))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_run_log(path: &Path) -> Result<Vec<FrameLog>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// The four ablation rows: full MVP and one component removed at a time.
pub fn ablation_variants(base: &MvpConfig) -> Vec<(&'static str, MvpConfig)> {
    vec![
        ("MVP (full)", base.clone()),
        (
            "w/o single-class",
            MvpConfig {
                single_class_enabled: false,
                ..base.clone()
            },
        ),
        (
            "w/o area-growth",
            MvpConfig {
                growth_check_enabled: false,
                ..base.clone()
            },
        ),
        (
            "w/o 3x3 grid MV",
            MvpConfig {
                grid_enabled: false,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricsReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>8} {:>8} {:>8} {:>12} {:>9} {:>8} {:>6}",
        "variant", "mAP@0.2", "mAP@0.3", "mAP@0.5", "mAP@[.5:.95]", "mean IoU", "FPS", "calls"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<18} {:>8.3} {:>8.3} {:>8.3} {:>12.3} {:>9.3} {:>8} {:>6}",
            r.variant,
            m.map_02,
            m.map_03,
            m.map_05,
            m.map_50_95,
            m.mean_iou,
            m.fps.map_or("-".to_string(), |f| format!("{f:.1}")),
            m.detector_calls.map_or("-".to_string(), |c| c.to_string()),
        );
    }
    s
}
