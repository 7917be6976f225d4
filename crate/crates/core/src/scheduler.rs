//! Per-video state machine producing one detection set per frame.
//!
//! Frame `t` takes one of three paths:
//!
//! * `t % K == 0`: scheduled keyframe, the detector runs;
//! * otherwise every track is propagated, clipped, and growth-checked in that
//!   order. If any track failed to propagate or grew too fast, a single
//!   full-frame fallback call replaces all tracks;
//! * otherwise the propagated boxes are the frame's output.
//!
//! Every detector call re-evaluates the single-class switch, which narrows
//! the prompt set to one class after a confident lone detection.

use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectionRecord, DetectionRequest, Detector, DetectorError};
use crate::geometry::{area_px, clip_and_validate, Detection, FrameSize, YoloBox};
use crate::mvstream::{MvFrame, MvStream};
use crate::propagate::{propagate_box, FailureReason, MvpConfig, PropagationOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// How intermediate frames are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// Motion-vector propagation with fallbacks.
    #[default]
    Mvp,
    /// Keyframe boxes held in place until the next keyframe.
    Frozen,
}

/// A live box plus its growth anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub detection: Detection,
    /// Frame of the last anchor refresh.
    pub t_star: u32,
    /// Area at the last anchor refresh, square pixels.
    pub a_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallCause {
    Scheduled,
    PropagationFailed,
    AreaGrowth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackOutcome {
    Translated,
    Scaled {
        mu_r: f64,
    },
    Failed {
        reason: FailureReason,
    },
    /// Propagated, then removed by clipping.
    Dropped,
    /// Frozen-box mode: carried unchanged.
    Held,
}

/// One run-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub video: String,
    pub frame: u32,
    pub detector_called: bool,
    pub cause: Option<CallCause>,
    /// Prompt set sent to the detector, when it ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<String>>,
    pub per_track_outcomes: Vec<TrackOutcome>,
    pub wall_ms: f64,
    #[serde(default)]
    pub detect_ms: f64,
    #[serde(default)]
    pub propagate_ms: f64,
}

impl FrameLog {
    /// Same record with every timing field zeroed.
    pub fn without_timing(&self) -> FrameLog {
        FrameLog {
            wall_ms: 0.0,
            detect_ms: 0.0,
            propagate_ms: 0.0,
            ..self.clone()
        }
    }
}

/// One frame handed to [`PipelineState::step`].
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub image_ref: &'a str,
    pub mvs: &'a MvFrame,
}

/// Fire the growth fallback for one track.
///
/// Fires when the new area exceeds `growth_ratio * A*` within
/// `growth_window` frames of the anchor; firing moves the anchor to `(t, A)`.
/// With the check disabled it never fires and the anchor is left alone.
pub fn check_growth(
    track: &TrackState,
    new_box: &YoloBox,
    t: u32,
    frame: FrameSize,
    cfg: &MvpConfig,
) -> (bool, TrackState) {
    if !cfg.growth_check_enabled {
        return (false, track.clone());
    }
    let area = area_px(new_box, frame);
    let within = t.saturating_sub(track.t_star) <= cfg.growth_window;
    if area > cfg.growth_ratio * track.a_star && within {
        let refreshed = TrackState {
            detection: Detection {
                bbox: *new_box,
                ..track.detection.clone()
            },
            t_star: t,
            a_star: area,
        };
        (true, refreshed)
    } else {
        (false, track.clone())
    }
}

/// Scheduler state for one video.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub video: String,
    pub frame_size: FrameSize,
    pub cfg: MvpConfig,
    pub mode: PropagationMode,
    /// Full prompt set used outside single-class mode.
    pub prompts: Vec<String>,
    /// Index of the next frame to process.
    pub t: u32,
    pub tracks: Vec<TrackState>,
    pub single_class: bool,
    pub class: Option<String>,
    pub miss_count: u32,
    next_id: u64,
}

impl PipelineState {
    pub fn new(
        video: impl Into<String>,
        frame_size: FrameSize,
        prompts: Vec<String>,
        cfg: MvpConfig,
        mode: PropagationMode,
    ) -> Result<Self, PipelineError> {
        cfg.validate().map_err(PipelineError::Config)?;
        if prompts.is_empty() {
            return Err(PipelineError::Config("prompt list is empty".into()));
        }
        Ok(Self {
            video: video.into(),
            frame_size,
            cfg,
            mode,
            prompts,
            t: 0,
            tracks: Vec::new(),
            single_class: false,
            class: None,
            miss_count: 0,
            next_id: 0,
        })
    }

    /// Active prompt set for the next detector call.
    pub fn active_prompts(&self) -> Vec<String> {
        match (
            &self.class,
            self.single_class && self.cfg.single_class_enabled,
        ) {
            (Some(c), true) => vec![c.clone()],
            _ => self.prompts.clone(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.tracks.iter().map(|t| t.detection.clone()).collect()
    }

    /// Re-evaluate the single-class switch after a detector call.
    pub fn update_single_class(&mut self, detections: &[Detection], fallback: bool) {
        if !self.cfg.single_class_enabled {
            return;
        }
        let confident: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.score >= self.cfg.tau_cls)
            .collect();
        if self.single_class && fallback && confident.is_empty() {
            self.miss_count += 1;
            if self.miss_count >= self.cfg.miss_limit {
                debug!(
                    "{}: leaving single-class mode after {} misses",
                    self.video, self.miss_count
                );
                self.single_class = false;
                self.class = None;
                self.miss_count = 0;
            }
            return;
        }
        self.miss_count = 0;
        if let [only] = confident.as_slice() {
            self.single_class = true;
            self.class = Some(only.label.clone());
        } else {
            self.single_class = false;
            self.class = None;
        }
    }

    fn call_detector(
        &mut self,
        detector: &mut dyn Detector,
        image_ref: &str,
        t: u32,
        fallback: bool,
    ) -> Result<Vec<String>, PipelineError> {
        let prompts = self.active_prompts();
        let req = DetectionRequest {
            frame: t,
            image_ref: image_ref.to_string(),
            prompts: prompts.clone(),
        };
        let resp = detector.detect(&req)?;
        self.update_single_class(&resp.detections, fallback);
        let frame = self.frame_size;
        let min_area = self.cfg.min_area;
        let mut tracks = Vec::with_capacity(resp.detections.len());
        for d in resp.detections {
            let Some(bbox) = clip_and_validate(&d.bbox, frame, min_area) else {
                continue;
            };
            let id = self.next_id;
            self.next_id += 1;
            tracks.push(TrackState {
                detection: Detection {
                    bbox,
                    id: Some(id),
                    ..d
                },
                t_star: t,
                a_star: area_px(&bbox, frame),
            });
        }
        self.tracks = tracks;
        Ok(prompts)
    }

    /// Process the next frame.
    pub fn step(
        &mut self,
        input: FrameInput<'_>,
        detector: &mut dyn Detector,
    ) -> Result<(Vec<Detection>, FrameLog), PipelineError> {
        let started = Instant::now();
        let t = self.t;
        if input.mvs.frame != t {
            return Err(PipelineError::Input(format!(
                "motion vectors for frame {} presented at frame {t}",
                input.mvs.frame
            )));
        }
        let mut log = FrameLog {
            video: self.video.clone(),
            frame: t,
            detector_called: false,
            cause: None,
            prompts: None,
            per_track_outcomes: Vec::new(),
            wall_ms: 0.0,
            detect_ms: 0.0,
            propagate_ms: 0.0,
        };

        let cause = if t.is_multiple_of(self.cfg.keyframe_interval) {
            Some(CallCause::Scheduled)
        } else {
            match self.mode {
                PropagationMode::Frozen => {
                    log.per_track_outcomes = vec![TrackOutcome::Held; self.tracks.len()];
                    None
                }
                PropagationMode::Mvp => {
                    let p0 = Instant::now();
                    let cause = self.propagate_tracks(input.mvs, t, &mut log.per_track_outcomes);
                    log.propagate_ms = p0.elapsed().as_secs_f64() * 1e3;
                    cause
                }
            }
        };

        if let Some(cause) = cause {
            let d0 = Instant::now();
            let fallback = cause != CallCause::Scheduled;
            if fallback {
                debug!("{}: frame {t} fallback ({cause:?})", self.video);
            }
            let prompts = self.call_detector(detector, input.image_ref, t, fallback)?;
            log.detect_ms = d0.elapsed().as_secs_f64() * 1e3;
            log.detector_called = true;
            log.cause = Some(cause);
            log.prompts = Some(prompts);
        }

        self.t += 1;
        log.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok((self.detections(), log))
    }

    /// Propagate, clip and growth-check every track. Returns the fallback
    /// cause if any track demands re-detection; tracks are updated either way.
    fn propagate_tracks(
        &mut self,
        mvs: &MvFrame,
        t: u32,
        outcomes: &mut Vec<TrackOutcome>,
    ) -> Option<CallCause> {
        let frame = self.frame_size;
        let mut failed = false;
        let mut grew = false;
        let mut next = Vec::with_capacity(self.tracks.len());
        for track in &self.tracks {
            let outcome = propagate_box(&track.detection.bbox, mvs, frame, &self.cfg);
            let moved = match outcome {
                PropagationOutcome::Translated(b) => {
                    outcomes.push(TrackOutcome::Translated);
                    b
                }
                PropagationOutcome::Scaled { bbox, mu_r } => {
                    outcomes.push(TrackOutcome::Scaled { mu_r });
                    bbox
                }
                PropagationOutcome::Failed(reason) => {
                    outcomes.push(TrackOutcome::Failed { reason });
                    failed = true;
                    continue;
                }
            };
            let Some(clipped) = clip_and_validate(&moved, frame, self.cfg.min_area) else {
                *outcomes.last_mut().expect("pushed above") = TrackOutcome::Dropped;
                continue;
            };
            let (fires, mut updated) = check_growth(track, &clipped, t, frame, &self.cfg);
            grew |= fires;
            updated.detection.bbox = clipped;
            next.push(updated);
        }
        self.tracks = next;
        if failed {
            Some(CallCause::PropagationFailed)
        } else if grew {
            Some(CallCause::AreaGrowth)
        } else {
            None
        }
    }
}

/// Substitute `{frame}` / `{frame:06}` / `{video}` in an image path pattern.
pub fn render_image_ref(pattern: &str, video: &str, frame: u32) -> String {
    pattern
        .replace("{frame:06}", &format!("{frame:06}"))
        .replace("{frame}", &frame.to_string())
        .replace("{video}", video)
}

/// Everything needed to run one video.
#[derive(Debug, Clone)]
pub struct VideoInput<'a> {
    pub name: String,
    pub frame_size: FrameSize,
    pub frame_count: u32,
    /// Image path pattern handed to the detector, see [`render_image_ref`].
    pub image_pattern: String,
    pub mvs: &'a MvStream,
    pub prompts: Vec<String>,
}

/// Per-frame outputs plus the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRun {
    pub video: String,
    pub outputs: Vec<DetectionRecord>,
    pub log: Vec<FrameLog>,
}

impl VideoRun {
    pub fn detector_calls(&self) -> usize {
        self.log.iter().filter(|l| l.detector_called).count()
    }

    /// Detector calls that were not on the keyframe schedule.
    pub fn fallback_calls(&self) -> usize {
        self.log
            .iter()
            .filter(|l| matches!(l.cause, Some(c) if c != CallCause::Scheduled))
            .count()
    }

    pub fn wall_ms(&self) -> f64 {
        self.log.iter().map(|l| l.wall_ms).sum()
    }
}

/// Run the state machine over a whole video.
pub fn run_video(
    input: &VideoInput<'_>,
    detector: &mut dyn Detector,
    cfg: &MvpConfig,
    mode: PropagationMode,
) -> Result<VideoRun, PipelineError> {
    if let Some(last) = input.mvs.last_frame() {
        if last >= input.frame_count {
            return Err(PipelineError::Input(format!(
                "motion vectors reference frame {last} but the video has {} frames",
                input.frame_count
            )));
        }
    }
    let mut state = PipelineState::new(
        input.name.clone(),
        input.frame_size,
        input.prompts.clone(),
        cfg.clone(),
        mode,
    )?;
    let mut outputs = Vec::with_capacity(input.frame_count as usize);
    let mut log = Vec::with_capacity(input.frame_count as usize);
    for t in 0..input.frame_count {
        let mvs = input.mvs.frame(t);
        let image_ref = render_image_ref(&input.image_pattern, &input.name, t);
        let (detections, entry) = state.step(
            FrameInput {
                image_ref: &image_ref,
                mvs: &mvs,
            },
            detector,
        )?;
        outputs.push(DetectionRecord {
            video: input.name.clone(),
            frame: t,
            detections,
        });
        log.push(entry);
    }
    Ok(VideoRun {
        video: input.name.clone(),
        outputs,
        log,
    })
}
