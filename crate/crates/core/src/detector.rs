//! Keyframe detection sources.
//!
//! Two sources sit behind [`Detector`]: a precomputed detection file, and a
//! child process speaking one JSON object per line on stdin/stdout:
//!
//! ```text
//! -> {"frame": 12, "image_path": "frames/000012.jpg", "prompts": ["dog", "cat"]}
//! <- {"frame": 12, "detections": [{"box": [0.5, 0.5, 0.2, 0.3], "score": 0.91, "label": "dog"}]}
//! ```
//!
//! A response line starting with `{"error":` aborts that request.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Detection;

pub const DEFAULT_SCORE_FLOOR: f64 = 0.1;
pub const DEFAULT_BRIDGE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no precomputed detections for video {video:?} frame {frame}")]
    MissingFrame { video: String, frame: u32 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("detector reported an error: {0}")]
    Remote(String),
    #[error("detector bridge timed out after {0:?}")]
    Timeout(Duration),
    #[error("detector bridge exited: {0}")]
    BridgeExited(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What the scheduler asks for: one frame, with the active prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub frame: u32,
    #[serde(rename = "image_path")]
    pub image_ref: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResponse {
    pub frame: u32,
    pub detections: Vec<Detection>,
}

/// One line of a detection file (also the pipeline's prediction output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video: String,
    pub frame: u32,
    pub detections: Vec<Detection>,
}

pub trait Detector {
    fn detect(&mut self, req: &DetectionRequest) -> Result<DetectionResponse, DetectorError>;
}

/// Check a response against its request: same frame, finite boxes, scores in
/// `[0, 1]` and every label among the prompts.
pub fn validate_response(
    req: &DetectionRequest,
    resp: &DetectionResponse,
) -> Result<(), DetectorError> {
    if resp.frame != req.frame {
        return Err(DetectorError::Protocol(format!(
            "response for frame {} answers request for frame {}",
            resp.frame, req.frame
        )));
    }
    for d in &resp.detections {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(DetectorError::Protocol(format!(
                "score {} outside [0, 1]",
                d.score
            )));
        }
        if !d.bbox.is_finite() {
            return Err(DetectorError::Protocol("non-finite box".into()));
        }
        if !req.prompts.contains(&d.label) {
            return Err(DetectorError::Protocol(format!(
                "label {:?} not among prompts",
                d.label
            )));
        }
    }
    Ok(())
}

fn apply_floor(mut dets: Vec<Detection>, floor: f64) -> Vec<Detection> {
    dets.retain(|d| d.score >= floor);
    dets
}

pub fn read_detection_records<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>, DetectorError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| DetectorError::Format {
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_detection_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a DetectionRecord>,
) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read-only index over a precomputed detection file.
#[derive(Debug, Clone, Default)]
pub struct DetectionStore {
    frames: HashMap<(String, u32), Vec<Detection>>,
}

impl DetectionStore {
    pub fn from_records(records: impl IntoIterator<Item = DetectionRecord>) -> Self {
        let mut frames: HashMap<(String, u32), Vec<Detection>> = HashMap::new();
        for r in records {
            frames
                .entry((r.video, r.frame))
                .or_default()
                .extend(r.detections);
        }
        Self { frames }
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let file = std::fs::File::open(path)?;
        Ok(Self::from_records(read_detection_records(BufReader::new(
            file,
        ))?))
    }

    pub fn get(&self, video: &str, frame: u32) -> Option<&[Detection]> {
        self.frames
            .get(&(video.to_string(), frame))
            .map(Vec::as_slice)
    }

    pub fn videos(&self) -> BTreeSet<&str> {
        self.frames.keys().map(|(v, _)| v.as_str()).collect()
    }

    /// Every label appearing for `video`, sorted.
    pub fn labels(&self, video: &str) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .frames
            .iter()
            .filter(|((v, _), _)| v == video)
            .flat_map(|(_, ds)| ds.iter().map(|d| d.label.as_str()))
            .collect();
        set.into_iter().map(String::from).collect()
    }

    /// One past the highest frame index stored for `video`.
    pub fn frame_count(&self, video: &str) -> u32 {
        self.frames
            .keys()
            .filter(|(v, _)| v == video)
            .map(|(_, f)| f + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Serves stored detections for one video, filtered to the request prompts.
#[derive(Debug, Clone)]
pub struct PrecomputedDetector {
    store: Arc<DetectionStore>,
    video: String,
    score_floor: f64,
}

impl PrecomputedDetector {
    pub fn new(store: Arc<DetectionStore>, video: impl Into<String>) -> Self {
        Self {
            store,
            video: video.into(),
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }

    pub fn with_score_floor(mut self, floor: f64) -> Self {
        self.score_floor = floor;
        self
    }
}

impl Detector for PrecomputedDetector {
    fn detect(&mut self, req: &DetectionRequest) -> Result<DetectionResponse, DetectorError> {
        let stored =
            self.store
                .get(&self.video, req.frame)
                .ok_or_else(|| DetectorError::MissingFrame {
                    video: self.video.clone(),
                    frame: req.frame,
                })?;
        let detections = stored
            .iter()
            .filter(|d| req.prompts.contains(&d.label))
            .cloned()
            .collect();
        Ok(DetectionResponse {
            frame: req.frame,
            detections: apply_floor(detections, self.score_floor),
        })
    }
}

/// Bridge process settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: f64,
}

fn default_timeout_s() -> f64 {
    DEFAULT_BRIDGE_TIMEOUT.as_secs_f64()
}

impl BridgeCommand {
    /// First element is the program, the rest its arguments.
    pub fn from_argv(argv: &[String]) -> Option<Self> {
        let (program, args) = argv.split_first()?;
        Some(Self {
            program: program.clone(),
            args: args.to_vec(),
            timeout_s: default_timeout_s(),
        })
    }
}

/// A detector living in a child process. One request is in flight at a time.
pub struct BridgeDetector {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
    timeout: Duration,
    score_floor: f64,
}

impl BridgeDetector {
    pub fn spawn(cmd: &BridgeCommand) -> Result<Self, DetectorError> {
        let mut child = Command::new(&cmd.program)
            .args(&cmd.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                DetectorError::BridgeExited(format!("cannot start {}: {e}", cmd.program))
            })?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("detector-bridge-reader".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            })?;
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout: Duration::from_secs_f64(cmd.timeout_s),
            score_floor: DEFAULT_SCORE_FLOOR,
        })
    }

    pub fn with_score_floor(mut self, floor: f64) -> Self {
        self.score_floor = floor;
        self
    }

    fn exit_status(&mut self) -> String {
        match self.child.try_wait() {
            Ok(Some(status)) => status.to_string(),
            _ => "stdout closed".to_string(),
        }
    }

    fn read_line(&mut self) -> Result<String, DetectorError> {
        loop {
            match self.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => return Err(e.into()),
                Err(RecvTimeoutError::Timeout) => return Err(DetectorError::Timeout(self.timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    // give the child a moment to be reaped so the status is accurate
                    thread::sleep(Duration::from_millis(20));
                    return Err(DetectorError::BridgeExited(self.exit_status()));
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct ErrorLine {
    error: serde_json::Value,
}

impl Detector for BridgeDetector {
    fn detect(&mut self, req: &DetectionRequest) -> Result<DetectionResponse, DetectorError> {
        if req.prompts.is_empty() {
            return Err(DetectorError::Protocol("request without prompts".into()));
        }
        let mut line =
            serde_json::to_string(req).map_err(|e| DetectorError::Protocol(e.to_string()))?;
        line.push('\n');
        if let Err(e) = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
        {
            if e.kind() == io::ErrorKind::BrokenPipe {
                return Err(DetectorError::BridgeExited(self.exit_status()));
            }
            return Err(e.into());
        }

        let reply = self.read_line()?;
        if reply.trim_start().starts_with("{\"error\":") {
            let msg = serde_json::from_str::<ErrorLine>(&reply)
                .map(|e| match e.error {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                })
                .unwrap_or_else(|_| reply.clone());
            return Err(DetectorError::Remote(msg));
        }
        let resp: DetectionResponse = serde_json::from_str(&reply)
            .map_err(|e| DetectorError::Protocol(format!("unparseable response: {e}")))?;
        validate_response(req, &resp)?;
        Ok(DetectionResponse {
            frame: resp.frame,
            detections: apply_floor(resp.detections, self.score_floor),
        })
    }
}

impl Drop for BridgeDetector {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
