//! Detection evaluation: IoU, greedy matching, interpolated AP, mAP at the
//! 0.2 / 0.3 / 0.5 / [0.5:0.95] settings, and throughput.
//!
//! AP uses COCO's 101-point interpolation at every threshold.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectionRecord;
use crate::geometry::{to_yolo, FrameSize, PixelBox, YoloBox};
use crate::scheduler::FrameLog;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction for video {video:?} frame {frame} has no ground-truth entry")]
    KeyMismatch { video: String, frame: u32 },
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{path}: {msg}")]
    Annotation { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Thresholds averaged for mAP@[0.5:0.95].
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: YoloBox,
    pub label: String,
}

/// One line of a ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub video: String,
    pub frame: u32,
    pub boxes: Vec<GtBox>,
}

pub fn read_gt_records<R: BufRead>(input: R) -> Result<Vec<GtRecord>, EvalError> {
    read_jsonl(input)
}

pub fn read_prediction_records<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>, EvalError> {
    read_jsonl(input)
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Format {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_gt_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a GtRecord>,
) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Intersection over union of two boxes in the same frame.
pub fn iou(a: &YoloBox, b: &YoloBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A scored prediction in image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: YoloBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtItem {
    pub image: usize,
    pub bbox: YoloBox,
}

/// Prediction indices sorted by descending score; ties keep input order.
pub fn score_order(preds: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// Greedy matching. Predictions are visited by descending score; each takes
/// the highest-IoU still-unmatched ground truth of its image (lowest index on
/// ties) when that IoU reaches `thr`.
///
/// Returns, per prediction (input order), the matched ground-truth index.
pub fn greedy_match(preds: &[ScoredBox], gts: &[GtItem], thr: f64) -> Vec<Option<usize>> {
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; preds.len()];
    for p in score_order(preds) {
        let Some(cands) = by_image.get(&preds[p].image) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &g in cands {
            if taken[g] {
                continue;
            }
            let v = iou(&preds[p].bbox, &gts[g].bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= thr {
                taken[g] = true;
                matched[p] = Some(g);
            }
        }
    }
    matched
}

/// 101-point interpolated AP from true-positive flags in score order.
pub fn interpolated_ap(tp_in_order: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp_in_order.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_in_order.len());
    let mut precision = Vec::with_capacity(tp_in_order.len());
    for (k, &hit) in tp_in_order.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            let idx = recall.partition_point(|&rc| rc < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// AP for one class at one IoU threshold. `None` when there is nothing to
/// score (no ground truth and no predictions).
pub fn average_precision(preds: &[ScoredBox], gts: &[GtItem], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return (!preds.is_empty()).then_some(0.0);
    }
    let matched = greedy_match(preds, gts, thr);
    let flags: Vec<bool> = score_order(preds)
        .into_iter()
        .map(|p| matched[p].is_some())
        .collect();
    Some(interpolated_ap(&flags, gts.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Ignore labels when matching. Diagnostic only.
    pub class_agnostic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub gt_count: usize,
    pub pred_count: usize,
    pub ap_02: Option<f64>,
    pub ap_03: Option<f64>,
    pub ap_05: Option<f64>,
    pub ap_50_95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_02: f64,
    pub map_03: f64,
    pub map_05: f64,
    pub map_50_95: f64,
    /// Mean over ground-truth boxes of the best same-label IoU in its frame.
    pub mean_iou: f64,
    pub per_class: BTreeMap<String, ClassAp>,
    pub frames: usize,
    pub fps: Option<f64>,
    pub detector_calls: Option<usize>,
}

impl MetricsReport {
    /// Fold a run log's wall-clock and detector calls into the report.
    pub fn with_run_log(mut self, log: &[FrameLog]) -> Self {
        let ms: f64 = log.iter().map(|l| l.wall_ms).sum();
        self.fps = (ms > 0.0).then(|| log.len() as f64 / (ms / 1e3));
        self.detector_calls = Some(log.iter().filter(|l| l.detector_called).count());
        self
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>8} {:>8} {:>14} {:>8} {:>6} {:>6}",
            "class", "AP@0.2", "AP@0.3", "AP@0.5", "AP@[.5:.95]", "", "#gt", "#pred"
        );
        for (name, c) in &self.per_class {
            let _ = writeln!(
                s,
                "{:<20} {:>8} {:>8} {:>8} {:>14} {:>8} {:>6} {:>6}",
                name,
                f(c.ap_02),
                f(c.ap_03),
                f(c.ap_05),
                f(c.ap_50_95),
                "",
                c.gt_count,
                c.pred_count
            );
        }
        let _ = writeln!(
            s,
            "{:<20} {:>8.3} {:>8.3} {:>8.3} {:>14.3} {:>8}",
            "mAP", self.map_02, self.map_03, self.map_05, self.map_50_95, ""
        );
        let _ = writeln!(
            s,
            "mean IoU {:.3} over {} frames",
            self.mean_iou, self.frames
        );
        if let Some(fps) = self.fps {
            let _ = writeln!(s, "FPS {fps:.1}");
        }
        if let Some(n) = self.detector_calls {
            let _ = writeln!(s, "detector calls {n}");
        }
        s
    }
}

#[derive(Default)]
struct ClassData {
    preds: Vec<ScoredBox>,
    gts: Vec<GtItem>,
}

/// Score predictions against ground truth.
///
/// Frames present in the ground truth but absent from the predictions count
/// as frames with no predictions; a prediction for an unknown frame is an
/// error. mAP averages over classes with at least one ground-truth box.
pub fn evaluate(
    predictions: &[DetectionRecord],
    ground_truth: &[GtRecord],
    opts: EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let mut images: HashMap<(&str, u32), usize> = HashMap::new();
    for g in ground_truth {
        let n = images.len();
        images.entry((g.video.as_str(), g.frame)).or_insert(n);
    }
    let label = |l: &str| -> String {
        if opts.class_agnostic {
            "*".to_string()
        } else {
            l.to_string()
        }
    };

    let mut classes: BTreeMap<String, ClassData> = BTreeMap::new();
    for g in ground_truth {
        let image = images[&(g.video.as_str(), g.frame)];
        for b in &g.boxes {
            classes
                .entry(label(&b.label))
                .or_default()
                .gts
                .push(GtItem {
                    image,
                    bbox: b.bbox,
                });
        }
    }
    for p in predictions {
        let image =
            *images
                .get(&(p.video.as_str(), p.frame))
                .ok_or_else(|| EvalError::KeyMismatch {
                    video: p.video.clone(),
                    frame: p.frame,
                })?;
        for d in &p.detections {
            classes
                .entry(label(&d.label))
                .or_default()
                .preds
                .push(ScoredBox {
                    image,
                    score: d.score,
                    bbox: d.bbox,
                });
        }
    }

    let thresholds: Vec<f64> = [0.2, 0.3].into_iter().chain(coco_thresholds()).collect();
    let jobs: Vec<(&String, usize)> = classes
        .keys()
        .flat_map(|c| (0..thresholds.len()).map(move |t| (c, t)))
        .collect();
    let aps: HashMap<(&String, usize), Option<f64>> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let data = &classes[c];
            (
                (c, t),
                average_precision(&data.preds, &data.gts, thresholds[t]),
            )
        })
        .collect();

    let mut per_class = BTreeMap::new();
    for (name, data) in &classes {
        let at = |t: usize| aps[&(name, t)];
        let coco: Option<Vec<f64>> = (2..thresholds.len()).map(at).collect();
        per_class.insert(
            name.clone(),
            ClassAp {
                gt_count: data.gts.len(),
                pred_count: data.preds.len(),
                ap_02: at(0),
                ap_03: at(1),
                // index 2 is the 0.50 entry of the COCO range
                ap_05: at(2),
                ap_50_95: coco.map(|v| v.iter().sum::<f64>() / v.len() as f64),
            },
        );
    }

    let scored: Vec<&ClassAp> = per_class.values().filter(|c| c.gt_count > 0).collect();
    let mean = |pick: fn(&ClassAp) -> Option<f64>| -> f64 {
        if scored.is_empty() {
            return 0.0;
        }
        scored.iter().map(|c| pick(c).unwrap_or(0.0)).sum::<f64>() / scored.len() as f64
    };

    Ok(MetricsReport {
        map_02: mean(|c| c.ap_02),
        map_03: mean(|c| c.ap_03),
        map_05: mean(|c| c.ap_05),
        map_50_95: mean(|c| c.ap_50_95),
        mean_iou: mean_iou(predictions, ground_truth, opts),
        per_class,
        frames: images.len(),
        fps: None,
        detector_calls: None,
    })
}

/// Average, over every ground-truth box, of the best IoU reached by a
/// prediction of the same label in the same frame (0 when none).
pub fn mean_iou(
    predictions: &[DetectionRecord],
    ground_truth: &[GtRecord],
    opts: EvalOptions,
) -> f64 {
    let mut by_key: HashMap<(&str, u32), Vec<&DetectionRecord>> = HashMap::new();
    for p in predictions {
        by_key
            .entry((p.video.as_str(), p.frame))
            .or_default()
            .push(p);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for g in ground_truth {
        let preds = by_key.get(&(g.video.as_str(), g.frame));
        for b in &g.boxes {
            let best = preds
                .into_iter()
                .flatten()
                .flat_map(|r| r.detections.iter())
                .filter(|d| opts.class_agnostic || d.label == b.label)
                .map(|d| iou(&d.bbox, &b.bbox))
                .fold(0.0, f64::max);
            total += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// ImageNet VID synsets and their class names.
pub const VID_SYNSETS: [(&str, &str); 30] = [
    ("n02691156", "airplane"),
    ("n02419796", "antelope"),
    ("n02131653", "bear"),
    ("n02834778", "bicycle"),
    ("n01503061", "bird"),
    ("n02924116", "bus"),
    ("n02958343", "car"),
    ("n02402425", "cattle"),
    ("n02084071", "dog"),
    ("n02121808", "domestic_cat"),
    ("n02503517", "elephant"),
    ("n02118333", "fox"),
    ("n02510455", "giant_panda"),
    ("n02342885", "hamster"),
    ("n02374451", "horse"),
    ("n02129165", "lion"),
    ("n01674464", "lizard"),
    ("n02484322", "monkey"),
    ("n03790512", "motorcycle"),
    ("n02324045", "rabbit"),
    ("n02509815", "red_panda"),
    ("n02411705", "sheep"),
    ("n01726692", "snake"),
    ("n02355227", "squirrel"),
    ("n02129604", "tiger"),
    ("n04468005", "train"),
    ("n01662784", "turtle"),
    ("n04530566", "watercraft"),
    ("n02062744", "whale"),
    ("n02391049", "zebra"),
];

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, tag: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(tag))
        .and_then(|c| c.text())
        .map(str::trim)
}

/// Parse one VID per-frame annotation XML into `(frame size, boxes)`.
pub fn parse_vid_annotation(
    xml: &str,
    map_synsets: bool,
) -> Result<(FrameSize, Vec<GtBox>), String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or("missing <size>")?;
    let dim = |tag: &str| -> Result<u32, String> {
        child_text(size, tag)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format!("bad <{tag}>"))
    };
    let frame = FrameSize::new(dim("width")?, dim("height")?).map_err(|e| e.to_string())?;
    let names: HashMap<&str, &str> = VID_SYNSETS.iter().copied().collect();
    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let synset = child_text(obj, "name").ok_or("object without <name>")?;
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or("object without <bndbox>")?;
        let coord = |tag: &str| -> Result<f64, String> {
            child_text(bnd, tag)
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| format!("bad <{tag}>"))
        };
        let px = PixelBox::new(
            coord("xmin")?,
            coord("ymin")?,
            coord("xmax")?,
            coord("ymax")?,
            frame,
        );
        let label = match (map_synsets, names.get(synset)) {
            (true, Some(name)) => name.to_string(),
            _ => synset.to_string(),
        };
        boxes.push(GtBox {
            bbox: to_yolo(&px).map_err(|e| e.to_string())?,
            label,
        });
    }
    Ok((frame, boxes))
}

/// Import a VID annotation tree (`<root>/<video>/<frame>.xml`) as
/// ground-truth records, sorted by video then frame.
pub fn import_vid_annotations(root: &Path, map_synsets: bool) -> Result<Vec<GtRecord>, EvalError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| EvalError::Io(e.into()))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("xml") {
            continue;
        }
        let ann_err = |msg: String| EvalError::Annotation {
            path: path.display().to_string(),
            msg,
        };
        let frame: u32 = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ann_err("file name is not a frame number".into()))?;
        let video = path
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .filter(|v| !v.is_empty())
            .or_else(|| {
                path.parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
            })
            .unwrap_or_default();
        let xml = std::fs::read_to_string(path)?;
        let (_, boxes) = parse_vid_annotation(&xml, map_synsets).map_err(ann_err)?;
        out.push(GtRecord {
            video,
            frame,
            boxes,
        });
    }
    out.sort_by(|a, b| a.video.cmp(&b.video).then(a.frame.cmp(&b.frame)));
    Ok(out)
}

/// Labels that appear in a ground-truth set, sorted.
pub fn gt_labels(ground_truth: &[GtRecord]) -> Vec<String> {
    ground_truth
        .iter()
        .flat_map(|r| r.boxes.iter().map(|b| b.label.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
