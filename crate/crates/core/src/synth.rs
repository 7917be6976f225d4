//! Synthetic scenes with exact ground truth.
//!
//! No pixels are rendered. For each frame `t >= 1` the generator emits one
//! past-reference vector per codec block overlapping an object at `t - 1`,
//! with `src` at the block center and `dst` displaced by the object's motion
//! model plus optional noise. The background is static and carries no
//! vectors. Alongside the dump come the exact per-frame boxes and a
//! detection file holding those boxes at score 1.0 on every frame, so any
//! keyframe schedule can sample it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectionRecord;
use crate::evalkit::{GtBox, GtRecord};
use crate::geometry::{to_yolo, Detection, FrameSize, PixelBox};
use crate::mvstream::{Direction, MotionVector, MvFrame, MvStream};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("object {object} ({label}) leaves the frame at frame {frame}")]
    OutOfFrame {
        object: usize,
        label: String,
        frame: u32,
    },
}

fn default_block() -> u32 {
    16
}

/// Per-frame object motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionModel {
    Static,
    /// Constant velocity, pixels per frame.
    Translate {
        u: f64,
        v: f64,
    },
    /// Scale by `s` per frame about the (fixed) box center.
    Zoom {
        s: f64,
    },
    /// Top half of the box moves with `far`, bottom half with `near`; the
    /// ground-truth box is the union of the two halves.
    Parallax {
        near: [f64; 2],
        far: [f64; 2],
    },
}

/// Noise added independently to both components of every emitted vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Jitter {
    Gaussian {
        sigma: f64,
    },
    /// Uniform on `[-amplitude, amplitude]`.
    Uniform {
        amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub label: String,
    /// Initial pixel box `[x_min, y_min, x_max, y_max]`.
    #[serde(rename = "box")]
    pub initial: [f64; 4],
    pub motion: MotionModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<Jitter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    #[serde(default = "default_block")]
    pub block: u32,
    #[serde(default)]
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
}

/// Generated artifacts for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub name: String,
    pub frame_size: FrameSize,
    pub frame_count: u32,
    pub mv_frames: Vec<MvFrame>,
    pub ground_truth: Vec<GtRecord>,
    pub detections: Vec<DetectionRecord>,
}

impl SynthScene {
    pub fn mv_stream(&self) -> MvStream {
        MvStream::from_frames(self.mv_frames.iter().cloned())
    }

    /// Distinct labels in the scene, sorted.
    pub fn labels(&self) -> Vec<String> {
        let mut ls: Vec<String> = self
            .ground_truth
            .iter()
            .flat_map(|r| r.boxes.iter().map(|b| b.label.clone()))
            .collect();
        ls.sort();
        ls.dedup();
        ls
    }
}

type Corners = [f64; 4];

fn offset(b: Corners, du: f64, dv: f64) -> Corners {
    [b[0] + du, b[1] + dv, b[2] + du, b[3] + dv]
}

fn halves(b: Corners) -> (Corners, Corners) {
    let mid = 0.5 * (b[1] + b[3]);
    ([b[0], b[1], b[2], mid], [b[0], mid, b[2], b[3]])
}

fn union(a: Corners, b: Corners) -> Corners {
    [
        a[0].min(b[0]),
        a[1].min(b[1]),
        a[2].max(b[2]),
        a[3].max(b[3]),
    ]
}

impl ObjectSpec {
    /// Exact box at frame `t`.
    pub fn box_at(&self, t: u32) -> Corners {
        let b = self.initial;
        let tf = t as f64;
        match self.motion {
            MotionModel::Static => b,
            MotionModel::Translate { u, v } => offset(b, u * tf, v * tf),
            MotionModel::Zoom { s } => {
                let (cx, cy) = (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]));
                let k = s.powi(t as i32);
                let (hw, hh) = (0.5 * (b[2] - b[0]) * k, 0.5 * (b[3] - b[1]) * k);
                [cx - hw, cy - hh, cx + hw, cy + hh]
            }
            MotionModel::Parallax { near, far } => {
                let (top, bottom) = self.layers_at(t, near, far, b);
                union(top, bottom)
            }
        }
    }

    fn layers_at(&self, t: u32, near: [f64; 2], far: [f64; 2], b: Corners) -> (Corners, Corners) {
        let tf = t as f64;
        let (top, bottom) = halves(b);
        (
            offset(top, far[0] * tf, far[1] * tf),
            offset(bottom, near[0] * tf, near[1] * tf),
        )
    }

    /// Noiseless displacement of content at `(x, y)` between `t - 1` and `t`.
    fn displacement(&self, t: u32, x: f64, y: f64) -> (f64, f64) {
        match self.motion {
            MotionModel::Static => (0.0, 0.0),
            MotionModel::Translate { u, v } => (u, v),
            MotionModel::Zoom { s } => {
                let b = self.box_at(t - 1);
                let (cx, cy) = (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]));
                ((s - 1.0) * (x - cx), (s - 1.0) * (y - cy))
            }
            MotionModel::Parallax { near, far } => {
                let (_, bottom) = self.layers_at(t - 1, near, far, self.initial);
                if y >= bottom[1] && x >= bottom[0] && x < bottom[2] {
                    (near[0], near[1])
                } else {
                    (far[0], far[1])
                }
            }
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive");
        }
        if self.frames == 0 {
            return bad("scene needs at least one frame");
        }
        if self.block == 0 {
            return bad("block size must be positive");
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.label.is_empty() {
                return bad(&format!("object {i} has an empty label"));
            }
            let b = o.initial;
            if !b.iter().all(|c| c.is_finite()) || b[2] <= b[0] || b[3] <= b[1] {
                return bad(&format!("object {i} has an empty or non-finite box"));
            }
            match o.motion {
                MotionModel::Zoom { s } if !(s.is_finite() && s > 0.0) => {
                    return bad(&format!("object {i}: zoom factor must be positive"))
                }
                _ => {}
            }
            match o.jitter {
                Some(Jitter::Gaussian { sigma }) if !(sigma.is_finite() && sigma >= 0.0) => {
                    return bad(&format!("object {i}: sigma must be >= 0"))
                }
                Some(Jitter::Uniform { amplitude })
                    if !(amplitude.is_finite() && amplitude >= 0.0) =>
                {
                    return bad(&format!("object {i}: amplitude must be >= 0"))
                }
                _ => {}
            }
            let (w, h) = (self.width as f64, self.height as f64);
            for t in 0..self.frames {
                let b = o.box_at(t);
                let inside = b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w && b[3] <= h;
                if !inside || b[2] - b[0] < 1.0 || b[3] - b[1] < 1.0 {
                    return Err(SynthError::OutOfFrame {
                        object: i,
                        label: o.label.clone(),
                        frame: t,
                    });
                }
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, jitter: Option<Jitter>) -> (f64, f64) {
    match jitter {
        None => (0.0, 0.0),
        Some(Jitter::Gaussian { sigma }) if sigma > 0.0 => {
            let n = Normal::new(0.0, sigma).expect("sigma validated");
            (n.sample(rng), n.sample(rng))
        }
        Some(Jitter::Uniform { amplitude }) if amplitude > 0.0 => (
            rng.gen_range(-amplitude..=amplitude),
            rng.gen_range(-amplitude..=amplitude),
        ),
        Some(_) => (0.0, 0.0),
    }
}

/// Generate the vector dump, ground truth and detection file for a scene.
pub fn generate(spec: &SceneSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let frame_size =
        FrameSize::new(spec.width, spec.height).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let block = spec.block as f64;

    let mut mv_frames = Vec::new();
    for t in 1..spec.frames {
        let mut vectors = Vec::new();
        for o in &spec.objects {
            let b = o.box_at(t - 1);
            let (c0, c1) = ((b[0] / block).floor() as i64, (b[2] / block).ceil() as i64);
            let (r0, r1) = ((b[1] / block).floor() as i64, (b[3] / block).ceil() as i64);
            for row in r0..r1 {
                for col in c0..c1 {
                    let (bx, by) = (col as f64 * block, row as f64 * block);
                    let overlaps = bx < b[2] && bx + block > b[0] && by < b[3] && by + block > b[1];
                    if !overlaps {
                        continue;
                    }
                    let (x, y) = (bx + 0.5 * block, by + 0.5 * block);
                    let (u, v) = o.displacement(t, x, y);
                    let (nu, nv) = draw(&mut rng, o.jitter);
                    vectors.push(MotionVector {
                        frame: t,
                        direction: Direction::Past,
                        block_w: spec.block,
                        block_h: spec.block,
                        src_x: x,
                        src_y: y,
                        dst_x: x + u + nu,
                        dst_y: y + v + nv,
                        flags: 0,
                    });
                }
            }
        }
        mv_frames.push(MvFrame { frame: t, vectors });
    }

    let mut ground_truth = Vec::with_capacity(spec.frames as usize);
    let mut detections = Vec::with_capacity(spec.frames as usize);
    for t in 0..spec.frames {
        let boxes: Vec<GtBox> = spec
            .objects
            .iter()
            .map(|o| {
                let b = o.box_at(t);
                let px = PixelBox::new(b[0], b[1], b[2], b[3], frame_size);
                GtBox {
                    bbox: to_yolo(&px).expect("validated finite"),
                    label: o.label.clone(),
                }
            })
            .collect();
        detections.push(DetectionRecord {
            video: spec.name.clone(),
            frame: t,
            detections: boxes
                .iter()
                .map(|g| Detection::new(g.bbox, 1.0, g.label.clone()))
                .collect(),
        });
        ground_truth.push(GtRecord {
            video: spec.name.clone(),
            frame: t,
            boxes,
        });
    }

    Ok(SynthScene {
        name: spec.name.clone(),
        frame_size,
        frame_count: spec.frames,
        mv_frames,
        ground_truth,
        detections,
    })
}
