//! Box representations and the pixel/normalized coordinate mappings.
//!
//! Boxes travel through the pipeline in normalized center form
//! ([`YoloBox`]); every update is applied in pixel space and re-normalized.
//! Pixel coordinates are real-valued so fractional motion never rounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate: {0:?}")]
    NonFinite([f64; 4]),
    #[error("invalid frame size {width}x{height}")]
    InvalidFrame { width: u32, height: u32 },
}

/// Frame dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidFrame { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.width as f64
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.height as f64
    }

    /// The whole frame as a pixel box.
    pub fn full_box(&self) -> PixelBox {
        PixelBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.w(),
            y_max: self.h(),
            frame: *self,
        }
    }
}

/// Corner-form box in pixels, tied to the frame it lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub frame: FrameSize,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, frame: FrameSize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            frame,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Half-open containment test `[x_min, x_max) x [y_min, y_max)`.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    fn is_finite(&self) -> bool {
        self.coords().iter().all(|c| c.is_finite())
    }
}

/// Normalized center-form box: `(x_c, y_c, w, h)` relative to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct YoloBox {
    pub xc: f64,
    pub yc: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for YoloBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            xc: v[0],
            yc: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<YoloBox> for [f64; 4] {
    fn from(b: YoloBox) -> Self {
        [b.xc, b.yc, b.w, b.h]
    }
}

impl YoloBox {
    pub fn new(xc: f64, yc: f64, w: f64, h: f64) -> Self {
        Self { xc, yc, w, h }
    }

    pub fn is_finite(&self) -> bool {
        self.xc.is_finite() && self.yc.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Normalized corners `(x_min, y_min, x_max, y_max)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.xc - self.w / 2.0,
            self.yc - self.h / 2.0,
            self.xc + self.w / 2.0,
            self.yc + self.h / 2.0,
        ]
    }
}

/// One detection: box, confidence and class label, plus the track id the
/// scheduler assigns when it adopts the detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: YoloBox,
    pub score: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
}

impl Detection {
    pub fn new(bbox: YoloBox, score: f64, label: impl Into<String>) -> Self {
        Self {
            bbox,
            score,
            label: label.into(),
            id: None,
        }
    }
}

/// Pixel corners to normalized center form.
pub fn to_yolo(b: &PixelBox) -> Result<YoloBox, GeometryError> {
    if !b.is_finite() {
        return Err(GeometryError::NonFinite(b.coords()));
    }
    let (w, h) = (b.frame.w(), b.frame.h());
    Ok(YoloBox {
        xc: (b.x_min + b.x_max) / (2.0 * w),
        yc: (b.y_min + b.y_max) / (2.0 * h),
        w: (b.x_max - b.x_min) / w,
        h: (b.y_max - b.y_min) / h,
    })
}

/// Normalized center form back to pixel corners.
pub fn to_pixel(b: &YoloBox, frame: FrameSize) -> Result<PixelBox, GeometryError> {
    if !b.is_finite() {
        return Err(GeometryError::NonFinite([b.xc, b.yc, b.w, b.h]));
    }
    let (w, h) = (frame.w(), frame.h());
    Ok(PixelBox {
        x_min: w * (b.xc - b.w / 2.0),
        y_min: h * (b.yc - b.h / 2.0),
        x_max: w * (b.xc + b.w / 2.0),
        y_max: h * (b.yc + b.h / 2.0),
        frame,
    })
}

/// Clamp the pixel form to the frame, then re-normalize.
///
/// Returns `None` (dropped) for non-finite boxes, boxes whose clipped
/// extent is empty or inverted, and boxes whose clipped area is below
/// `min_area` square pixels.
pub fn clip_and_validate(b: &YoloBox, frame: FrameSize, min_area: f64) -> Option<YoloBox> {
    let p = to_pixel(b, frame).ok()?;
    let (w, h) = (frame.w(), frame.h());
    let clipped = PixelBox {
        x_min: p.x_min.clamp(0.0, w),
        y_min: p.y_min.clamp(0.0, h),
        x_max: p.x_max.clamp(0.0, w),
        y_max: p.y_max.clamp(0.0, h),
        frame,
    };
    let (cw, ch) = (clipped.width(), clipped.height());
    if !(cw > 0.0 && ch > 0.0) || cw * ch < min_area {
        return None;
    }
    to_yolo(&clipped).ok()
}

/// Box area in square pixels, `W * H * w * h`.
pub fn area_px(b: &YoloBox, frame: FrameSize) -> f64 {
    frame.w() * frame.h() * b.w * b.h
}
