//! Motion-vector ingestion.
//!
//! The dump format is the CSV produced by the usual decoder side-data export
//! tool:
//!
//! ```text
//! framenum,source,blockw,blockh,srcx,srcy,dstx,dsty,flags
//! 2,-1,16,16,8,8,11,12,0x0
//! ```
//!
//! `source` is `-1` for a past reference and `1` for a future reference,
//! `flags` is hex and carried through untouched. Fields may be space padded.
//! Newer exporters append `motion_x,motion_y,motion_scale`; those three
//! trailing columns are accepted and ignored.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelBox;

pub const DUMP_HEADER: &str = "framenum,source,blockw,blockh,srcx,srcy,dstx,dsty,flags";

#[derive(Debug, Error)]
pub enum MvError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: frame {frame} follows frame {prev}; records must be grouped by nondecreasing frame")]
    OutOfOrder { line: usize, frame: u32, prev: u32 },
    #[error("motion vector extraction failed: {0}")]
    Extraction(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Which reference a block predicts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Past,
    Future,
}

impl Direction {
    fn code(self) -> i32 {
        match self {
            Direction::Past => -1,
            Direction::Future => 1,
        }
    }
}

/// One decoded block motion record.
///
/// `src` is the reference-block center, `dst` the current-block center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionVector {
    pub frame: u32,
    pub direction: Direction,
    pub block_w: u32,
    pub block_h: u32,
    pub src_x: f64,
    pub src_y: f64,
    pub dst_x: f64,
    pub dst_y: f64,
    pub flags: u64,
}

impl MotionVector {
    /// Content motion from the reference frame to the current one, `dst - src`.
    #[inline]
    pub fn displacement(&self) -> (f64, f64) {
        (self.dst_x - self.src_x, self.dst_y - self.src_y)
    }

    /// Reflect a future-reference vector into a past-reference one, assuming
    /// constant motion across the two frame gaps.
    pub fn inverted(&self) -> MotionVector {
        MotionVector {
            direction: Direction::Past,
            src_x: 2.0 * self.dst_x - self.src_x,
            src_y: 2.0 * self.dst_y - self.src_y,
            ..*self
        }
    }
}

/// All retained vectors of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MvFrame {
    pub frame: u32,
    pub vectors: Vec<MotionVector>,
}

impl MvFrame {
    pub fn empty(frame: u32) -> Self {
        Self {
            frame,
            vectors: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// What to do with future-reference (B-frame) vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuturePolicy {
    /// Parse and discard.
    #[default]
    Drop,
    /// Keep as-is.
    Keep,
    /// Reflect into past-reference vectors.
    Invert,
}

impl FuturePolicy {
    fn apply(self, mv: MotionVector) -> Option<MotionVector> {
        match (mv.direction, self) {
            (Direction::Past, _) => Some(mv),
            (Direction::Future, FuturePolicy::Drop) => None,
            (Direction::Future, FuturePolicy::Keep) => Some(mv),
            (Direction::Future, FuturePolicy::Invert) => Some(mv.inverted()),
        }
    }
}

/// A parsed dump, indexed by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MvStream {
    frames: BTreeMap<u32, MvFrame>,
}

impl MvStream {
    pub fn from_frames(frames: impl IntoIterator<Item = MvFrame>) -> Self {
        let mut map: BTreeMap<u32, MvFrame> = BTreeMap::new();
        for f in frames {
            map.entry(f.frame)
                .or_insert_with(|| MvFrame::empty(f.frame))
                .vectors
                .extend(f.vectors);
        }
        Self { frames: map }
    }

    /// Vectors for frame `t`; frames absent from the dump come back empty.
    pub fn frame(&self, t: u32) -> Cow<'_, MvFrame> {
        match self.frames.get(&t) {
            Some(f) => Cow::Borrowed(f),
            None => Cow::Owned(MvFrame::empty(t)),
        }
    }

    /// Frames that carry at least one record, in order.
    pub fn frames(&self) -> impl Iterator<Item = &MvFrame> {
        self.frames.values()
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.frames.keys().next_back().copied()
    }

    pub fn vector_count(&self) -> usize {
        self.frames.values().map(|f| f.vectors.len()).sum()
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> MvError {
    MvError::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_record(line_no: usize, line: &str) -> Result<MotionVector, MvError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 9 && fields.len() != 12 {
        return Err(parse_err(
            line_no,
            format!("expected 9 fields, found {}", fields.len()),
        ));
    }
    let int = |i: usize, name: &str| -> Result<i64, MvError> {
        fields[i]
            .parse::<i64>()
            .map_err(|_| parse_err(line_no, format!("bad {name} {:?}", fields[i])))
    };
    let real = |i: usize, name: &str| -> Result<f64, MvError> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(line_no, format!("bad {name} {:?}", fields[i])))
    };

    let frame =
        u32::try_from(int(0, "framenum")?).map_err(|_| parse_err(line_no, "negative framenum"))?;
    let direction = match int(1, "source")? {
        -1 => Direction::Past,
        1 => Direction::Future,
        other => {
            return Err(parse_err(
                line_no,
                format!("source must be -1 or 1, got {other}"),
            ))
        }
    };
    let block = |i: usize, name: &str| -> Result<u32, MvError> {
        u32::try_from(int(i, name)?)
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| parse_err(line_no, format!("{name} must be positive")))
    };
    let block_w = block(2, "blockw")?;
    let block_h = block(3, "blockh")?;
    let flags_txt = fields[8];
    let flags = flags_txt
        .strip_prefix("0x")
        .or_else(|| flags_txt.strip_prefix("0X"))
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| parse_err(line_no, format!("bad flags {flags_txt:?}")))?;

    Ok(MotionVector {
        frame,
        direction,
        block_w,
        block_h,
        src_x: real(4, "srcx")?,
        src_y: real(5, "srcy")?,
        dst_x: real(6, "dstx")?,
        dst_y: real(7, "dsty")?,
        flags,
    })
}

/// Parse a dump, keeping only past-reference vectors.
pub fn parse_mv_dump<R: BufRead>(input: R) -> Result<Vec<MvFrame>, MvError> {
    parse_mv_dump_with(input, FuturePolicy::Drop)
}

/// Parse a dump. Frames are returned in order; frames with no record in the
/// dump are not materialized (see [`MvStream::frame`]).
pub fn parse_mv_dump_with<R: BufRead>(
    input: R,
    future: FuturePolicy,
) -> Result<Vec<MvFrame>, MvError> {
    let mut out: Vec<MvFrame> = Vec::new();
    let mut prev: Option<u32> = None;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with("framenum") {
            if line_no == 1 {
                continue;
            }
            return Err(parse_err(line_no, "header line in the middle of the dump"));
        }
        let mv = parse_record(line_no, trimmed)?;
        if let Some(p) = prev {
            if mv.frame < p {
                return Err(MvError::OutOfOrder {
                    line: line_no,
                    frame: mv.frame,
                    prev: p,
                });
            }
        }
        if prev != Some(mv.frame) {
            out.push(MvFrame::empty(mv.frame));
            prev = Some(mv.frame);
        }
        if let Some(kept) = future.apply(mv) {
            out.last_mut()
                .expect("frame pushed above")
                .vectors
                .push(kept);
        }
    }
    Ok(out)
}

pub fn read_mv_dump(path: &Path, future: FuturePolicy) -> Result<MvStream, MvError> {
    let file = std::fs::File::open(path)?;
    let frames = parse_mv_dump_with(io::BufReader::new(file), future)?;
    Ok(MvStream::from_frames(frames))
}

/// Write frames in the dump format, header first.
pub fn write_mv_dump<'a, W: Write>(
    mut out: W,
    frames: impl IntoIterator<Item = &'a MvFrame>,
) -> io::Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    for f in frames {
        for mv in &f.vectors {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},0x{:x}",
                mv.frame,
                mv.direction.code(),
                mv.block_w,
                mv.block_h,
                mv.src_x,
                mv.src_y,
                mv.dst_x,
                mv.dst_y,
                mv.flags
            )?;
        }
    }
    Ok(())
}

/// Vectors whose reference-block center lies in the half-open region.
pub fn vectors_in_box<'a>(frame: &'a MvFrame, region: &PixelBox) -> Vec<&'a MotionVector> {
    frame
        .vectors
        .iter()
        .filter(|mv| region.contains(mv.src_x, mv.src_y))
        .collect()
}

/// External extractor invocation: `program args... <video>` must print a
/// dump on stdout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extractor {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Subtracted from every `framenum`; the stock export tool counts from 1.
    #[serde(default = "default_frame_base")]
    pub frame_base: u32,
}

fn default_frame_base() -> u32 {
    1
}

impl Default for Extractor {
    fn default() -> Self {
        Self {
            program: "extract_mvs".to_string(),
            args: Vec::new(),
            frame_base: 1,
        }
    }
}

/// Run the extractor over a video and parse its output, keeping every
/// record (future-reference ones included) so the result can be written
/// back out losslessly.
pub fn extract_mvs(video: &Path, extractor: &Extractor) -> Result<Vec<MvFrame>, MvError> {
    if !video.exists() {
        return Err(MvError::Extraction(format!(
            "video {} does not exist",
            video.display()
        )));
    }
    let output = Command::new(&extractor.program)
        .args(&extractor.args)
        .arg(video)
        .output()
        .map_err(|e| MvError::Extraction(format!("cannot run {}: {e}", extractor.program)))?;
    if !output.status.success() {
        return Err(MvError::Extraction(format!(
            "{} exited with {}: {}",
            extractor.program,
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let mut frames = parse_mv_dump_with(io::Cursor::new(output.stdout), FuturePolicy::Keep)?;
    for f in &mut frames {
        let rebased = f.frame.checked_sub(extractor.frame_base).ok_or_else(|| {
            MvError::Extraction(format!(
                "frame {} precedes frame base {}",
                f.frame, extractor.frame_base
            ))
        })?;
        f.frame = rebased;
        for mv in &mut f.vectors {
            mv.frame = rebased;
        }
    }
    Ok(frames)
}
