//! Motion-vector box update for a single box.
//!
//! The box's pixel support is cut into a uniform 3x3 grid. Each retained
//! vector lands in the cell holding its reference-block center and the
//! per-cell means feed two tests, tried in order:
//!
//! 1. translation: the cell means agree (`sigma_tr <= tau_tr`), so the box
//!    center moves by the mean displacement;
//! 2. uniform scale: the ratios `|g + d| / (|g| + eps)` of shifted to
//!    original cell-center offsets agree (`sigma_r <= tau_sc`), so the box is
//!    scaled by their mean and the center moves by the mean displacement.
//!
//! When neither test accepts, or no cell holds a vector, propagation fails.

use serde::{Deserialize, Serialize};

use crate::geometry::{to_pixel, FrameSize, PixelBox, YoloBox};
use crate::mvstream::{vectors_in_box, MvFrame};

/// Tuning knobs for propagation, fallback and single-class prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MvpConfig {
    /// Translation test threshold on `sigma_tr`, pixels.
    pub tau_tr: f64,
    /// Scale test threshold on `sigma_r`.
    pub tau_sc: f64,
    /// Denominator guard in the scale ratio, pixels.
    pub epsilon: f64,
    /// Cells whose center lies closer to the box center than this fraction
    /// of the cell half-diagonal carry no scale information and are skipped
    /// in the scale statistics.
    pub radius_floor: f64,
    /// Detector runs on every frame with `t % keyframe_interval == 0`.
    pub keyframe_interval: u32,
    pub growth_ratio: f64,
    /// Frames after the last anchor during which growth can fire.
    pub growth_window: u32,
    /// Score needed for a detection to count toward single-class mode.
    pub tau_cls: f64,
    /// Consecutive empty fallbacks before single-class mode is left.
    pub miss_limit: u32,
    /// Boxes whose clipped pixel area falls below this are dropped.
    pub min_area: f64,
    pub grid_enabled: bool,
    pub growth_check_enabled: bool,
    pub single_class_enabled: bool,
}

impl Default for MvpConfig {
    fn default() -> Self {
        Self {
            tau_tr: 4.0,
            tau_sc: 0.1,
            epsilon: 1e-3,
            radius_floor: 0.1,
            keyframe_interval: 10,
            growth_ratio: 2.0,
            growth_window: 10,
            tau_cls: 0.5,
            miss_limit: 3,
            min_area: 1.0,
            grid_enabled: true,
            growth_check_enabled: true,
            single_class_enabled: true,
        }
    }
}

impl MvpConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let checks = [
            (pos(self.tau_tr), "tau_tr must be > 0"),
            (pos(self.tau_sc), "tau_sc must be > 0"),
            (pos(self.epsilon), "epsilon must be > 0"),
            (pos(self.radius_floor), "radius_floor must be > 0"),
            (
                self.keyframe_interval >= 1,
                "keyframe_interval must be >= 1",
            ),
            (
                self.growth_ratio.is_finite() && self.growth_ratio > 1.0,
                "growth_ratio must be > 1",
            ),
            (self.growth_window >= 1, "growth_window must be >= 1"),
            (
                self.tau_cls > 0.0 && self.tau_cls < 1.0,
                "tau_cls must lie in (0, 1)",
            ),
            (self.miss_limit >= 1, "miss_limit must be >= 1"),
            (pos(self.min_area), "min_area must be > 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err((*msg).to_string()),
            None => Ok(()),
        }
    }
}

/// Mean displacement of one cell, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disp {
    pub u: f64,
    pub v: f64,
}

impl Disp {
    fn norm(self) -> f64 {
        self.u.hypot(self.v)
    }
}

/// Aggregation result for one box.
///
/// Indexed `[row][col]`, row 0 at the top of the box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStats {
    pub occupancy: [[usize; 3]; 3],
    pub cell_means: [[Option<Disp>; 3]; 3],
    /// Cell-center offsets from the box center, pixels.
    pub cell_offsets: [[Disp; 3]; 3],
    /// Mean of the non-empty cell means.
    pub mean_disp: Disp,
    /// Root mean squared deviation of the cell means from `mean_disp`.
    pub sigma_tr: f64,
    /// Scale ratio per cell, set for non-empty cells with enough lever arm.
    pub scale_ratios: [[Option<f64>; 3]; 3],
    /// `(mu_r, sigma_r)` over cells with a ratio; `None` without any.
    pub scale: Option<(f64, f64)>,
}

impl GridStats {
    pub fn occupied_cells(&self) -> usize {
        self.occupancy.iter().flatten().filter(|&&n| n > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// No vector fell inside the box.
    NoVectors,
    /// Both the translation and the scale test rejected the field.
    Incoherent,
    /// The previous box had no usable pixel support.
    InvalidBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropagationOutcome {
    Translated(YoloBox),
    Scaled { bbox: YoloBox, mu_r: f64 },
    Failed(FailureReason),
}

impl PropagationOutcome {
    pub fn bbox(&self) -> Option<YoloBox> {
        match self {
            PropagationOutcome::Translated(b) => Some(*b),
            PropagationOutcome::Scaled { bbox, .. } => Some(*bbox),
            PropagationOutcome::Failed(_) => None,
        }
    }
}

fn support(prev: &YoloBox, frame: FrameSize) -> Option<PixelBox> {
    let p = to_pixel(prev, frame).ok()?;
    (p.width() > 0.0 && p.height() > 0.0).then_some(p)
}

fn cell_index(offset: f64, extent: f64) -> usize {
    ((offset * 3.0 / extent).floor().max(0.0) as usize).min(2)
}

/// Sum in a canonical order so the result never depends on input order.
fn mean_of(mut ds: Vec<(f64, f64)>) -> Disp {
    ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = ds.len() as f64;
    let (su, sv) = ds
        .iter()
        .fold((0.0, 0.0), |(su, sv), (u, v)| (su + u, sv + v));
    Disp {
        u: su / n,
        v: sv / n,
    }
}

/// Build the 3x3 statistics for `prev` from the frame's vectors.
///
/// Returns `None` when no cell holds a vector.
pub fn aggregate_grid(
    prev: &YoloBox,
    frame: &MvFrame,
    size: FrameSize,
    cfg: &MvpConfig,
) -> Option<GridStats> {
    let region = support(prev, size)?;
    let (bw, bh) = (region.width(), region.height());
    let (cw, ch) = (bw / 3.0, bh / 3.0);

    let mut buckets: [[Vec<(f64, f64)>; 3]; 3] = Default::default();
    for mv in vectors_in_box(frame, &region) {
        let col = cell_index(mv.src_x - region.x_min, bw);
        let row = cell_index(mv.src_y - region.y_min, bh);
        buckets[row][col].push(mv.displacement());
    }

    let mut occupancy = [[0usize; 3]; 3];
    let mut cell_means = [[None; 3]; 3];
    let mut cell_offsets = [[Disp::default(); 3]; 3];
    for (row, cells) in buckets.into_iter().enumerate() {
        for (col, ds) in cells.into_iter().enumerate() {
            cell_offsets[row][col] = Disp {
                u: (col as f64 - 1.0) * cw,
                v: (row as f64 - 1.0) * ch,
            };
            occupancy[row][col] = ds.len();
            if !ds.is_empty() {
                cell_means[row][col] = Some(mean_of(ds));
            }
        }
    }

    let means: Vec<Disp> = cell_means.iter().flatten().flatten().copied().collect();
    if means.is_empty() {
        return None;
    }
    let n = means.len() as f64;
    let mean_disp = Disp {
        u: means.iter().map(|d| d.u).sum::<f64>() / n,
        v: means.iter().map(|d| d.v).sum::<f64>() / n,
    };
    let var_tr = means
        .iter()
        .map(|d| (d.u - mean_disp.u).powi(2) + (d.v - mean_disp.v).powi(2))
        .sum::<f64>()
        / n;

    let floor = cfg.radius_floor * 0.5 * cw.hypot(ch);
    let mut scale_ratios = [[None; 3]; 3];
    for row in 0..3 {
        for col in 0..3 {
            let (Some(d), g) = (cell_means[row][col], cell_offsets[row][col]) else {
                continue;
            };
            let radius = g.norm();
            if radius < floor {
                continue;
            }
            let shifted = Disp {
                u: g.u + d.u,
                v: g.v + d.v,
            };
            scale_ratios[row][col] = Some(shifted.norm() / (radius + cfg.epsilon));
        }
    }
    let ratios: Vec<f64> = scale_ratios.iter().flatten().flatten().copied().collect();
    let scale = (!ratios.is_empty()).then(|| {
        let m = ratios.len() as f64;
        let mu = ratios.iter().sum::<f64>() / m;
        let var = ratios.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / m;
        (mu, var.sqrt())
    });

    Some(GridStats {
        occupancy,
        cell_means,
        cell_offsets,
        mean_disp,
        sigma_tr: var_tr.sqrt(),
        scale_ratios,
        scale,
    })
}

fn shift(prev: &YoloBox, d: Disp, size: FrameSize) -> (f64, f64) {
    (prev.xc + d.u / size.w(), prev.yc + d.v / size.h())
}

/// Pure translation when the cell means agree.
pub fn try_translate(
    prev: &YoloBox,
    stats: &GridStats,
    size: FrameSize,
    cfg: &MvpConfig,
) -> Option<PropagationOutcome> {
    if stats.sigma_tr > cfg.tau_tr {
        return None;
    }
    let (xc, yc) = shift(prev, stats.mean_disp, size);
    Some(PropagationOutcome::Translated(YoloBox::new(
        xc, yc, prev.w, prev.h,
    )))
}

/// Uniform scale about the box center plus mean translation. Only meaningful
/// after [`try_translate`] rejected.
pub fn try_scale(
    prev: &YoloBox,
    stats: &GridStats,
    size: FrameSize,
    cfg: &MvpConfig,
) -> Option<PropagationOutcome> {
    let (mu_r, sigma_r) = stats.scale?;
    if sigma_r > cfg.tau_sc {
        return None;
    }
    let (xc, yc) = shift(prev, stats.mean_disp, size);
    Some(PropagationOutcome::Scaled {
        bbox: YoloBox::new(xc, yc, mu_r * prev.w, mu_r * prev.h),
        mu_r,
    })
}

/// Whole-box mean displacement, translation only. Used when the grid is
/// switched off.
fn propagate_single_cell(prev: &YoloBox, frame: &MvFrame, size: FrameSize) -> PropagationOutcome {
    let Some(region) = support(prev, size) else {
        return PropagationOutcome::Failed(FailureReason::InvalidBox);
    };
    let ds: Vec<(f64, f64)> = vectors_in_box(frame, &region)
        .into_iter()
        .map(|mv| mv.displacement())
        .collect();
    if ds.is_empty() {
        return PropagationOutcome::Failed(FailureReason::NoVectors);
    }
    let (xc, yc) = shift(prev, mean_of(ds), size);
    PropagationOutcome::Translated(YoloBox::new(xc, yc, prev.w, prev.h))
}

/// Move one box from the previous frame to the current one.
pub fn propagate_box(
    prev: &YoloBox,
    frame: &MvFrame,
    size: FrameSize,
    cfg: &MvpConfig,
) -> PropagationOutcome {
    if !cfg.grid_enabled {
        return propagate_single_cell(prev, frame, size);
    }
    if support(prev, size).is_none() {
        return PropagationOutcome::Failed(FailureReason::InvalidBox);
    }
    let Some(stats) = aggregate_grid(prev, frame, size, cfg) else {
        return PropagationOutcome::Failed(FailureReason::NoVectors);
    };
    try_translate(prev, &stats, size, cfg)
        .or_else(|| try_scale(prev, &stats, size, cfg))
        .unwrap_or(PropagationOutcome::Failed(FailureReason::Incoherent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvstream::{Direction, MotionVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: u32 = 300;
    const H: u32 = 300;

    fn size() -> FrameSize {
        FrameSize::new(W, H).unwrap()
    }

    /// 90x90 px box with its top-left corner at (100, 100).
    fn box90() -> YoloBox {
        YoloBox::new(145.0 / 300.0, 145.0 / 300.0, 0.3, 0.3)
    }

    fn mv_at(x: f64, y: f64, u: f64, v: f64) -> MotionVector {
        MotionVector {
            frame: 1,
            direction: Direction::Past,
            block_w: 16,
            block_h: 16,
            src_x: x,
            src_y: y,
            dst_x: x + u,
            dst_y: y + v,
            flags: 0,
        }
    }

    /// Absolute pixel center of cell (row, col) of `box90`.
    fn cell_center(row: usize, col: usize) -> (f64, f64) {
        (115.0 + 30.0 * col as f64, 115.0 + 30.0 * row as f64)
    }

    /// One vector per listed cell, at the cell center.
    fn field(cells: &[(usize, usize, f64, f64)]) -> MvFrame {
        MvFrame {
            frame: 1,
            vectors: cells
                .iter()
                .map(|&(r, c, u, v)| {
                    let (x, y) = cell_center(r, c);
                    mv_at(x, y, u, v)
                })
                .collect(),
        }
    }

    fn all_cells() -> impl Iterator<Item = (usize, usize)> {
        (0..3).flat_map(|r| (0..3).map(move |c| (r, c)))
    }

    fn radial(k: f64) -> MvFrame {
        let cells: Vec<_> = all_cells()
            .filter(|&(r, c)| (r, c) != (1, 1))
            .map(|(r, c)| {
                let (x, y) = cell_center(r, c);
                (r, c, k * (x - 145.0), k * (y - 145.0))
            })
            .collect();
        field(&cells)
    }

    #[test]
    fn constant_field_has_zero_spread() {
        let cells: Vec<_> = all_cells().map(|(r, c)| (r, c, 3.0, 4.0)).collect();
        let s = aggregate_grid(&box90(), &field(&cells), size(), &MvpConfig::default()).unwrap();
        assert_eq!(s.mean_disp, Disp { u: 3.0, v: 4.0 });
        assert_eq!(s.sigma_tr, 0.0);
        assert_eq!(s.occupied_cells(), 9);
    }

    #[test]
    fn sigma_tr_hand_example() {
        // four cells at (2,0), four at (4,0), centre empty:
        // mean (3,0), every deviation 1 -> sigma 1
        let cells: Vec<_> = all_cells()
            .filter(|&(r, c)| (r, c) != (1, 1))
            .enumerate()
            .map(|(i, (r, c))| (r, c, if i % 2 == 0 { 2.0 } else { 4.0 }, 0.0))
            .collect();
        let s = aggregate_grid(&box90(), &field(&cells), size(), &MvpConfig::default()).unwrap();
        assert_eq!(s.occupied_cells(), 8);
        assert!((s.mean_disp.u - 3.0).abs() < 1e-12 && s.mean_disp.v == 0.0);
        assert!((s.sigma_tr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_box_yields_no_stats() {
        let far = field(&[]);
        assert!(aggregate_grid(&box90(), &far, size(), &MvpConfig::default()).is_none());
        let outside = MvFrame {
            frame: 1,
            vectors: vec![mv_at(10.0, 10.0, 1.0, 1.0)],
        };
        assert!(aggregate_grid(&box90(), &outside, size(), &MvpConfig::default()).is_none());
        assert_eq!(
            propagate_box(&box90(), &outside, size(), &MvpConfig::default()),
            PropagationOutcome::Failed(FailureReason::NoVectors)
        );
    }

    #[test]
    fn cell_boundaries_are_half_open() {
        // x = 130 is the left edge of the middle column (up to rounding)
        let f = MvFrame {
            frame: 1,
            vectors: vec![
                mv_at(130.001, 110.0, 1.0, 0.0),
                mv_at(129.999, 110.0, 1.0, 0.0),
            ],
        };
        let s = aggregate_grid(&box90(), &f, size(), &MvpConfig::default()).unwrap();
        assert_eq!(s.occupancy[0][1], 1);
        assert_eq!(s.occupancy[0][0], 1);
    }

    #[test]
    fn translation_example() {
        let size = FrameSize::new(100, 100).unwrap();
        let prev = YoloBox::new(0.5, 0.5, 0.2, 0.2);
        let cells: Vec<_> = all_cells()
            .map(|(r, c)| {
                (
                    40.0 + 20.0 / 3.0 * (c as f64 + 0.5),
                    40.0 + 20.0 / 3.0 * (r as f64 + 0.5),
                )
            })
            .map(|(x, y)| mv_at(x, y, 3.0, 4.0))
            .collect();
        let f = MvFrame {
            frame: 1,
            vectors: cells,
        };
        let cfg = MvpConfig::default();
        let s = aggregate_grid(&prev, &f, size, &cfg).unwrap();
        let out = try_translate(&prev, &s, size, &cfg).unwrap();
        let PropagationOutcome::Translated(b) = out else {
            panic!()
        };
        assert!((b.xc - 0.53).abs() < 1e-12 && (b.yc - 0.54).abs() < 1e-12);
        assert_eq!((b.w, b.h), (0.2, 0.2));
    }

    #[test]
    fn translation_threshold_is_inclusive() {
        let cells: Vec<_> = all_cells()
            .filter(|&(r, c)| (r, c) != (1, 1))
            .enumerate()
            .map(|(i, (r, c))| (r, c, if i % 2 == 0 { 2.0 } else { 4.0 }, 0.0))
            .collect();
        let f = field(&cells);
        let s = aggregate_grid(&box90(), &f, size(), &MvpConfig::default()).unwrap();
        let at = MvpConfig {
            tau_tr: s.sigma_tr,
            ..MvpConfig::default()
        };
        assert!(try_translate(&box90(), &s, size(), &at).is_some());
        let below = MvpConfig {
            tau_tr: s.sigma_tr - 0.001,
            ..MvpConfig::default()
        };
        assert!(try_translate(&box90(), &s, size(), &below).is_none());
    }

    #[test]
    fn radial_field_scales_by_ratio() {
        let cfg = MvpConfig {
            tau_tr: 1.0,
            ..MvpConfig::default()
        };
        let f = radial(0.1);
        let s = aggregate_grid(&box90(), &f, size(), &cfg).unwrap();
        assert!(s.sigma_tr > cfg.tau_tr);
        assert!(s.scale_ratios[1][1].is_none());
        for r in s.scale_ratios.iter().flatten().flatten() {
            assert!((r - 1.1).abs() < 1e-4, "{r}");
        }
        let (mu, sigma) = s.scale.unwrap();
        assert!(sigma < 1e-4);
        let out = propagate_box(&box90(), &f, size(), &cfg);
        let PropagationOutcome::Scaled { bbox, mu_r } = out else {
            panic!("{out:?}")
        };
        assert_eq!(mu, mu_r);
        assert!((bbox.w / box90().w - 1.1).abs() < 1e-3);
        assert!((bbox.h / box90().h - 1.1).abs() < 1e-3);
        assert!((bbox.xc - box90().xc).abs() < 1e-12);
    }

    #[test]
    fn zero_field_ratios_sit_just_below_one() {
        let cells: Vec<_> = all_cells().map(|(r, c)| (r, c, 0.0, 0.0)).collect();
        let s = aggregate_grid(&box90(), &field(&cells), size(), &MvpConfig::default()).unwrap();
        for r in s.scale_ratios.iter().flatten().flatten() {
            assert!(*r < 1.0 && *r > 1.0 - 1e-4);
        }
        let out = try_scale(&box90(), &s, size(), &MvpConfig::default()).unwrap();
        let b = out.bbox().unwrap();
        assert!((b.w - box90().w).abs() < 1e-5);
    }

    #[test]
    fn centre_only_has_no_scale_information() {
        let f = field(&[(1, 1, 5.0, 0.0)]);
        let s = aggregate_grid(&box90(), &f, size(), &MvpConfig::default()).unwrap();
        assert_eq!(s.scale, None);
        assert!(try_scale(&box90(), &s, size(), &MvpConfig::default()).is_none());
    }

    #[test]
    fn incoherent_field_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cells: Vec<_> = all_cells()
            .map(|(r, c)| (r, c, rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)))
            .collect();
        let f = field(&cells);
        let cfg = MvpConfig::default();
        let s = aggregate_grid(&box90(), &f, size(), &cfg).unwrap();
        assert!(s.sigma_tr > cfg.tau_tr);
        assert!(s.scale.unwrap().1 > cfg.tau_sc);
        assert_eq!(
            propagate_box(&box90(), &f, size(), &cfg),
            PropagationOutcome::Failed(FailureReason::Incoherent)
        );
    }

    #[test]
    fn constant_field_translates() {
        let cells: Vec<_> = all_cells().map(|(r, c)| (r, c, -2.0, 1.0)).collect();
        let out = propagate_box(&box90(), &field(&cells), size(), &MvpConfig::default());
        assert!(matches!(out, PropagationOutcome::Translated(_)));
    }

    #[test]
    fn single_cell_mode_ignores_scale() {
        let cfg = MvpConfig {
            tau_tr: 1.0,
            grid_enabled: false,
            ..MvpConfig::default()
        };
        let out = propagate_box(&box90(), &radial(0.1), size(), &cfg);
        let PropagationOutcome::Translated(b) = out else {
            panic!("{out:?}")
        };
        assert_eq!((b.w, b.h), (box90().w, box90().h));
        assert!((b.xc - box90().xc).abs() < 1e-12);
        assert_eq!(
            propagate_box(&box90(), &field(&[]), size(), &cfg),
            PropagationOutcome::Failed(FailureReason::NoVectors)
        );
    }

    #[test]
    fn degenerate_box_fails() {
        let b = YoloBox::new(0.5, 0.5, 0.0, 0.1);
        assert_eq!(
            propagate_box(&b, &radial(0.0), size(), &MvpConfig::default()),
            PropagationOutcome::Failed(FailureReason::InvalidBox)
        );
    }

    #[test]
    fn config_validation() {
        assert!(MvpConfig::default().validate().is_ok());
        assert!(MvpConfig {
            keyframe_interval: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MvpConfig {
            growth_ratio: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MvpConfig {
            tau_cls: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MvpConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    fn arb_field() -> impl Strategy<Value = Vec<MotionVector>> {
        prop::collection::vec(
            (
                100.0f64..190.0,
                100.0f64..190.0,
                -10.0f64..10.0,
                -10.0f64..10.0,
            ),
            1..40,
        )
        .prop_map(|vs| {
            vs.into_iter()
                .map(|(x, y, u, v)| mv_at(x, y, u, v))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn shift_equivariance(vs in arb_field(), du in -5.0f64..5.0, dv in -5.0f64..5.0) {
            let cfg = MvpConfig { tau_tr: 1e6, ..MvpConfig::default() };
            let base = MvFrame { frame: 1, vectors: vs.clone() };
            let moved = MvFrame {
                frame: 1,
                vectors: vs.iter().map(|m| MotionVector { dst_x: m.dst_x + du, dst_y: m.dst_y + dv, ..*m }).collect(),
            };
            let s0 = aggregate_grid(&box90(), &base, size(), &cfg).unwrap();
            let s1 = aggregate_grid(&box90(), &moved, size(), &cfg).unwrap();
            prop_assert!((s0.sigma_tr - s1.sigma_tr).abs() < 1e-9);
            let b0 = propagate_box(&box90(), &base, size(), &cfg).bbox().unwrap();
            let b1 = propagate_box(&box90(), &moved, size(), &cfg).bbox().unwrap();
            prop_assert!((b1.xc - b0.xc - du / W as f64).abs() < 1e-9);
            prop_assert!((b1.yc - b0.yc - dv / H as f64).abs() < 1e-9);
        }

        #[test]
        fn order_does_not_matter(vs in arb_field(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let cfg = MvpConfig::default();
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_grid(&box90(), &MvFrame { frame: 1, vectors: vs }, size(), &cfg);
            let b = aggregate_grid(&box90(), &MvFrame { frame: 1, vectors: shuffled }, size(), &cfg);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scaled_only_after_translation_rejects(vs in arb_field(), tau_tr in 0.1f64..8.0) {
            let cfg = MvpConfig { tau_tr, tau_sc: 1.0, ..MvpConfig::default() };
            let f = MvFrame { frame: 1, vectors: vs };
            let out = propagate_box(&box90(), &f, size(), &cfg);
            prop_assert_eq!(out, propagate_box(&box90(), &f, size(), &cfg));
            if let PropagationOutcome::Scaled { .. } = out {
                let s = aggregate_grid(&box90(), &f, size(), &cfg).unwrap();
                prop_assert!(s.sigma_tr > cfg.tau_tr);
            }
        }

        #[test]
        fn uniform_scale_recovery_bound(s in 0.8f64..1.25) {
            // mu_r for a noiseless field lies in [s - s*eps/rho_min, s]
            let cfg = MvpConfig::default();
            let f = radial(s - 1.0);
            let stats = aggregate_grid(&box90(), &f, size(), &cfg).unwrap();
            let (mu, _) = stats.scale.unwrap();
            let rho_min = 30.0;
            prop_assert!(mu <= s + 1e-12);
            prop_assert!(mu >= s - s * cfg.epsilon / rho_min - 1e-12);
        }
    }
}
