//! Dataset entities: CT volumes, dense label masks, per-slice bounding
//! boxes, and the strong/weak/pseudo sample triplets, plus conversions
//! between dense labels and boxes.

pub mod store;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_rng;

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const LESION: u8 = 2;

/// HU clamp window applied by preprocessing.
pub const HU_MIN: i16 = -200;
pub const HU_MAX: i16 = 250;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid volume {case_id}: {reason}")]
    InvalidVolume { case_id: String, reason: String },
    #[error("invalid mask {case_id}: {reason}")]
    InvalidMask { case_id: String, reason: String },
    #[error("invalid box on slice {slice}: ({x0},{y0})..({x1},{y1})")]
    InvalidBox { slice: usize, x0: u32, y0: u32, x1: u32, y1: u32 },
    #[error("invalid soft label: {0}")]
    InvalidSoftLabel(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("store: {0}")]
    Store(String),
}

/// A CT intensity volume in Hounsfield units, `[D, H, W]`.
#[derive(Debug, Clone)]
pub struct CtVolume {
    pub voxels: Array3<i16>,
    pub spacing_mm: [f64; 3],
    pub case_id: String,
    pub truncated: bool,
}

impl CtVolume {
    pub fn new(
        voxels: Array3<i16>,
        spacing_mm: [f64; 3],
        case_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        let v = CtVolume { voxels, spacing_mm, case_id: case_id.into(), truncated: false };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (d, h, w) = self.voxels.dim();
        let fail = |reason: String| DataError::InvalidVolume {
            case_id: self.case_id.clone(),
            reason,
        };
        if d < 3 {
            return Err(fail(format!("needs at least 3 slices, got {d}")));
        }
        if h < 16 || w < 16 {
            return Err(fail(format!("slices must be at least 16x16, got {h}x{w}")));
        }
        if self.spacing_mm.iter().any(|s| *s <= 0.0) {
            return Err(fail(format!("non-positive spacing {:?}", self.spacing_mm)));
        }
        if self.truncated {
            for v in self.voxels.iter() {
                if *v < HU_MIN || *v > HU_MAX {
                    return Err(fail(format!("truncated flag set but voxel {v} outside window")));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// Dense 3-class label volume aligned with a [`CtVolume`].
#[derive(Debug, Clone)]
pub struct SegMask {
    pub labels: Array3<u8>,
    pub case_id: String,
}

impl SegMask {
    pub fn new(labels: Array3<u8>, case_id: impl Into<String>) -> Result<Self, DataError> {
        let m = SegMask { labels, case_id: case_id.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for v in self.labels.iter() {
            if *v > LESION {
                return Err(DataError::InvalidMask {
                    case_id: self.case_id.clone(),
                    reason: format!("label value {v} outside {{0,1,2}}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxClass {
    Organ,
    Lesion,
}

/// Axis-aligned half-open box `[x0, x1) x [y0, y1)` on one slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box2D {
    pub slice: usize,
    pub cls: BoxClass,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Box2D {
    pub fn new(slice: usize, cls: BoxClass, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, DataError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(DataError::InvalidBox { slice, x0, y0, x1, y1 });
        }
        Ok(Box2D { slice, cls, x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn in_bounds(&self, h: usize, w: usize) -> bool {
        (self.x1 as usize) <= w && (self.y1 as usize) <= h
    }

    /// Clip to an image window; `None` when nothing remains.
    pub fn clipped(&self, h: usize, w: usize) -> Option<Box2D> {
        let x1 = self.x1.min(w as u32);
        let y1 = self.y1.min(h as u32);
        if self.x0 >= x1 || self.y0 >= y1 {
            return None;
        }
        Some(Box2D { x1, y1, ..*self })
    }
}

/// All boxes of a case, grouped by slice.
#[derive(Debug, Clone, Default)]
pub struct BoxSet {
    pub case_id: String,
    by_slice: BTreeMap<usize, Vec<Box2D>>,
}

impl BoxSet {
    pub fn new(case_id: impl Into<String>) -> Self {
        BoxSet { case_id: case_id.into(), by_slice: BTreeMap::new() }
    }

    pub fn from_boxes(case_id: impl Into<String>, boxes: impl IntoIterator<Item = Box2D>) -> Self {
        let mut set = BoxSet::new(case_id);
        for b in boxes {
            set.push(b);
        }
        set
    }

    pub fn push(&mut self, b: Box2D) {
        self.by_slice.entry(b.slice).or_default().push(b);
    }

    pub fn on_slice(&self, slice: usize) -> &[Box2D] {
        self.by_slice.get(&slice).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Box2D> {
        self.by_slice.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_slice.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Canonical-data invariant: every lesion box region is covered by the
    /// union of the organ-class box regions on its slice.
    pub fn lesions_within_organ_union(&self) -> bool {
        self.by_slice.values().all(|boxes| {
            let organs: Vec<&Box2D> = boxes.iter().filter(|b| b.cls == BoxClass::Organ).collect();
            boxes
                .iter()
                .filter(|b| b.cls == BoxClass::Lesion)
                .all(|le| rect_covered_by(le, &organs))
        })
    }
}

/// Is `target` fully covered by the union of `covers`? Coordinate-compressed
/// cell check restricted to the target rectangle.
fn rect_covered_by(target: &Box2D, covers: &[&Box2D]) -> bool {
    let mut xs = vec![target.x0, target.x1];
    let mut ys = vec![target.y0, target.y1];
    for c in covers {
        xs.extend([c.x0.clamp(target.x0, target.x1), c.x1.clamp(target.x0, target.x1)]);
        ys.extend([c.y0.clamp(target.y0, target.y1), c.y1.clamp(target.y0, target.y1)]);
    }
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let (cx, cy) = (wx[0], wy[0]);
            let covered = covers
                .iter()
                .any(|c| c.x0 <= cx && wx[1] <= c.x1 && c.y0 <= cy && wy[1] <= c.y1);
            if !covered {
                return false;
            }
        }
    }
    true
}

/// Three consecutive normalized slices stacked as channels, `[3, H, W]`.
/// Channel `k` holds slice `center_index - 1 + k`, edge-replicated at the
/// volume boundary.
#[derive(Debug, Clone)]
pub struct SliceTriplet {
    pub channels: Array3<f32>,
    pub center_index: usize,
}

/// Fully annotated sample: image triplet, dense center-slice label, boxes.
#[derive(Debug, Clone)]
pub struct StrongSample {
    pub image: SliceTriplet,
    pub dense_label: Array2<u8>,
    pub boxes: Vec<Box2D>,
}

/// Weakly annotated sample: image triplet and boxes only.
#[derive(Debug, Clone)]
pub struct WeakSample {
    pub image: SliceTriplet,
    pub boxes: Vec<Box2D>,
}

/// Weak sample augmented with a teacher-produced soft label `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub image: SliceTriplet,
    pub soft_label: Array3<f32>,
    pub boxes: Vec<Box2D>,
}

impl PseudoSample {
    /// Per-pixel probability simplex check (sum 1 within 1e-5, entries in [0,1]).
    pub fn validate(&self) -> Result<(), DataError> {
        let (c, h, w) = self.soft_label.dim();
        if c != 3 {
            return Err(DataError::InvalidSoftLabel(format!("expected 3 channels, got {c}")));
        }
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f32;
                for ch in 0..3 {
                    let p = self.soft_label[(ch, y, x)];
                    if !(0.0..=1.0).contains(&p) {
                        return Err(DataError::InvalidSoftLabel(format!(
                            "probability {p} at ({ch},{y},{x}) outside [0,1]"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(DataError::InvalidSoftLabel(format!(
                        "probabilities at ({y},{x}) sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Drop the dense label; image and boxes are preserved bit-exactly.
pub fn strong_to_weak(sample: &StrongSample) -> WeakSample {
    WeakSample { image: sample.image.clone(), boxes: sample.boxes.clone() }
}

/// Circumscribed rectangles of a 2D class map: one organ box per connected
/// component of the organ extent (labels {1,2} merged, since lesions lie
/// inside the organ), one lesion box per connected lesion component.
/// 4-connectivity.
pub fn boxes_from_mask(mask2d: &ArrayView2<u8>, slice: usize) -> Vec<Box2D> {
    let mut out = component_boxes(mask2d, slice, BoxClass::Organ, |v| v == ORGAN || v == LESION);
    out.extend(component_boxes(mask2d, slice, BoxClass::Lesion, |v| v == LESION));
    out
}

fn component_boxes(
    mask: &ArrayView2<u8>,
    slice: usize,
    cls: BoxClass,
    fg: impl Fn(u8) -> bool,
) -> Vec<Box2D> {
    let (h, w) = mask.dim();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !fg(mask[(sy, sx)]) {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            stack.push((sy, sx));
            seen[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                let mut push = |ny: usize, nx: usize| {
                    if !seen[ny * w + nx] && fg(mask[(ny, nx)]) {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x);
                }
                if y + 1 < h {
                    push(y + 1, x);
                }
                if x > 0 {
                    push(y, x - 1);
                }
                if x + 1 < w {
                    push(y, x + 1);
                }
            }
            boxes.push(Box2D {
                slice,
                cls,
                x0: x0 as u32,
                y0: y0 as u32,
                x1: (x1 + 1) as u32,
                y1: (y1 + 1) as u32,
            });
        }
    }
    boxes
}

/// Extract the full per-slice box set of a mask volume.
pub fn boxes_from_volume(mask: &SegMask) -> BoxSet {
    let (d, _, _) = mask.labels.dim();
    let mut set = BoxSet::new(mask.case_id.clone());
    for s in 0..d {
        for b in boxes_from_mask(&mask.labels.index_axis(ndarray::Axis(0), s), s) {
            set.push(b);
        }
    }
    set
}

/// Deterministic strong/weak/validation partition of case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub strong: Vec<String>,
    pub weak: Vec<String>,
    pub val: Vec<String>,
}

/// Partition `cases` by percentage shares `(strong, weak, val)`.
///
/// The validation share is taken from the tail of the seeded shuffle, so
/// sweeps that vary only the strong:weak ratio keep an identical held-out
/// set. Strong and validation sizes are the rounded shares; remainder cases
/// go to the weak part.
pub fn split_dataset(
    cases: &[String],
    ratio: (u32, u32, u32),
    seed: u64,
) -> Result<Split, DataError> {
    let (rs, rw, rv) = ratio;
    if rs + rw + rv != 100 {
        return Err(DataError::InvalidSplit(format!(
            "percentages must sum to 100, got {rs}+{rw}+{rv}"
        )));
    }
    let n = cases.len();
    let share = |pct: u32| ((n as f64 * pct as f64 / 100.0) + 0.5).floor() as usize;
    let (mut ns, nv) = (share(rs), share(rv));
    if ns + nv > n {
        ns = n - nv;
    }
    let nw = n - ns - nv;
    for (name, pct, size) in [("strong", rs, ns), ("weak", rw, nw), ("val", rv, nv)] {
        if pct > 0 && size == 0 {
            return Err(DataError::InvalidSplit(format!(
                "{name} share {pct}% rounds to 0 cases out of {n}"
            )));
        }
    }
    let mut shuffled: Vec<String> = cases.to_vec();
    let mut rng = derive_rng(seed, "split");
    shuffled.shuffle(&mut rng);
    let val = shuffled.split_off(n - nv);
    let weak = shuffled.split_off(ns);
    Ok(Split { strong: shuffled, weak, val })
}
