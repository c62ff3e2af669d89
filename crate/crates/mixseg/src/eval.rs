//! Volume-level inference sweep, morphological postprocessing, and the
//! evaluation metrics (Dice per case, Dice global, tumor-burden RMSE).

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CtVolume, SegMask, BACKGROUND, LESION, ORGAN};
use crate::ingest::triplet_at;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty case list")]
    EmptyCases,
}

/// Classify every slice of a volume: per slice, run the model on the
/// triplet centered there and take the argmax of the center-slice logits,
/// ties broken toward the lower class index. `logits_fn` maps a batch of
/// triplets `[B, 3, H, W]` to logits `[B, 3, H, W]`.
pub fn sweep_with(
    volume: &CtVolume,
    batch: usize,
    mut logits_fn: impl FnMut(&Array4<f32>, &[usize]) -> Array4<f32>,
) -> SegMask {
    assert!(volume.truncated, "sweep expects a truncated volume");
    let (d, h, w) = volume.shape();
    let mut labels = Array3::<u8>::zeros((d, h, w));
    let mut start = 0usize;
    while start < d {
        let end = (start + batch).min(d);
        let idx: Vec<usize> = (start..end).collect();
        let mut x = Array4::<f32>::zeros((idx.len(), 3, h, w));
        for (b, &di) in idx.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), b)
                .assign(&triplet_at(volume, di).channels);
        }
        let logits = logits_fn(&x, &idx);
        assert_eq!(logits.dim(), (idx.len(), 3, h, w), "sweep logits shape");
        for (b, &di) in idx.iter().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let mut best = 0usize;
                    let mut bv = logits[(b, 0, y, xx)];
                    for c in 1..3 {
                        let v = logits[(b, c, y, xx)];
                        if v > bv {
                            bv = v;
                            best = c;
                        }
                    }
                    labels[(di, y, xx)] = best as u8;
                }
            }
        }
        start = end;
    }
    SegMask { labels, case_id: volume.case_id.clone() }
}

/// Largest 6-connected 3D component of a boolean grid; all-false grids
/// yield an all-false result.
fn largest_component_3d(mask: &Array3<bool>) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    let mut labels = vec![0u32; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut sizes: Vec<usize> = vec![0];
    let mut stack = Vec::new();
    for sz in 0..d {
        for sy in 0..h {
            for sx in 0..w {
                if !mask[(sz, sy, sx)] || labels[idx(sz, sy, sx)] != 0 {
                    continue;
                }
                let id = sizes.len() as u32;
                sizes.push(0);
                labels[idx(sz, sy, sx)] = id;
                stack.push((sz, sy, sx));
                while let Some((z, y, x)) = stack.pop() {
                    sizes[id as usize] += 1;
                    let mut visit = |nz: usize, ny: usize, nx: usize| {
                        if mask[(nz, ny, nx)] && labels[idx(nz, ny, nx)] == 0 {
                            labels[idx(nz, ny, nx)] = id;
                            stack.push((nz, ny, nx));
                        }
                    };
                    if z > 0 {
                        visit(z - 1, y, x);
                    }
                    if z + 1 < d {
                        visit(z + 1, y, x);
                    }
                    if y > 0 {
                        visit(z, y - 1, x);
                    }
                    if y + 1 < h {
                        visit(z, y + 1, x);
                    }
                    if x > 0 {
                        visit(z, y, x - 1);
                    }
                    if x + 1 < w {
                        visit(z, y, x + 1);
                    }
                }
            }
        }
    }
    let best = (1..sizes.len()).max_by_key(|i| (sizes[*i], usize::MAX - *i));
    let mut out = Array3::from_elem((d, h, w), false);
    if let Some(best) = best {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out[(z, y, x)] = labels[idx(z, y, x)] == best as u32;
                }
            }
        }
    }
    out
}

/// Binary hole fill per slice: complement pixels not 4-connected to the
/// slice border become foreground.
fn fill_holes_slice(fg: &mut ndarray::ArrayViewMut2<bool>) {
    let (h, w) = fg.dim();
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || y == h - 1 || x == 0 || x == w - 1) && !fg[(y, x)] && !outside[y * w + x] {
                outside[y * w + x] = true;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    let mut visit = |ny: usize, nx: usize| {
                        if !fg[(ny, nx)] && !outside[ny * w + nx] {
                            outside[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    };
                    if cy > 0 {
                        visit(cy - 1, cx);
                    }
                    if cy + 1 < h {
                        visit(cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cy, cx - 1);
                    }
                    if cx + 1 < w {
                        visit(cy, cx + 1);
                    }
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !fg[(y, x)] && !outside[y * w + x] {
                fg[(y, x)] = true;
            }
        }
    }
}

/// CT postprocessing: (1) keep only the largest 3D 6-connected component
/// of the liver extent (labels {1, 2}); (2) fill enclosed holes per slice,
/// in the lesion mask and in the liver extent; (3) drop lesion voxels
/// outside the retained liver. Idempotent.
pub fn postprocess(mask: &SegMask) -> SegMask {
    let (d, h, w) = mask.labels.dim();
    let liver = Array3::from_shape_fn((d, h, w), |i| mask.labels[i] != BACKGROUND);
    let keep = largest_component_3d(&liver);

    let mut lesion = Array3::from_shape_fn((d, h, w), |i| mask.labels[i] == LESION && keep[i]);
    let mut liver_kept = keep.clone();
    for z in 0..d {
        fill_holes_slice(&mut lesion.index_axis_mut(ndarray::Axis(0), z));
        fill_holes_slice(&mut liver_kept.index_axis_mut(ndarray::Axis(0), z));
    }

    let mut labels = Array3::<u8>::zeros((d, h, w));
    for i in ndarray::indices((d, h, w)) {
        if lesion[i] && liver_kept[i] {
            labels[i] = LESION;
        } else if liver_kept[i] {
            labels[i] = ORGAN;
        }
    }
    SegMask { labels, case_id: mask.case_id.clone() }
}

/// `DS = 2 |X n Y| / (|X| + |Y|)`; two empty masks count as a perfect 1.
pub fn dice(x: &Array3<bool>, y: &Array3<bool>) -> Result<f64, EvalError> {
    if x.dim() != y.dim() {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", x.dim(), y.dim())));
    }
    let (inter, nx, ny) = dice_counts(x, y);
    Ok(dice_from_counts(inter, nx, ny))
}

fn dice_counts(x: &Array3<bool>, y: &Array3<bool>) -> (u64, u64, u64) {
    let mut inter = 0u64;
    let mut nx = 0u64;
    let mut ny = 0u64;
    for (a, b) in x.iter().zip(y.iter()) {
        inter += (*a && *b) as u64;
        nx += *a as u64;
        ny += *b as u64;
    }
    (inter, nx, ny)
}

fn dice_from_counts(inter: u64, nx: u64, ny: u64) -> f64 {
    if nx + ny == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (nx + ny) as f64
    }
}

pub fn class_mask(mask: &SegMask, cls: u8) -> Array3<bool> {
    mask.labels.mapv(|v| v == cls)
}

/// Liver extent {organ, lesion} as a boolean mask.
pub fn liver_mask(mask: &SegMask) -> Array3<bool> {
    mask.labels.mapv(|v| v != BACKGROUND)
}

/// Per-case mean Dice and pooled-count global Dice for one class extent.
/// `extent` maps a mask to the boolean region being scored.
pub fn aggregate_dice(
    cases: &[(&SegMask, &SegMask)],
    extent: impl Fn(&SegMask) -> Array3<bool>,
) -> Result<(f64, f64), EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyCases);
    }
    let mut per_case_sum = 0.0f64;
    let (mut pool_i, mut pool_x, mut pool_y) = (0u64, 0u64, 0u64);
    for (pred, gt) in cases {
        let px = extent(pred);
        let gy = extent(gt);
        if px.dim() != gy.dim() {
            return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", px.dim(), gy.dim())));
        }
        let (i, nx, ny) = dice_counts(&px, &gy);
        per_case_sum += dice_from_counts(i, nx, ny);
        pool_i += i;
        pool_x += nx;
        pool_y += ny;
    }
    let global = dice_from_counts(pool_i, pool_x, pool_y);
    Ok((global, per_case_sum / cases.len() as f64))
}

/// Tumor burden of one mask: lesion volume over liver-extent volume.
pub fn tumor_burden(mask: &SegMask) -> Option<f64> {
    let liver = mask.labels.iter().filter(|v| **v != BACKGROUND).count();
    if liver == 0 {
        return None;
    }
    let lesion = mask.labels.iter().filter(|v| **v == LESION).count();
    Some(lesion as f64 / liver as f64)
}

/// RMSE of tumor burden across cases. Cases whose ground truth has no
/// liver voxels are excluded with a warning.
pub fn tumor_burden_rmse(cases: &[(&SegMask, &SegMask)]) -> Result<f64, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::EmptyCases);
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (pred, gt) in cases {
        let Some(bg) = tumor_burden(gt) else {
            eprintln!("warning: case {} has no ground-truth liver, excluded from burden RMSE", gt.case_id);
            continue;
        };
        let bp = tumor_burden(pred).unwrap_or(0.0);
        sum += (bp - bg) * (bp - bg);
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::EmptyCases);
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice_liver: f64,
    pub dice_lesion: f64,
    pub burden_pred: f64,
    pub burden_gt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_global_liver: f64,
    pub dice_per_case_liver: f64,
    pub dice_global_lesion: f64,
    pub dice_per_case_lesion: f64,
    pub tumor_burden_rmse: f64,
    pub per_case: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn from_cases(cases: &[(&SegMask, &SegMask)]) -> Result<Self, EvalError> {
        let (dice_global_liver, dice_per_case_liver) = aggregate_dice(cases, liver_mask)?;
        let (dice_global_lesion, dice_per_case_lesion) =
            aggregate_dice(cases, |m| class_mask(m, LESION))?;
        let rmse = tumor_burden_rmse(cases)?;
        let per_case = cases
            .iter()
            .map(|(pred, gt)| {
                let dl = dice(&liver_mask(pred), &liver_mask(gt)).unwrap();
                let dn = dice(&class_mask(pred, LESION), &class_mask(gt, LESION)).unwrap();
                CaseMetrics {
                    case_id: gt.case_id.clone(),
                    dice_liver: dl,
                    dice_lesion: dn,
                    burden_pred: tumor_burden(pred).unwrap_or(0.0),
                    burden_gt: tumor_burden(gt).unwrap_or(0.0),
                }
            })
            .collect();
        Ok(MetricsReport {
            dice_global_liver,
            dice_per_case_liver,
            dice_global_lesion,
            dice_per_case_lesion,
            tumor_burden_rmse: rmse,
            per_case,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,dice_liver,dice_lesion,burden_pred,burden_gt\n");
        for c in &self.per_case {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                c.case_id, c.dice_liver, c.dice_lesion, c.burden_pred, c.burden_gt
            ));
        }
        out
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "              Dice global   Dice per case")?;
        writeln!(
            f,
            "  liver        {:>8.4}      {:>8.4}",
            self.dice_global_liver, self.dice_per_case_liver
        )?;
        writeln!(
            f,
            "  lesion       {:>8.4}      {:>8.4}",
            self.dice_global_lesion, self.dice_per_case_lesion
        )?;
        writeln!(f, "  tumor burden RMSE: {:.5}", self.tumor_burden_rmse)
    }
}
