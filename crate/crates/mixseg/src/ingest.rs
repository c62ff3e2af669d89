//! Volume preprocessing and the sample pipeline: HU truncation, triplet
//! extraction, subvolume cropping, scale/flip augmentation, multi-scale box
//! rasterization, box-to-one-hot conversion, and box perturbation.

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    Box2D, BoxClass, BoxSet, CtVolume, DataError, SegMask, SliceTriplet, BACKGROUND, HU_MAX,
    HU_MIN, LESION, ORGAN,
};

/// Clamp every voxel into the HU window and set the `truncated` flag.
/// Idempotent. Normalization to [0,1] happens at triplet extraction.
pub fn truncate_hu(volume: &CtVolume) -> CtVolume {
    let mut out = volume.clone();
    out.voxels.mapv_inplace(|v| v.clamp(HU_MIN, HU_MAX));
    out.truncated = true;
    out
}

/// Map a truncated HU value into [0,1] for network input.
pub fn normalize_hu(v: i16) -> f32 {
    (v.clamp(HU_MIN, HU_MAX) - HU_MIN) as f32 / (HU_MAX - HU_MIN) as f32
}

fn normalized_slice(volume: &CtVolume, d: usize) -> Array2<f32> {
    volume
        .voxels
        .index_axis(ndarray::Axis(0), d)
        .mapv(normalize_hu)
}

/// Build the triplet centered at slice `d`, edge-replicating at the
/// boundary. Channel `k` holds slice `d - 1 + k`.
pub fn triplet_at(volume: &CtVolume, d: usize) -> SliceTriplet {
    let (depth, h, w) = volume.shape();
    assert!(d < depth);
    let mut channels = Array3::<f32>::zeros((3, h, w));
    for k in 0..3usize {
        let src = (d + k).saturating_sub(1).min(depth - 1);
        channels
            .index_axis_mut(ndarray::Axis(0), k)
            .assign(&normalized_slice(volume, src));
    }
    SliceTriplet { channels, center_index: d }
}

/// One triplet per slice of the volume.
pub fn make_triplets(volume: &CtVolume) -> Result<Vec<SliceTriplet>, DataError> {
    let (depth, _, _) = volume.shape();
    if depth < 3 {
        return Err(DataError::InvalidVolume {
            case_id: volume.case_id.clone(),
            reason: format!("triplet extraction needs at least 3 slices, got {depth}"),
        });
    }
    Ok((0..depth).map(|d| triplet_at(volume, d)).collect())
}

/// An axis-aligned training crop of a case.
#[derive(Debug, Clone)]
pub struct Crop {
    pub volume: CtVolume,
    pub mask: Option<SegMask>,
    pub boxes: BoxSet,
    /// Offset of the crop inside the source volume, `(d, y, x)`.
    pub offset: (usize, usize, usize),
}

impl Crop {
    /// Center indices that have full 3-slice context inside the crop.
    pub fn center_range(&self) -> std::ops::Range<usize> {
        let d = self.volume.shape().0;
        1..d - 1
    }
}

/// Randomly crop an aligned subvolume of `size` (depth, height, width).
/// Volumes smaller than the crop are padded with the lower HU bound and
/// background labels. Boxes are shifted and clipped to the window; boxes
/// left degenerate are dropped.
pub fn crop_subvolume(
    volume: &CtVolume,
    mask: Option<&SegMask>,
    boxes: &BoxSet,
    size: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Crop {
    let (vd, vh, vw) = volume.shape();
    let (cd, ch, cw) = size;
    let off = |extent: usize, crop: usize, rng: &mut dyn rand::RngCore| -> usize {
        if extent > crop {
            (rng.next_u64() % (extent - crop + 1) as u64) as usize
        } else {
            0
        }
    };
    let d0 = off(vd, cd, rng);
    let y0 = off(vh, ch, rng);
    let x0 = off(vw, cw, rng);

    let mut voxels = Array3::<i16>::from_elem((cd, ch, cw), HU_MIN);
    let mut labels = mask.map(|_| Array3::<u8>::from_elem((cd, ch, cw), BACKGROUND));
    let (ud, uh, uw) = (cd.min(vd - d0), ch.min(vh - y0), cw.min(vw - x0));
    voxels
        .slice_mut(ndarray::s![..ud, ..uh, ..uw])
        .assign(&volume.voxels.slice(ndarray::s![d0..d0 + ud, y0..y0 + uh, x0..x0 + uw]));
    if let (Some(labels), Some(m)) = (labels.as_mut(), mask) {
        labels
            .slice_mut(ndarray::s![..ud, ..uh, ..uw])
            .assign(&m.labels.slice(ndarray::s![d0..d0 + ud, y0..y0 + uh, x0..x0 + uw]));
    }

    let mut cropped_boxes = BoxSet::new(volume.case_id.clone());
    for b in boxes.iter() {
        if b.slice < d0 || b.slice >= d0 + cd {
            continue;
        }
        let shifted = Box2D {
            slice: b.slice - d0,
            cls: b.cls,
            x0: b.x0.saturating_sub(x0 as u32),
            y0: b.y0.saturating_sub(y0 as u32),
            x1: b.x1.saturating_sub(x0 as u32),
            y1: b.y1.saturating_sub(y0 as u32),
        };
        if let Some(clipped) = shifted.clipped(ch, cw) {
            cropped_boxes.push(clipped);
        }
    }

    let out_volume = CtVolume {
        voxels,
        spacing_mm: volume.spacing_mm,
        case_id: volume.case_id.clone(),
        truncated: volume.truncated,
    };
    let out_mask = labels.map(|l| SegMask { labels: l, case_id: volume.case_id.clone() });
    Crop { volume: out_volume, mask: out_mask, boxes: cropped_boxes, offset: (d0, y0, x0) }
}

/// Parameters of one augmentation draw; the same affine map is applied to
/// the image channels, any label, and the boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, scale_range: [0.8, 1.2], flip_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        if !self.enabled {
            return AugmentDraw { scale: 1.0, flip: false };
        }
        let scale = self.scale_range[0] + (self.scale_range[1] - self.scale_range[0]) * rng.random::<f64>();
        let flip = rng.random::<f64>() < self.flip_prob;
        AugmentDraw { scale, flip }
    }
}

/// Inverse map of the augmentation: output pixel -> input position.
/// Scaling is about the image center; flip is horizontal.
fn inverse_map(draw: &AugmentDraw, h: usize, w: usize, y: f64, x: f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let xe = if draw.flip { w as f64 - 1.0 - x } else { x };
    ((y - cy) / draw.scale + cy, (xe - cx) / draw.scale + cx)
}

fn bilinear_sample(img: &ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let get = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[(yy as usize, xx as usize)]
        }
    };
    let v00 = get(y0, x0);
    let v01 = get(y0, x0 + 1.0);
    let v10 = get(y0 + 1.0, x0);
    let v11 = get(y0 + 1.0, x0 + 1.0);
    let top = v00 as f64 * (1.0 - fx) + v01 as f64 * fx;
    let bot = v10 as f64 * (1.0 - fx) + v11 as f64 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

fn nearest_sample<T: Copy>(img: &ArrayView2<T>, y: f64, x: f64, fill: T) -> T {
    let (h, w) = img.dim();
    let yy = y.round();
    let xx = x.round();
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        fill
    } else {
        img[(yy as usize, xx as usize)]
    }
}

/// Transform one box by the forward affine map and clip to bounds. Box
/// coordinates are half-open edge coordinates; the pixel-center affine of
/// the image corresponds to `e -> ((e - 0.5 - c) * s + c) + 0.5` on edges,
/// with a flip mapping edge `e` to `W - e`.
fn transform_box(b: &Box2D, draw: &AugmentDraw, h: usize, w: usize) -> Option<Box2D> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let fwd = |y: f64, x: f64| -> (f64, f64) {
        let ys = (y - 0.5 - cy) * draw.scale + cy + 0.5;
        let xs = (x - 0.5 - cx) * draw.scale + cx + 0.5;
        (ys, if draw.flip { w as f64 - xs } else { xs })
    };
    // map the half-open box through corner points
    let (y0, x0) = fwd(b.y0 as f64, b.x0 as f64);
    let (y1, x1) = fwd(b.y1 as f64, b.x1 as f64);
    let (x0, x1) = (x0.min(x1), x0.max(x1));
    let (y0, y1) = (y0.min(y1), y0.max(y1));
    let clamp = |v: f64, hi: usize| -> u32 { v.round().clamp(0.0, hi as f64) as u32 };
    let out = Box2D {
        slice: b.slice,
        cls: b.cls,
        x0: clamp(x0, w),
        y0: clamp(y0, h),
        x1: clamp(x1, w),
        y1: clamp(y1, h),
    };
    (out.x0 < out.x1 && out.y0 < out.y1).then_some(out)
}

/// Apply one augmentation draw to a triplet, an optional hard label, an
/// optional soft label, and the boxes. The image is bilinearly resampled
/// back onto the original grid; labels use nearest-neighbor so class sets
/// and probability simplices are preserved.
pub fn augment(
    image: &SliceTriplet,
    hard_label: Option<&Array2<u8>>,
    soft_label: Option<&Array3<f32>>,
    boxes: &[Box2D],
    draw: &AugmentDraw,
) -> (SliceTriplet, Option<Array2<u8>>, Option<Array3<f32>>, Vec<Box2D>) {
    let (_, h, w) = image.channels.dim();
    if *draw == (AugmentDraw { scale: 1.0, flip: false }) {
        return (
            image.clone(),
            hard_label.cloned(),
            soft_label.cloned(),
            boxes.to_vec(),
        );
    }
    let mut channels = Array3::<f32>::zeros((3, h, w));
    for k in 0..3 {
        let src = image.channels.index_axis(ndarray::Axis(0), k);
        let mut dst = channels.index_axis_mut(ndarray::Axis(0), k);
        resample_bilinear(&src, &mut dst, draw);
    }
    let out_hard = hard_label.map(|l| {
        let lv = l.view();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (iy, ix) = inverse_map(draw, h, w, y as f64, x as f64);
            nearest_sample(&lv, iy, ix, BACKGROUND)
        })
    });
    let out_soft = soft_label.map(|s| {
        let mut out = Array3::<f32>::zeros((3, h, w));
        for c in 0..3usize {
            let sv = s.index_axis(ndarray::Axis(0), c);
            // outside the source grid the target is background
            let fill = if c == 0 { 1.0 } else { 0.0 };
            let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
            for y in 0..h {
                for x in 0..w {
                    let (iy, ix) = inverse_map(draw, h, w, y as f64, x as f64);
                    dst[(y, x)] = nearest_sample(&sv, iy, ix, fill);
                }
            }
        }
        out
    });
    let out_boxes = boxes.iter().filter_map(|b| transform_box(b, draw, h, w)).collect();
    (
        SliceTriplet { channels, center_index: image.center_index },
        out_hard,
        out_soft,
        out_boxes,
    )
}

fn resample_bilinear(src: &ArrayView2<f32>, dst: &mut ArrayViewMut2<f32>, draw: &AugmentDraw) {
    let (h, w) = src.dim();
    for y in 0..h {
        for x in 0..w {
            let (iy, ix) = inverse_map(draw, h, w, y as f64, x as f64);
            dst[(y, x)] = bilinear_sample(src, iy, ix);
        }
    }
}

/// Per-scale box masks for the teacher attention: scale 1 is the binary
/// rasterization at full resolution, deeper scales halve by factor-2
/// bilinear downsampling (exact 2x2 means), so values stay in [0,1].
#[derive(Debug, Clone)]
pub struct BoxMaskPyramid {
    pub organ: Vec<Array2<f32>>,
    pub lesion: Vec<Array2<f32>>,
}

impl BoxMaskPyramid {
    pub fn scales(&self) -> usize {
        self.organ.len()
    }
}

fn rasterize_union(boxes: &[Box2D], h: usize, w: usize, keep: impl Fn(&Box2D) -> bool) -> Array2<f32> {
    let mut mask = Array2::<f32>::zeros((h, w));
    for b in boxes.iter().filter(|b| keep(b)) {
        let x1 = (b.x1 as usize).min(w);
        let y1 = (b.y1 as usize).min(h);
        for y in b.y0 as usize..y1 {
            for x in b.x0 as usize..x1 {
                mask[(y, x)] = 1.0;
            }
        }
    }
    mask
}

/// Factor-2 bilinear downsampling at half-pixel centers reduces to exact
/// 2x2 block means.
pub fn downsample2x(src: &Array2<f32>) -> Array2<f32> {
    let (h, w) = src.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "downsample needs even sizes");
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (src[(2 * y, 2 * x)]
            + src[(2 * y, 2 * x + 1)]
            + src[(2 * y + 1, 2 * x)]
            + src[(2 * y + 1, 2 * x + 1)])
    })
}

/// Rasterize one slice's boxes into the 4-scale attention pyramid. The
/// organ mask is the union of ALL boxes (lesions lie inside the organ, so
/// organ and lesion regions merge into the organ extent); the lesion mask
/// is the union of lesion boxes only.
pub fn render_box_pyramid(boxes: &[Box2D], shape: (usize, usize), scales: usize) -> BoxMaskPyramid {
    let (h, w) = shape;
    let organ1 = rasterize_union(boxes, h, w, |_| true);
    let lesion1 = rasterize_union(boxes, h, w, |b| b.cls == BoxClass::Lesion);
    let mut organ = vec![organ1];
    let mut lesion = vec![lesion1];
    for j in 1..scales {
        organ.push(downsample2x(&organ[j - 1]));
        lesion.push(downsample2x(&lesion[j - 1]));
    }
    BoxMaskPyramid { organ, lesion }
}

/// 3-class one-hot partition of a slice's boxes: lesion-box pixels are
/// class 2, organ-union pixels outside lesion boxes are class 1, the rest
/// background.
pub fn boxes_to_onehot(boxes: &[Box2D], shape: (usize, usize)) -> Array2<u8> {
    let (h, w) = shape;
    let mut out = Array2::<u8>::from_elem((h, w), BACKGROUND);
    for b in boxes {
        let x1 = (b.x1 as usize).min(w);
        let y1 = (b.y1 as usize).min(h);
        for y in b.y0 as usize..y1 {
            for x in b.x0 as usize..x1 {
                out[(y, x)] = ORGAN;
            }
        }
    }
    for b in boxes.iter().filter(|b| b.cls == BoxClass::Lesion) {
        let x1 = (b.x1 as usize).min(w);
        let y1 = (b.y1 as usize).min(h);
        for y in b.y0 as usize..y1 {
            for x in b.x0 as usize..x1 {
                out[(y, x)] = LESION;
            }
        }
    }
    out
}

/// Stochastic box perturbation simulating fast manual labeling: each box
/// region is rescaled about its center (organ area by Uniform[0.95, 1.1],
/// lesion area by Uniform[0.9, 1.2], i.e. side lengths by the square
/// root), then each corner coordinate shifts independently by up to 1/20
/// (organ) or 1/10 (lesion) of the corresponding side.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub organ_scale: [f64; 2],
    pub organ_shift_frac: f64,
    pub lesion_scale: [f64; 2],
    pub lesion_shift_frac: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            organ_scale: [0.95, 1.1],
            organ_shift_frac: 1.0 / 20.0,
            lesion_scale: [0.9, 1.2],
            lesion_shift_frac: 1.0 / 10.0,
        }
    }
}

pub fn perturb_box(
    b: &Box2D,
    cfg: &PerturbConfig,
    bounds: (usize, usize),
    rng: &mut impl Rng,
) -> Box2D {
    let (h, w) = bounds;
    let (scale_range, shift_frac) = match b.cls {
        BoxClass::Organ => (cfg.organ_scale, cfg.organ_shift_frac),
        BoxClass::Lesion => (cfg.lesion_scale, cfg.lesion_shift_frac),
    };
    let u = scale_range[0] + (scale_range[1] - scale_range[0]) * rng.random::<f64>();
    let side_scale = u.sqrt();
    let (bw, bh) = (b.width() as f64, b.height() as f64);
    let (cx, cy) = (b.x0 as f64 + bw / 2.0, b.y0 as f64 + bh / 2.0);
    let (hw, hh) = (bw / 2.0 * side_scale, bh / 2.0 * side_scale);
    let mut shift = |side: f64| (rng.random::<f64>() * 2.0 - 1.0) * side * shift_frac;
    let x0 = cx - hw + shift(bw);
    let x1 = cx + hw + shift(bw);
    let y0 = cy - hh + shift(bh);
    let y1 = cy + hh + shift(bh);
    let clamp_x = |v: f64| v.round().clamp(0.0, w as f64) as i64;
    let clamp_y = |v: f64| v.round().clamp(0.0, h as f64) as i64;
    let (mut x0, mut x1) = (clamp_x(x0), clamp_x(x1));
    let (mut y0, mut y1) = (clamp_y(y0), clamp_y(y1));
    // re-normalize to a valid in-bounds box with at least unit sides
    if x1 <= x0 {
        let m = ((x0 + x1) / 2).clamp(0, w as i64 - 1);
        x0 = m;
        x1 = m + 1;
    }
    if y1 <= y0 {
        let m = ((y0 + y1) / 2).clamp(0, h as i64 - 1);
        y0 = m;
        y1 = m + 1;
    }
    Box2D {
        slice: b.slice,
        cls: b.cls,
        x0: x0 as u32,
        y0: y0 as u32,
        x1: x1 as u32,
        y1: y1 as u32,
    }
}

/// Perturb every box of a set. Draw order is the deterministic set order.
pub fn perturb_boxes(
    boxes: &BoxSet,
    cfg: &PerturbConfig,
    bounds: (usize, usize),
    rng: &mut impl Rng,
) -> BoxSet {
    let mut out = BoxSet::new(boxes.case_id.clone());
    for b in boxes.iter() {
        out.push(perturb_box(b, cfg, bounds, rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use ndarray::Array3;
    use rand::Rng as _;

    fn volume(d: usize, h: usize, w: usize, seed: u64) -> CtVolume {
        let mut rng = derive_rng(seed, "ingest_vol");
        let voxels = Array3::from_shape_fn((d, h, w), |_| (rng.random::<f64>() * 900.0 - 400.0) as i16);
        CtVolume::new(voxels, [2.0, 1.0, 1.0], format!("vol{seed}")).unwrap()
    }

    #[test]
    fn truncation_clamps_and_is_idempotent() {
        let mut v = volume(4, 16, 16, 1);
        v.voxels[(0, 0, 0)] = 300;
        v.voxels[(0, 0, 1)] = -200;
        let t = truncate_hu(&v);
        assert_eq!(t.voxels[(0, 0, 0)], 250);
        assert_eq!(t.voxels[(0, 0, 1)], -200);
        assert!(t.truncated);
        let lo = *t.voxels.iter().min().unwrap();
        let hi = *t.voxels.iter().max().unwrap();
        assert!(lo >= HU_MIN && hi <= HU_MAX);
        // values already inside the window are untouched
        for (a, b) in v.voxels.iter().zip(t.voxels.iter()) {
            if (HU_MIN..=HU_MAX).contains(a) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(truncate_hu(&t).voxels, t.voxels);
    }

    #[test]
    fn triplets_replicate_edges_and_cover_volume() {
        let v = truncate_hu(&volume(3, 16, 16, 2));
        let trip = make_triplets(&v).unwrap();
        assert_eq!(trip.len(), 3);
        let norm = |d: usize| v.voxels.index_axis(ndarray::Axis(0), d).mapv(normalize_hu);
        let mid = &trip[1];
        for (k, d) in [(0usize, 0usize), (1, 1), (2, 2)] {
            assert_eq!(mid.channels.index_axis(ndarray::Axis(0), k), norm(d));
        }
        let first = &trip[0];
        assert_eq!(first.channels.index_axis(ndarray::Axis(0), 0), norm(0));
        assert_eq!(first.channels.index_axis(ndarray::Axis(0), 1), norm(0));
        assert_eq!(first.channels.index_axis(ndarray::Axis(0), 2), norm(1));
        // center channels reproduce the (normalized) volume
        for (d, t) in trip.iter().enumerate() {
            assert_eq!(t.channels.index_axis(ndarray::Axis(0), 1), norm(d));
            assert_eq!(t.center_index, d);
        }
    }

    #[test]
    fn crop_identity_and_clipping() {
        let v = truncate_hu(&volume(6, 32, 32, 3));
        let mut boxes = BoxSet::new("vol3");
        boxes.push(Box2D::new(2, BoxClass::Organ, 28, 4, 33, 9).unwrap());
        boxes.push(Box2D::new(2, BoxClass::Lesion, 40, 40, 44, 44).unwrap());
        let mut rng = derive_rng(4, "crop");
        let crop = crop_subvolume(&v, None, &boxes, (6, 32, 32), &mut rng);
        assert_eq!(crop.volume.voxels, v.voxels);
        assert_eq!(crop.offset, (0, 0, 0));
        let kept = crop.boxes.on_slice(2);
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].x0, kept[0].x1), (28, 32));
        assert_eq!(crop.center_range(), 1..5);
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let v = truncate_hu(&volume(12, 64, 64, 5));
        let boxes = BoxSet::new("vol5");
        let c1 = crop_subvolume(&v, None, &boxes, (3, 64, 64), &mut derive_rng(6, "c"));
        let c2 = crop_subvolume(&v, None, &boxes, (3, 64, 64), &mut derive_rng(6, "c"));
        assert_eq!(c1.offset, c2.offset);
        assert_eq!(c1.volume.voxels, c2.volume.voxels);
    }

    #[test]
    fn crop_pads_small_volumes() {
        let v = truncate_hu(&volume(4, 16, 16, 7));
        let mask = SegMask::new(Array3::zeros((4, 16, 16)), "vol7").unwrap();
        let crop = crop_subvolume(&v, Some(&mask), &BoxSet::new("vol7"), (6, 20, 20), &mut derive_rng(8, "c"));
        assert_eq!(crop.volume.shape(), (6, 20, 20));
        assert_eq!(crop.volume.voxels[(5, 19, 19)], HU_MIN);
        assert_eq!(crop.mask.unwrap().labels[(5, 19, 19)], BACKGROUND);
    }

    fn sample_triplet(h: usize, w: usize, seed: u64) -> SliceTriplet {
        let mut rng = derive_rng(seed, "trip");
        SliceTriplet {
            channels: Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>()),
            center_index: 1,
        }
    }

    #[test]
    fn augment_identity_draw() {
        let t = sample_triplet(16, 16, 9);
        let mut label = Array2::<u8>::zeros((16, 16));
        label[(4, 4)] = ORGAN;
        let boxes = vec![Box2D::new(1, BoxClass::Organ, 4, 4, 5, 5).unwrap()];
        let draw = AugmentDraw { scale: 1.0, flip: false };
        let (img, hard, _, out_boxes) = augment(&t, Some(&label), None, &boxes, &draw);
        assert_eq!(img.channels, t.channels);
        assert_eq!(hard.unwrap(), label);
        assert_eq!(out_boxes, boxes);
    }

    #[test]
    fn augment_flip_reflects_boxes() {
        let t = sample_triplet(16, 16, 10);
        let boxes = vec![Box2D::new(1, BoxClass::Lesion, 2, 3, 5, 9).unwrap()];
        let draw = AugmentDraw { scale: 1.0, flip: true };
        let (_, _, _, out) = augment(&t, None, None, &boxes, &draw);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].x0, out[0].x1), (16 - 5, 16 - 2));
        assert_eq!((out[0].y0, out[0].y1), (3, 9));
    }

    #[test]
    fn augment_introduces_no_new_classes() {
        let t = sample_triplet(32, 32, 11);
        let mut label = Array2::<u8>::zeros((32, 32));
        for y in 8..20 {
            for x in 8..24 {
                label[(y, x)] = ORGAN;
            }
        }
        label[(12, 12)] = LESION;
        let mut rng = derive_rng(12, "aug");
        let cfg = AugmentConfig::default();
        for _ in 0..25 {
            let draw = cfg.draw(&mut rng);
            let (_, hard, _, _) = augment(&t, Some(&label), None, &[], &draw);
            for v in hard.unwrap().iter() {
                assert!(*v <= LESION);
            }
        }
    }

    #[test]
    fn augment_preserves_soft_label_simplex() {
        let t = sample_triplet(16, 16, 13);
        let mut soft = Array3::<f32>::zeros((3, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let a = ((y * 16 + x) % 10) as f32 / 10.0;
                soft[(0, y, x)] = a;
                soft[(1, y, x)] = (1.0 - a) * 0.7;
                soft[(2, y, x)] = (1.0 - a) * 0.3;
            }
        }
        let mut rng = derive_rng(14, "aug");
        let cfg = AugmentConfig::default();
        for _ in 0..10 {
            let draw = cfg.draw(&mut rng);
            let (_, _, out, _) = augment(&t, None, Some(&soft), &[], &draw);
            for ((_, y, x), _) in out.as_ref().unwrap().indexed_iter() {
                let s: f32 = (0..3).map(|c| out.as_ref().unwrap()[(c, y, x)]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pyramid_rasterization_rules() {
        let organ = Box2D::new(0, BoxClass::Organ, 0, 0, 2, 2).unwrap();
        let p = render_box_pyramid(&[organ], (4, 4), 2);
        for y in 0..4 {
            for x in 0..4 {
                let want = if y < 2 && x < 2 { 1.0 } else { 0.0 };
                assert_eq!(p.organ[0][(y, x)], want);
            }
        }
        // a lesion box with no organ box still covers the organ mask (union rule)
        let lesion = Box2D::new(0, BoxClass::Lesion, 1, 1, 3, 3).unwrap();
        let p = render_box_pyramid(&[lesion], (8, 8), 4);
        assert_eq!(p.organ[0], p.lesion[0]);
        assert!(p.organ[0][(1, 1)] == 1.0);
        // scale-1 masks binary, deeper scales within [0,1], lesion <= organ
        for j in 0..4 {
            for (o, l) in p.organ[j].iter().zip(p.lesion[j].iter()) {
                assert!((0.0..=1.0).contains(o) && (0.0..=1.0).contains(l));
                assert!(l <= o);
            }
        }
        assert!(p.organ[0].iter().all(|v| *v == 0.0 || *v == 1.0));
        // constants survive downsampling
        let ones = Array2::<f32>::ones((8, 8));
        assert!(downsample2x(&ones).iter().all(|v| (*v - 1.0).abs() < 1e-7));
        assert_eq!(downsample2x(&ones).dim(), (4, 4));
    }

    #[test]
    fn onehot_partitions_boxes() {
        let organ = Box2D::new(0, BoxClass::Organ, 0, 0, 4, 4).unwrap();
        let lesion = Box2D::new(0, BoxClass::Lesion, 1, 1, 3, 3).unwrap();
        let oh = boxes_to_onehot(&[organ, lesion], (4, 4));
        for y in 0..4 {
            for x in 0..4 {
                let want = if (1..3).contains(&y) && (1..3).contains(&x) { LESION } else { ORGAN };
                assert_eq!(oh[(y, x)], want);
            }
        }
        assert!(boxes_to_onehot(&[], (4, 4)).iter().all(|v| *v == BACKGROUND));
    }

    #[test]
    fn onehot_lesion_union_matches_rectangle_oracle() {
        let boxes = vec![
            Box2D::new(0, BoxClass::Lesion, 1, 1, 6, 5).unwrap(),
            Box2D::new(0, BoxClass::Lesion, 4, 3, 9, 8).unwrap(),
            Box2D::new(0, BoxClass::Lesion, 0, 6, 3, 10).unwrap(),
        ];
        let oh = boxes_to_onehot(&boxes, (12, 12));
        let got = oh.iter().filter(|v| **v == LESION).count();
        // brute-force union area over every pixel
        let mut want = 0usize;
        for y in 0..12u32 {
            for x in 0..12u32 {
                if boxes.iter().any(|b| b.x0 <= x && x < b.x1 && b.y0 <= y && y < b.y1) {
                    want += 1;
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn perturb_identity_config() {
        let cfg = PerturbConfig {
            organ_scale: [1.0, 1.0],
            organ_shift_frac: 0.0,
            lesion_scale: [1.0, 1.0],
            lesion_shift_frac: 0.0,
        };
        let b = Box2D::new(0, BoxClass::Organ, 10, 12, 40, 30).unwrap();
        let mut rng = derive_rng(15, "pert");
        assert_eq!(perturb_box(&b, &cfg, (64, 64), &mut rng), b);
    }

    #[test]
    fn perturb_respects_interval_bound() {
        // organ box of side 100: area scale in [0.95, 1.1] moves an edge by
        // at most (sqrt(1.1)-1)*50 ~ 2.44 px, corner shift adds up to 5 px,
        // so every coordinate stays within 7.5 px of the original edge
        let cfg = PerturbConfig::default();
        let b = Box2D::new(0, BoxClass::Organ, 100, 100, 200, 200).unwrap();
        let mut rng = derive_rng(16, "pert");
        for _ in 0..100_000 {
            let p = perturb_box(&b, &cfg, (400, 400), &mut rng);
            for (got, orig) in [
                (p.x0 as f64, 100.0),
                (p.y0 as f64, 100.0),
                (p.x1 as f64, 200.0),
                (p.y1 as f64, 200.0),
            ] {
                assert!((got - orig).abs() <= 7.5, "coordinate {got} vs {orig}");
            }
        }
    }

    #[test]
    fn perturb_small_corner_box_stays_valid() {
        let cfg = PerturbConfig::default();
        let b = Box2D::new(0, BoxClass::Lesion, 0, 0, 4, 4).unwrap();
        let mut rng = derive_rng(17, "pert");
        for _ in 0..5_000 {
            let p = perturb_box(&b, &cfg, (64, 64), &mut rng);
            assert!(p.x0 < p.x1 && p.y0 < p.y1);
            assert!(p.in_bounds(64, 64));
        }
    }

    #[test]
    fn perturb_lesion_bounds_statistical() {
        // lesion: area scale in [0.9, 1.2] moves an edge by at most
        // (sqrt(1.2)-1) * side/2, corner shift adds up to side/10; rounding
        // adds half a pixel
        let cfg = PerturbConfig::default();
        let b = Box2D::new(0, BoxClass::Lesion, 100, 100, 160, 160).unwrap();
        let bound = (1.2f64.sqrt() - 1.0) * 30.0 + 6.0 + 0.5;
        let mut rng = derive_rng(18, "pert");
        for _ in 0..100_000 {
            let p = perturb_box(&b, &cfg, (400, 400), &mut rng);
            for (got, orig) in [
                (p.x0 as f64, 100.0),
                (p.y0 as f64, 100.0),
                (p.x1 as f64, 160.0),
                (p.y1 as f64, 160.0),
            ] {
                assert!((got - orig).abs() <= bound, "coordinate {got} vs {orig}");
            }
        }
    }
}
