//! Synthetic organ-with-inner-lesion volumes for desk-scale experiments,
//! plus the brute-force oracles (flood fill, finite differences) the test
//! suites verify against.

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CtVolume, SegMask, BACKGROUND, LESION, ORGAN};
use crate::util::derive_rng;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("could not place lesion {index} inside the organ after {attempts} attempts")]
    LesionPlacement { index: usize, attempts: usize },
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: (usize, usize, usize),
    pub spacing_mm: [f64; 3],
    /// Organ ellipsoid semi-axes as fractions of each dimension.
    pub organ_axis_frac: ([f64; 2], [f64; 2], [f64; 2]),
    /// Organ center jitter as a fraction of each dimension.
    pub organ_center_jitter: f64,
    pub organ_hu: [f64; 2],
    pub background_hu: [f64; 2],
    pub lesion_count: (usize, usize),
    /// In-plane lesion semi-axis range in voxels; depth semi-axis range.
    pub lesion_radius: [f64; 2],
    pub lesion_radius_z: [f64; 2],
    /// Magnitude of the lesion intensity offset from the organ band; the
    /// sign is drawn per lesion.
    pub lesion_hu_offset: [f64; 2],
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: (12, 64, 64),
            spacing_mm: [2.0, 1.0, 1.0],
            organ_axis_frac: ([0.30, 0.42], [0.26, 0.38], [0.26, 0.38]),
            organ_center_jitter: 0.06,
            organ_hu: [70.0, 130.0],
            background_hu: [-120.0, -60.0],
            lesion_count: (0, 3),
            lesion_radius: [3.0, 7.5],
            lesion_radius_z: [1.2, 3.0],
            lesion_hu_offset: [60.0, 110.0],
            noise_sigma: 8.0,
        }
    }
}

impl PhantomConfig {
    /// Corpus profile for desk-scale experiments: every case carries one to
    /// three large, high-contrast lesions so the lesion class has enough
    /// mass to learn from within shortened schedules.
    pub fn desk_corpus() -> Self {
        PhantomConfig {
            lesion_count: (1, 3),
            lesion_radius: [5.0, 9.5],
            lesion_radius_z: [1.6, 3.2],
            lesion_hu_offset: [80.0, 130.0],
            ..PhantomConfig::default()
        }
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.c[0]) / self.r[0];
        let dy = (y - self.c[1]) / self.r[1];
        let dx = (x - self.c[2]) / self.r[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Generate one phantom: an ellipsoidal organ over a darker background with
/// brighter or darker lesions strictly inside the organ, plus Gaussian
/// noise. Intensities stay inside the HU window so truncation is a no-op.
pub fn gen_phantom(
    cfg: &PhantomConfig,
    case_id: &str,
    rng: &mut impl Rng,
) -> Result<(CtVolume, SegMask), PhantomError> {
    let (d, h, w) = cfg.shape;
    if d < 3 || h < 16 || w < 16 {
        return Err(PhantomError::InvalidConfig(format!("shape {:?} too small", cfg.shape)));
    }
    let (df, hf, wf) = (d as f64, h as f64, w as f64);
    let jitter = cfg.organ_center_jitter;
    let organ = Ellipsoid {
        c: [
            df / 2.0 + uniform(rng, -jitter, jitter) * df,
            hf / 2.0 + uniform(rng, -jitter, jitter) * hf,
            wf / 2.0 + uniform(rng, -jitter, jitter) * wf,
        ],
        r: [
            uniform(rng, cfg.organ_axis_frac.0[0], cfg.organ_axis_frac.0[1]) * df,
            uniform(rng, cfg.organ_axis_frac.1[0], cfg.organ_axis_frac.1[1]) * hf,
            uniform(rng, cfg.organ_axis_frac.2[0], cfg.organ_axis_frac.2[1]) * wf,
        ],
    };

    // rasterize the organ by voxel centers first; lesion candidates are
    // then validated voxel-exactly so no lesion voxel ever touches background
    let organ_grid = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        organ.contains(z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5)
    });

    let n_lesions = rng.random_range(cfg.lesion_count.0..=cfg.lesion_count.1);
    let mut lesions: Vec<(Vec<(usize, usize, usize)>, f64)> = Vec::with_capacity(n_lesions);
    const ATTEMPTS: usize = 64;
    for i in 0..n_lesions {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let r = [
                uniform(rng, cfg.lesion_radius_z[0], cfg.lesion_radius_z[1]),
                uniform(rng, cfg.lesion_radius[0], cfg.lesion_radius[1]),
                uniform(rng, cfg.lesion_radius[0], cfg.lesion_radius[1]),
            ];
            let u = uniform(rng, 0.0, 0.8);
            let theta = uniform(rng, 0.0, std::f64::consts::TAU);
            let phi = uniform(rng, 0.2, std::f64::consts::PI - 0.2);
            let c = [
                organ.c[0] + u * organ.r[0] * phi.cos() * 0.7,
                organ.c[1] + u * organ.r[1] * phi.sin() * theta.sin(),
                organ.c[2] + u * organ.r[2] * phi.sin() * theta.cos(),
            ];
            let le = Ellipsoid { c, r };
            if let Some(voxels) = voxelize_inside_organ(&le, &organ_grid) {
                let mag = uniform(rng, cfg.lesion_hu_offset[0], cfg.lesion_hu_offset[1]);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                lesions.push((voxels, mag * sign));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PhantomError::LesionPlacement { index: i, attempts: ATTEMPTS });
        }
    }

    let mut labels = Array3::<u8>::zeros((d, h, w));
    for (z, y, x) in ndarray::indices((d, h, w)) {
        if organ_grid[(z, y, x)] {
            labels[(z, y, x)] = ORGAN;
        }
    }
    let mut lesion_hu = Array3::<f64>::zeros((d, h, w));
    for (voxels, offset) in &lesions {
        for &(z, y, x) in voxels {
            labels[(z, y, x)] = LESION;
            lesion_hu[(z, y, x)] = *offset;
        }
    }

    let organ_hu_val = uniform(rng, cfg.organ_hu[0], cfg.organ_hu[1]);
    let bg_hu = uniform(rng, cfg.background_hu[0], cfg.background_hu[1]);
    let mut voxels = Array3::<i16>::zeros((d, h, w));
    for (z, y, x) in ndarray::indices((d, h, w)) {
        let mut hu = match labels[(z, y, x)] {
            BACKGROUND => bg_hu,
            ORGAN => organ_hu_val,
            _ => organ_hu_val + lesion_hu[(z, y, x)],
        };
        hu += crate::nn::randn(rng) * cfg.noise_sigma;
        voxels[(z, y, x)] = hu.round().clamp(-200.0, 250.0) as i16;
    }

    let mut volume = CtVolume::new(voxels, cfg.spacing_mm, case_id).expect("valid phantom volume");
    volume.truncated = true;
    let mask = SegMask::new(labels, case_id).expect("valid phantom mask");
    Ok((volume, mask))
}

/// Voxelize a lesion candidate by voxel centers. Accepts only when the
/// voxel set is nonempty and every 6-neighbor of every lesion voxel lies
/// inside the rasterized organ, so lesions sit strictly interior.
fn voxelize_inside_organ(
    lesion: &Ellipsoid,
    organ_grid: &Array3<bool>,
) -> Option<Vec<(usize, usize, usize)>> {
    let (d, h, w) = organ_grid.dim();
    let lo = |c: f64, r: f64| ((c - r - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64, r: f64, n: usize| ((c + r + 1.0).ceil() as usize).min(n);
    let mut out = Vec::new();
    for z in lo(lesion.c[0], lesion.r[0])..hi(lesion.c[0], lesion.r[0], d) {
        for y in lo(lesion.c[1], lesion.r[1])..hi(lesion.c[1], lesion.r[1], h) {
            for x in lo(lesion.c[2], lesion.r[2])..hi(lesion.c[2], lesion.r[2], w) {
                if !lesion.contains(z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5) {
                    continue;
                }
                if !organ_grid[(z, y, x)] {
                    return None;
                }
                let neighbors = [
                    (z.wrapping_sub(1), y, x),
                    (z + 1, y, x),
                    (z, y.wrapping_sub(1), x),
                    (z, y + 1, x),
                    (z, y, x.wrapping_sub(1)),
                    (z, y, x + 1),
                ];
                for (nz, ny, nx) in neighbors {
                    if nz >= d || ny >= h || nx >= w || !organ_grid[(nz, ny, nx)] {
                        return None;
                    }
                }
                out.push((z, y, x));
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Generate `n` phantoms/// Generate `n` phantoms and write them in the canonical dataset layout.
/// Returns the case ids.
pub fn gen_corpus(
    root: &std::path::Path,
    n: usize,
    cfg: &PhantomConfig,
    seed: u64,
) -> Result<Vec<String>, crate::data::DataError> {
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let case_id = format!("case_{i:03}");
        let mut rng = derive_rng(seed, &format!("phantom/{case_id}"));
        let (volume, mask) = gen_phantom(cfg, &case_id, &mut rng)
            .map_err(|e| crate::data::DataError::Store(e.to_string()))?;
        crate::data::store::write_case(root, &volume, Some(&mask), None)?;
        ids.push(case_id);
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// 6-neighborhood in 3D (faces).
    Face6,
    /// 4-neighborhood within each slice; slices stay independent.
    Planar4,
}

/// Exhaustive flood-fill component labeling; the postprocessing oracle.
/// Only intended for small grids.
pub fn oracle_components(mask: &Array3<bool>, connectivity: Connectivity) -> Array3<u32> {
    let (d, h, w) = mask.dim();
    let mut labels = Array3::<u32>::zeros((d, h, w));
    let mut next = 0u32;
    let mut stack = Vec::new();
    for sz in 0..d {
        for sy in 0..h {
            for sx in 0..w {
                if !mask[(sz, sy, sx)] || labels[(sz, sy, sx)] != 0 {
                    continue;
                }
                next += 1;
                labels[(sz, sy, sx)] = next;
                stack.push((sz, sy, sx));
                while let Some((z, y, x)) = stack.pop() {
                    let mut visit = |nz: usize, ny: usize, nx: usize| {
                        if mask[(nz, ny, nx)] && labels[(nz, ny, nx)] == 0 {
                            labels[(nz, ny, nx)] = next;
                            stack.push((nz, ny, nx));
                        }
                    };
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
                    if connectivity == Connectivity::Face6 {
                        if z > 0 {
                            visit(z - 1, y, x);
                        }
                        if z + 1 < d {
                            visit(z + 1, y, x);
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Central differences at a subset of coordinates; used when the full
/// parameter vector is too large for exhaustive differencing. Indices are
/// typically a deterministic stride sample spanning every layer.
pub fn oracle_grad_at<F>(loss_fn: F, params: &[f64], indices: &[usize], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    indices
        .par_iter()
        .map(|&i| {
            let mut p = params.to_vec();
            p[i] = params[i] + eps;
            let up = loss_fn(&p);
            p[i] = params[i] - eps;
            let down = loss_fn(&p);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Evenly spread `count` coordinate indices over `len` parameters.
pub fn stride_sample(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

/// L2 relative error between an analytic and a finite-difference gradient.
pub fn l2_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// Central-difference gradient of `loss_fn` at `params`:
/// `(f(p+eps) - f(p-eps)) / (2 eps)` per coordinate. Double precision only.
pub fn oracle_grad<F>(loss_fn: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    params
        .par_iter()
        .enumerate()
        .map(|(i, _)| {
            let mut p = params.to_vec();
            p[i] = params[i] + eps;
            let up = loss_fn(&p);
            p[i] = params[i] - eps;
            let down = loss_fn(&p);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{boxes_from_volume, BoxClass};
    use ndarray::Array3;

    #[test]
    fn phantom_is_seed_deterministic() {
        let cfg = PhantomConfig::default();
        let mut r1 = derive_rng(5, "p");
        let mut r2 = derive_rng(5, "p");
        let (v1, m1) = gen_phantom(&cfg, "a", &mut r1).unwrap();
        let (v2, m2) = gen_phantom(&cfg, "a", &mut r2).unwrap();
        assert_eq!(v1.voxels, v2.voxels);
        assert_eq!(m1.labels, m2.labels);
    }

    #[test]
    fn zero_lesion_config_yields_two_class_masks() {
        let cfg = PhantomConfig { lesion_count: (0, 0), ..PhantomConfig::default() };
        let (_, mask) = gen_phantom(&cfg, "a", &mut derive_rng(6, "p")).unwrap();
        assert!(mask.labels.iter().all(|v| *v <= ORGAN));
    }

    #[test]
    fn lesions_always_inside_organ_and_truncation_noop() {
        let cfg = PhantomConfig::default();
        for seed in 0..100u64 {
            let mut rng = derive_rng(seed, "containment");
            let (volume, mask) = gen_phantom(&cfg, "c", &mut rng).unwrap();
            // hard invariant: lesions never touch background, so they sit
            // strictly inside the organ
            let (d, h, w) = mask.labels.dim();
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if mask.labels[(z, y, x)] != LESION {
                            continue;
                        }
                        let mut neighbors = Vec::new();
                        if z > 0 { neighbors.push((z - 1, y, x)); }
                        if z + 1 < d { neighbors.push((z + 1, y, x)); }
                        if y > 0 { neighbors.push((z, y - 1, x)); }
                        if y + 1 < h { neighbors.push((z, y + 1, x)); }
                        if x > 0 { neighbors.push((z, y, x - 1)); }
                        if x + 1 < w { neighbors.push((z, y, x + 1)); }
                        for nb in neighbors {
                            assert_ne!(mask.labels[nb], 0, "lesion touches background at {nb:?}");
                        }
                    }
                }
            }
            assert!(volume.voxels.iter().all(|v| (-200..=250).contains(v)));
            // box-level containment: lesion boxes inside organ boxes per slice
            let boxes = boxes_from_volume(&mask);
            assert!(boxes.lesions_within_organ_union(), "seed {seed}");
            assert!(boxes.iter().any(|b| b.cls == BoxClass::Organ));
        }
    }

    #[test]
    fn components_match_union_find_oracle() {
        // independent union-find implementation as the second opinion
        struct Dsu(Vec<usize>);
        impl Dsu {
            fn find(&mut self, i: usize) -> usize {
                if self.0[i] != i {
                    let r = self.find(self.0[i]);
                    self.0[i] = r;
                }
                self.0[i]
            }
            fn union(&mut self, a: usize, b: usize) {
                let (ra, rb) = (self.find(a), self.find(b));
                if ra != rb {
                    self.0[ra] = rb;
                }
            }
        }
        let mut rng = derive_rng(7, "uf");
        for _ in 0..50 {
            let mask = Array3::from_shape_fn((1, 8, 8), |_| rand::Rng::random::<f64>(&mut rng) < 0.45);
            let labels = oracle_components(&mask, Connectivity::Planar4);
            let mut dsu = Dsu((0..64).collect());
            for y in 0..8 {
                for x in 0..8 {
                    if !mask[(0, y, x)] {
                        continue;
                    }
                    if y + 1 < 8 && mask[(0, y + 1, x)] {
                        dsu.union(y * 8 + x, (y + 1) * 8 + x);
                    }
                    if x + 1 < 8 && mask[(0, y, x + 1)] {
                        dsu.union(y * 8 + x, y * 8 + x + 1);
                    }
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    for (y2, x2) in [(y, x + 1), (y + 1, x)] {
                        if y2 >= 8 || x2 >= 8 {
                            continue;
                        }
                        if mask[(0, y, x)] && mask[(0, y2, x2)] {
                            let same_oracle = labels[(0, y, x)] == labels[(0, y2, x2)];
                            let same_dsu = dsu.find(y * 8 + x) == dsu.find(y2 * 8 + x2);
                            assert_eq!(same_oracle, same_dsu);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_and_diagonal_components() {
        let mut m = Array3::from_elem((1, 4, 4), false);
        m[(0, 1, 1)] = true;
        assert_eq!(*oracle_components(&m, Connectivity::Planar4).iter().max().unwrap(), 1);
        m[(0, 2, 2)] = true;
        assert_eq!(*oracle_components(&m, Connectivity::Planar4).iter().max().unwrap(), 2);
    }

    #[test]
    fn finite_difference_matches_analytic_gradients() {
        let params: Vec<f64> = (0..40).map(|i| (i as f64) / 13.0 - 1.5).collect();
        let grad = oracle_grad(|p| 0.5 * p.iter().map(|v| v * v).sum::<f64>(), &params, 1e-5);
        for (g, p) in grad.iter().zip(&params) {
            assert!((g - p).abs() < 1e-9);
        }
        let grad = oracle_grad(|p| p.iter().map(|v| v.sin()).sum::<f64>(), &params, 1e-5);
        for (g, p) in grad.iter().zip(&params) {
            assert!((g - p.cos()).abs() < 1e-8);
        }
    }
}
