//! Losses, SGD with classical momentum, learning-rate schedule, training
//! configuration, and the mixed-supervision student training loop.

use std::collections::HashMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AugmentConfig;
use crate::nn::{ParamKind, Scalar, Tensor, Visit};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("soft target at {0:?} is not a probability simplex (sum {1})")]
    NonSimplexTarget((usize, usize, usize), f64),
    #[error("target shape {got} does not match logits {want}")]
    TargetShape { got: String, want: String },
    #[error("non-finite {0} encountered at {1}; training aborted")]
    NonFinite(&'static str, String),
    #[error("both training sets are empty")]
    EmptyMixture,
    #[error("nn: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("data: {0}")]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Optimization protocol for one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub role: Role,
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Epoch after which the learning rate decays each epoch; `None`
    /// keeps it constant.
    pub decay_start: Option<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Weight of the localization loss in `L_s = L_seg + alpha * L_loc`.
    pub alpha: f64,
    /// Per-class weights of the localization cross-entropy
    /// (background, organ, lesion).
    pub loc_class_weights: [f64; 3],
    pub crop: (usize, usize, usize),
    pub seed: u64,
    pub val_every: usize,
    pub augment: AugmentConfig,
    /// Alternate strong and pseudo samples per batch instead of pooling.
    pub balance_mixture: bool,
}

impl TrainConfig {
    pub fn teacher_default() -> Self {
        TrainConfig {
            role: Role::Teacher,
            lr0: 1e-3,
            momentum: 0.9,
            epochs: 1500,
            decay_start: None,
            decay_factor: 0.95,
            batch_size: 2,
            alpha: 1.0,
            loc_class_weights: [1.0, 0.1, 1.0],
            crop: (6, 320, 320),
            seed: 0,
            val_every: 25,
            augment: AugmentConfig::default(),
            balance_mixture: false,
        }
    }

    pub fn student_default() -> Self {
        TrainConfig {
            role: Role::Student,
            lr0: 3e-4,
            momentum: 0.9,
            epochs: 4000,
            decay_start: Some(3000),
            decay_factor: 0.95,
            batch_size: 2,
            alpha: 1.0,
            loc_class_weights: [1.0, 0.1, 1.0],
            crop: (6, 320, 320),
            seed: 0,
            val_every: 25,
            augment: AugmentConfig::default(),
            balance_mixture: false,
        }
    }

    /// Shrink the protocol to desk scale, keeping the schedule shape:
    /// the decay point stays at 3/4 of training like the full protocol.
    /// The teacher gets a deeper crop (two triplets per case and epoch);
    /// pseudo-label quality bounds everything downstream.
    pub fn desk_scale(mut self) -> Self {
        match self.role {
            Role::Teacher => {
                self.epochs = 150;
                self.crop = (4, 64, 64);
            }
            Role::Student => {
                self.epochs = 300;
                self.decay_start = Some(225);
                self.crop = (3, 64, 64);
            }
        }
        self
    }
}

/// `lr0` until `decay_start`, then `lr0 * decay_factor^(epoch - decay_start)`.
/// Epochs are 1-based.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    assert!(epoch >= 1 && epoch <= cfg.epochs, "epoch {epoch} outside 1..={}", cfg.epochs);
    match cfg.decay_start {
        Some(ds) if epoch > ds => cfg.lr0 * cfg.decay_factor.powi((epoch - ds) as i32),
        _ => cfg.lr0,
    }
}

/// Segmentation target: a dense class map or a soft distribution.
pub enum CeTarget<'a, S: Scalar> {
    Hard(&'a Array3<u8>),
    Soft(&'a Tensor<S>),
}

/// Mean over batch and pixels of `-sum_c w_c q_c log p_c` with stabilized
/// log-softmax. Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    target: &CeTarget<S>,
    class_weights: Option<&[f64; 3]>,
) -> Result<(f64, Tensor<S>), TrainError> {
    let (bs, ch, h, w) = logits.dim();
    assert_eq!(ch, 3, "three classes expected");
    match target {
        CeTarget::Hard(t) => {
            if t.dim() != (bs, h, w) {
                return Err(TrainError::TargetShape {
                    got: format!("{:?}", t.dim()),
                    want: format!("{:?}", logits.dim()),
                });
            }
        }
        CeTarget::Soft(t) => {
            if t.dim() != logits.dim() {
                return Err(TrainError::TargetShape {
                    got: format!("{:?}", t.dim()),
                    want: format!("{:?}", logits.dim()),
                });
            }
            for b in 0..bs {
                for y in 0..h {
                    for x in 0..w {
                        let mut sum = 0.0f64;
                        for c in 0..3 {
                            sum += t[(b, c, y, x)].as_f64();
                        }
                        if (sum - 1.0).abs() > 1e-4 {
                            return Err(TrainError::NonSimplexTarget((b, y, x), sum));
                        }
                    }
                }
            }
        }
    }
    let weights = class_weights.copied().unwrap_or([1.0, 1.0, 1.0]);
    let n = (bs * h * w) as f64;
    let inv_n = S::of_f64(1.0 / n);
    let mut grad = Tensor::<S>::zeros(logits.dim());
    let mut loss = 0.0f64;
    let plane = h * w;
    let ls = logits.as_slice().unwrap();
    let gs = grad.as_slice_mut().unwrap();
    for b in 0..bs {
        for i in 0..plane {
            let base = b * 3 * plane + i;
            let z = [ls[base], ls[base + plane], ls[base + 2 * plane]];
            let m = z[0].max(z[1]).max(z[2]);
            let exps = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
            let sum = exps[0] + exps[1] + exps[2];
            let lse = m + sum.ln();
            let q: [f64; 3] = match target {
                CeTarget::Hard(t) => {
                    let cls = t.as_slice().unwrap()[b * plane + i] as usize;
                    let mut q = [0.0; 3];
                    q[cls] = 1.0;
                    q
                }
                CeTarget::Soft(t) => {
                    let ts = t.as_slice().unwrap();
                    let tb = b * 3 * plane + i;
                    [
                        ts[tb].as_f64(),
                        ts[tb + plane].as_f64(),
                        ts[tb + 2 * plane].as_f64(),
                    ]
                }
            };
            let mut wq_sum = 0.0f64;
            for c in 0..3 {
                let log_p = (z[c] - lse).as_f64();
                loss -= weights[c] * q[c] * log_p;
                wq_sum += weights[c] * q[c];
            }
            for c in 0..3 {
                let p = exps[c] / sum;
                gs[base + c * plane] =
                    (S::of_f64(wq_sum) * p - S::of_f64(weights[c] * q[c])) * inv_n;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Student loss block: unweighted segmentation CE plus class-weighted
/// localization CE, `L_s = L_seg + alpha * L_loc`. Returns the components
/// and both logits gradients (the localization gradient already scaled by
/// `alpha`).
#[allow(clippy::type_complexity)]
pub fn student_loss<S: Scalar>(
    seg_logits: &Tensor<S>,
    loc_logits: Option<&Tensor<S>>,
    seg_target: &CeTarget<S>,
    loc_target: Option<&Array3<u8>>,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, Tensor<S>, Option<Tensor<S>>), TrainError> {
    let (l_seg, d_seg) = cross_entropy(seg_logits, seg_target, None)?;
    let (l_loc, d_loc) = match (loc_logits, loc_target) {
        (Some(logits), Some(target)) => {
            let (l, mut d) = cross_entropy(logits, &CeTarget::Hard(target), Some(&cfg.loc_class_weights))?;
            let a = S::of_f64(cfg.alpha);
            d.mapv_inplace(|v| v * a);
            (l, Some(d))
        }
        _ => (0.0, None),
    };
    let l_s = l_seg + cfg.alpha * l_loc;
    Ok((l_s, l_seg, l_loc, d_seg, d_loc))
}

/// Classical (heavy-ball) momentum SGD: `v <- m v + g; p <- p - lr v`.
/// Velocities are keyed by parameter path and survive across steps.
pub struct Sgd<S: Scalar> {
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Default for Sgd<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Sgd<S> {
    pub fn new() -> Self {
        Sgd { velocity: HashMap::new() }
    }

    pub fn step(
        &mut self,
        module: &mut impl Visit<S>,
        lr: f64,
        momentum: f64,
    ) -> Result<(), TrainError> {
        let lr_s = S::of_f64(lr);
        let m_s = S::of_f64(momentum);
        let mut bad: Option<String> = None;
        module.visit(
            "",
            &mut |path: &str, kind: ParamKind, data: &mut [S], grad: Option<&mut [S]>| {
                if kind != ParamKind::Param || bad.is_some() {
                    return;
                }
                let grad = grad.expect("param without grad");
                let vel = self
                    .velocity
                    .entry(path.to_string())
                    .or_insert_with(|| vec![S::zero(); data.len()]);
                for ((p, g), v) in data.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                    if !g.is_finite() {
                        bad = Some(path.to_string());
                        return;
                    }
                    *v = m_s * *v + *g;
                    *p = *p - lr_s * *v;
                }
            },
        );
        match bad {
            Some(path) => Err(TrainError::NonFinite("gradient", path)),
            None => Ok(()),
        }
    }
}



#[cfg(test)]
mod lr_tests {
    use super::*;

    #[test]
    fn paper_schedule_values() {
        let student = TrainConfig::student_default();
        assert_eq!(lr_at(3000, &student), 3e-4);
        assert!((lr_at(3001, &student) - 2.85e-4).abs() < 1e-12);
        let teacher = TrainConfig::teacher_default();
        for e in [1usize, 700, 1500] {
            assert_eq!(lr_at(e, &teacher), 1e-3);
        }
    }

    #[test]
    fn lr_is_non_increasing() {
        let cfg = TrainConfig::student_default();
        let mut prev = f64::INFINITY;
        for e in 1..=cfg.epochs {
            let lr = lr_at(e, &cfg);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}

use crate::data::store::CaseData;
use crate::data::{Box2D, BACKGROUND};
use crate::data::SegMask;
use crate::eval;
use crate::ingest;
use crate::nn::UNetConfig;
use crate::student::{sweep_infer_student, StudentNet};
use crate::teacher::TraceRow;
use crate::util::derive_rng;
use ndarray::{Array2, Array4, Axis};

pub struct StudentRun {
    pub net: StudentNet<f32>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub trace: Vec<TraceRow>,
    pub best_params: Vec<f32>,
}

struct MixItem {
    image: Array3<f32>,
    /// Soft segmentation target `[3, H, W]`; hard labels arrive one-hot.
    target: ndarray::Array3<f32>,
    boxes: Vec<Box2D>,
}

fn one_hot(label: &Array2<u8>) -> ndarray::Array3<f32> {
    let (h, w) = label.dim();
    let mut out = ndarray::Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            out[(label[(y, x)] as usize, y, x)] = 1.0;
        }
    }
    out
}

/// Crop a stored soft label `[3, D, H, W]` with the same offset and padding
/// rule as the volume crop; padded voxels are background one-hot.
fn crop_soft(
    soft: &Array4<f32>,
    offset: (usize, usize, usize),
    size: (usize, usize, usize),
) -> Array4<f32> {
    let (_, sd, sh, sw) = soft.dim();
    let (cd, ch, cw) = size;
    let (d0, y0, x0) = offset;
    let mut out = Array4::<f32>::zeros((3, cd, ch, cw));
    out.index_axis_mut(Axis(0), BACKGROUND as usize).fill(1.0);
    let (ud, uh, uw) = (cd.min(sd - d0), ch.min(sh - y0), cw.min(sw - x0));
    out.slice_mut(ndarray::s![.., ..ud, ..uh, ..uw]).assign(&soft.slice(ndarray::s![
        ..,
        d0..d0 + ud,
        y0..y0 + uh,
        x0..x0 + uw
    ]));
    out
}

fn strong_epoch_items(case: &CaseData, cfg: &TrainConfig, epoch: usize, out: &mut Vec<MixItem>) {
    let mut rng = derive_rng(cfg.seed, &format!("student-epoch/{epoch}/{}", case.volume.case_id));
    let mask = case.mask.as_ref().expect("strong case needs a mask");
    let crop = ingest::crop_subvolume(&case.volume, Some(mask), &case.boxes, cfg.crop, &mut rng);
    let crop_mask = crop.mask.as_ref().unwrap();
    for center in crop.center_range() {
        let triplet = ingest::triplet_at(&crop.volume, center);
        let label = crop_mask.labels.index_axis(Axis(0), center).to_owned();
        let boxes = crop.boxes.on_slice(center).to_vec();
        let draw = cfg.augment.draw(&mut rng);
        let (image, label, _, boxes) = ingest::augment(&triplet, Some(&label), None, &boxes, &draw);
        out.push(MixItem {
            image: image.channels,
            target: one_hot(&label.unwrap()),
            boxes,
        });
    }
}

fn pseudo_epoch_items(case: &CaseData, cfg: &TrainConfig, epoch: usize, out: &mut Vec<MixItem>) {
    let mut rng = derive_rng(cfg.seed, &format!("student-epoch/{epoch}/{}", case.volume.case_id));
    let soft = case.soft_label.as_ref().expect("pseudo case needs a soft label");
    let crop = ingest::crop_subvolume(&case.volume, None, &case.boxes, cfg.crop, &mut rng);
    let soft_crop = crop_soft(soft, crop.offset, cfg.crop);
    for center in crop.center_range() {
        let triplet = ingest::triplet_at(&crop.volume, center);
        let target = soft_crop.index_axis(Axis(1), center).to_owned();
        let boxes = crop.boxes.on_slice(center).to_vec();
        let draw = cfg.augment.draw(&mut rng);
        let (image, _, target, boxes) =
            ingest::augment(&triplet, None, Some(&target), &boxes, &draw);
        out.push(MixItem {
            image: image.channels,
            target: target.unwrap(),
            boxes,
        });
    }
}

/// Mean validation Dice of the student over held-out labeled cases.
pub fn validate_student(net: &mut StudentNet<f32>, cases: &[CaseData]) -> (f64, f64, f64) {
    let preds: Vec<SegMask> = cases
        .iter()
        .map(|c| sweep_infer_student(net, &c.volume, 4))
        .collect();
    let pairs: Vec<(&SegMask, &SegMask)> = preds
        .iter()
        .zip(cases.iter())
        .map(|(p, c)| (p, c.mask.as_ref().expect("validation case needs a mask")))
        .collect();
    let (_, liver) = eval::aggregate_dice(&pairs, eval::liver_mask).unwrap();
    let (_, lesion) =
        eval::aggregate_dice(&pairs, |m| eval::class_mask(m, crate::data::LESION)).unwrap();
    (liver, lesion, 0.5 * (liver + lesion))
}

/// Train the student on the strong + pseudo mixture: hard (one-hot) CE for
/// strong samples, soft CE for pseudo samples, class-weighted localization
/// CE from each sample's boxes when the branch is on. Minibatches sample
/// uniformly from the shuffled concatenated pool (or alternate sets with
/// `balance_mixture`). Returns the best-validation checkpoint.
pub fn train_student(
    strong: &[CaseData],
    pseudo: &[CaseData],
    val: &[CaseData],
    unet_cfg: &UNetConfig,
    with_loc: bool,
    cfg: &TrainConfig,
) -> Result<StudentRun, TrainError> {
    if strong.is_empty() && pseudo.is_empty() {
        return Err(TrainError::EmptyMixture);
    }
    let mut net = StudentNet::<f32>::new(unet_cfg, with_loc, &mut derive_rng(cfg.seed, "student-init"));
    let mut opt = Sgd::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, net.flat_params());
    let (_, h, w) = cfg.crop;

    for epoch in 1..=cfg.epochs {
        let mut strong_items = Vec::new();
        for case in strong {
            strong_epoch_items(case, cfg, epoch, &mut strong_items);
        }
        let mut pseudo_items = Vec::new();
        for case in pseudo {
            pseudo_epoch_items(case, cfg, epoch, &mut pseudo_items);
        }
        let mut shuffle_rng = derive_rng(cfg.seed, &format!("student-shuffle/{epoch}"));
        let order: Vec<(bool, usize)> = if cfg.balance_mixture {
            let mut s: Vec<usize> = (0..strong_items.len()).collect();
            let mut p: Vec<usize> = (0..pseudo_items.len()).collect();
            rand::seq::SliceRandom::shuffle(&mut s[..], &mut shuffle_rng);
            rand::seq::SliceRandom::shuffle(&mut p[..], &mut shuffle_rng);
            let mut order = Vec::with_capacity(s.len() + p.len());
            let (mut si, mut pi) = (0usize, 0usize);
            while si < s.len() || pi < p.len() {
                if si < s.len() {
                    order.push((true, s[si]));
                    si += 1;
                }
                if pi < p.len() {
                    order.push((false, p[pi]));
                    pi += 1;
                }
            }
            order
        } else {
            let mut order: Vec<(bool, usize)> = (0..strong_items.len())
                .map(|i| (true, i))
                .chain((0..pseudo_items.len()).map(|i| (false, i)))
                .collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);
            order
        };

        let lr = lr_at(epoch, cfg);
        let (mut e_seg, mut e_loc, mut e_s) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bs = chunk.len();
            let mut x = Array4::<f32>::zeros((bs, 3, h, w));
            let mut target = Array4::<f32>::zeros((bs, 3, h, w));
            let mut loc_target = Array3::<u8>::zeros((bs, h, w));
            for (b, &(is_strong, i)) in chunk.iter().enumerate() {
                let item = if is_strong { &strong_items[i] } else { &pseudo_items[i] };
                x.index_axis_mut(Axis(0), b).assign(&item.image);
                target.index_axis_mut(Axis(0), b).assign(&item.target);
                loc_target
                    .index_axis_mut(Axis(0), b)
                    .assign(&ingest::boxes_to_onehot(&item.boxes, (h, w)));
            }
            net.zero_grad();
            let (seg_logits, loc_logits) = net.forward(&x, crate::nn::Mode::Train)?;
            let (l_s, l_seg, l_loc, dseg, dloc) = student_loss(
                &seg_logits,
                loc_logits.as_ref(),
                &CeTarget::Soft(&target),
                with_loc.then_some(&loc_target),
                cfg,
            )?;
            if !l_s.is_finite() {
                return Err(TrainError::NonFinite("loss", format!("student epoch {epoch}")));
            }
            net.backward(&dseg, dloc.as_ref());
            opt.step(&mut net, lr, cfg.momentum)?;
            e_seg += l_seg;
            e_loc += l_loc;
            e_s += l_s;
            batches += 1;
        }
        let bf = batches.max(1) as f64;
        let mut row = TraceRow {
            epoch,
            lr,
            l_seg: e_seg / bf,
            l_loc: e_loc / bf,
            l_s: e_s / bf,
            val_dice_liver: None,
            val_dice_lesion: None,
        };
        if !val.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs) {
            let (liver, lesion, mean) = validate_student(&mut net, val);
            row.val_dice_liver = Some(liver);
            row.val_dice_lesion = Some(lesion);
            if mean > best.1 {
                best = (epoch, mean, net.flat_params());
            }
        }
        trace.push(row);
    }
    if val.is_empty() {
        best = (cfg.epochs, f64::NAN, net.flat_params());
    }
    net.set_flat_params(&best.2);
    Ok(StudentRun {
        net,
        best_epoch: best.0,
        best_val_dice: best.1,
        trace,
        best_params: best.2,
    })
}

#[cfg(test)]
mod student_loop_tests {
    use super::*;
    use crate::phantom::{gen_phantom, PhantomConfig};

    fn tiny_case(seed: u64, with_soft: bool) -> CaseData {
        let cfg = PhantomConfig {
            shape: (8, 32, 32),
            organ_axis_frac: ([0.34, 0.42], [0.30, 0.38], [0.30, 0.38]),
            lesion_count: (1, 1),
            lesion_radius: [2.0, 3.0],
            lesion_radius_z: [0.8, 1.0],
            ..PhantomConfig::default()
        };
        let (volume, mask) = gen_phantom(&cfg, &format!("t{seed}"), &mut derive_rng(seed, "tc")).unwrap();
        let boxes = crate::data::boxes_from_volume(&mask);
        // synthetic slightly-smoothed soft labels standing in for a teacher
        let soft_label = with_soft.then(|| {
            let (d, h, w) = mask.labels.dim();
            let mut soft = Array4::<f32>::zeros((3, d, h, w));
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let c = mask.labels[(z, y, x)] as usize;
                        for k in 0..3 {
                            soft[(k, z, y, x)] = if k == c { 0.9 } else { 0.05 };
                        }
                    }
                }
            }
            soft
        });
        let mask = if with_soft { None } else { Some(mask) };
        CaseData { volume, mask, boxes, soft_label }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::student_default();
        cfg.epochs = epochs;
        cfg.crop = (3, 32, 32);
        cfg.seed = 11;
        cfg.val_every = 2;
        cfg
    }

    #[test]
    fn strong_only_and_mixture_both_train() {
        let unet = UNetConfig { base_channels: 4, ..UNetConfig::default() };
        let strong = vec![tiny_case(1, false)];
        let val = vec![tiny_case(2, false)];
        let cfg = tiny_cfg(4);
        // pseudo set empty: the strong-only ablation baseline
        let run = train_student(&strong, &[], &val, &unet, false, &cfg).unwrap();
        assert_eq!(run.trace.len(), 4);
        assert!(run.trace.iter().all(|r| r.l_loc == 0.0));

        let pseudo = vec![tiny_case(3, true)];
        let run = train_student(&strong, &pseudo, &val, &unet, true, &cfg).unwrap();
        assert!(run.trace.iter().all(|r| r.l_loc > 0.0));
        assert!(run.best_val_dice.is_finite());

        assert!(matches!(
            train_student(&[], &[], &val, &unet, true, &cfg),
            Err(TrainError::EmptyMixture)
        ));
    }

    #[test]
    fn fixed_seed_reproduces_student_trace() {
        let unet = UNetConfig { base_channels: 4, ..UNetConfig::default() };
        let strong = vec![tiny_case(4, false)];
        let pseudo = vec![tiny_case(5, true)];
        let cfg = tiny_cfg(3);
        let r1 = train_student(&strong, &pseudo, &[], &unet, true, &cfg).unwrap();
        let r2 = train_student(&strong, &pseudo, &[], &unet, true, &cfg).unwrap();
        let t1: Vec<(f64, f64)> = r1.trace.iter().map(|t| (t.l_seg, t.l_loc)).collect();
        let t2: Vec<(f64, f64)> = r2.trace.iter().map(|t| (t.l_seg, t.l_loc)).collect();
        assert_eq!(t1, t2);
        assert_eq!(r1.best_params, r2.best_params);
    }

    #[test]
    fn balanced_mixture_alternates_sets() {
        let unet = UNetConfig { base_channels: 4, ..UNetConfig::default() };
        let strong = vec![tiny_case(6, false)];
        let pseudo = vec![tiny_case(7, true)];
        let mut cfg = tiny_cfg(2);
        cfg.balance_mixture = true;
        let run = train_student(&strong, &pseudo, &[], &unet, true, &cfg).unwrap();
        assert_eq!(run.trace.len(), 2);
    }
}
