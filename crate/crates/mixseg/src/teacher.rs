//! Teacher annotator: a U-Net whose per-scale encoder skip features are
//! reweighted by hierarchical organ-to-lesion (O2L) residual attention
//! driven by rasterized box masks. Produces soft pseudo-labels on the
//! weak set.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::store::CaseData;
use crate::data::{boxes_from_mask, BoxSet, CtVolume, SegMask};
use crate::eval::{self, sweep_with};
use crate::ingest::{self, render_box_pyramid, BoxMaskPyramid};
use crate::nn::{
    concat_channels, join, softmax_head, BatchNorm2d, Conv2d, Decoder, Encoder, Mode,
    ParamVisitor, Scalar, Sigmoid, Tensor, UNetConfig, Visit,
};
use crate::train::{cross_entropy, lr_at, CeTarget, Sgd, TrainConfig, TrainError};
use crate::util::derive_rng;

/// Attention wiring of the teacher; the non-default variants reproduce the
/// ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherVariant {
    /// Hierarchical organ-then-lesion gates, each with a residual shortcut.
    #[default]
    Full,
    /// Both gates applied multiplicatively without the identity shortcut.
    AttentionNoShortcut,
    /// Organ and lesion masks concatenated into one 2-channel gate input,
    /// single residual stage.
    MultiChannelInput,
    /// Plain U-Net; box masks unused.
    NoAttention,
}

/// Gate convolution stack: two 3x3 convolutions with batch normalization
/// between, then a sigmoid. Maps a mask (1 or 2 channels) to per-channel,
/// per-pixel weighting scores.
pub struct GateStack<S: Scalar> {
    conv0: Conv2d<S>,
    bn: BatchNorm2d<S>,
    conv1: Conv2d<S>,
    sigmoid: Sigmoid<S>,
}

impl<S: Scalar> GateStack<S> {
    fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        GateStack {
            conv0: Conv2d::new(in_ch, out_ch, 3, rng),
            bn: BatchNorm2d::new(out_ch),
            conv1: Conv2d::new(out_ch, out_ch, 3, rng),
            sigmoid: Sigmoid::new(),
        }
    }

    fn forward(&mut self, mask: &Tensor<S>, mode: Mode) -> Tensor<S> {
        let t = self.conv0.forward(mask);
        let t = self.bn.forward(t, mode);
        let t = self.conv1.forward(&t);
        self.sigmoid.forward(t)
    }

    fn backward(&mut self, dgate: Tensor<S>) {
        let d = self.sigmoid.backward(dgate);
        let d = self.conv1.backward(&d);
        let d = self.bn.backward(d);
        // masks are data, their gradient is discarded
        let _ = self.conv0.backward(&d);
    }
}

impl<S: Scalar> Visit<S> for GateStack<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.conv0.visit(&join(prefix, "conv0"), v);
        self.bn.visit(&join(prefix, "bn"), v);
        self.conv1.visit(&join(prefix, "conv1"), v);
    }
}

/// One scale of O2L attention. Caches the stage inputs and gates for the
/// backward pass.
pub struct O2LAttention<S: Scalar> {
    variant: TeacherVariant,
    organ_gate: Option<GateStack<S>>,
    lesion_gate: Option<GateStack<S>>,
    f_in: Tensor<S>,
    g_og: Tensor<S>,
    f_og: Tensor<S>,
    g_le: Tensor<S>,
}

impl<S: Scalar> O2LAttention<S> {
    pub fn new(variant: TeacherVariant, channels: usize, rng: &mut impl Rng) -> Self {
        let (organ_gate, lesion_gate) = match variant {
            TeacherVariant::Full | TeacherVariant::AttentionNoShortcut => (
                Some(GateStack::new(1, channels, rng)),
                Some(GateStack::new(1, channels, rng)),
            ),
            TeacherVariant::MultiChannelInput => (Some(GateStack::new(2, channels, rng)), None),
            TeacherVariant::NoAttention => (None, None),
        };
        O2LAttention {
            variant,
            organ_gate,
            lesion_gate,
            f_in: Tensor::zeros((0, 0, 0, 0)),
            g_og: Tensor::zeros((0, 0, 0, 0)),
            f_og: Tensor::zeros((0, 0, 0, 0)),
            g_le: Tensor::zeros((0, 0, 0, 0)),
        }
    }

    /// `f_og = f_in + sigma(conv_og(b_og)) * f_in`, then
    /// `f_out = f_og + sigma(conv_le(b_le)) * f_og` (variant-dependent).
    pub fn forward(
        &mut self,
        f_in: &Tensor<S>,
        organ_mask: &Tensor<S>,
        lesion_mask: &Tensor<S>,
        mode: Mode,
    ) -> Tensor<S> {
        let (_, _, fh, fw) = f_in.dim();
        assert_eq!(
            (organ_mask.dim().2, organ_mask.dim().3, lesion_mask.dim().2, lesion_mask.dim().3),
            (fh, fw, fh, fw),
            "mask scale does not match features"
        );
        match self.variant {
            TeacherVariant::NoAttention => f_in.clone(),
            TeacherVariant::MultiChannelInput => {
                let stacked = concat_channels(&[organ_mask, lesion_mask]);
                let g = self.organ_gate.as_mut().unwrap().forward(&stacked, mode);
                self.f_in = f_in.clone();
                self.g_og = g.clone();
                let mut out = f_in.clone();
                out.zip_mut_with(&g, |o, gv| *o = *o + *gv * *o);
                out
            }
            TeacherVariant::Full => {
                let g_og = self.organ_gate.as_mut().unwrap().forward(organ_mask, mode);
                let mut f_og = f_in.clone();
                f_og.zip_mut_with(&g_og, |o, g| *o = *o + *g * *o);
                let g_le = self.lesion_gate.as_mut().unwrap().forward(lesion_mask, mode);
                let mut out = f_og.clone();
                out.zip_mut_with(&g_le, |o, g| *o = *o + *g * *o);
                self.f_in = f_in.clone();
                self.g_og = g_og;
                self.f_og = f_og;
                self.g_le = g_le;
                out
            }
            TeacherVariant::AttentionNoShortcut => {
                let g_og = self.organ_gate.as_mut().unwrap().forward(organ_mask, mode);
                let mut f_og = f_in.clone();
                f_og.zip_mut_with(&g_og, |o, g| *o = *g * *o);
                let g_le = self.lesion_gate.as_mut().unwrap().forward(lesion_mask, mode);
                let mut out = f_og.clone();
                out.zip_mut_with(&g_le, |o, g| *o = *g * *o);
                self.f_in = f_in.clone();
                self.g_og = g_og;
                self.f_og = f_og;
                self.g_le = g_le;
                out
            }
        }
    }

    /// Backpropagate through both stages; gate parameter gradients
    /// accumulate in the stacks. Returns the gradient w.r.t. `f_in`.
    pub fn backward(&mut self, dout: &Tensor<S>) -> Tensor<S> {
        match self.variant {
            TeacherVariant::NoAttention => dout.clone(),
            TeacherVariant::MultiChannelInput => {
                let mut dg = dout.clone();
                dg.zip_mut_with(&self.f_in, |d, f| *d = *d * *f);
                self.organ_gate.as_mut().unwrap().backward(dg);
                let mut dx = dout.clone();
                dx.zip_mut_with(&self.g_og, |d, g| *d = *d * (S::one() + *g));
                dx
            }
            TeacherVariant::Full => {
                let mut dg_le = dout.clone();
                dg_le.zip_mut_with(&self.f_og, |d, f| *d = *d * *f);
                self.lesion_gate.as_mut().unwrap().backward(dg_le);
                let mut df_og = dout.clone();
                df_og.zip_mut_with(&self.g_le, |d, g| *d = *d * (S::one() + *g));
                let mut dg_og = df_og.clone();
                dg_og.zip_mut_with(&self.f_in, |d, f| *d = *d * *f);
                self.organ_gate.as_mut().unwrap().backward(dg_og);
                let mut dx = df_og;
                dx.zip_mut_with(&self.g_og, |d, g| *d = *d * (S::one() + *g));
                dx
            }
            TeacherVariant::AttentionNoShortcut => {
                let mut dg_le = dout.clone();
                dg_le.zip_mut_with(&self.f_og, |d, f| *d = *d * *f);
                self.lesion_gate.as_mut().unwrap().backward(dg_le);
                let mut df_og = dout.clone();
                df_og.zip_mut_with(&self.g_le, |d, g| *d = *d * *g);
                let mut dg_og = df_og.clone();
                dg_og.zip_mut_with(&self.f_in, |d, f| *d = *d * *f);
                self.organ_gate.as_mut().unwrap().backward(dg_og);
                let mut dx = df_og;
                dx.zip_mut_with(&self.g_og, |d, g| *d = *d * *g);
                dx
            }
        }
    }
}

impl<S: Scalar> Visit<S> for O2LAttention<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        if let Some(g) = &mut self.organ_gate {
            g.visit(&join(prefix, "organ"), v);
        }
        if let Some(g) = &mut self.lesion_gate {
            g.visit(&join(prefix, "lesion"), v);
        }
    }
}

/// Box mask pyramids of a batch, stacked per scale as `[B, 1, h_j, w_j]`.
pub fn stack_pyramids<S: Scalar>(pyramids: &[&BoxMaskPyramid]) -> Vec<(Tensor<S>, Tensor<S>)> {
    let scales = pyramids[0].scales();
    (0..scales)
        .map(|j| {
            let (h, w) = pyramids[0].organ[j].dim();
            let mut organ = Tensor::<S>::zeros((pyramids.len(), 1, h, w));
            let mut lesion = Tensor::<S>::zeros((pyramids.len(), 1, h, w));
            for (b, p) in pyramids.iter().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        organ[(b, 0, y, x)] = S::of_f32(p.organ[j][(y, x)]);
                        lesion[(b, 0, y, x)] = S::of_f32(p.lesion[j][(y, x)]);
                    }
                }
            }
            (organ, lesion)
        })
        .collect()
}

/// Teacher network: encoder, per-scale O2L attention on the skip features,
/// decoder.
pub struct TeacherNet<S: Scalar> {
    pub cfg: UNetConfig,
    pub variant: TeacherVariant,
    pub enc: Encoder<S>,
    pub attn: Vec<O2LAttention<S>>,
    pub dec: Decoder<S>,
}

impl<S: Scalar> TeacherNet<S> {
    pub fn new(cfg: &UNetConfig, variant: TeacherVariant, rng: &mut impl Rng) -> Self {
        cfg.validate().expect("invalid unet config");
        let enc = Encoder::new(cfg, rng);
        let attn = (1..=cfg.scales)
            .map(|j| O2LAttention::new(variant, cfg.channels_at(j), rng))
            .collect();
        let dec = Decoder::new(cfg, rng);
        TeacherNet { cfg: cfg.clone(), variant, enc, attn, dec }
    }

    /// Forward with box masks; identical to the plain U-Net except each
    /// encoder skip feature passes through its scale's attention first.
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        pyramid: &[(Tensor<S>, Tensor<S>)],
        mode: Mode,
    ) -> Result<Tensor<S>, TrainError> {
        let (_, _, h, w) = x.dim();
        self.cfg.check_spatial(h, w)?;
        if pyramid.len() != self.cfg.scales {
            return Err(crate::nn::NnError::ShapeMismatch {
                expected: format!("{} pyramid scales", self.cfg.scales),
                got: format!("{}", pyramid.len()),
            }
            .into());
        }
        let feats = self.enc.forward(x, mode);
        let gated: Vec<Tensor<S>> = feats
            .iter()
            .zip(self.attn.iter_mut())
            .zip(pyramid.iter())
            .map(|((f, a), (og, le))| a.forward(f, og, le, mode))
            .collect();
        let (logits, _) = self.dec.forward(&gated, mode);
        Ok(logits)
    }

    pub fn backward(&mut self, dlogits: &Tensor<S>) {
        let dgated = self.dec.backward(dlogits, None);
        let dfeats: Vec<Tensor<S>> = dgated
            .iter()
            .zip(self.attn.iter_mut())
            .map(|(d, a)| a.backward(d))
            .collect();
        let _ = self.enc.backward(dfeats);
    }
}

impl<S: Scalar> Visit<S> for TeacherNet<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.enc.visit(prefix, v);
        for (j, a) in self.attn.iter_mut().enumerate() {
            a.visit(&join(prefix, &format!("attn{}", j + 1)), v);
        }
        self.dec.visit(prefix, v);
    }
}

/// Slice-wise teacher inference over a whole volume, conditioning each
/// slice on its own boxes.
pub fn sweep_infer_teacher(
    net: &mut TeacherNet<f32>,
    volume: &CtVolume,
    boxes: &BoxSet,
    batch: usize,
) -> SegMask {
    let (_, h, w) = volume.shape();
    let scales = net.cfg.scales;
    sweep_with(volume, batch, |x, idx| {
        let pyramids: Vec<BoxMaskPyramid> = idx
            .iter()
            .map(|&d| render_box_pyramid(boxes.on_slice(d), (h, w), scales))
            .collect();
        let refs: Vec<&BoxMaskPyramid> = pyramids.iter().collect();
        let stacked = stack_pyramids(&refs);
        net.forward(x, &stacked, Mode::Eval).expect("teacher forward")
    })
}

/// Mean validation Dice (liver and lesion averaged) of a teacher over
/// held-out cases with dense labels.
pub fn validate_teacher(net: &mut TeacherNet<f32>, cases: &[CaseData]) -> (f64, f64, f64) {
    let preds: Vec<SegMask> = cases
        .iter()
        .map(|c| sweep_infer_teacher(net, &c.volume, &c.boxes, 4))
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

/// One row of the loss/metric trace CSV.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub lr: f64,
    pub l_seg: f64,
    pub l_loc: f64,
    pub l_s: f64,
    pub val_dice_liver: Option<f64>,
    pub val_dice_lesion: Option<f64>,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,lr,L_seg,L_loc,L_s,val_dice_liver,val_dice_lesion\n");
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{:.6},{},{}\n",
            r.epoch,
            r.lr,
            r.l_seg,
            r.l_loc,
            r.l_s,
            fmt(r.val_dice_liver),
            fmt(r.val_dice_lesion)
        ));
    }
    out
}

pub struct TeacherRun {
    pub net: TeacherNet<f32>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub trace: Vec<TraceRow>,
    /// Parameters of the best-validation checkpoint (flat, visit order).
    pub best_params: Vec<f32>,
}

struct TrainItem {
    image: ndarray::Array3<f32>,
    label: ndarray::Array2<u8>,
    boxes: Vec<crate::data::Box2D>,
}

/// Assemble one epoch of training triplets: one random crop per case, all
/// centers with full 3-slice context, augmentation applied per triplet.
fn epoch_items(
    cases: &[CaseData],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<TrainItem>, TrainError> {
    let mut items = Vec::new();
    for case in cases {
        let mut rng = derive_rng(
            cfg.seed,
            &format!("epoch/{}/{}/{:?}", epoch, case.volume.case_id, cfg.role),
        );
        let mask = case.mask.as_ref().expect("strong case needs a mask");
        let crop = ingest::crop_subvolume(&case.volume, Some(mask), &case.boxes, cfg.crop, &mut rng);
        let crop_mask = crop.mask.as_ref().unwrap();
        for center in crop.center_range() {
            let triplet = ingest::triplet_at(&crop.volume, center);
            let label = crop_mask.labels.index_axis(Axis(0), center).to_owned();
            let boxes = crop.boxes.on_slice(center).to_vec();
            let draw = cfg.augment.draw(&mut rng);
            let (image, label, _, boxes) =
                ingest::augment(&triplet, Some(&label), None, &boxes, &draw);
            items.push(TrainItem { image: image.channels, label: label.unwrap(), boxes });
        }
    }
    Ok(items)
}

/// Optimize the teacher on the strong set with pixel-wise cross-entropy.
/// Returns the best-validation checkpoint (mean of liver and lesion Dice)
/// and the full loss trace. Deterministic for a fixed config.
pub fn train_teacher(
    strong: &[CaseData],
    val: &[CaseData],
    unet_cfg: &UNetConfig,
    variant: TeacherVariant,
    cfg: &TrainConfig,
) -> Result<TeacherRun, TrainError> {
    assert!(!strong.is_empty(), "teacher training needs a nonempty strong set");
    let mut net = TeacherNet::<f32>::new(unet_cfg, variant, &mut derive_rng(cfg.seed, "teacher-init"));
    let mut opt = Sgd::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY, net.flat_params());
    let (_, h, w) = (cfg.crop.0, cfg.crop.1, cfg.crop.2);

    for epoch in 1..=cfg.epochs {
        let mut items = epoch_items(strong, cfg, epoch)?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, &format!("teacher-shuffle/{epoch}"));
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut shuffle_rng);
        let lr = lr_at(epoch, cfg);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bs = chunk.len();
            let mut x = Array4::<f32>::zeros((bs, 3, h, w));
            let mut target = ndarray::Array3::<u8>::zeros((bs, h, w));
            let mut pyramids = Vec::with_capacity(bs);
            for (b, &i) in chunk.iter().enumerate() {
                let item = &mut items[i];
                x.index_axis_mut(Axis(0), b).assign(&item.image);
                target.index_axis_mut(Axis(0), b).assign(&item.label);
                pyramids.push(render_box_pyramid(&item.boxes, (h, w), unet_cfg.scales));
            }
            let refs: Vec<&BoxMaskPyramid> = pyramids.iter().collect();
            let stacked = stack_pyramids(&refs);
            net.zero_grad();
            let logits = net.forward(&x, &stacked, Mode::Train)?;
            let (loss, dlogits) = cross_entropy(&logits, &CeTarget::Hard(&target), None)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite("loss", format!("teacher epoch {epoch}")));
            }
            net.backward(&dlogits);
            opt.step(&mut net, lr, cfg.momentum)?;
            epoch_loss += loss;
            batches += 1;
        }
        epoch_loss /= batches.max(1) as f64;

        let mut row = TraceRow {
            epoch,
            lr,
            l_seg: epoch_loss,
            l_loc: 0.0,
            l_s: epoch_loss,
            val_dice_liver: None,
            val_dice_lesion: None,
        };
        if !val.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs) {
            let (liver, lesion, mean) = validate_teacher(&mut net, val);
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
    Ok(TeacherRun {
        net,
        best_epoch: best.0,
        best_val_dice: best.1,
        trace,
        best_params: best.2,
    })
}

/// Run the trained teacher over every slice of each weak case and store
/// the per-pixel softmax as the soft label, `[3, D, H, W]` in f32.
pub fn generate_pseudo_labels(
    net: &mut TeacherNet<f32>,
    weak: &[CaseData],
) -> Vec<(String, Array4<f32>)> {
    weak.iter()
        .map(|case| {
            let (d, h, w) = case.volume.shape();
            let mut soft = Array4::<f32>::zeros((3, d, h, w));
            let scales = net.cfg.scales;
            let mut start = 0usize;
            while start < d {
                let end = (start + 4).min(d);
                let idx: Vec<usize> = (start..end).collect();
                let mut x = Array4::<f32>::zeros((idx.len(), 3, h, w));
                for (b, &di) in idx.iter().enumerate() {
                    x.index_axis_mut(Axis(0), b)
                        .assign(&ingest::triplet_at(&case.volume, di).channels);
                }
                let pyramids: Vec<BoxMaskPyramid> = idx
                    .iter()
                    .map(|&di| render_box_pyramid(case.boxes.on_slice(di), (h, w), scales))
                    .collect();
                let refs: Vec<&BoxMaskPyramid> = pyramids.iter().collect();
                let logits = net
                    .forward(&x, &stack_pyramids(&refs), Mode::Eval)
                    .expect("teacher forward");
                let probs = softmax_head(&logits);
                for (b, &di) in idx.iter().enumerate() {
                    for c in 0..3 {
                        for y in 0..h {
                            for xx in 0..w {
                                soft[(c, di, y, xx)] = probs[(b, c, y, xx)];
                            }
                        }
                    }
                }
                start = end;
            }
            (case.volume.case_id.clone(), soft)
        })
        .collect()
}

/// Derive per-slice boxes for cases that have dense labels but no stored
/// boxes (validation phantoms).
pub fn ensure_boxes(case: &mut CaseData) {
    if case.boxes.is_empty() {
        if let Some(mask) = &case.mask {
            let (d, _, _) = mask.labels.dim();
            for s in 0..d {
                for b in boxes_from_mask(&mask.labels.index_axis(Axis(0), s), s) {
                    case.boxes.push(b);
                }
            }
        }
    }
}
