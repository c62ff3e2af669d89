//! Student segmentor: the plain U-Net backbone plus a localization branch
//! that aggregates every decoder scale to full resolution through subpixel
//! convolution + pixel shuffle and predicts the 3-class box-region
//! partition. The branch exists only during training and is discarded for
//! inference.

use ndarray::Array4;
use rand::Rng;

use crate::data::{CtVolume, SegMask};
use crate::eval::sweep_with;
use crate::nn::{
    concat_channels, join, pixel_shuffle_down, pixel_shuffle_up, split_channels, Conv2d, Decoder,
    Encoder, Mode, ParamVisitor, Relu, Scalar, Tensor, UNetConfig, Visit,
};
use crate::train::TrainError;

/// Per-scale subpixel aggregation: a 1x1 convolution producing `A * r^2`
/// channels followed by pixel shuffle with `r = 2^(j-1)`, bringing every
/// decoder feature to full resolution with `A` channels. Spatial context
/// comes from the 3x3 fusion convolution after concatenation.
struct SubpixelAgg<S: Scalar> {
    conv: Conv2d<S>,
    relu: Relu<S>,
    r: usize,
}

impl<S: Scalar> SubpixelAgg<S> {
    fn new(in_ch: usize, agg_ch: usize, r: usize, rng: &mut impl Rng) -> Self {
        SubpixelAgg { conv: Conv2d::new(in_ch, agg_ch * r * r, 1, rng), relu: Relu::new(), r }
    }

    fn forward(&mut self, feat: &Tensor<S>) -> Tensor<S> {
        let t = self.conv.forward(feat);
        let t = self.relu.forward(t);
        pixel_shuffle_up(&t, self.r).expect("channel count divisible by r^2")
    }

    fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let d = pixel_shuffle_down(dy, self.r);
        let d = self.relu.backward(d);
        self.conv.backward(&d)
    }
}

impl<S: Scalar> Visit<S> for SubpixelAgg<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.conv.visit(prefix, v);
    }
}

/// The training-only localization head over the decoder taps.
pub struct LocalizationBranch<S: Scalar> {
    aggs: Vec<SubpixelAgg<S>>,
    fusion: Conv2d<S>,
    fusion_relu: Relu<S>,
    head: Conv2d<S>,
    agg_ch: usize,
}

impl<S: Scalar> LocalizationBranch<S> {
    pub fn new(cfg: &UNetConfig, rng: &mut impl Rng) -> Self {
        let agg_ch = cfg.base_channels;
        let aggs = (1..=cfg.scales)
            .map(|j| SubpixelAgg::new(cfg.channels_at(j), agg_ch, 1 << (j - 1), rng))
            .collect();
        LocalizationBranch {
            aggs,
            fusion: Conv2d::new(agg_ch * cfg.scales, agg_ch, 3, rng),
            fusion_relu: Relu::new(),
            head: Conv2d::new(agg_ch, cfg.out_classes, 1, rng),
            agg_ch,
        }
    }

    /// Aggregate the decoder taps (ordered scale 1..4) into loc logits at
    /// full resolution.
    pub fn forward(&mut self, taps: &[Tensor<S>]) -> Tensor<S> {
        let full: Vec<Tensor<S>> = taps
            .iter()
            .zip(self.aggs.iter_mut())
            .map(|(t, a)| a.forward(t))
            .collect();
        let refs: Vec<&Tensor<S>> = full.iter().collect();
        let cat = concat_channels(&refs);
        let t = self.fusion.forward(&cat);
        let t = self.fusion_relu.forward(t);
        self.head.forward(&t)
    }

    /// Returns gradients w.r.t. each decoder tap.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Vec<Tensor<S>> {
        let d = self.head.backward(dlogits);
        let d = self.fusion_relu.backward(d);
        let dcat = self.fusion.backward(&d);
        let sizes = vec![self.agg_ch; self.aggs.len()];
        split_channels(&dcat, &sizes)
            .into_iter()
            .zip(self.aggs.iter_mut())
            .map(|(dfull, a)| a.backward(&dfull))
            .collect()
    }
}

impl<S: Scalar> Visit<S> for LocalizationBranch<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        for (i, a) in self.aggs.iter_mut().enumerate() {
            a.visit(&join(prefix, &format!("agg{}", i + 1)), v);
        }
        self.fusion.visit(&join(prefix, "fusion"), v);
        self.head.visit(&join(prefix, "head"), v);
    }
}

/// Student network. `loc` is present only while training with the
/// localization loss; inference never touches it.
pub struct StudentNet<S: Scalar> {
    pub cfg: UNetConfig,
    pub enc: Encoder<S>,
    pub dec: Decoder<S>,
    pub loc: Option<LocalizationBranch<S>>,
}

impl<S: Scalar> StudentNet<S> {
    pub fn new(cfg: &UNetConfig, with_loc: bool, rng: &mut impl Rng) -> Self {
        cfg.validate().expect("invalid unet config");
        StudentNet {
            cfg: cfg.clone(),
            enc: Encoder::new(cfg, rng),
            dec: Decoder::new(cfg, rng),
            loc: with_loc.then(|| LocalizationBranch::new(cfg, rng)),
        }
    }

    /// Training forward: segmentation logits plus localization logits when
    /// the branch is present.
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Option<Tensor<S>>), TrainError> {
        let (_, _, h, w) = x.dim();
        self.cfg.check_spatial(h, w)?;
        let feats = self.enc.forward(x, mode);
        let (seg, taps) = self.dec.forward(&feats, mode);
        let loc = self.loc.as_mut().map(|l| l.forward(&taps));
        Ok((seg, loc))
    }

    /// Backward from both heads; `dloc` must be present iff the branch is.
    pub fn backward(&mut self, dseg: &Tensor<S>, dloc: Option<&Tensor<S>>) {
        let extra = match (self.loc.as_mut(), dloc) {
            (Some(branch), Some(d)) => Some(branch.backward(d)),
            (None, None) => None,
            _ => panic!("localization gradient presence must match the branch"),
        };
        let dfeats = self.dec.backward(dseg, extra.as_deref());
        let _ = self.enc.backward(dfeats);
    }

    /// Inference path: backbone only, eval mode, bit-identical to the
    /// segmentation output of `forward` and independent of `loc`.
    pub fn infer(&mut self, x: &Tensor<S>) -> Result<Tensor<S>, TrainError> {
        let (_, _, h, w) = x.dim();
        self.cfg.check_spatial(h, w)?;
        let feats = self.enc.forward(x, Mode::Eval);
        let (seg, _) = self.dec.forward(&feats, Mode::Eval);
        Ok(seg)
    }

    /// Drop the localization branch; inference output is unchanged.
    pub fn strip_loc(&mut self) {
        self.loc = None;
    }

    /// Parameter count of the inference path (backbone only).
    pub fn backbone_param_count(&mut self) -> usize {
        let mut n = 0usize;
        let mut count = |_: &str, kind: crate::nn::ParamKind, data: &mut [S], _: Option<&mut [S]>| {
            if kind == crate::nn::ParamKind::Param {
                n += data.len();
            }
        };
        self.enc.visit("", &mut count);
        self.dec.visit("", &mut count);
        n
    }
}

impl<S: Scalar> Visit<S> for StudentNet<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.enc.visit(prefix, v);
        self.dec.visit(prefix, v);
        if let Some(loc) = &mut self.loc {
            loc.visit(&join(prefix, "loc"), v);
        }
    }
}

/// Slice sweep over a volume with the inference path.
pub fn sweep_infer_student(net: &mut StudentNet<f32>, volume: &CtVolume, batch: usize) -> SegMask {
    sweep_with(volume, batch, |x: &Array4<f32>, _| net.infer(x).expect("student forward"))
}
