//! U-shaped encoder-decoder backbone. The encoder and decoder are separate
//! pieces so callers can transform the per-scale skip features (teacher
//! attention) or tap the decoder features (student localization branch)
//! between the two halves.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{concat_channels, split_channels, BatchNorm2d, Conv2d, MaxPool2x2, Relu, Upsample2x};
use super::{join, Mode, NnError, ParamVisitor, Scalar, Tensor, Visit};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UNetConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub norm: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            scales: 4,
            base_channels: 32,
            in_channels: 3,
            out_classes: 3,
            norm: true,
        }
    }
}

impl UNetConfig {
    /// Channel count of the encoder feature at 1-based scale `j`; doubles per scale.
    pub fn channels_at(&self, j: usize) -> usize {
        self.base_channels << (j - 1)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        // the attention pyramid is defined for exactly 4 scales
        if self.scales != 4 {
            return Err(NnError::Format(format!("scales must be 4, got {}", self.scales)));
        }
        Ok(())
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<(), NnError> {
        let div = 1usize << (self.scales - 1);
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(NnError::IndivisibleSpatial { h, w, div, scales: self.scales });
        }
        Ok(())
    }
}

/// conv 3x3 -> [BN] -> ReLU -> conv 3x3 -> [BN] -> ReLU
pub struct ConvBlock<S: Scalar> {
    conv0: Conv2d<S>,
    bn0: Option<BatchNorm2d<S>>,
    relu0: Relu<S>,
    conv1: Conv2d<S>,
    bn1: Option<BatchNorm2d<S>>,
    relu1: Relu<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(in_ch: usize, out_ch: usize, norm: bool, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv0: Conv2d::new(in_ch, out_ch, 3, rng),
            bn0: norm.then(|| BatchNorm2d::new(out_ch)),
            relu0: Relu::new(),
            conv1: Conv2d::new(out_ch, out_ch, 3, rng),
            bn1: norm.then(|| BatchNorm2d::new(out_ch)),
            relu1: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Tensor<S> {
        let mut t = self.conv0.forward(x);
        if let Some(bn) = &mut self.bn0 {
            t = bn.forward(t, mode);
        }
        t = self.relu0.forward(t);
        let mut t = self.conv1.forward(&t);
        if let Some(bn) = &mut self.bn1 {
            t = bn.forward(t, mode);
        }
        self.relu1.forward(t)
    }

    pub fn backward(&mut self, dy: Tensor<S>) -> Tensor<S> {
        let mut d = self.relu1.backward(dy);
        if let Some(bn) = &mut self.bn1 {
            d = bn.backward(d);
        }
        let mut d = self.conv1.backward(&d);
        d = self.relu0.backward(d);
        if let Some(bn) = &mut self.bn0 {
            d = bn.backward(d);
        }
        self.conv0.backward(&d)
    }
}

impl<S: Scalar> Visit<S> for ConvBlock<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.conv0.visit(&join(prefix, "conv0"), v);
        if let Some(bn) = &mut self.bn0 {
            bn.visit(&join(prefix, "bn0"), v);
        }
        self.conv1.visit(&join(prefix, "conv1"), v);
        if let Some(bn) = &mut self.bn1 {
            bn.visit(&join(prefix, "bn1"), v);
        }
    }
}

/// Four-scale encoder. `forward` returns the per-scale features
/// `[f1, f2, f3, f4]` (f4 is the bottleneck); `backward` takes one gradient
/// per feature (skip contributions already summed in by the caller).
pub struct Encoder<S: Scalar> {
    pub cfg: UNetConfig,
    blocks: Vec<ConvBlock<S>>,
    pools: Vec<MaxPool2x2>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: &UNetConfig, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for j in 1..=cfg.scales {
            let out_ch = cfg.channels_at(j);
            blocks.push(ConvBlock::new(in_ch, out_ch, cfg.norm, rng));
            in_ch = out_ch;
        }
        let pools = (0..cfg.scales - 1).map(|_| MaxPool2x2::new()).collect();
        Encoder { cfg: cfg.clone(), blocks, pools }
    }

    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Vec<Tensor<S>> {
        let mut feats = Vec::with_capacity(self.cfg.scales);
        let mut t = self.blocks[0].forward(x, mode);
        feats.push(t.clone());
        for j in 1..self.cfg.scales {
            t = self.pools[j - 1].forward(&t);
            t = self.blocks[j].forward(&t, mode);
            feats.push(t.clone());
        }
        feats
    }

    pub fn backward(&mut self, mut dfeats: Vec<Tensor<S>>) -> Tensor<S> {
        assert_eq!(dfeats.len(), self.cfg.scales);
        let top = dfeats.pop().unwrap();
        let mut d = self.blocks[self.cfg.scales - 1].backward(top);
        for j in (0..self.cfg.scales - 1).rev() {
            let mut df = self.pools[j].backward::<S>(&d);
            df += &dfeats[j];
            d = self.blocks[j].backward(df);
        }
        d
    }
}

impl<S: Scalar> Visit<S> for Encoder<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        for (j, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("enc{}", j + 1)), v);
        }
    }
}

/// bilinear up x2 -> concat skip -> ConvBlock
pub struct UpBlock<S: Scalar> {
    up: Upsample2x,
    block: ConvBlock<S>,
    skip_ch: usize,
    deep_ch: usize,
}

impl<S: Scalar> UpBlock<S> {
    fn new(deep_ch: usize, skip_ch: usize, out_ch: usize, norm: bool, rng: &mut impl Rng) -> Self {
        UpBlock {
            up: Upsample2x::new(),
            block: ConvBlock::new(deep_ch + skip_ch, out_ch, norm, rng),
            skip_ch,
            deep_ch,
        }
    }

    fn forward(&mut self, deep: &Tensor<S>, skip: &Tensor<S>, mode: Mode) -> Tensor<S> {
        let up = self.up.forward(deep);
        let cat = concat_channels(&[skip, &up]);
        self.block.forward(&cat, mode)
    }

    /// Returns `(d_skip, d_deep)`.
    fn backward(&mut self, dy: Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let dcat = self.block.backward(dy);
        let mut parts = split_channels(&dcat, &[self.skip_ch, self.deep_ch]);
        let dup = parts.pop().unwrap();
        let dskip = parts.pop().unwrap();
        (dskip, self.up.backward(&dup))
    }
}

impl<S: Scalar> Visit<S> for UpBlock<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.block.visit(prefix, v);
    }
}

/// Decoder-path features exposed for the localization branch, ordered by
/// 1-based scale: `taps[0]` full resolution, `taps[3]` the bottleneck input.
pub type DecoderTaps<S> = Vec<Tensor<S>>;

/// Decoder: three up blocks plus a 1x1 classification head.
pub struct Decoder<S: Scalar> {
    pub cfg: UNetConfig,
    ups: Vec<UpBlock<S>>,
    head: Conv2d<S>,
}

impl<S: Scalar> Decoder<S> {
    pub fn new(cfg: &UNetConfig, rng: &mut impl Rng) -> Self {
        let mut ups = Vec::new();
        // built deepest-first: (8C -> 4C), (4C -> 2C), (2C -> C)
        for j in (1..cfg.scales).rev() {
            let deep_ch = cfg.channels_at(j + 1);
            let skip_ch = cfg.channels_at(j);
            ups.push(UpBlock::new(deep_ch, skip_ch, skip_ch, cfg.norm, rng));
        }
        let head = Conv2d::new(cfg.base_channels, cfg.out_classes, 1, rng);
        Decoder { cfg: cfg.clone(), ups, head }
    }

    /// `feats` are the (possibly transformed) encoder features `[f1..f4]`.
    pub fn forward(&mut self, feats: &[Tensor<S>], mode: Mode) -> (Tensor<S>, DecoderTaps<S>) {
        let scales = self.cfg.scales;
        assert_eq!(feats.len(), scales);
        let mut taps = vec![Tensor::zeros((0, 0, 0, 0)); scales];
        let mut g = feats[scales - 1].clone();
        taps[scales - 1] = g.clone();
        for (i, j) in (1..scales).rev().enumerate() {
            g = self.ups[i].forward(&g, &feats[j - 1], mode);
            taps[j - 1] = g.clone();
        }
        (self.head.forward(&g), taps)
    }

    /// Backward from the head gradient plus optional extra gradients flowing
    /// into the decoder taps (from the localization branch). Returns the
    /// gradients w.r.t. the input features `[f1..f4]`.
    pub fn backward(
        &mut self,
        dlogits: &Tensor<S>,
        extra_taps: Option<&[Tensor<S>]>,
    ) -> Vec<Tensor<S>> {
        let scales = self.cfg.scales;
        let mut dfeats = vec![Tensor::zeros((0, 0, 0, 0)); scales];
        let mut dg = self.head.backward(dlogits);
        for (i, j) in (1..scales).rev().enumerate().rev() {
            if let Some(extra) = extra_taps {
                dg += &extra[j - 1];
            }
            let (dskip, ddeep) = self.ups[i].backward(dg);
            dfeats[j - 1] = dskip;
            dg = ddeep;
        }
        if let Some(extra) = extra_taps {
            dg += &extra[scales - 1];
        }
        dfeats[scales - 1] = dg;
        dfeats
    }
}

impl<S: Scalar> Visit<S> for Decoder<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            let j = self.cfg.scales - 1 - i;
            u.visit(&join(prefix, &format!("up{j}")), v);
        }
        self.head.visit(&join(prefix, "head"), v);
    }
}

/// Plain U-Net: encoder plus decoder with untouched skip connections.
pub struct UNet<S: Scalar> {
    pub cfg: UNetConfig,
    pub enc: Encoder<S>,
    pub dec: Decoder<S>,
}

impl<S: Scalar> UNet<S> {
    pub fn new(cfg: &UNetConfig, rng: &mut impl Rng) -> Self {
        cfg.validate().expect("invalid unet config");
        UNet { cfg: cfg.clone(), enc: Encoder::new(cfg, rng), dec: Decoder::new(cfg, rng) }
    }

    /// Returns `(logits, encoder_feats, decoder_taps)`.
    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>, DecoderTaps<S>), NnError> {
        let (_, _, h, w) = x.dim();
        self.cfg.check_spatial(h, w)?;
        let feats = self.enc.forward(x, mode);
        let (logits, taps) = self.dec.forward(&feats, mode);
        Ok((logits, feats, taps))
    }

    /// Backward through decoder and encoder; returns input gradient.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Tensor<S> {
        let dfeats = self.dec.backward(dlogits, None);
        self.enc.backward(dfeats)
    }
}

impl<S: Scalar> Visit<S> for UNet<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        self.enc.visit(prefix, v);
        self.dec.visit(prefix, v);
    }
}
