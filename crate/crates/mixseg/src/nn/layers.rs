//! Differentiable layers. Each layer caches what its backward pass needs
//! during `forward`; `backward` consumes the cache and accumulates parameter
//! gradients. Convolutions run as im2col + GEMM, parallel over the batch
//! with one fixed reduction order so results do not depend on thread count.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::{join, Mode, ParamKind, ParamVisitor, Scalar, Tensor, Visit};

fn gemm<S: Scalar>(alpha: S, a: &ArrayView2<S>, b: &ArrayView2<S>, beta: S, c: &mut ArrayViewMut2<S>) {
    ndarray::linalg::general_mat_mul(alpha, a, b, beta, c);
}

/// Dot product with eight fixed-order partial accumulators; vectorizes
/// without changing the summation order between runs.
fn dot8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = ai[l].mul_add(bi[l], acc[l]);
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    s01 + s23 + tail
}

/// Standard normal draw (Box-Muller), deterministic for a fixed rng stream.
pub(crate) fn randn(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Strided matrix views over raw buffers for the shifted-GEMM convolution.
fn view<S: Scalar>(buf: &[S], off: usize, shape: (usize, usize), strides: (usize, usize)) -> ArrayView2<'_, S> {
    debug_assert!(off + (shape.0 - 1) * strides.0 + (shape.1 - 1) * strides.1 < buf.len() + 1);
    unsafe { ArrayView2::from_shape_ptr(ndarray::ShapeBuilder::strides(shape, strides), buf.as_ptr().add(off)) }
}

fn view_mut<S: Scalar>(buf: &mut [S], off: usize, shape: (usize, usize), strides: (usize, usize)) -> ArrayViewMut2<'_, S> {
    debug_assert!(off + (shape.0 - 1) * strides.0 + (shape.1 - 1) * strides.1 < buf.len() + 1);
    unsafe { ArrayViewMut2::from_shape_ptr(ndarray::ShapeBuilder::strides(shape, strides), buf.as_mut_ptr().add(off)) }
}

/// Embed `[C, h, w]` planes into zero-padded `[C, h+2p, w+2p]` planes.
fn pad_planes<S: Scalar>(x: &[S], ch: usize, h: usize, w: usize, p: usize, out: &mut Vec<S>) {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    out.clear();
    out.resize(ch * ph * pw, S::zero());
    for c in 0..ch {
        for y in 0..h {
            let dst = c * ph * pw + (y + p) * pw + p;
            out[dst..dst + w].copy_from_slice(&x[c * h * w + y * w..][..w]);
        }
    }
}

/// Build im2col patches from the zero-padded planes (pure row copies).
fn im2col_padded<S: Scalar>(
    padded: &[S],
    in_ch: usize,
    k: usize,
    h: usize,
    w: usize,
    pad: usize,
    cols: &mut Vec<S>,
) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let n = h * w;
    cols.resize(in_ch * k * k * n, S::zero());
    for c in 0..in_ch {
        let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(c * k * k + ky * k + kx) * n..][..n];
                for y in 0..h {
                    let src = (y + ky) * pw + kx;
                    row[y * w..(y + 1) * w].copy_from_slice(&plane[src..src + w]);
                }
            }
        }
    }
}

/// Scatter-add column gradients back to input positions (inverse of
/// [`im2col_padded`]) going through a padded accumulation plane.
fn col2im_padded<S: Scalar>(
    dcols: &[S],
    in_ch: usize,
    k: usize,
    h: usize,
    w: usize,
    pad: usize,
    padded: &mut Vec<S>,
    dx: &mut [S],
) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let n = h * w;
    padded.clear();
    padded.resize(in_ch * ph * pw, S::zero());
    for c in 0..in_ch {
        let plane = &mut padded[c * ph * pw..(c + 1) * ph * pw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[(c * k * k + ky * k + kx) * n..][..n];
                for y in 0..h {
                    let dst = (y + ky) * pw + kx;
                    for (d, s) in plane[dst..dst + w].iter_mut().zip(&row[y * w..(y + 1) * w]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    for c in 0..in_ch {
        for y in 0..h {
            let src = c * ph * pw + (y + pad) * pw + pad;
            for (d, s) in dx[c * n + y * w..][..w].iter_mut().zip(&padded[src..src + w]) {
                *d += *s;
            }
        }
    }
}

/// Direct 3x3 convolution over padded planes: row-vectorized multiply-adds.
#[allow(clippy::too_many_arguments)]
fn stencil_fwd<S: Scalar>(
    wmat: &[S],
    x_pad: &[S],
    out: &mut [S],
    bias: &Array1<S>,
    out_ch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
) {
    let (ph, pw) = (h + 2, w + 2);
    let npad = ph * pw;
    debug_assert_eq!(x_pad.len(), in_ch * npad);
    for m in 0..out_ch {
        let om = &mut out[m * h * w..(m + 1) * h * w];
        om.fill(bias[m]);
        for c in 0..in_ch {
            let xp = &x_pad[c * npad..(c + 1) * npad];
            let wk = &wmat[(m * in_ch + c) * 9..(m * in_ch + c) * 9 + 9];
            for y in 0..h {
                let orow = &mut om[y * w..(y + 1) * w];
                for ky in 0..3usize {
                    let xrow = &xp[(y + ky) * pw..(y + ky) * pw + pw];
                    let (c0, c1, c2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                    for (i, o) in orow.iter_mut().enumerate() {
                        *o = c2.mul_add(xrow[i + 2], c1.mul_add(xrow[i + 1], c0.mul_add(xrow[i], *o)));
                    }
                }
            }
        }
    }
}

/// Backward of the 3x3 stencil. The input gradient is a gather convolution
/// of the padded incoming gradient with the transposed, 180-degree-flipped
/// kernel; the weight gradient is one contiguous full-plane dot per tap.
#[allow(clippy::too_many_arguments)]
fn stencil_bwd<S: Scalar>(
    wmat: &[S],
    dy: &[S],
    x_pad: &[S],
    scratch: &mut Vec<S>,
    dx: &mut [S],
    dw: &mut [S],
    out_ch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    pad: usize,
) {
    let wt_len = in_ch * out_ch * 9;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let npad = ph * pw;
    scratch.clear();
    scratch.resize(wt_len + out_ch * npad, S::zero());
    let (wt, dy_pad) = scratch.split_at_mut(wt_len);
    for m in 0..out_ch {
        for c in 0..in_ch {
            for ky in 0..3 {
                for kx in 0..3 {
                    wt[(c * out_ch + m) * 9 + ky * 3 + kx] =
                        wmat[(m * in_ch + c) * 9 + (2 - ky) * 3 + (2 - kx)];
                }
            }
        }
    }
    for m in 0..out_ch {
        for y in 0..h {
            let dst = m * npad + (y + pad) * pw + pad;
            dy_pad[dst..dst + w].copy_from_slice(&dy[m * h * w + y * w..][..w]);
        }
    }
    let zero_bias = Array1::zeros(in_ch);
    stencil_fwd(wt, dy_pad, dx, &zero_bias, in_ch, out_ch, h, w);

    // dW[m,c,ky,kx] = <dy_pad plane m from the interior origin,
    //                  x_pad plane c shifted by the tap offset>
    let margin = pad * pw + pad;
    let nn = npad - margin - (pad * pw + pad);
    for m in 0..out_ch {
        let dyr = &dy_pad[m * npad + margin..][..nn];
        for c in 0..in_ch {
            let xp = &x_pad[c * npad..(c + 1) * npad];
            let base = (m * in_ch + c) * 9;
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let src = ky * pw + kx;
                    dw[base + ky * 3 + kx] += dot8(dyr, &xp[src..src + nn]);
                }
            }
        }
    }
}

/// 2D convolution, stride 1, `same` padding for odd kernels.
///
/// 3x3 kernels run as nine shifted GEMMs over a zero-padded plane (one GEMM
/// per kernel tap), which avoids materializing im2col patches; 1x1 kernels
/// are a single GEMM. Batch items run in parallel; each output element has
/// one fixed summation order, so results are thread-count independent.
pub struct Conv2d<S: Scalar> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pad: usize,
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub dw: Array2<S>,
    pub db: Array1<S>,
    x_pad: Vec<Vec<S>>,
    cols: Vec<Vec<S>>,
    scratch: Vec<Vec<S>>,
    used_im2col: bool,
    in_dim: (usize, usize, usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    /// Kaiming fan-in initialization, bias zero.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut impl rand::Rng) -> Self {
        assert!(k == 1 || k == 3, "supported kernel sizes: 1, 3");
        let fan_in = in_ch * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((out_ch, fan_in), |_| S::of_f64(randn(rng) * std));
        Conv2d {
            in_ch,
            out_ch,
            k,
            pad: k / 2,
            w,
            b: Array1::zeros(out_ch),
            dw: Array2::zeros((out_ch, fan_in)),
            db: Array1::zeros(out_ch),
            x_pad: Vec::new(),
            cols: Vec::new(),
            scratch: Vec::new(),
            used_im2col: false,
            in_dim: (0, 0, 0, 0),
        }
    }

    /// Long rows vectorize well as a direct stencil with no patch traffic;
    /// small planes do better as one deep im2col GEMM.
    fn prefers_stencil(n: usize) -> bool {
        n >= 2048
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (bs, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_ch, "conv input channels");
        self.in_dim = (bs, cin, h, w);
        let n = h * w;
        self.x_pad.resize_with(bs, Vec::new);
        self.cols.resize_with(bs, Vec::new);
        self.scratch.resize_with(bs, Vec::new);
        let use_im2col = self.k == 3 && !Self::prefers_stencil(n);
        self.used_im2col = use_im2col;
        let mut out = Tensor::zeros((bs, self.out_ch, h, w));
        let xs = x.as_slice().expect("contiguous input");
        let (k, pad, out_ch, cinl) = (self.k, self.pad, self.out_ch, self.in_ch);
        let (wm, bias) = (&self.w, &self.b);
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(out_ch * n)
            .zip(xs.par_chunks(cinl * n))
            .zip(self.x_pad.par_iter_mut().zip(self.cols.par_iter_mut()))
            .for_each(|((ob, xb), (x_pad, cols))| {
                if k == 1 {
                    // cache the raw input for the weight gradient
                    x_pad.clear();
                    x_pad.extend_from_slice(xb);
                    let bv = view(xb, 0, (cinl, n), (n, 1));
                    let mut ov = view_mut(ob, 0, (out_ch, n), (n, 1));
                    gemm(S::one(), &wm.view(), &bv, S::zero(), &mut ov);
                    for (row, b) in ob.chunks_mut(n).zip(bias.iter()) {
                        for v in row {
                            *v += *b;
                        }
                    }
                    return;
                }
                pad_planes(xb, cinl, h, w, pad, x_pad);
                if use_im2col {
                    im2col_padded(x_pad, cinl, k, h, w, pad, cols);
                    let kk = cinl * k * k;
                    let cv = view(cols, 0, (kk, n), (n, 1));
                    let mut ov = view_mut(ob, 0, (out_ch, n), (n, 1));
                    gemm(S::one(), &wm.view(), &cv, S::zero(), &mut ov);
                    for (row, b) in ob.chunks_mut(n).zip(bias.iter()) {
                        for v in row {
                            *v += *b;
                        }
                    }
                } else {
                    stencil_fwd(wm.as_slice().unwrap(), x_pad, ob, bias, out_ch, cinl, h, w);
                }
            });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let (bs, cin, h, w) = self.in_dim;
        let n = h * w;
        assert_eq!(dy.dim(), (bs, self.out_ch, h, w), "conv grad shape");
        let mut dx = Tensor::zeros((bs, cin, h, w));
        let dys = dy.as_slice().expect("contiguous grad");
        let (k, pad, out_ch) = (self.k, self.pad, self.out_ch);
        let used_im2col = self.used_im2col;
        let wm = &self.w;
        let partial: Vec<(Array2<S>, Array1<S>)> = dx
            .as_slice_mut()
            .unwrap()
            .par_chunks_mut(cin * n)
            .zip(dys.par_chunks(out_ch * n))
            .zip(self.x_pad.par_iter().zip(self.cols.par_iter_mut().zip(self.scratch.par_iter_mut())))
            .map(|((dxb, dyb), (x_pad, (cols, scratch)))| {
                let mut dwi = Array2::zeros((out_ch, cin * k * k));
                let mut dbi = Array1::zeros(out_ch);
                for (oc, db) in dbi.iter_mut().enumerate() {
                    let mut acc = S::zero();
                    for v in &dyb[oc * n..(oc + 1) * n] {
                        acc += *v;
                    }
                    *db = acc;
                }
                if k == 1 {
                    let dyv = view(dyb, 0, (out_ch, n), (n, 1));
                    let xv = view(x_pad, 0, (n, cin), (1, n));
                    {
                        let mut dwv = dwi.view_mut();
                        gemm(S::one(), &dyv, &xv, S::zero(), &mut dwv);
                    }
                    let mut dxv = view_mut(dxb, 0, (cin, n), (n, 1));
                    gemm(S::one(), &wm.t(), &dyv, S::zero(), &mut dxv);
                    return (dwi, dbi);
                }
                if used_im2col {
                    let kk = cin * k * k;
                    let dyv = view(dyb, 0, (out_ch, n), (n, 1));
                    {
                        let cv = view(cols, 0, (kk, n), (n, 1));
                        let mut dwv = dwi.view_mut();
                        gemm(S::one(), &dyv, &cv.t(), S::zero(), &mut dwv);
                    }
                    // cols are no longer needed; reuse them to hold dcols
                    let mut dcv = view_mut(cols, 0, (kk, n), (n, 1));
                    gemm(S::one(), &wm.t(), &dyv, S::zero(), &mut dcv);
                    col2im_padded(cols, cin, k, h, w, pad, scratch, dxb);
                } else {
                    stencil_bwd(
                        wm.as_slice().unwrap(),
                        dyb,
                        x_pad,
                        scratch,
                        dxb,
                        dwi.as_slice_mut().unwrap(),
                        out_ch,
                        cin,
                        h,
                        w,
                        pad,
                    );
                }
                (dwi, dbi)
            })
            .collect();
        for (dwi, dbi) in partial {
            self.dw += &dwi;
            self.db += &dbi;
        }
        dx
    }
}

impl<S: Scalar> Visit<S> for Conv2d<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        v.visit(
            &join(prefix, "w"),
            ParamKind::Param,
            self.w.as_slice_mut().unwrap(),
            Some(self.dw.as_slice_mut().unwrap()),
        );
        v.visit(
            &join(prefix, "b"),
            ParamKind::Param,
            self.b.as_slice_mut().unwrap(),
            Some(self.db.as_slice_mut().unwrap()),
        );
    }
}

/// Per-channel batch normalization over `[B, H, W]`.
pub struct BatchNorm2d<S: Scalar> {
    pub ch: usize,
    pub eps: S,
    pub momentum: S,
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub dgamma: Array1<S>,
    pub dbeta: Array1<S>,
    pub running_mean: Array1<S>,
    pub running_var: Array1<S>,
    xhat: Vec<S>,
    inv_std: Array1<S>,
    fwd_dim: (usize, usize, usize, usize),
    fwd_mode: Mode,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(ch: usize) -> Self {
        BatchNorm2d {
            ch,
            eps: S::of_f64(1e-5),
            momentum: S::of_f64(0.1),
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            dgamma: Array1::zeros(ch),
            dbeta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
            xhat: Vec::new(),
            inv_std: Array1::zeros(ch),
            fwd_dim: (0, 0, 0, 0),
            fwd_mode: Mode::Eval,
        }
    }

    /// Normalizes in place.
    pub fn forward(&mut self, mut x: Tensor<S>, mode: Mode) -> Tensor<S> {
        let (bs, ch, h, w) = x.dim();
        assert_eq!(ch, self.ch, "bn channels");
        self.fwd_mode = mode;
        self.fwd_dim = (bs, ch, h, w);
        let n = bs * h * w;
        let plane = h * w;
        let nf = S::of_f64(n as f64);
        let xs = x.as_slice_mut().unwrap();
        match mode {
            Mode::Train => {
                self.xhat.resize(xs.len(), S::zero());
                for c in 0..ch {
                    let mut mean = S::zero();
                    for b in 0..bs {
                        let base = (b * ch + c) * plane;
                        for v in &xs[base..base + plane] {
                            mean += *v;
                        }
                    }
                    mean /= nf;
                    let mut var = S::zero();
                    for b in 0..bs {
                        let base = (b * ch + c) * plane;
                        for v in &xs[base..base + plane] {
                            let d = *v - mean;
                            var += d * d;
                        }
                    }
                    var /= nf;
                    let inv = S::one() / (var + self.eps).sqrt();
                    self.inv_std[c] = inv;
                    let (g, b_) = (self.gamma[c], self.beta[c]);
                    for b in 0..bs {
                        let base = (b * ch + c) * plane;
                        for (xv, hv) in xs[base..base + plane]
                            .iter_mut()
                            .zip(self.xhat[base..base + plane].iter_mut())
                        {
                            let xh = (*xv - mean) * inv;
                            *hv = xh;
                            *xv = g * xh + b_;
                        }
                    }
                    let m = self.momentum;
                    // PyTorch convention: normalize with biased variance, track unbiased.
                    let unbiased = if n > 1 {
                        var * nf / S::of_f64((n - 1) as f64)
                    } else {
                        var
                    };
                    self.running_mean[c] = (S::one() - m) * self.running_mean[c] + m * mean;
                    self.running_var[c] = (S::one() - m) * self.running_var[c] + m * unbiased;
                }
            }
            Mode::Eval => {
                for c in 0..ch {
                    let inv = S::one() / (self.running_var[c] + self.eps).sqrt();
                    let (g, b_) = (self.gamma[c], self.beta[c]);
                    let mean = self.running_mean[c];
                    for b in 0..bs {
                        let base = (b * ch + c) * plane;
                        for xv in xs[base..base + plane].iter_mut() {
                            *xv = g * (*xv - mean) * inv + b_;
                        }
                    }
                }
            }
        }
        x
    }

    /// Transforms the incoming gradient in place.
    pub fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        assert_eq!(self.fwd_mode, Mode::Train, "bn backward only after a train-mode forward");
        let (bs, ch, h, w) = dy.dim();
        assert_eq!((bs, ch, h, w), self.fwd_dim, "bn grad shape");
        let n = bs * h * w;
        let plane = h * w;
        let nf = S::of_f64(n as f64);
        let ds = dy.as_slice_mut().unwrap();
        for c in 0..ch {
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            for b in 0..bs {
                let base = (b * ch + c) * plane;
                for (d, xh) in ds[base..base + plane].iter().zip(&self.xhat[base..base + plane]) {
                    sum_dy += *d;
                    sum_dy_xhat += *d * *xh;
                }
            }
            self.dbeta[c] += sum_dy;
            self.dgamma[c] += sum_dy_xhat;
            let k1 = self.gamma[c] * self.inv_std[c] / nf;
            for b in 0..bs {
                let base = (b * ch + c) * plane;
                for (d, xh) in ds[base..base + plane]
                    .iter_mut()
                    .zip(&self.xhat[base..base + plane])
                {
                    *d = k1 * (nf * *d - sum_dy - *xh * sum_dy_xhat);
                }
            }
        }
        dy
    }
}

impl<S: Scalar> Visit<S> for BatchNorm2d<S> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>) {
        v.visit(
            &join(prefix, "gamma"),
            ParamKind::Param,
            self.gamma.as_slice_mut().unwrap(),
            Some(self.dgamma.as_slice_mut().unwrap()),
        );
        v.visit(
            &join(prefix, "beta"),
            ParamKind::Param,
            self.beta.as_slice_mut().unwrap(),
            Some(self.dbeta.as_slice_mut().unwrap()),
        );
        v.visit(
            &join(prefix, "running_mean"),
            ParamKind::Stat,
            self.running_mean.as_slice_mut().unwrap(),
            None,
        );
        v.visit(
            &join(prefix, "running_var"),
            ParamKind::Stat,
            self.running_var.as_slice_mut().unwrap(),
            None,
        );
    }
}

/// ReLU; rectifies in place and keeps a multiplicative mask.
#[derive(Default)]
pub struct Relu<S: Scalar> {
    mask: Vec<S>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Relu { mask: Vec::new() }
    }

    pub fn forward(&mut self, mut x: Tensor<S>) -> Tensor<S> {
        let xs = x.as_slice_mut().unwrap();
        self.mask.resize(xs.len(), S::zero());
        for (o, m) in xs.iter_mut().zip(self.mask.iter_mut()) {
            let on = *o > S::zero();
            *m = if on { S::one() } else { S::zero() };
            *o = if on { *o } else { S::zero() };
        }
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        for (d, m) in dy.as_slice_mut().unwrap().iter_mut().zip(&self.mask) {
            *d *= *m;
        }
        dy
    }
}

/// Sigmoid; computed in place with the output cached for backward.
#[derive(Default)]
pub struct Sigmoid<S: Scalar> {
    y: Vec<S>,
}

impl<S: Scalar> Sigmoid<S> {
    pub fn new() -> Self {
        Sigmoid { y: Vec::new() }
    }

    pub fn forward(&mut self, mut x: Tensor<S>) -> Tensor<S> {
        let xs = x.as_slice_mut().unwrap();
        for o in xs.iter_mut() {
            let v = *o;
            *o = if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            };
        }
        self.y.clear();
        self.y.extend_from_slice(xs);
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<S>) -> Tensor<S> {
        for (d, y) in dy.as_slice_mut().unwrap().iter_mut().zip(&self.y) {
            *d = *d * *y * (S::one() - *y);
        }
        dy
    }
}

/// 2x2 max pooling, stride 2, with cached argmax.
pub struct MaxPool2x2 {
    arg: Vec<u8>,
    in_dim: (usize, usize, usize, usize),
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        MaxPool2x2 { arg: Vec::new(), in_dim: (0, 0, 0, 0) }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (bs, ch, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pool needs even spatial size");
        self.in_dim = (bs, ch, h, w);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros((bs, ch, oh, ow));
        self.arg = vec![0u8; bs * ch * oh * ow];
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for bc in 0..bs * ch {
            let xp = &xs[bc * h * w..][..h * w];
            let op = &mut os[bc * oh * ow..][..oh * ow];
            let ap = &mut self.arg[bc * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (oy * 2) * w + ox * 2;
                    let cand = [xp[base], xp[base + 1], xp[base + w], xp[base + w + 1]];
                    let mut best = 0usize;
                    for i in 1..4 {
                        if cand[i] > cand[best] {
                            best = i;
                        }
                    }
                    op[oy * ow + ox] = cand[best];
                    ap[oy * ow + ox] = best as u8;
                }
            }
        }
        out
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let (bs, ch, h, w) = self.in_dim;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros((bs, ch, h, w));
        let ds = dy.as_slice().unwrap();
        let xs = dx.as_slice_mut().unwrap();
        for bc in 0..bs * ch {
            let dp = &ds[bc * oh * ow..][..oh * ow];
            let ap = &self.arg[bc * oh * ow..][..oh * ow];
            let xp = &mut xs[bc * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let a = ap[oy * ow + ox] as usize;
                    let base = (oy * 2) * w + ox * 2 + (a / 2) * w + (a % 2);
                    xp[base] += dp[oy * ow + ox];
                }
            }
        }
        dx
    }
}

/// Factor-2 bilinear upsampling (half-pixel centers). Backward is the exact
/// transpose scatter.
pub struct Upsample2x {
    in_dim: (usize, usize, usize, usize),
}

fn bilinear2x_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let pos = (o as f64 + 0.5) / 2.0 - 0.5;
            let fl = pos.floor();
            let frac = pos - fl;
            let i0 = (fl.max(0.0) as usize).min(in_len - 1);
            let i1 = ((fl as isize + 1).max(0) as usize).min(in_len - 1);
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

impl Upsample2x {
    pub fn new() -> Self {
        Upsample2x { in_dim: (0, 0, 0, 0) }
    }

    pub fn forward<S: Scalar>(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (bs, ch, h, w) = x.dim();
        self.in_dim = (bs, ch, h, w);
        let (oh, ow) = (h * 2, w * 2);
        let ty = bilinear2x_taps(oh, h);
        let tx: Vec<(usize, usize, S, S)> = bilinear2x_taps(ow, w)
            .into_iter()
            .map(|(a, b, w0, w1)| (a, b, S::of_f64(w0), S::of_f64(w1)))
            .collect();
        let mut out = Tensor::zeros((bs, ch, oh, ow));
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        for bc in 0..bs * ch {
            let xp = &xs[bc * h * w..][..h * w];
            let op = &mut os[bc * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy0, wy1) = ty[oy];
                let (wy0, wy1) = (S::of_f64(wy0), S::of_f64(wy1));
                let r0 = &xp[y0 * w..y0 * w + w];
                let r1 = &xp[y1 * w..y1 * w + w];
                let orow = &mut op[oy * ow..(oy + 1) * ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    let (x0, x1, wx0, wx1) = tx[ox];
                    *o = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
        out
    }

    pub fn backward<S: Scalar>(&mut self, dy: &Tensor<S>) -> Tensor<S> {
        let (bs, ch, h, w) = self.in_dim;
        let (oh, ow) = (h * 2, w * 2);
        let ty = bilinear2x_taps(oh, h);
        let tx: Vec<(usize, usize, S, S)> = bilinear2x_taps(ow, w)
            .into_iter()
            .map(|(a, b, w0, w1)| (a, b, S::of_f64(w0), S::of_f64(w1)))
            .collect();
        let mut dx = Tensor::zeros((bs, ch, h, w));
        let ds = dy.as_slice().unwrap();
        let xs = dx.as_slice_mut().unwrap();
        for bc in 0..bs * ch {
            let dp = &ds[bc * oh * ow..][..oh * ow];
            let xp = &mut xs[bc * h * w..][..h * w];
            for oy in 0..oh {
                let (y0, y1, wy0, wy1) = ty[oy];
                let (wy0, wy1) = (S::of_f64(wy0), S::of_f64(wy1));
                let drow = &dp[oy * ow..(oy + 1) * ow];
                for (ox, g) in drow.iter().enumerate() {
                    let (x0, x1, wx0, wx1) = tx[ox];
                    xp[y0 * w + x0] += *g * wy0 * wx0;
                    xp[y0 * w + x1] += *g * wy0 * wx1;
                    xp[y1 * w + x0] += *g * wy1 * wx0;
                    xp[y1 * w + x1] += *g * wy1 * wx1;
                }
            }
        }
        dx
    }
}

/// Channel-to-space rearrangement:
/// `out[b, c, y, x] = in[b, c*r*r + (y%r)*r + (x%r), y/r, x/r]`.
pub fn pixel_shuffle_up<S: Scalar>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>, super::NnError> {
    let (bs, ch, h, w) = x.dim();
    if ch % (r * r) != 0 {
        return Err(super::NnError::IndivisibleChannels { channels: ch, rsq: r * r });
    }
    let oc = ch / (r * r);
    let mut out = Tensor::zeros((bs, oc, h * r, w * r));
    for b in 0..bs {
        for c in 0..oc {
            for y in 0..h * r {
                for x_ in 0..w * r {
                    let ic = c * r * r + (y % r) * r + (x_ % r);
                    out[(b, c, y, x_)] = x[(b, ic, y / r, x_ / r)];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse rearrangement of [`pixel_shuffle_up`]; the backward pass.
pub fn pixel_shuffle_down<S: Scalar>(dy: &Tensor<S>, r: usize) -> Tensor<S> {
    let (bs, oc, oh, ow) = dy.dim();
    assert!(oh % r == 0 && ow % r == 0);
    let (h, w) = (oh / r, ow / r);
    let mut dx = Tensor::zeros((bs, oc * r * r, h, w));
    for b in 0..bs {
        for c in 0..oc {
            for y in 0..oh {
                for x_ in 0..ow {
                    let ic = c * r * r + (y % r) * r + (x_ % r);
                    dx[(b, ic, y / r, x_ / r)] = dy[(b, c, y, x_)];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis (standard-layout output).
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let (bs, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Tensor::zeros((bs, total, h, w));
    let mut off = 0usize;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(p);
        off += c;
    }
    out
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<S: Scalar>(d: &Tensor<S>, sizes: &[usize]) -> Vec<Tensor<S>> {
    let (bs, _, h, w) = d.dim();
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0usize;
    for &c in sizes {
        let mut part = Tensor::zeros((bs, c, h, w));
        part.assign(&d.slice(ndarray::s![.., off..off + c, .., ..]));
        out.push(part);
        off += c;
    }
    assert_eq!(off, d.dim().1);
    out
}

/// Per-pixel channel softmax, stabilized by max subtraction.
pub fn softmax_head<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (bs, ch, h, w) = logits.dim();
    let mut out = logits.clone();
    let os = out.as_slice_mut().unwrap();
    let n = h * w;
    for b in 0..bs {
        for i in 0..n {
            let base = b * ch * n + i;
            let mut mx = os[base];
            for c in 1..ch {
                let v = os[base + c * n];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for c in 0..ch {
                let e = (os[base + c * n] - mx).exp();
                os[base + c * n] = e;
                sum += e;
            }
            for c in 0..ch {
                os[base + c * n] /= sum;
            }
        }
    }
    out
}
