//! Encoder-decoder backbone primitives with hand-written reverse-mode
//! differentiation.
//!
//! Everything is generic over [`Scalar`] so training runs in `f32` while
//! gradient checks run the identical code path in `f64`.

pub(crate) use layers::randn;

mod checkpoint;
mod layers;
mod unet;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest};
pub use layers::{
    concat_channels, pixel_shuffle_down, pixel_shuffle_up, softmax_head, split_channels,
    BatchNorm2d, Conv2d, MaxPool2x2, Relu, Sigmoid, Upsample2x,
};
pub use unet::{ConvBlock, Decoder, DecoderTaps, Encoder, UNet, UNetConfig, UpBlock};

use ndarray::{Array4, LinalgScalar};
use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Batched feature map, layout `[batch, channels, height, width]`.
pub type Tensor<S> = Array4<S>;

/// Element type the network runs on. `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    LinalgScalar + Float + NumAssign + Send + Sync + std::fmt::Debug + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Forward-pass mode. Training mode normalizes with batch statistics and
/// updates running statistics; eval mode uses the stored running statistics,
/// so a fixed input always maps to the same output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a visited array is: a trainable parameter or persistent state
/// (batch-norm running statistics). Both are checkpointed; only parameters
/// receive gradients and optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Param,
    Stat,
}

/// Visitor over every array a module owns, in a stable order. Paths are
/// `.`-joined (e.g. `enc1.conv0.w`) and double as checkpoint keys.
pub trait ParamVisitor<S: Scalar> {
    fn visit(&mut self, path: &str, kind: ParamKind, data: &mut [S], grad: Option<&mut [S]>);
}

impl<S: Scalar, F: FnMut(&str, ParamKind, &mut [S], Option<&mut [S]>)> ParamVisitor<S> for F {
    fn visit(&mut self, path: &str, kind: ParamKind, data: &mut [S], grad: Option<&mut [S]>) {
        self(path, kind, data, grad)
    }
}

/// A module that exposes its arrays to a [`ParamVisitor`].
pub trait Visit<S: Scalar> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<S>);

    /// Zero every parameter gradient.
    fn zero_grad(&mut self) {
        self.visit(
            "",
            &mut |_: &str, _: ParamKind, _: &mut [S], grad: Option<&mut [S]>| {
                if let Some(g) = grad {
                    g.fill(S::zero());
                }
            },
        );
    }

    /// Number of trainable parameters.
    fn param_count(&mut self) -> usize {
        let mut n = 0usize;
        self.visit(
            "",
            &mut |_: &str, kind: ParamKind, data: &mut [S], _: Option<&mut [S]>| {
                if kind == ParamKind::Param {
                    n += data.len();
                }
            },
        );
        n
    }

    /// Flatten all trainable parameters into one vector (visit order).
    fn flat_params(&mut self) -> Vec<S> {
        let mut out = Vec::new();
        self.visit(
            "",
            &mut |_: &str, kind: ParamKind, data: &mut [S], _: Option<&mut [S]>| {
                if kind == ParamKind::Param {
                    out.extend_from_slice(data);
                }
            },
        );
        out
    }

    /// Write a flat parameter vector back (inverse of [`Visit::flat_params`]).
    fn set_flat_params(&mut self, flat: &[S]) {
        let mut off = 0usize;
        self.visit(
            "",
            &mut |_: &str, kind: ParamKind, data: &mut [S], _: Option<&mut [S]>| {
                if kind == ParamKind::Param {
                    data.copy_from_slice(&flat[off..off + data.len()]);
                    off += data.len();
                }
            },
        );
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// Flatten all parameter gradients (same order as [`Visit::flat_params`]).
    fn flat_grads(&mut self) -> Vec<S> {
        let mut out = Vec::new();
        self.visit(
            "",
            &mut |_: &str, kind: ParamKind, _: &mut [S], grad: Option<&mut [S]>| {
                if kind == ParamKind::Param {
                    out.extend_from_slice(grad.expect("param without grad"));
                }
            },
        );
        out
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("spatial size {h}x{w} not divisible by {div} (scales={scales})")]
    IndivisibleSpatial {
        h: usize,
        w: usize,
        div: usize,
        scales: usize,
    },
    #[error("channel count {channels} not divisible by r^2 = {rsq}")]
    IndivisibleChannels { channels: usize, rsq: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint is missing entry {0}")]
    MissingEntry(String),
}

/// Join a visitor path prefix with a component.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
