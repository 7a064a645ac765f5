//! Layer vocabulary, shape rules, and the static-graph executor.

pub mod act;
pub mod conv;
pub mod dense;
pub mod graph;
pub mod init;
pub mod norm;
pub mod pool;

pub use graph::{
    backward, commit_batch_stats, forward, CompiledGraph, ForwardTrace, GraphSpec, Mode, NodeRef,
    ParamEntry, ParamGrads, ParamRole, ParamSet, INPUT_ID,
};

use crate::error::{Error, Result};

/// Spatial padding mode for convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1` per axis (stride 1).
    Valid,
    /// Zero padding chosen so the output covers `ceil(extent / stride)`
    /// positions; an odd padding total puts the extra row/column on the
    /// bottom/right.
    Same,
}

pub const DEFAULT_LEAKY_ALPHA: f64 = 0.3;
pub const DEFAULT_ELU_ALPHA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { alpha: f64 },
    Elu { alpha: f64 },
}

impl ActivationKind {
    pub fn leaky_relu_default() -> Self {
        ActivationKind::LeakyRelu {
            alpha: DEFAULT_LEAKY_ALPHA,
        }
    }

    pub fn elu_default() -> Self {
        ActivationKind::Elu {
            alpha: DEFAULT_ELU_ALPHA,
        }
    }
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

/// One node's operation in a model graph.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        padding: Padding,
        stride: usize,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    GlobalMaxPool,
    GlobalAvgPool,
    Dense {
        units: usize,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Activation {
        kind: ActivationKind,
    },
    Concat,
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn batch_norm_default() -> Self {
        LayerSpec::BatchNorm {
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    /// Validates the layer's own hyperparameters (shape checks happen during
    /// graph compilation where input shapes are known).
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                ..
            } => {
                if !matches!(kernel, 1 | 3 | 5) {
                    return Err(Error::invalid(
                        "conv2d",
                        format!("kernel size must be 1, 3, or 5, got {kernel}"),
                    ));
                }
                if filters == 0 {
                    return Err(Error::invalid("conv2d", "filters must be positive"));
                }
                if stride == 0 {
                    return Err(Error::invalid("conv2d", "stride must be positive"));
                }
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window == 0 {
                    return Err(Error::invalid("max_pool2d", "window must be positive"));
                }
                if stride == 0 {
                    return Err(Error::invalid("max_pool2d", "stride must be positive"));
                }
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(Error::invalid("dense", "units must be positive"));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid(
                        "dropout",
                        format!("rate must be in [0, 1), got {rate}"),
                    ));
                }
            }
            LayerSpec::BatchNorm { momentum, epsilon } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("momentum must be in [0, 1), got {momentum}"),
                    ));
                }
                if epsilon <= 0.0 {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("epsilon must be positive, got {epsilon}"),
                    ));
                }
            }
            LayerSpec::Activation { kind } => {
                let alpha = match kind {
                    ActivationKind::Relu => return Ok(()),
                    ActivationKind::LeakyRelu { alpha } | ActivationKind::Elu { alpha } => alpha,
                };
                if !alpha.is_finite() || alpha < 0.0 {
                    return Err(Error::invalid(
                        "activation",
                        format!("alpha must be a nonnegative finite value, got {alpha}"),
                    ));
                }
            }
            LayerSpec::GlobalMaxPool
            | LayerSpec::GlobalAvgPool
            | LayerSpec::Flatten
            | LayerSpec::Concat
            | LayerSpec::SoftmaxOutput => {}
        }
        Ok(())
    }
}

/// Per-image activation shape flowing through a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat { len: usize },
}

impl Shape {
    pub fn element_count(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat { len } => len,
        }
    }

    /// Size of the trailing axis: channels for spatial shapes, the full
    /// length for flat ones. Batch normalization normalizes over this axis.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat { len } => len,
        }
    }

    /// Shape of a batch of `n` activations with this per-image shape.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            Shape::Spatial { h, w, c } => vec![n, h, w, c],
            Shape::Flat { len } => vec![n, len],
        }
    }
}

/// Output extent of a strided window scan under valid padding.
/// Requires `extent >= window`.
pub(crate) fn valid_out(extent: usize, window: usize, stride: usize) -> usize {
    (extent - window) / stride + 1
}

/// Output extent under same padding: `ceil(extent / stride)`.
pub(crate) fn same_out(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

/// Padding split for same mode: total padding needed so that `same_out`
/// positions fit, split with the extra unit after (bottom or right).
pub(crate) fn same_pad(extent: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = same_out(extent, stride);
    let needed = ((out - 1) * stride + window).saturating_sub(extent);
    let before = needed / 2;
    (before, needed - before)
}
