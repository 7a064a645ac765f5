//! Elementwise activations and the softmax output transform.

use crate::error::{Error, Result};
use crate::nn::ActivationKind;
use crate::tensor::Tensor;

/// Applies an activation elementwise.
pub fn activate(kind: ActivationKind, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    match kind {
        ActivationKind::Relu => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        ActivationKind::LeakyRelu { alpha } => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v *= alpha;
                }
            }
        }
        ActivationKind::Elu { alpha } => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = alpha * (v.exp() - 1.0);
                }
            }
        }
    }
    out
}

/// Backward pass given the layer input that was cached at forward time.
/// The subgradient at exactly 0 is 0 for ReLU/LeakyReLU's negative branch
/// choice: x = 0 takes the positive branch (slope 1).
pub fn activate_grad(kind: ActivationKind, x: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    if x.shape() != d_out.shape() {
        return Err(Error::shape(
            "activation_grad",
            format!("input {:?} vs gradient {:?}", x.shape(), d_out.shape()),
        ));
    }
    let mut dx = d_out.clone();
    match kind {
        ActivationKind::Relu => {
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v < 0.0 {
                    *g = 0.0;
                }
            }
        }
        ActivationKind::LeakyRelu { alpha } => {
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v < 0.0 {
                    *g *= alpha;
                }
            }
        }
        ActivationKind::Elu { alpha } => {
            for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v < 0.0 {
                    *g *= alpha * v.exp();
                }
            }
        }
    }
    Ok(dx)
}

/// Row-wise softmax of a `[n, k]` tensor, computed with the max-shift trick
/// so large logits cannot overflow.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::shape(
            "softmax",
            format!("expects [n, k] logits, got {:?}", logits.shape()),
        ));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
