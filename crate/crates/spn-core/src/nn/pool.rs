//! Max and global pooling.
//!
//! Max pooling uses valid extents only: windows that would overhang the edge
//! are dropped, so `out = floor((extent - window) / stride) + 1`. Ties inside
//! a window resolve to the first element in row-major scan order, and the
//! winning index is what the backward pass routes the gradient to.

use crate::error::{Error, Result};
use crate::nn::valid_out;
use crate::tensor::Tensor;

fn check_window(h: usize, w: usize, window: usize, stride: usize) -> Result<()> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(
            "max_pool2d",
            "window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "max_pool2d",
            format!("window {window} larger than input extent {h}x{w}"),
        ));
    }
    Ok(())
}

/// Batched max pool: `[n, h, w, c] -> [n, oh, ow, c]` plus the linear input
/// index of each winner (one per output element).
pub(crate) fn max_pool2d_batch(
    x4: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if x4.rank() != 4 {
        return Err(Error::shape(
            "max_pool2d",
            format!("expects [n, h, w, c], got {:?}", x4.shape()),
        ));
    }
    let s = x4.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    check_window(h, w, window, stride)?;
    let (oh, ow) = (valid_out(h, window, stride), valid_out(w, window, stride));
    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let mut argmax = vec![0usize; n * oh * ow * c];
    let src = x4.data();
    let dst = out.data_mut();
    let mut o = 0;
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + oy * stride) * w + ox * stride) * c + ch;
                    let mut best = src[best_idx];
                    for u in 0..window {
                        for v in 0..window {
                            let idx =
                                ((b * h + oy * stride + u) * w + ox * stride + v) * c + ch;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dst[o] = best;
                    argmax[o] = best_idx;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_pool2d_batch_grad(
    x_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor,
) -> Tensor {
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let dst = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        dst[idx] += g;
    }
    dx
}

/// Single-image max pool: `[h, w, c] -> [oh, ow, c]`.
pub fn max_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let x4 = image_as_batch(x, "max_pool2d")?;
    let (out, _) = max_pool2d_batch(&x4, window, stride)?;
    let s = out.shape().to_vec();
    out.reshape(s[1..].to_vec())
}

/// Single-image max pool gradient.
pub fn max_pool2d_grad(
    x: &Tensor,
    window: usize,
    stride: usize,
    d_out: &Tensor,
) -> Result<Tensor> {
    let x4 = image_as_batch(x, "max_pool2d_grad")?;
    let (out, argmax) = max_pool2d_batch(&x4, window, stride)?;
    let expect = &out.shape()[1..];
    if d_out.shape() != expect {
        return Err(Error::shape(
            "max_pool2d_grad",
            format!("gradient {:?}, expected {expect:?}", d_out.shape()),
        ));
    }
    let dx = max_pool2d_batch_grad(x4.shape(), &argmax, d_out);
    let s = dx.shape().to_vec();
    dx.reshape(s[1..].to_vec())
}

/// Batched global max pool: `[n, h, w, c] -> [n, c]` plus winner indices.
pub(crate) fn global_max_pool_batch(x4: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x4.rank() != 4 {
        return Err(Error::shape(
            "global_max_pool",
            format!("expects [n, h, w, c], got {:?}", x4.shape()),
        ));
    }
    let s = x4.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(vec![n, c]);
    let mut argmax = vec![0usize; n * c];
    let src = x4.data();
    for b in 0..n {
        for ch in 0..c {
            let mut best_idx = (b * h * w) * c + ch;
            let mut best = src[best_idx];
            for p in 0..h * w {
                let idx = (b * h * w + p) * c + ch;
                if src[idx] > best {
                    best = src[idx];
                    best_idx = idx;
                }
            }
            out.data_mut()[b * c + ch] = best;
            argmax[b * c + ch] = best_idx;
        }
    }
    Ok((out, argmax))
}

/// Batched global average pool: `[n, h, w, c] -> [n, c]`.
pub(crate) fn global_avg_pool_batch(x4: &Tensor) -> Result<Tensor> {
    if x4.rank() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expects [n, h, w, c], got {:?}", x4.shape()),
        ));
    }
    let s = x4.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(vec![n, c]);
    let src = x4.data();
    for b in 0..n {
        for p in 0..h * w {
            let base = (b * h * w + p) * c;
            for ch in 0..c {
                out.data_mut()[b * c + ch] += src[base + ch];
            }
        }
    }
    for v in out.data_mut() {
        *v /= area;
    }
    Ok(out)
}

pub(crate) fn global_avg_pool_batch_grad(x_shape: &[usize], d_out: &Tensor) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let share = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let dst = dx.data_mut();
    for b in 0..n {
        for p in 0..h * w {
            let base = (b * h * w + p) * c;
            for ch in 0..c {
                dst[base + ch] = d_out.data()[b * c + ch] * share;
            }
        }
    }
    dx
}

fn image_as_batch(x: &Tensor, op: &'static str) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(
            op,
            format!("expects an [h, w, c] image, got {:?}", x.shape()),
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Single-image global max pool: `[h, w, c] -> [c]`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let x4 = image_as_batch(x, "global_max_pool")?;
    let (out, _) = global_max_pool_batch(&x4)?;
    let c = out.shape()[1];
    out.reshape(vec![c])
}

/// Single-image global average pool: `[h, w, c] -> [c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let x4 = image_as_batch(x, "global_avg_pool")?;
    let out = global_avg_pool_batch(&x4)?;
    let c = out.shape()[1];
    out.reshape(vec![c])
}
