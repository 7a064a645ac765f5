//! 2-D convolution via im2col and a dense matrix product.
//!
//! Kernels are `[k, k, c_in, f]` row-major, so flattening the first three
//! axes gives the `[k*k*c_in, f]` weight matrix whose row index
//! `(u*k + v)*c_in + ch` matches the im2col column layout exactly. The same
//! patch matrix serves the forward product, the kernel gradient
//! (`cols^T . d_out`), and the input gradient (`col2im(d_out . W^T)`).

use crate::error::{Error, Result};
use crate::nn::{same_out, same_pad, valid_out, Padding};
use crate::tensor::{dgemm_nn, dgemm_nt, dgemm_tn, pad_spatial, unpad_spatial, Tensor};

/// Resolved geometry for one convolution application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub k: usize,
    pub c_in: usize,
    pub filters: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: (usize, usize, usize, usize),
}

fn validate_kernel(kernel: &Tensor, bias: &Tensor, c_in: usize) -> Result<(usize, usize)> {
    let ks = kernel.shape();
    if kernel.rank() != 4 || ks[0] != ks[1] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [k, k, c_in, f], got {ks:?}"),
        ));
    }
    let (k, kc, f) = (ks[0], ks[2], ks[3]);
    if !matches!(k, 1 | 3 | 5) {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel size must be 1, 3, or 5, got {k}"),
        ));
    }
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    if bias.rank() != 1 || bias.shape()[0] != f {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{f}], got {:?}", bias.shape()),
        ));
    }
    Ok((k, f))
}

pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    c_in: usize,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let (k, filters) = validate_kernel(kernel, bias, c_in)?;
    let (oh, ow, pad) = match padding {
        Padding::Valid => {
            if h < k || w < k {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {k} larger than input extent {h}x{w}"),
                ));
            }
            (valid_out(h, k, stride), valid_out(w, k, stride), (0, 0, 0, 0))
        }
        Padding::Same => {
            let (pt, pb) = same_pad(h, k, stride);
            let (pl, pr) = same_pad(w, k, stride);
            (same_out(h, stride), same_out(w, stride), (pt, pb, pl, pr))
        }
    };
    Ok(ConvGeom {
        k,
        c_in,
        filters,
        stride,
        oh,
        ow,
        pad,
    })
}

/// Builds the patch matrix `[n*oh*ow, k*k*c_in]` from a padded batch.
/// For a fixed kernel row `u` the k*c_in patch values are contiguous in the
/// input, so each (position, u) pair is a single slice copy.
fn im2col(xp: &Tensor, n: usize, g: &ConvGeom) -> Tensor {
    let s = xp.shape();
    let (ph, pw, c) = (s[1], s[2], s[3]);
    let k2c = g.k * g.k * c;
    let slab = g.k * c;
    let mut cols = Tensor::zeros(vec![n * g.oh * g.ow, k2c]);
    let dst = cols.data_mut();
    let src = xp.data();
    let mut row = 0;
    for b in 0..n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = row * k2c;
                for u in 0..g.k {
                    let sy = oy * g.stride + u;
                    let sx = ox * g.stride;
                    let from = ((b * ph + sy) * pw + sx) * c;
                    dst[base + u * slab..base + (u + 1) * slab]
                        .copy_from_slice(&src[from..from + slab]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds patch-matrix gradients back onto the padded input layout.
fn col2im(dcols: &Tensor, n: usize, ph: usize, pw: usize, g: &ConvGeom) -> Tensor {
    let c = g.c_in;
    let k2c = g.k * g.k * c;
    let slab = g.k * c;
    let mut dxp = Tensor::zeros(vec![n, ph, pw, c]);
    let dst = dxp.data_mut();
    let src = dcols.data();
    let mut row = 0;
    for b in 0..n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = row * k2c;
                for u in 0..g.k {
                    let sy = oy * g.stride + u;
                    let sx = ox * g.stride;
                    let to = ((b * ph + sy) * pw + sx) * c;
                    for (d, v) in dst[to..to + slab]
                        .iter_mut()
                        .zip(&src[base + u * slab..base + (u + 1) * slab])
                    {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
    dxp
}

fn maybe_pad(x4: &Tensor, pad: (usize, usize, usize, usize)) -> Tensor {
    let (pt, pb, pl, pr) = pad;
    if pt == 0 && pb == 0 && pl == 0 && pr == 0 {
        x4.clone()
    } else {
        pad_spatial(x4, 1, pt, pb, pl, pr)
    }
}

/// Batched forward: `[n, h, w, c] -> [n, oh, ow, f]`, also returning the
/// patch matrix so backward can reuse it.
pub(crate) fn conv2d_batch_cached(
    x4: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let s = x4.shape();
    if x4.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expects [n, h, w, c] input, got {s:?}"),
        ));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let g = conv_geometry(h, w, c, kernel, bias, padding, stride)?;
    let xp = maybe_pad(x4, g.pad);
    let cols = im2col(&xp, n, &g);
    let rows = n * g.oh * g.ow;
    let k2c = g.k * g.k * g.c_in;
    let mut out = Tensor::zeros(vec![n, g.oh, g.ow, g.filters]);
    dgemm_nn(rows, k2c, g.filters, cols.data(), kernel.data(), out.data_mut());
    for chunk in out.data_mut().chunks_exact_mut(g.filters) {
        for (v, b) in chunk.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok((out, cols))
}

/// Batched backward. `cols` is the patch matrix returned by the forward
/// pass; gradients are exact reverse-mode for the im2col formulation.
pub(crate) fn conv2d_batch_grad(
    x4: &Tensor,
    kernel: &Tensor,
    cols: &Tensor,
    padding: Padding,
    stride: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x4.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let bias_probe = Tensor::zeros(vec![kernel.shape()[3]]);
    let g = conv_geometry(h, w, c, kernel, &bias_probe, padding, stride)?;
    let expect = [n, g.oh, g.ow, g.filters];
    if d_out.shape() != expect {
        return Err(Error::shape(
            "conv2d_grad",
            format!("output gradient {:?}, expected {expect:?}", d_out.shape()),
        ));
    }
    let rows = n * g.oh * g.ow;
    let k2c = g.k * g.k * g.c_in;

    let mut d_kernel = Tensor::zeros(kernel.shape().to_vec());
    dgemm_tn(k2c, rows, g.filters, cols.data(), d_out.data(), d_kernel.data_mut());

    let mut d_bias = Tensor::zeros(vec![g.filters]);
    for chunk in d_out.data().chunks_exact(g.filters) {
        for (acc, v) in d_bias.data_mut().iter_mut().zip(chunk) {
            *acc += v;
        }
    }

    let mut dcols = Tensor::zeros(vec![rows, k2c]);
    dgemm_nt(rows, g.filters, k2c, d_out.data(), kernel.data(), dcols.data_mut());
    let (pt, pb, pl, pr) = g.pad;
    let dxp = col2im(&dcols, n, h + pt + pb, w + pl + pr, &g);
    let dx = if g.pad == (0, 0, 0, 0) {
        dxp
    } else {
        unpad_spatial(&dxp, 1, pt, pb, pl, pr)
    };
    Ok((dx, d_kernel, d_bias))
}

fn as_batch1(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("expects an [h, w, c] image, got {:?}", x.shape()),
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Single-image convolution: `[h, w, c] -> [oh, ow, f]`.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    let x4 = as_batch1(x)?;
    let (out, _) = conv2d_batch_cached(&x4, kernel, bias, padding, stride)?;
    let s = out.shape().to_vec();
    out.reshape(s[1..].to_vec())
}

/// Single-image gradients: returns (d_input, d_kernel, d_bias).
pub fn conv2d_grad(
    x: &Tensor,
    kernel: &Tensor,
    padding: Padding,
    stride: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let x4 = as_batch1(x)?;
    if d_out.rank() != 3 {
        return Err(Error::shape(
            "conv2d_grad",
            format!("expects an [oh, ow, f] gradient, got {:?}", d_out.shape()),
        ));
    }
    let mut dshape = vec![1];
    dshape.extend_from_slice(d_out.shape());
    let d4 = d_out.clone().reshape(dshape)?;
    let bias_probe = Tensor::zeros(vec![kernel.shape()[3]]);
    let geom = conv_geometry(
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        kernel,
        &bias_probe,
        padding,
        stride,
    )?;
    let xp = maybe_pad(&x4, geom.pad);
    let cols = im2col(&xp, 1, &geom);
    let (dx4, dk, db) = conv2d_batch_grad(&x4, kernel, &cols, padding, stride, &d4)?;
    let s = dx4.shape().to_vec();
    Ok((dx4.reshape(s[1..].to_vec())?, dk, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sliding-window oracle: pads explicitly, then accumulates
    /// kernel * patch products with five nested loops.
    fn conv_oracle(
        x: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        padding: Padding,
        stride: usize,
    ) -> Tensor {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kernel.shape()[0];
        let f = kernel.shape()[3];
        let (xp, oh, ow) = match padding {
            Padding::Valid => (x.clone(), valid_out(h, k, stride), valid_out(w, k, stride)),
            Padding::Same => {
                let (pt, pb) = same_pad(h, k, stride);
                let (pl, pr) = same_pad(w, k, stride);
                (
                    x.pad2d(pt, pb, pl, pr).unwrap(),
                    same_out(h, stride),
                    same_out(w, stride),
                )
            }
        };
        let mut out = Tensor::zeros(vec![oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for j in 0..f {
                    let mut acc = bias.data()[j];
                    for u in 0..k {
                        for v in 0..k {
                            for ch in 0..c {
                                acc += xp.at(&[oy * stride + u, ox * stride + v, ch])
                                    * kernel.at(&[u, v, ch, j]);
                            }
                        }
                    }
                    out.set(&[oy, ox, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        // 3x3 input 1..9, single 3x3 ones kernel, valid padding: one output
        // position holding the total 45.
        let x = Tensor::new(vec![3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::filled(vec![3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(vec![1]);
        let out = conv2d(&x, &k, &b, Padding::Valid, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert!((out.data()[0] - 45.0).abs() < 1e-12);
    }

    #[test]
    fn pointwise_kernel_is_channel_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(vec![4, 4, 3], &mut rng);
        let k = random(vec![1, 1, 3, 2], &mut rng);
        let b = random(vec![2], &mut rng);
        let out = conv2d(&x, &k, &b, Padding::Valid, 1).unwrap();
        assert_eq!(out.shape(), &[4, 4, 2]);
        for y in 0..4 {
            for xx in 0..4 {
                for j in 0..2 {
                    let want: f64 = (0..3)
                        .map(|ch| x.at(&[y, xx, ch]) * k.at(&[0, 0, ch, j]))
                        .sum::<f64>()
                        + b.data()[j];
                    assert!((out.at(&[y, xx, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cases = [
            (7, 7, 2, 3, 4, Padding::Valid, 1),
            (7, 7, 2, 3, 4, Padding::Same, 1),
            (8, 6, 3, 5, 2, Padding::Valid, 1),
            (8, 6, 3, 5, 2, Padding::Same, 1),
            (9, 9, 1, 3, 3, Padding::Valid, 2),
            (9, 9, 1, 3, 3, Padding::Same, 2),
            (6, 6, 2, 1, 3, Padding::Valid, 1),
            (5, 5, 1, 5, 2, Padding::Same, 3),
        ];
        for (h, w, c, k, f, padding, stride) in cases {
            let x = random(vec![h, w, c], &mut rng);
            let kern = random(vec![k, k, c, f], &mut rng);
            let bias = random(vec![f], &mut rng);
            let got = conv2d(&x, &kern, &bias, padding, stride).unwrap();
            let want = conv_oracle(&x, &kern, &bias, padding, stride);
            assert_eq!(got.shape(), want.shape(), "case {h}x{w}x{c} k{k} s{stride}");
            for (g, wv) in got.data().iter().zip(want.data()) {
                assert!((g - wv).abs() < 1e-12, "case {h}x{w}x{c} k{k} s{stride}");
            }
        }
    }

    #[test]
    fn same_padding_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(vec![32, 32, 1], &mut rng);
        let k = random(vec![3, 3, 1, 8], &mut rng);
        let b = Tensor::zeros(vec![8]);
        assert_eq!(
            conv2d(&x, &k, &b, Padding::Same, 1).unwrap().shape(),
            &[32, 32, 8]
        );
        assert_eq!(
            conv2d(&x, &k, &b, Padding::Same, 2).unwrap().shape(),
            &[16, 16, 8]
        );
        assert_eq!(
            conv2d(&x, &k, &b, Padding::Valid, 1).unwrap().shape(),
            &[30, 30, 8]
        );
    }

    #[test]
    fn rejects_oversized_kernel_and_bad_shapes() {
        let x = Tensor::zeros(vec![2, 2, 1]);
        let k = Tensor::zeros(vec![3, 3, 1, 1]);
        let b = Tensor::zeros(vec![1]);
        assert!(conv2d(&x, &k, &b, Padding::Valid, 1).is_err());
        // channel mismatch
        let x2 = Tensor::zeros(vec![4, 4, 2]);
        assert!(conv2d(&x2, &k, &b, Padding::Valid, 1).is_err());
        // bias length mismatch
        let b2 = Tensor::zeros(vec![2]);
        let x3 = Tensor::zeros(vec![4, 4, 1]);
        assert!(conv2d(&x3, &k, &b2, Padding::Valid, 1).is_err());
        // disallowed kernel size
        let k4 = Tensor::zeros(vec![4, 4, 1, 1]);
        let b4 = Tensor::zeros(vec![1]);
        assert!(conv2d(&x3, &k4, &b4, Padding::Valid, 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let h = 1e-5;
        for (padding, stride) in [
            (Padding::Valid, 1),
            (Padding::Same, 1),
            (Padding::Valid, 2),
            (Padding::Same, 2),
        ] {
            let x = random(vec![5, 5, 2], &mut rng);
            let kern = random(vec![3, 3, 2, 2], &mut rng);
            let bias = random(vec![2], &mut rng);
            let out = conv2d(&x, &kern, &bias, padding, stride).unwrap();
            let d_out = random(out.shape().to_vec(), &mut rng);
            let loss = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
                conv2d(x, k, b, padding, stride)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(d_out.data())
                    .map(|(o, d)| o * d)
                    .sum()
            };
            let (dx, dk, db) = conv2d_grad(&x, &kern, padding, stride, &d_out).unwrap();

            let check = |analytic: &Tensor, which: usize| {
                for i in 0..analytic.len() {
                    let (mut xp, mut kp, mut bp) = (x.clone(), kern.clone(), bias.clone());
                    let (mut xm, mut km, mut bm) = (x.clone(), kern.clone(), bias.clone());
                    match which {
                        0 => {
                            xp.data_mut()[i] += h;
                            xm.data_mut()[i] -= h;
                        }
                        1 => {
                            kp.data_mut()[i] += h;
                            km.data_mut()[i] -= h;
                        }
                        _ => {
                            bp.data_mut()[i] += h;
                            bm.data_mut()[i] -= h;
                        }
                    }
                    let num = (loss(&xp, &kp, &bp) - loss(&xm, &km, &bm)) / (2.0 * h);
                    let a = analytic.data()[i];
                    let rel = (a - num).abs() / f64::max(1e-8, a.abs() + num.abs());
                    assert!(
                        rel < 1e-6,
                        "{padding:?} s{stride} tensor {which} idx {i}: {a} vs {num}"
                    );
                }
            };
            check(&dx, 0);
            check(&dk, 1);
            check(&db, 2);
        }
    }
}
