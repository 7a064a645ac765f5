//! Dropout and batch normalization.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`, so the
/// expected activation is unchanged and inference is the identity. The
/// returned mask holds the per-element factor (0 or the scale) and is what
/// the backward pass multiplies by.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must be in [0, 1), got {rate}"),
        ));
    }
    match mode {
        Mode::Infer => Ok((x.clone(), vec![1.0; x.len()])),
        Mode::Train => {
            let scale = 1.0 / (1.0 - rate);
            let mut out = x.clone();
            let mask: Vec<f64> = out
                .data_mut()
                .iter_mut()
                .map(|v| {
                    let keep = rng.gen_range(0.0..1.0) >= rate;
                    let factor = if keep { scale } else { 0.0 };
                    *v *= factor;
                    factor
                })
                .collect();
            Ok((out, mask))
        }
    }
}

pub(crate) fn dropout_grad(mask: &[f64], d_out: &Tensor) -> Tensor {
    let mut dx = d_out.clone();
    for (g, &f) in dx.data_mut().iter_mut().zip(mask) {
        *g *= f;
    }
    dx
}

/// Batch statistics captured during a training-mode forward pass; the
/// trainer folds these into the running stats after the step.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Cache needed by the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub(crate) xhat: Tensor,
    pub(crate) inv_std: Vec<f64>,
    pub stats: BnStats,
}

fn channel_view(x: &Tensor) -> (usize, usize) {
    let c = *x.shape().last().expect("tensor has at least one axis");
    (x.len() / c, c)
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "gamma/beta must be [{c}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Training-mode batch norm over the trailing axis. Uses the biased batch
/// variance (divide by m, not m-1).
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, BnCache)> {
    let (m, c) = channel_view(x);
    check_bn_params(c, gamma, beta)?;
    let mf = m as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut mean {
        *a /= mf;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    for a in &mut var {
        *a /= mf;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut xhat = x.clone();
    for row in xhat.data_mut().chunks_exact_mut(c) {
        for ((v, mu), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - mu) * is;
        }
    }
    let mut out = xhat.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            stats: BnStats { mean, var },
        },
    ))
}

/// Inference-mode batch norm: normalizes with the running statistics.
pub fn batch_norm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f64,
) -> Result<Tensor> {
    let (_, c) = channel_view(x);
    check_bn_params(c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "running stats must be [{c}], got {:?} and {:?}",
                running_mean.shape(),
                running_var.shape()
            ),
        ));
    }
    let inv_std: Vec<f64> = running_var
        .data()
        .iter()
        .map(|&v| 1.0 / (v + epsilon).sqrt())
        .collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - running_mean.data()[j]) * inv_std[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

/// Backward through training-mode batch norm. Accounts for the dependence of
/// the batch mean and variance on every element:
/// dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
pub fn batch_norm_grad(
    gamma: &Tensor,
    cache: &BnCache,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if d_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(
            "batch_norm_grad",
            format!(
                "gradient {:?}, expected {:?}",
                d_out.shape(),
                cache.xhat.shape()
            ),
        ));
    }
    let (m, c) = channel_view(&cache.xhat);
    let mf = m as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for (drow, xrow) in d_out
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for j in 0..c {
            let dxhat = drow[j] * gamma.data()[j];
            d_gamma[j] += drow[j] * xrow[j];
            d_beta[j] += drow[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * xrow[j];
        }
    }
    let mut dx = d_out.clone();
    for (drow, xrow) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for j in 0..c {
            let dxhat = drow[j] * gamma.data()[j];
            drow[j] = cache.inv_std[j] / mf
                * (mf * dxhat - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
        }
    }
    Ok((
        dx,
        Tensor::new(vec![c], d_gamma)?,
        Tensor::new(vec![c], d_beta)?,
    ))
}

/// Running-average update: running <- momentum*running + (1-momentum)*batch.
pub fn update_running_stat(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dropout_rate_zero_and_infer_are_identity() {
        let mut rng = substream(1, &[9]);
        let x = random(vec![4, 4], &mut rng);
        let (y0, m0) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y0, x);
        assert!(m0.iter().all(|&f| f == 1.0));
        let (yi, _) = dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap();
        assert_eq!(yi, x);
    }

    #[test]
    fn dropout_scales_survivors_and_zeroes_roughly_rate() {
        let mut rng = substream(2, &[9]);
        let x = Tensor::filled(vec![10_000], 1.0);
        let (y, mask) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((zeros as f64 / 10_000.0 - 0.5).abs() < 0.05);
        for (&v, &f) in y.data().iter().zip(&mask) {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
            assert!(f == 0.0 || (f - 2.0).abs() < 1e-12);
        }
        // Inverted scaling keeps the mean near the input mean.
        let mean: f64 = y.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = substream(3, &[9]);
        let x = Tensor::zeros(vec![2]);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn bn_train_normalizes_channels() {
        let mut rng = substream(4, &[9]);
        let x = random(vec![64, 3], &mut rng);
        let gamma = Tensor::filled(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        let (y, cache) = batch_norm_train(&x, &gamma, &beta, 1e-3).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..64).map(|i| y.at(&[i, j])).collect();
            let mean: f64 = col.iter().sum::<f64>() / 64.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-12);
            // Normalized variance is var/(var+eps), slightly below 1.
            assert!(var < 1.0 && var > 0.9);
            assert!(cache.stats.var[j] > 0.0);
        }
    }

    #[test]
    fn bn_biased_variance() {
        // Two samples 0 and 2: mean 1, biased var 1 (unbiased would be 2).
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let gamma = Tensor::filled(vec![1], 1.0);
        let beta = Tensor::zeros(vec![1]);
        let (_, cache) = batch_norm_train(&x, &gamma, &beta, 1e-3).unwrap();
        assert!((cache.stats.mean[0] - 1.0).abs() < 1e-15);
        assert!((cache.stats.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bn_infer_uses_running_stats() {
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let gamma = Tensor::new(vec![2], vec![2.0, 1.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.5, 0.0]).unwrap();
        let rm = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let rv = Tensor::new(vec![2], vec![4.0, 1.0]).unwrap();
        let y = batch_norm_infer(&x, &gamma, &beta, &rm, &rv, 0.0).unwrap();
        // ch0: (3-1)/2*2+0.5 = 2.5 ; ch1: (-1-0)/1*1 = -1
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn running_update_momentum_math() {
        let mut r = vec![0.0];
        update_running_stat(&mut r, &[1.0], 0.99);
        assert!((r[0] - 0.01).abs() < 1e-15);
        update_running_stat(&mut r, &[1.0], 0.99);
        assert!((r[0] - 0.0199).abs() < 1e-15);
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let mut rng = substream(5, &[9]);
        let x = random(vec![6, 3], &mut rng);
        let gamma = random(vec![3], &mut rng);
        let beta = random(vec![3], &mut rng);
        let d_out = random(vec![6, 3], &mut rng);
        let eps = 1e-3;
        let (_, cache) = batch_norm_train(&x, &gamma, &beta, eps).unwrap();
        let (dx, dg, db) = batch_norm_grad(&gamma, &cache, &d_out).unwrap();
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
            batch_norm_train(x, g, b, eps)
                .unwrap()
                .0
                .data()
                .iter()
                .zip(d_out.data())
                .map(|(o, d)| o * d)
                .sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * h);
            assert!(
                (dx.data()[i] - num).abs() < 1e-7,
                "dx[{i}] {} vs {num}",
                dx.data()[i]
            );
        }
        for i in 0..3 {
            let mut p = gamma.clone();
            p.data_mut()[i] += h;
            let mut m = gamma.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&x, &p, &beta) - loss(&x, &m, &beta)) / (2.0 * h);
            assert!((dg.data()[i] - num).abs() < 1e-7);
            let mut pb = beta.clone();
            pb.data_mut()[i] += h;
            let mut mb = beta.clone();
            mb.data_mut()[i] -= h;
            let numb = (loss(&x, &gamma, &pb) - loss(&x, &gamma, &mb)) / (2.0 * h);
            assert!((db.data()[i] - numb).abs() < 1e-7);
        }
    }
}
