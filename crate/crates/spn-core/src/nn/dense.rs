//! Fully connected layer.

use crate::error::{Error, Result};
use crate::tensor::{dgemm_nn, dgemm_nt, dgemm_tn, Tensor};

fn check_weights(n_in: usize, weights: &Tensor, bias: &Tensor) -> Result<usize> {
    if weights.rank() != 2 || weights.shape()[0] != n_in {
        return Err(Error::shape(
            "dense",
            format!(
                "weights must be [{n_in}, units], got {:?}",
                weights.shape()
            ),
        ));
    }
    let units = weights.shape()[1];
    if bias.rank() != 1 || bias.shape()[0] != units {
        return Err(Error::shape(
            "dense",
            format!("bias must be [{units}], got {:?}", bias.shape()),
        ));
    }
    Ok(units)
}

/// Batched forward: `[n, n_in] . [n_in, units] + bias -> [n, units]`.
pub(crate) fn dense_batch(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "dense",
            format!("expects [n, features] input, got {:?}", x.shape()),
        ));
    }
    let (n, n_in) = (x.shape()[0], x.shape()[1]);
    let units = check_weights(n_in, weights, bias)?;
    let mut out = Tensor::zeros(vec![n, units]);
    dgemm_nn(n, n_in, units, x.data(), weights.data(), out.data_mut());
    for row in out.data_mut().chunks_exact_mut(units) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Batched backward: returns (d_input, d_weights, d_bias).
pub(crate) fn dense_batch_grad(
    x: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, n_in) = (x.shape()[0], x.shape()[1]);
    let units = weights.shape()[1];
    if d_out.shape() != [n, units] {
        return Err(Error::shape(
            "dense_grad",
            format!(
                "output gradient {:?}, expected [{n}, {units}]",
                d_out.shape()
            ),
        ));
    }
    let mut dw = Tensor::zeros(vec![n_in, units]);
    dgemm_tn(n_in, n, units, x.data(), d_out.data(), dw.data_mut());
    let mut db = Tensor::zeros(vec![units]);
    for row in d_out.data().chunks_exact(units) {
        for (acc, v) in db.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = Tensor::zeros(vec![n, n_in]);
    dgemm_nt(n, units, n_in, d_out.data(), weights.data(), dx.data_mut());
    Ok((dx, dw, db))
}

/// Single-vector forward: `[n_in] -> [units]`.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::shape(
            "dense",
            format!("expects a flat [features] input, got {:?}", x.shape()),
        ));
    }
    let n_in = x.shape()[0];
    let out = dense_batch(&x.clone().reshape(vec![1, n_in])?, weights, bias)?;
    let units = out.shape()[1];
    out.reshape(vec![units])
}

/// Single-vector backward: returns (d_input, d_weights, d_bias).
pub fn dense_grad(
    x: &Tensor,
    weights: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n_in = x.shape()[0];
    let units = d_out.shape()[0];
    let (dx, dw, db) = dense_batch_grad(
        &x.clone().reshape(vec![1, n_in])?,
        weights,
        &d_out.clone().reshape(vec![1, units])?,
    )?;
    Ok((dx.reshape(vec![n_in])?, dw, db))
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

    #[test]
    fn worked_example() {
        // x=[1,2], W=[[1,0],[0,1]], b=[0.5,-0.5] -> [1.5, 1.5]
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let out = dense(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[1.5, 1.5]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let x = Tensor::zeros(vec![3]);
        let w = Tensor::zeros(vec![2, 2]);
        let b = Tensor::zeros(vec![2]);
        assert!(dense(&x, &w, &b).is_err());
        let w2 = Tensor::zeros(vec![3, 2]);
        let b2 = Tensor::zeros(vec![3]);
        assert!(dense(&x, &w2, &b2).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = random(vec![5, 3], &mut rng);
        let b = random(vec![3], &mut rng);
        let batch = random(vec![4, 5], &mut rng);
        let out = dense_batch(&batch, &w, &b).unwrap();
        for i in 0..4 {
            let row = Tensor::new(vec![5], batch.data()[i * 5..(i + 1) * 5].to_vec()).unwrap();
            let single = dense(&row, &w, &b).unwrap();
            for j in 0..3 {
                assert!((out.at(&[i, j]) - single.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(vec![3, 4], &mut rng);
        let w = random(vec![4, 2], &mut rng);
        let b = random(vec![2], &mut rng);
        let d_out = random(vec![3, 2], &mut rng);
        let (dx, dw, db) = dense_batch_grad(&x, &w, &d_out).unwrap();
        let h = 1e-6;
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            dense_batch(x, w, b)
                .unwrap()
                .data()
                .iter()
                .zip(d_out.data())
                .map(|(o, d)| o * d)
                .sum()
        };
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&p, &w, &b) - loss(&m, &w, &b)) / (2.0 * h);
            assert!((dx.data()[i] - num).abs() < 1e-8);
        }
        for i in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h);
            assert!((dw.data()[i] - num).abs() < 1e-8);
        }
        for i in 0..b.len() {
            let mut p = b.clone();
            p.data_mut()[i] += h;
            let mut m = b.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * h);
            assert!((db.data()[i] - num).abs() < 1e-8);
        }
    }
}
