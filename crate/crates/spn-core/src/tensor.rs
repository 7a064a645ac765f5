//! Dense row-major tensors over f64 and the bulk operations layers build on.
//!
//! Shapes follow the channel-last convention: images are `[h, w, c]`, batches
//! `[n, h, w, c]`, matrices `[rows, cols]`. All data is contiguous row-major,
//! so the linear index of `[i, j, k]` in a `[d0, d1, d2]` tensor is
//! `(i * d1 + j) * d2 + k`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from explicit shape and data. Every dimension must be
    /// positive and the data length must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor_new",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor. Zero dimensions are a programming error here, not a
    /// recoverable condition, hence the assert rather than a Result.
    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zeros: dimensions must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the data under a new shape of the same total length.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "reshape",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!(
                    "cannot view {} values as {shape:?} ({expect} values)",
                    self.data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    fn linear_index(&self, idx: &[usize]) -> usize {
        assert_eq!(
            idx.len(),
            self.shape.len(),
            "index rank {} does not match tensor rank {}",
            idx.len(),
            self.shape.len()
        );
        let mut lin = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of bounds for axis {i} (size {d})");
            lin = lin * d + x;
        }
        lin
    }

    /// Element access by multi-index. Panics on a bad index; intended for
    /// construction and tests, not inner loops.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let lin = self.linear_index(idx);
        self.data[lin] = value;
    }

    /// Matrix product of two rank-2 tensors: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "expects rank-2 operands, got {:?} and {:?}",
                    self.shape, rhs.shape
                ),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        dgemm_nn(m, k, n, &self.data, &rhs.data, out.data_mut());
        Ok(out)
    }

    /// Zero-pads the two spatial axes of an `[h, w, c]` image.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(
                "pad2d",
                format!("expects an [h, w, c] image, got {:?}", self.shape),
            ));
        }
        Ok(pad_spatial(self, 0, top, bottom, left, right))
    }

    /// Row-wise argmax of a rank-2 tensor; ties resolve to the lowest index.
    pub fn argmax_last(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::shape(
                "argmax_last",
                format!("expects a rank-2 tensor, got {:?}", self.shape),
            ));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks_exact(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Concatenates tensors along the trailing (channel) axis. All leading axes
/// must match; typical inputs are `[h, w, c_i]` images or `[n, h, w, c_i]`
/// batches. A single input is returned unchanged.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = *inputs.first().ok_or_else(|| {
        Error::invalid("concat_channels", "needs at least one input")
    })?;
    let lead = &first.shape[..first.rank() - 1];
    for t in inputs {
        if t.rank() != first.rank() || &t.shape[..t.rank() - 1] != lead {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "leading axes must match: {:?} vs {:?}",
                    first.shape, t.shape
                ),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let c_total: usize = inputs.iter().map(|t| t.shape[t.rank() - 1]).sum();
    let mut shape = lead.to_vec();
    shape.push(c_total);
    let mut out = Tensor::zeros(shape);
    let mut offset = 0;
    for t in inputs {
        let c = t.shape[t.rank() - 1];
        for r in 0..rows {
            let dst = r * c_total + offset;
            out.data[dst..dst + c].copy_from_slice(&t.data[r * c..(r + 1) * c]);
        }
        offset += c;
    }
    Ok(out)
}

/// Splits a trailing-axis concatenation back into pieces of the given channel
/// widths. Inverse of `concat_channels`; used by the graph executor to route
/// gradients to concat inputs.
pub(crate) fn split_channels(x: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let rank = x.rank();
    let lead = &x.shape[..rank - 1];
    let c_total = x.shape[rank - 1];
    debug_assert_eq!(widths.iter().sum::<usize>(), c_total);
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(widths.len());
    let mut offset = 0;
    for &c in widths {
        let mut shape = lead.to_vec();
        shape.push(c);
        let mut piece = Tensor::zeros(shape);
        for r in 0..rows {
            let src = r * c_total + offset;
            piece.data_mut()[r * c..(r + 1) * c].copy_from_slice(&x.data[src..src + c]);
        }
        out.push(piece);
        offset += c;
    }
    out
}

/// Zero-pads the spatial axes of a tensor whose layout is
/// `[...lead, h, w, c]` with `lead_axes` leading axes (0 for `[h, w, c]`,
/// 1 for `[n, h, w, c]`).
pub(crate) fn pad_spatial(
    x: &Tensor,
    lead_axes: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor {
    let s = x.shape();
    debug_assert_eq!(s.len(), lead_axes + 3);
    let lead: usize = s[..lead_axes].iter().product();
    let (h, w, c) = (s[lead_axes], s[lead_axes + 1], s[lead_axes + 2]);
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut shape = s[..lead_axes].to_vec();
    shape.extend_from_slice(&[oh, ow, c]);
    let mut out = Tensor::zeros(shape);
    let row = w * c;
    let orow = ow * c;
    for b in 0..lead {
        let src_base = b * h * row;
        let dst_base = b * oh * orow;
        for i in 0..h {
            let src = src_base + i * row;
            let dst = dst_base + (i + top) * orow + left * c;
            out.data[dst..dst + row].copy_from_slice(&x.data[src..src + row]);
        }
    }
    out
}

/// Crops spatial padding back off; adjoint of `pad_spatial` for gradients
/// (values in the padding region are discarded).
pub(crate) fn unpad_spatial(
    x: &Tensor,
    lead_axes: usize,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Tensor {
    let s = x.shape();
    debug_assert_eq!(s.len(), lead_axes + 3);
    let lead: usize = s[..lead_axes].iter().product();
    let (h, w, c) = (s[lead_axes], s[lead_axes + 1], s[lead_axes + 2]);
    let (oh, ow) = (h - top - bottom, w - left - right);
    let mut shape = s[..lead_axes].to_vec();
    shape.extend_from_slice(&[oh, ow, c]);
    let mut out = Tensor::zeros(shape);
    let row = w * c;
    let orow = ow * c;
    for b in 0..lead {
        let src_base = b * h * row;
        let dst_base = b * oh * orow;
        for i in 0..oh {
            let src = src_base + (i + top) * row + left * c;
            let dst = dst_base + i * orow;
            out.data[dst..dst + orow].copy_from_slice(&x.data[src..src + orow]);
        }
    }
    out
}

/// c = a[m,k] . b[k,n], both row-major contiguous.
pub(crate) fn dgemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = transpose(a) . b where a is stored row-major as [k, m]. Realized by
/// stride swapping, no copy.
pub(crate) fn dgemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a . transpose(b) where b is stored row-major as [n, k].
pub(crate) fn dgemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward triple-loop product used as the oracle for matmul.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn new_rejects_zero_dims_and_bad_length() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 0, 1]), 1.0);
        assert_eq!(t.at(&[0, 1, 0]), 2.0);
        assert_eq!(t.at(&[1, 0, 0]), 4.0);
        assert_eq!(t.at(&[1, 1, 1]), 7.0);
    }

    #[test]
    fn matmul_2x2_worked_example() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_rhs() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::zeros(vec![2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(a.matmul(&b).is_err());
        let v = Tensor::zeros(vec![3]);
        assert!(a.matmul(&v).is_err());
    }

    #[test]
    fn matmul_matches_oracle_on_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = rng.gen_range(1..12);
            let k = rng.gen_range(1..12);
            let n = rng.gen_range(1..12);
            let a = random_tensor(vec![m, k], &mut rng);
            let b = random_tensor(vec![k, n], &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
            }
        }
    }

    #[test]
    fn transposed_gemm_variants_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, k, n) = (5, 7, 4);
        let a = random_tensor(vec![m, k], &mut rng);
        let b = random_tensor(vec![k, n], &mut rng);
        let want = matmul_oracle(&a, &b);

        // a stored transposed as [k, m]
        let mut a_t = Tensor::zeros(vec![k, m]);
        for i in 0..m {
            for p in 0..k {
                a_t.set(&[p, i], a.at(&[i, p]));
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm_tn(m, k, n, a_t.data(), b.data(), &mut c);
        for (g, w) in c.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }

        // b stored transposed as [n, k]
        let mut b_t = Tensor::zeros(vec![n, k]);
        for p in 0..k {
            for j in 0..n {
                b_t.set(&[j, p], b.at(&[p, j]));
            }
        }
        let mut c2 = vec![0.0; m * n];
        dgemm_nt(m, k, n, a.data(), b_t.data(), &mut c2);
        for (g, w) in c2.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn pad2d_places_content_and_zeros() {
        let img = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let p = img.pad2d(1, 1, 1, 1).unwrap();
        assert_eq!(p.shape(), &[3, 3, 1]);
        assert_eq!(p.at(&[1, 1, 0]), 5.0);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn pad2d_zero_counts_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_tensor(vec![4, 5, 2], &mut rng);
        let p = img.pad2d(0, 0, 0, 0).unwrap();
        assert_eq!(p, img);
    }

    #[test]
    fn concat_channels_single_input_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_tensor(vec![3, 3, 2], &mut rng);
        let out = concat_channels(&[&img]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn concat_channels_rejects_spatial_mismatch() {
        let a = Tensor::zeros(vec![3, 3, 2]);
        let b = Tensor::zeros(vec![3, 4, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn argmax_last_first_max_wins() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -1.0, -2.0]).unwrap();
        assert_eq!(t.argmax_last().unwrap(), vec![1, 0]);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(vec![40, 7], &mut rng);
        let got = t.argmax_last().unwrap();
        for (i, &g) in got.iter().enumerate() {
            let row: Vec<f64> = (0..7).map(|j| t.at(&[i, j])).collect();
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            assert_eq!(g, best);
        }
    }

    proptest! {
        /// (A.B).C == A.(B.C) within 1e-9 absolute on unit-scale entries.
        #[test]
        fn matmul_associativity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..6);
            let k = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let q = rng.gen_range(1..6);
            let a = random_tensor(vec![m, k], &mut rng);
            let b = random_tensor(vec![k, n], &mut rng);
            let c = random_tensor(vec![n, q], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }

        /// Padding then cropping the same amounts returns the original image.
        #[test]
        fn pad_then_crop_is_identity(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(1..8);
            let w = rng.gen_range(1..8);
            let c = rng.gen_range(1..4);
            let top = rng.gen_range(0..4);
            let bottom = rng.gen_range(0..4);
            let left = rng.gen_range(0..4);
            let right = rng.gen_range(0..4);
            let img = random_tensor(vec![h, w, c], &mut rng);
            let padded = img.pad2d(top, bottom, left, right).unwrap();
            let cropped = unpad_spatial(&padded, 0, top, bottom, left, right);
            prop_assert_eq!(cropped, img);
        }

        /// Channel concatenation is recovered exactly by channel splitting.
        #[test]
        fn concat_then_split_recovers_inputs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let parts: Vec<Tensor> = (0..rng.gen_range(1..4usize))
                .map(|_| { let c = rng.gen_range(1..5); random_tensor(vec![h, w, c], &mut rng) })
                .collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let cat = concat_channels(&refs).unwrap();
            let widths: Vec<usize> = parts.iter().map(|t| t.shape()[2]).collect();
            let back = split_channels(&cat, &widths);
            prop_assert_eq!(back, parts);
        }
    }
}
