//! Dense row-major tensors and the handful of kernels the model needs.

use crate::scalar::Scalar;

/// Row-major dense tensor. Shapes are small (1 to 3 dims) and checked at op level.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<G: Scalar>(&self, f: impl Fn(F) -> G) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor<F>, scale: F) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// out[m,n] += a[m,k] @ b[k,n], all row-major slices.
pub fn mm_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T.
pub fn mm_bt_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n].
pub fn mm_at_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a @ b for a:[m,k], b:[k,n].
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims: {} vs {}", k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    mm_acc(&a.data, &b.data, m, k, n, &mut out.data);
    out
}

/// out = a @ b^T for a:[m,k], b:[n,k]. Used for the tied output projection.
pub fn matmul_bt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul_bt inner dims: {} vs {}", k, k2);
    let mut out = Tensor::zeros(&[m, n]);
    mm_bt_acc(&a.data, &b.data, m, k, n, &mut out.data);
    out
}

/// out = a^T @ b for a:[m,k], b:[m,n] -> [k,n]. Backward helper.
pub fn matmul_at<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (m2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(m, m2, "matmul_at outer dims: {} vs {}", m, m2);
    let mut out = Tensor::zeros(&[k, n]);
    mm_at_acc(&a.data, &b.data, m, k, n, &mut out.data);
    out
}

/// Numerically stable in-place softmax over the last axis, treating the tensor
/// as rows of length `cols()`.
pub fn softmax_rows_inplace<F: Scalar>(t: &mut Tensor<F>) {
    let c = t.cols();
    for row in t.data.chunks_mut(c) {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Log-softmax of one row, computed in f64 for stable log-probabilities.
pub fn log_softmax_row_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(&[2, 3], vec![1.0, 0.5, -1.0, 2.0, 0.0, 3.0]);
        let bt = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 0.5, 0.0, -1.0, 3.0]);
        assert_eq!(matmul_bt(&a, &b).data(), matmul(&a, &bt).data());
    }

    #[test]
    fn matmul_at_matches_explicit_transpose() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = Tensor::from_vec(&[3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let b = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]);
        assert_eq!(matmul_at(&a, &b).data(), matmul(&at, &b).data());
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut t = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]);
        softmax_rows_inplace(&mut t);
        for i in 0..2 {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
