use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, rejecting zero extents, length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::input(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite value in tensor"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&s| s > 0), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Same shape as `self` filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::config(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map<S: Scalar>(&self, f: impl Fn(T) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self += scale * other`, shapes must agree.
    pub fn axpy(&mut self, scale: T, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }
}

/// Dense kernels over row-major slices. Shapes are passed explicitly.
pub mod linalg {
    use crate::numerics::Scalar;

    /// `a (m×k) · b (k×n)`.
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        out
    }

    /// `out += aᵀ · b` for `a (k×m)`, `b (k×n)`, `out (m×n)`.
    pub fn matmul_tn_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
        debug_assert_eq!(out.len(), m * n);
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }

    /// `a (m×k) · bᵀ` for `b (n×k)`.
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        out
    }

    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    }

    /// Adds `bias (n)` to every row of `x (m×n)`.
    pub fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
        let n = bias.len();
        for row in x.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
    }

    /// `out (n) += Σ_rows x (m×n)`.
    pub fn col_sums_acc<T: Scalar>(out: &mut [T], x: &[T]) {
        let n = out.len();
        for row in x.chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
    }

    pub fn add_assign<T: Scalar>(a: &mut [T], b: &[T]) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x = *x + y;
        }
    }

    /// Numerically stable softmax over a slice.
    pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
        let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &b| a + b);
        exps.into_iter().map(|e| e / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::linalg::*;
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3×2
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![0.5, 7.0, 2.0, 16.0]);

        // aᵀ·a via tn kernel vs explicit transpose.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3×2
        let mut out = vec![0.0; 9];
        matmul_tn_acc(&mut out, &a, &a, 2, 3, 3);
        assert_eq!(out, matmul(&at, &a, 3, 2, 3));

        // a·bᵀ where bᵀ given as b (2×3)
        assert_eq!(matmul_nt(&a, &a, 2, 3, 2), matmul(&a, &at, 2, 3, 2));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let p = softmax(&[1000.0f64, 1001.0]);
        let q = softmax(&[0.0, 1.0]);
        assert!((p[0] - q[0]).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
