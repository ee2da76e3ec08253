//! Dense row-major arrays of rank 1 to 3.
//!
//! Rank-3 tensors are laid out as `[batch, time, feature]`, rank-2 as
//! `[rows, cols]`. There are no views or strides: every operation produces
//! a fresh tensor, and every reduction sums left to right so results are
//! reproducible bit for bit.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Dimension(format!(
            "tensor rank must be 1..=3, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "tensor extents must be positive, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape(shape).expect("valid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape(shape).expect("valid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |k| if k / n == k % n { T::one() } else { T::zero() },
        )
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul needs [m,k]·[k,n], got {:?}·{:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn_acc(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(&[m, n], out)
    }

    /// `self · otherᵀ` for `self: [m,k]`, `other: [n,k]`.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::Dimension(format!(
                "matmul_transposed needs [m,k]·[n,k]ᵀ, got {:?}·{:?}ᵀ",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(&self.data, &other.data, m, k, n, &mut out);
        Tensor::new(&[m, n], out)
    }

    pub fn ew(op: EwOp, a: &Self, b: &Self) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::Dimension(format!(
                "elementwise {op:?} needs identical shapes, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let f = match op {
            EwOp::Add => |x: T, y: T| x + y,
            EwOp::Sub => |x: T, y: T| x - y,
            EwOp::Mul => |x: T, y: T| x * y,
        };
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::ew(EwOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::ew(EwOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::ew(EwOp::Mul, self, other)
    }

    /// Reduce along `axis`, dropping it. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Dimension(format!(
                "reduce axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data[(o * extent + a) * inner..][..inner];
                for (acc, &x) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        if op == ReduceOp::Mean {
            let count = T::lit(extent as f64);
            out.iter_mut().for_each(|x| *x /= count);
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(&shape, out)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add_assign needs identical shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Rows `[batch, feature]` at timestep `t` of a `[batch, time, feature]` tensor.
    pub fn time_slice(&self, t: usize) -> Self {
        assert_eq!(self.rank(), 3, "time_slice needs a rank-3 tensor");
        let (batch, steps, feat) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(t < steps, "timestep {t} out of range {steps}");
        let mut data = Vec::with_capacity(batch * feat);
        for b in 0..batch {
            data.extend_from_slice(&self.data[(b * steps + t) * feat..][..feat]);
        }
        Tensor {
            shape: vec![batch, feat],
            data,
        }
    }

    /// Writes `rows: [batch, width]` into features `offset..offset+width` at timestep `t`.
    pub fn write_time_slice(&mut self, t: usize, offset: usize, rows: &Self) {
        assert_eq!(self.rank(), 3, "write_time_slice needs a rank-3 tensor");
        let (batch, steps, feat) = (self.shape[0], self.shape[1], self.shape[2]);
        let width = rows.shape[1];
        assert_eq!(rows.shape[0], batch);
        assert!(offset + width <= feat);
        for b in 0..batch {
            self.data[(b * steps + t) * feat + offset..][..width]
                .copy_from_slice(&rows.data[b * width..][..width]);
        }
    }

    /// Feature columns `offset..offset+width` at timestep `t`, as `[batch, width]`.
    pub fn read_time_slice(&self, t: usize, offset: usize, width: usize) -> Self {
        assert_eq!(self.rank(), 3, "read_time_slice needs a rank-3 tensor");
        let (batch, steps, feat) = (self.shape[0], self.shape[1], self.shape[2]);
        assert!(offset + width <= feat);
        let mut data = Vec::with_capacity(batch * width);
        for b in 0..batch {
            data.extend_from_slice(&self.data[(b * steps + t) * feat + offset..][..width]);
        }
        Tensor {
            shape: vec![batch, width],
            data,
        }
    }

    /// Reverse the time axis of a rank-3 tensor.
    pub fn reverse_time(&self) -> Self {
        assert_eq!(self.rank(), 3, "reverse_time needs a rank-3 tensor");
        let (batch, steps, feat) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..batch {
            for t in (0..steps).rev() {
                data.extend_from_slice(&self.data[(b * steps + t) * feat..][..feat]);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Convert element type, e.g. to evaluate an `f32` model against `f64` data.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..SHOWN])
        }
    }
}

// Slice kernels. Each output element sums over the contracted index in
// increasing order.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[n,k] += a[m,n]ᵀ · b[m,k]`
pub(crate) fn gemm_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    for i in 0..m {
        let brow = &b[i * k..][..k];
        for j in 0..n {
            let aij = a[i * n + j];
            for (o, &bv) in out[j * k..][..k].iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
                }
            }
        }
        out
    }

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn matmul_row_by_column() {
        let r = t(&[1, 2], &[1.0, 2.0])
            .matmul(&t(&[2, 1], &[3.0, 4.0]))
            .unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[5, 7]);
        let b = random(&mut rng, &[7, 3]);
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[2, 3], &[0.0; 6])
            .matmul(&t(&[2, 3], &[0.0; 6]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]·[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[4, 6]);
        let b = random(&mut rng, &[5, 6]);
        let bt = Tensor::from_fn(&[6, 5], |k| b.get(&[k % 5, k / 5]));
        let want = a.matmul(&bt).unwrap();
        let got = a.matmul_transposed(&b).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-14);
        }

        let mut tn = vec![0.0; 6 * 6];
        gemm_tn_acc(a.data(), a.data(), 4, 6, 6, &mut tn);
        let at = Tensor::from_fn(&[6, 4], |k| a.get(&[k % 4, k / 4]));
        let want = at.matmul(&a).unwrap();
        for (g, w) in tn.iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-14);
        }
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[2], &[1.0, 2.0]);
        assert_eq!(x.mul(&Tensor::ones(&[2])).unwrap(), x);
        assert_eq!(x.add(&Tensor::zeros(&[2])).unwrap(), x);
        assert_eq!(x.mul(&t(&[2], &[3.0, 4.0])).unwrap().data(), &[3.0, 8.0]);
        assert!(x.add(&t(&[1, 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn reduce_examples() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(v.reduce(ReduceOp::Mean, 0).unwrap().data(), &[2.0]);
        assert_eq!(
            Tensor::<f64>::zeros(&[4])
                .reduce(ReduceOp::Sum, 0)
                .unwrap()
                .data(),
            &[0.0]
        );
        let m = t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]);
        let r = m.reduce(ReduceOp::Mean, 0).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[2.0, 4.0]);
        assert!(m.reduce(ReduceOp::Sum, 2).is_err());
    }

    #[test]
    fn reduce_middle_axis_of_rank3() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |k| k as f64);
        let r = x.reduce(ReduceOp::Sum, 1).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn time_slices_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |k| k as f64);
        let mut y = Tensor::zeros(&[2, 3, 4]);
        for s in 0..3 {
            y.write_time_slice(s, 0, &x.time_slice(s));
        }
        assert_eq!(x, y);
        assert_eq!(x.reverse_time().reverse_time(), x);
        assert_eq!(x.read_time_slice(1, 2, 2).data(), &[6.0, 7.0, 18.0, 19.0]);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..8, k in 1usize..8, n in 1usize..8, p in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let c = random(&mut rng, &[n, p]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-9 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn matmul_matches_naive_up_to_32(seed in any::<u64>(), m in 1usize..=32, k in 1usize..=32, n in 1usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let got = a.matmul(&b).unwrap();
            for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
                prop_assert!((g - w).abs() <= 1e-12);
            }
        }

        #[test]
        fn add_and_mul_commute_exactly_on_integers(xs in prop::collection::vec(-1000i32..1000, 1..40)) {
            let n = xs.len();
            let a = Tensor::<f64>::from_fn(&[n], |k| xs[k] as f64);
            let b = Tensor::<f64>::from_fn(&[n], |k| xs[n - 1 - k] as f64 * 3.0);
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.mul(&b).unwrap(), b.mul(&a).unwrap());
            for (k, &v) in a.mul(&b).unwrap().data().iter().enumerate() {
                prop_assert_eq!(v, (xs[k] as i64 * xs[n - 1 - k] as i64 * 3) as f64);
            }
        }
    }
}
