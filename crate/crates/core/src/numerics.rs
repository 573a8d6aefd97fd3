//! Dense row-major matrices and the seeded random stream used everywhere else.
//!
//! [`Tensor2`] is the only numeric container in the crate. Rows are batch
//! samples and columns are features, so a batch of reservoir inputs is a
//! `batch x d_R` tensor.
//!
//! [`Rng`] wraps ChaCha8 (the `rand_chacha` implementation). ChaCha is a
//! counter-based stream cipher, so a seed plus a stream id fully determines the
//! sequence on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    /// Builds a tensor from external data, rejecting wrong lengths and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(
                "Tensor2::from_rows",
                format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            ));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// A `1 x n` tensor.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Columns `start..end` as a new tensor.
    pub fn column_block(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::shape(
                "column_block",
                format!("range {start}..{end} outside {} columns", self.cols),
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self::from_vec_unchecked(self.rows, width, data))
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[Tensor2]) -> Result<Self> {
        let rows = parts.first().map_or(0, Tensor2::rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("hstack", "row counts differ"));
        }
        let cols = parts.iter().map(Tensor2::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// `self x other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(n, m, out))
    }

    /// `self x other^T`; the layout of `x W^T` for `W` stored out x in.
    pub fn matmul_transb(&self, other: &Tensor2) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_transb",
                format!("{:?} x {:?}^T", self.shape(), other.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(a_row, b_row);
            }
        }
        Ok(Self::from_vec_unchecked(n, m, out))
    }

    /// `self^T x other`; used for weight gradients `delta^T x input`.
    pub fn matmul_transa(&self, other: &Tensor2) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_transa",
                format!("{:?}^T x {:?}", self.shape(), other.shape()),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(n, m, out))
    }

    fn zip_with(&self, other: &Tensor2, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Tensor2) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor2) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// Element-wise quotient; a zero divisor anywhere is an error.
    pub fn div(&self, other: &Tensor2) -> Result<Self> {
        if other.data.contains(&0.0) {
            return Err(Error::Parameter("element-wise division by zero".into()));
        }
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn maximum(&self, other: &Tensor2) -> Result<Self> {
        self.zip_with(other, "maximum", f64::max)
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    pub fn sqrt(&self) -> Self {
        self.map(f64::sqrt)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    /// Population variance over every entry.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mean = self.mean();
        self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Mean over rows, one value per column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = self.column_sums();
        if self.rows > 0 {
            let n = self.rows as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four fixed lanes: vectorizes, and the summation order never varies
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed; used to hand separate
    /// generators to concurrent or logically distinct consumers.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn next_sign(&mut self) -> f64 {
        if self.inner.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// One draw from `U[lo, hi]`, clamped so rounding never leaves the interval.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (lo + (hi - lo) * self.next_f64()).clamp(lo, hi)
    }
}

/// Entry-wise draws from `U[lo_ij, hi_ij]`.
pub fn sample_uniform(rng: &mut Rng, lo: &Tensor2, hi: &Tensor2) -> Result<Tensor2> {
    if lo.shape() != hi.shape() {
        return Err(Error::shape(
            "sample_uniform",
            format!("{:?} vs {:?}", lo.shape(), hi.shape()),
        ));
    }
    if let Some(index) = lo.data.iter().zip(&hi.data).position(|(l, h)| l > h) {
        return Err(Error::Bound {
            index,
            lo: lo.data[index],
            hi: hi.data[index],
        });
    }
    let data = lo.data.iter().zip(&hi.data).map(|(&l, &h)| rng.uniform(l, h)).collect();
    Ok(Tensor2::from_vec_unchecked(lo.rows, lo.cols, data))
}

pub fn sample_normal(rng: &mut Rng, mean: f64, std: f64, rows: usize, cols: usize) -> Result<Tensor2> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "normal needs a finite mean and std >= 0, got mean={mean}, std={std}"
        )));
    }
    let data = (0..rows * cols).map(|_| mean + std * rng.next_normal()).collect();
    Ok(Tensor2::from_vec_unchecked(rows, cols, data))
}

/// Rademacher entries.
pub fn sample_sign(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.next_sign()).collect();
    Tensor2::from_vec_unchecked(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2 {
        sample_normal(rng, 0.0, 1.0, rows, cols).unwrap()
    }

    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let m = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor2::identity(2).matmul(&m).unwrap(), m);
        let a = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor2::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = b.transpose();
        let via_transb = a.matmul_transb(&bt).unwrap();
        let at = a.transpose();
        let via_transa = at.matmul_transa(&b).unwrap();
        for ((x, y), z) in fast.data().iter().zip(via_transb.data()).zip(via_transa.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor2::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn construction_rejects_nan_and_bad_length() {
        assert!(matches!(
            Tensor2::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor2::new(2, 2, vec![1.0]).is_err());
        assert!(Tensor2::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn uniform_degenerate_and_mean() {
        let mut rng = Rng::new(1);
        let c = Tensor2::filled(3, 4, 2.5);
        assert_eq!(sample_uniform(&mut rng, &c, &c).unwrap(), c);

        let lo = Tensor2::zeros(1, 100_000);
        let hi = Tensor2::filled(1, 100_000, 1.0);
        let draws = sample_uniform(&mut rng, &lo, &hi).unwrap();
        assert!((draws.mean() - 0.5).abs() < 0.01);

        let bad_hi = Tensor2::filled(1, 100_000, -1.0);
        assert!(matches!(
            sample_uniform(&mut rng, &lo, &bad_hi),
            Err(Error::Bound { index: 0, .. })
        ));
    }

    #[test]
    fn normal_moments_and_degenerate() {
        let mut rng = Rng::new(2);
        let flat = sample_normal(&mut rng, 3.0, 0.0, 2, 2).unwrap();
        assert!(flat.data().iter().all(|&v| v == 3.0));
        let draws = sample_normal(&mut rng, 0.0, 1.0, 1, 100_000).unwrap();
        assert!((draws.variance() - 1.0).abs() < 0.05);
        assert!(sample_normal(&mut rng, 0.0, -1.0, 1, 1).is_err());
    }

    #[test]
    fn sign_values_and_mean() {
        let mut rng = Rng::new(3);
        let s = sample_sign(&mut rng, 1, 100_000);
        assert!(s.data().iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(s.mean().abs() < 0.02);
    }

    #[test]
    fn seeded_streams_are_reproducible() {
        let draw = |seed| {
            let mut rng = Rng::new(seed);
            let lo = Tensor2::zeros(3, 3);
            let hi = Tensor2::filled(3, 3, 1.0);
            (
                sample_uniform(&mut rng, &lo, &hi).unwrap(),
                sample_normal(&mut rng, 0.0, 1.0, 3, 3).unwrap(),
                sample_sign(&mut rng, 3, 3),
            )
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11).0, draw(12).0);
        let mut a = Rng::stream(5, 0);
        let mut b = Rng::stream(5, 1);
        assert_ne!(a.next_f64(), b.next_f64());
    }

    #[test]
    fn variance_and_norms() {
        assert_eq!(Tensor2::filled(2, 2, 1.0).variance(), 0.0);
        assert_eq!(Tensor2::from_rows(&[vec![3.0, 4.0]]).unwrap().row_norms(), vec![5.0]);

        let mut rng = Rng::new(4);
        let t = random(&mut rng, 10, 10);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let two_pass = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((t.variance() - two_pass).abs() < 1e-12);
    }

    #[test]
    fn division_by_zero_is_guarded() {
        let a = Tensor2::filled(1, 2, 1.0);
        let b = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(a.div(&b).is_err());
    }

    proptest! {
        #[test]
        fn transpose_of_product(seed in 0u64..1000, n in 1usize..6, k in 1usize..6, m in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = random(&mut rng, n, k);
            let b = random(&mut rng, k, m);
            let lhs = a.matmul(&b).unwrap().transpose();
            let rhs = b.transpose().matmul(&a.transpose()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let eye = Tensor2::identity(k);
            prop_assert_eq!(a.matmul(&eye).unwrap(), a);
        }

        #[test]
        fn uniform_stays_inside(seed in 0u64..1000, lo in -1e3f64..1e3, width in 0f64..1e3) {
            let mut rng = Rng::new(seed);
            let lo_t = Tensor2::filled(4, 4, lo);
            let hi_t = Tensor2::filled(4, 4, lo + width);
            let s = sample_uniform(&mut rng, &lo_t, &hi_t).unwrap();
            prop_assert!(s.data().iter().all(|&v| v >= lo && v <= lo + width));
        }
    }
}
