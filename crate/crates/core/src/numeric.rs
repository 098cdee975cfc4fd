//! Dense row-major matrices, reductions, and the seeded random source.
//!
//! Everything here is deliberately small: the networks trained in this crate
//! are a few thousand parameters wide and codes are at most 64 bits, so a
//! naive triple loop is fast enough and trivially deterministic.

use std::cmp::Ordering;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign with the tie rule `sgn(0) = +1`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Median of a slice. Even-length inputs average the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of empty slice".into()));
    }
    let mut buf = values.to_vec();
    Ok(median_in_place(&mut buf))
}

/// Median that reorders `buf`. Panics on empty input.
pub(crate) fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    assert!(n > 0);
    let mid = n / 2;
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).unwrap_or(Ordering::Equal);
    let (lower, upper, _) = buf.select_nth_unstable_by(mid, cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Collapse the row dimension: one value per column.
    Rows,
    /// Collapse the column dimension: one value per row.
    Cols,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Max,
    Mean,
    Median,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix has no row storage anyway
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the shape used by fully connected layers whose weights
    /// are stored `(out, in)`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!(
                    "{}x{} times ({}x{})ᵀ",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!(
                    "({}x{})ᵀ times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_in_place<F: Fn(f64) -> f64>(&mut self, f: F) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (v, b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Reduction along an axis. `Axis::Rows` yields a `1 × cols` matrix,
    /// `Axis::Cols` a `rows × 1` matrix and `Axis::All` a `1 × 1` matrix.
    pub fn reduce(&self, axis: Axis, kind: Reduction) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::Empty("reduce over an empty matrix".into()));
        }
        let reduce_slice = |vals: &mut Vec<f64>| -> f64 {
            match kind {
                Reduction::Sum => vals.iter().sum(),
                Reduction::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Reduction::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                Reduction::Median => median_in_place(vals),
            }
        };
        let mut buf = Vec::new();
        match axis {
            Axis::Rows => {
                let mut out = Vec::with_capacity(self.cols);
                for c in 0..self.cols {
                    buf.clear();
                    buf.extend((0..self.rows).map(|r| self[(r, c)]));
                    out.push(reduce_slice(&mut buf));
                }
                Matrix::from_vec(1, self.cols, out)
            }
            Axis::Cols => {
                let mut out = Vec::with_capacity(self.rows);
                for r in 0..self.rows {
                    buf.clear();
                    buf.extend_from_slice(self.row(r));
                    out.push(reduce_slice(&mut buf));
                }
                Matrix::from_vec(self.rows, 1, out)
            }
            Axis::All => {
                buf.extend_from_slice(&self.data);
                Matrix::from_vec(1, 1, vec![reduce_slice(&mut buf)])
            }
        }
    }

    /// Column-wise maximum with the row index that attains it. Ties go to the
    /// lowest row index.
    pub fn max_rows_with_argmax(&self) -> Result<(Vec<f64>, Vec<usize>)> {
        if self.rows == 0 {
            return Err(Error::Empty("max over zero rows".into()));
        }
        let mut vals = self.row(0).to_vec();
        let mut idx = vec![0usize; self.cols];
        for r in 1..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                if v > vals[c] {
                    vals[c] = v;
                    idx[c] = r;
                }
            }
        }
        Ok((vals, idx))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded random source. Every random decision in the crate goes through one
/// of these; there is no global generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from `seed`, e.g. one per epoch.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_times_m_is_m() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let mut rng = Rng::new(3);
        let a = random_matrix(&mut rng, 4, 6);
        let b = random_matrix(&mut rng, 5, 6);
        let c = random_matrix(&mut rng, 4, 2);
        let lhs = a.matmul_t(&b).unwrap();
        let rhs = a.matmul(&b.transpose()).unwrap();
        assert!(lhs
            .as_slice()
            .iter()
            .zip(rhs.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let lhs = a.t_matmul(&c).unwrap();
        let rhs = a.transpose().matmul(&c).unwrap();
        assert!(lhs
            .as_slice()
            .iter()
            .zip(rhs.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(err.to_string().contains("2x3 times 2x3"), "{err}");
    }

    #[test]
    fn map_elementwise_examples() {
        let z = Matrix::zeros(2, 2).map(f64::tanh);
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let s = Matrix::from_rows(&[[0.3, -0.7, 0.0]]).unwrap().map(sgn);
        assert_eq!(s.as_slice(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn reductions() {
        let m = Matrix::from_rows(&[[1.0, 3.0], [2.0, 0.0]]).unwrap();
        assert_eq!(m.reduce(Axis::Rows, Reduction::Max).unwrap().as_slice(), &[2.0, 3.0]);
        assert_eq!(m.reduce(Axis::Rows, Reduction::Mean).unwrap().as_slice(), &[1.5, 1.5]);
        assert_eq!(m.reduce(Axis::Cols, Reduction::Sum).unwrap().as_slice(), &[4.0, 2.0]);
        assert_eq!(m.reduce(Axis::All, Reduction::Sum).unwrap().as_slice(), &[6.0]);
        let (vals, idx) = m.max_rows_with_argmax().unwrap();
        assert_eq!(vals, vec![2.0, 3.0]);
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap(), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0, 100.0]]).unwrap();
        assert_eq!(m.reduce(Axis::All, Reduction::Median).unwrap()[(0, 0)], 3.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn reduce_rejects_empty() {
        assert!(Matrix::zeros(0, 3).reduce(Axis::Rows, Reduction::Sum).is_err());
        assert!(Matrix::zeros(0, 3).max_rows_with_argmax().is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_row() {
        let m = Matrix::from_rows(&[[1.0, 5.0], [1.0, 5.0], [0.0, 5.0]]).unwrap();
        assert_eq!(m.max_rows_with_argmax().unwrap().1, vec![0, 0]);
    }

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::with_stream(42, 1);
        let mut d = Rng::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numeric::Rng;

        proptest! {
            #[test]
            fn matmul_agrees_with_oracle(r in 1usize..=16, k in 1usize..=16, c in 1usize..=16, seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let a = random_matrix(&mut rng, r, k);
                let b = random_matrix(&mut rng, k, c);
                let fast = a.matmul(&b).unwrap();
                let slow = naive_matmul(&a, &b);
                for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
                }
            }

            #[test]
            fn max_value_sits_at_argmax(r in 1usize..=8, c in 1usize..=8, seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let m = random_matrix(&mut rng, r, c);
                let (vals, idx) = m.max_rows_with_argmax().unwrap();
                for col in 0..c {
                    prop_assert_eq!(vals[col], m[(idx[col], col)]);
                    for row in 0..r {
                        prop_assert!(m[(row, col)] <= vals[col]);
                    }
                }
            }
        }
    }
}
