//! Dense linear algebra, orthonormalization, seeded randomness and a
//! central-difference gradient probe.
//!
//! Everything here is 64-bit and single-threaded. Reductions always run in
//! index order so results are bit-reproducible regardless of how callers
//! schedule work.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Squared residual norm below which a row is treated as linearly dependent
/// on the rows before it (rows are unit-normalized first).
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("rank-deficient input: row {row} is (numerically) dependent on earlier rows")]
    Degenerate { row: usize },
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: &'static str },
}

pub type Result<T> = std::result::Result<T, NumericError>;

fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> NumericError {
    NumericError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite {
                what: "Matrix::from_vec",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(shape_err(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Matrix with i.i.d. standard normal entries scaled by `scale`.
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| scale * rng.gaussian()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(shape_err("matvec_t", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "Matrix::sub",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self · selfᵀ`
    pub fn gram_rows(&self) -> Matrix {
        let mut g = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..self.rows {
                g.data[i * self.rows + j] = dot(self.row(i), self.row(j));
            }
        }
        g
    }

    /// Frobenius distance of `self · selfᵀ` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.gram_rows();
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.rows {
                let target = if i == j { 1.0 } else { 0.0 };
                let e = g.get(i, j) - target;
                acc += e * e;
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err(
            "matmul",
            format!("lhs cols = rhs rows ({})", a.cols),
            format!("rhs rows {}", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Modified Gram–Schmidt with one re-orthogonalization pass.
///
/// Rows are unit-normalized before projection; a row whose squared residual
/// after the first pass falls below [`RANK_TOLERANCE`] is reported as
/// degenerate. The row span is preserved and the output rows are orthonormal.
pub fn orthonormalize_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows > m.cols {
        return Err(shape_err(
            "orthonormalize_rows",
            format!("rows <= cols ({})", m.cols),
            format!("{} rows", m.rows),
        ));
    }
    let mut q = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let mut v = m.row(i).to_vec();
        let n0 = norm(&v);
        if !n0.is_finite() {
            return Err(NumericError::NonFinite {
                what: "orthonormalize_rows",
            });
        }
        if n0 == 0.0 {
            return Err(NumericError::Degenerate { row: i });
        }
        v.iter_mut().for_each(|x| *x /= n0);
        for pass in 0..2 {
            for j in 0..i {
                let qj = q.row(j);
                let c = dot(qj, &v);
                axpy(-c, qj, &mut v);
            }
            if pass == 0 && dot(&v, &v) < RANK_TOLERANCE {
                return Err(NumericError::Degenerate { row: i });
            }
        }
        let n = norm(&v);
        q.row_mut(i)
            .iter_mut()
            .zip(&v)
            .for_each(|(o, x)| *o = x / n);
    }
    Ok(q)
}

/// Uniformly oriented `r × d` matrix with orthonormal rows (Gaussian draw
/// followed by [`orthonormalize_rows`]).
pub fn random_orthonormal(r: usize, d: usize, rng: &mut Rng) -> Result<Matrix> {
    if r > d {
        return Err(shape_err("random_orthonormal", format!("r <= d ({d})"), r));
    }
    loop {
        let g = Matrix::gaussian(r, d, 1.0, rng);
        match orthonormalize_rows(&g) {
            Ok(q) => return Ok(q),
            // Probability zero for Gaussian input; redraw.
            Err(NumericError::Degenerate { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericError::NonFinite {
                what: "finite_diff_grad",
            });
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// Seeded generator: ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`).
///
/// `Rng::new(seed)` keys the cipher through `SeedableRng::seed_from_u64`
/// (PCG32-expanded 32-byte key) on stream 0. `Rng::stream(seed, id)` uses
/// the same key with the ChaCha stream counter set to `id`, so every
/// (seed, id) pair yields an independent, platform-stable sequence.
/// Gaussian draws use `rand_distr::StandardNormal` (ziggurat).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
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
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Projector onto the row span of `m` via `mᵀ (m mᵀ)⁻¹ m`, with the small
    /// Gram matrix inverted by Gauss–Jordan elimination.
    fn row_space_projector(m: &Matrix) -> Matrix {
        let r = m.rows();
        let g = m.gram_rows();
        let mut aug = vec![vec![0.0; 2 * r]; r];
        for i in 0..r {
            for j in 0..r {
                aug[i][j] = g.get(i, j);
            }
            aug[i][r + i] = 1.0;
        }
        for c in 0..r {
            let p = (c..r)
                .max_by(|&a, &b| aug[a][c].abs().total_cmp(&aug[b][c].abs()))
                .unwrap();
            aug.swap(c, p);
            let piv = aug[c][c];
            for v in aug[c].iter_mut() {
                *v /= piv;
            }
            for i in 0..r {
                if i != c {
                    let f = aug[i][c];
                    let pivot_row = aug[c].clone();
                    for (v, pv) in aug[i].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        let inv = Matrix::from_rows(&aug.iter().map(|row| row[r..].to_vec()).collect::<Vec<_>>())
            .unwrap();
        m.transpose()
            .matmul(&inv)
            .unwrap()
            .matmul(m)
            .unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Matrix::gaussian(5, 7, 1.0, &mut rng);
        let b = Matrix::gaussian(7, 3, 1.0, &mut rng);
        let diff = a.matmul(&b).unwrap().sub(&naive_matmul(&a, &b)).unwrap();
        assert!(diff.frobenius() < 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(NumericError::Shape { .. })));
    }

    #[test]
    fn orthonormalize_fixed_point_and_scaling() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
        let q = orthonormalize_rows(&m).unwrap();
        assert_eq!(q.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let q2 = orthonormalize_rows(&q).unwrap();
        assert!(q2.sub(&q).unwrap().frobenius() < 1e-12);
    }

    #[test]
    fn orthonormalize_preserves_span() {
        let mut rng = Rng::new(11);
        let m = Matrix::gaussian(4, 16, 1.0, &mut rng);
        let q = orthonormalize_rows(&m).unwrap();
        assert!(q.orthonormality_defect() < 1e-10);
        let pq = q.transpose().matmul(&q).unwrap();
        let oracle = row_space_projector(&m);
        assert!(pq.sub(&oracle).unwrap().frobenius() < 1e-10);
    }

    #[test]
    fn orthonormalize_reports_dependent_row() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(
            orthonormalize_rows(&m),
            Err(NumericError::Degenerate { row: 2 })
        );
        let z = Matrix::zeros(1, 3);
        assert_eq!(
            orthonormalize_rows(&z),
            Err(NumericError::Degenerate { row: 0 })
        );
    }

    #[test]
    fn random_orthonormal_cases() {
        let mut rng = Rng::new(3);
        let one = random_orthonormal(1, 1, &mut rng).unwrap();
        assert_eq!(one.get(0, 0).abs(), 1.0);

        let sq = random_orthonormal(3, 3, &mut rng).unwrap();
        let det = sq.get(0, 0) * (sq.get(1, 1) * sq.get(2, 2) - sq.get(1, 2) * sq.get(2, 1))
            - sq.get(0, 1) * (sq.get(1, 0) * sq.get(2, 2) - sq.get(1, 2) * sq.get(2, 0))
            + sq.get(0, 2) * (sq.get(1, 0) * sq.get(2, 1) - sq.get(1, 1) * sq.get(2, 0));
        assert!((det.abs() - 1.0).abs() < 1e-8);

        let a = random_orthonormal(3, 8, &mut Rng::new(1)).unwrap();
        let b = random_orthonormal(3, 8, &mut Rng::new(2)).unwrap();
        assert!(a.sub(&b).unwrap().frobenius() > 0.0);
        assert!(a.orthonormality_defect() < 1e-10);

        assert!(random_orthonormal(4, 3, &mut rng).is_err());
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(5);
        let x: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let g = finite_diff_grad(|x| x.iter().map(|v| v.sin()).sum(), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - xi.cos()).abs() < 1e-9);
        }

        let bad = finite_diff_grad(|x| 1.0 / (x[0] - 1e-5), &[0.0], 1e-5);
        assert!(matches!(bad, Err(NumericError::NonFinite { .. })));
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = Rng::stream(9, 4);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::stream(9, 4);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = Rng::stream(9, 5);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numeric::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
                let mut rng = Rng::new(seed);
                let a = Matrix::gaussian(n, m, 1.0, &mut rng);
                let b = Matrix::gaussian(m, k, 1.0, &mut rng);
                let c = Matrix::gaussian(k, l, 1.0, &mut rng);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let rel = left.sub(&right).unwrap().frobenius() / left.frobenius().max(1e-300);
                prop_assert!(rel < 1e-9);
            }

            #[test]
            fn orthonormalize_is_idempotent(seed in any::<u64>(), r in 1usize..8, extra in 0usize..8) {
                let mut rng = Rng::new(seed);
                let m = Matrix::gaussian(r, r + extra, 1.0, &mut rng);
                let q = orthonormalize_rows(&m).unwrap();
                let q2 = orthonormalize_rows(&q).unwrap();
                prop_assert!(q2.sub(&q).unwrap().frobenius() < 1e-12);
            }

            #[test]
            fn random_orthonormal_is_fixed_point(seed in any::<u64>(), r in 1usize..8, extra in 0usize..8) {
                let q = random_orthonormal(r, r + extra, &mut Rng::new(seed)).unwrap();
                prop_assert!(q.orthonormality_defect() < 1e-10);
                let q2 = orthonormalize_rows(&q).unwrap();
                prop_assert!(q2.sub(&q).unwrap().frobenius() < 1e-12);
            }
        }
    }
}
