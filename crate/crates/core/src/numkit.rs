//! Dense double-precision matrix kernels, seeded random streams, and a
//! truncated SVD. All reductions run in a fixed index order so identical
//! seeds reproduce bit-identical results regardless of thread count.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.into_iter().flatten().collect() })
    }

    /// Single column matrix (d x 1) from a slice.
    pub fn col_vector(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Single row matrix (1 x k) from a slice.
    pub fn row_vector(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[must_use]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[must_use]
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    #[must_use]
    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x + y).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x - y).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    #[must_use]
    pub fn scale(&self, factor: f64) -> Matrix {
        let data = self.data.iter().map(|x| x * factor).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// self += factor * other, in place.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += factor * y;
        }
        Ok(())
    }

    /// Copy of rows lo..hi (half-open).
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Matrix> {
        if lo > hi || hi > self.rows {
            return Err(Error::Shape(format!(
                "row slice {}..{} out of range for {} rows",
                lo, hi, self.rows
            )));
        }
        Ok(Matrix {
            rows: hi - lo,
            cols: self.cols,
            data: self.data[lo * self.cols..hi * self.cols].to_vec(),
        })
    }

    /// Copy of columns lo..hi (half-open).
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Matrix> {
        if lo > hi || hi > self.cols {
            return Err(Error::Shape(format!(
                "col slice {}..{} out of range for {} cols",
                lo, hi, self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            for (jj, j) in (lo..hi).enumerate() {
                out.data[i * (hi - lo) + jj] = self.get(i, j);
            }
        }
        Ok(out)
    }

    /// Outer product b * a of a column (d) and a row (k), as a d x k matrix.
    #[must_use]
    pub fn outer(b: &[f64], a: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(b.len(), a.len());
        for (i, bi) in b.iter().enumerate() {
            for (j, aj) in a.iter().enumerate() {
                out.data[i * a.len() + j] = bi * aj;
            }
        }
        out
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}: {}x{} vs {}x{}",
                op, self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Standard matrix product with a fixed left-to-right accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for l in 0..a.cols {
                acc += a.data[i * a.cols + l] * b.data[l * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Frobenius norm: sqrt of the sum of squared entries, summed in index order.
#[must_use]
pub fn frobenius_norm(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for x in &m.data {
        acc += x * x;
    }
    acc.sqrt()
}

/// Euclidean norm of a flat vector.
#[must_use]
pub fn vec_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Cosine similarity x.y / (|x||y|), clamped to [-1, 1].
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity: lengths {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let nx = vec_norm(x);
    let ny = vec_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("cosine_similarity of zero vector".into()));
    }
    let mut dot = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Matrix of i.i.d. Normal(0, std^2) entries drawn in row-major order.
pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    assert!(std > 0.0, "random_normal requires std > 0");
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix { rows, cols, data }
}

/// Truncated singular value decomposition by one-sided Jacobi rotations.
///
/// Returns (u: rows x rank, s: rank, vt: rank x cols) with s non-increasing
/// and u, vt orthonormal. u * diag(s) * vt is the best rank-`rank`
/// approximation of m. Jacobi is used because the inputs here are small
/// dense adapter updates and the rotation order is fixed, which keeps runs
/// bit-reproducible.
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let max_rank = m.rows.min(m.cols);
    if rank == 0 || rank > max_rank {
        return Err(Error::Shape(format!(
            "svd rank {} out of range 1..={} for {}x{} matrix",
            rank, max_rank, m.rows, m.cols
        )));
    }
    // One-sided Jacobi orthogonalizes the columns; run it on the side with
    // fewer columns and swap the factors back afterwards.
    if m.rows >= m.cols {
        let (u, s, v) = jacobi_svd_tall(m)?;
        let ut = take_cols(&u, rank);
        let vt = take_cols(&v, rank).transpose();
        Ok((ut, s[..rank].to_vec(), vt))
    } else {
        let mt = m.transpose();
        let (u, s, v) = jacobi_svd_tall(&mt)?;
        // m = v * diag(s) * u^T
        let um = take_cols(&v, rank);
        let vt = take_cols(&u, rank).transpose();
        Ok((um, s[..rank].to_vec(), vt))
    }
}

/// u * diag(s) * vt, the dense reconstruction of an SVD triple.
pub fn svd_reconstruct(u: &Matrix, s: &[f64], vt: &Matrix) -> Result<Matrix> {
    if u.cols != s.len() || vt.rows != s.len() {
        return Err(Error::Shape(format!(
            "svd_reconstruct: u {}x{}, s {}, vt {}x{}",
            u.rows,
            u.cols,
            s.len(),
            vt.rows,
            vt.cols
        )));
    }
    let mut us = u.clone();
    for i in 0..us.rows {
        for (j, sj) in s.iter().enumerate() {
            us.data[i * us.cols + j] *= sj;
        }
    }
    matmul(&us, vt)
}

fn take_cols(m: &Matrix, n: usize) -> Matrix {
    m.slice_cols(0, n).expect("column count checked by caller")
}

/// Full SVD of a matrix with rows >= cols. Returns (u: rows x cols,
/// s: cols, v: cols x cols) sorted by descending singular value.
fn jacobi_svd_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (p, q) = (m.rows, m.cols);
    let mut g = m.clone();
    let mut v = Matrix::identity(q);
    let tol = 1e-14;
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for c1 in 0..q.saturating_sub(1) {
            for c2 in c1 + 1..q {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..p {
                    let x = g.data[i * q + c1];
                    let y = g.data[i * q + c2];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..p {
                    let x = g.data[i * q + c1];
                    let y = g.data[i * q + c2];
                    g.data[i * q + c1] = c * x - s * y;
                    g.data[i * q + c2] = s * x + c * y;
                }
                for i in 0..q {
                    let x = v.data[i * q + c1];
                    let y = v.data[i * q + c2];
                    v.data[i * q + c1] = c * x - s * y;
                    v.data[i * q + c2] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // Singular values are the column norms of the rotated matrix.
    let mut order: Vec<usize> = (0..q).collect();
    let norms: Vec<f64> = (0..q)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..p {
                acc += g.data[i * q + j] * g.data[i * q + j];
            }
            acc.sqrt()
        })
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let smax = norms[order[0]];
    let mut u = Matrix::zeros(p, q);
    let mut s = Vec::with_capacity(q);
    let mut v_sorted = Matrix::zeros(q, q);
    for (dst, &src) in order.iter().enumerate() {
        s.push(norms[src]);
        for i in 0..q {
            v_sorted.data[i * q + dst] = v.data[i * q + src];
        }
        if norms[src] > smax * 1e-13 && norms[src] > 0.0 {
            for i in 0..p {
                u.data[i * q + dst] = g.data[i * q + src] / norms[src];
            }
        }
    }
    // Numerically zero singular values leave empty U columns; complete them
    // to an orthonormal set from canonical basis vectors so the factor
    // contract holds even for rank-deficient inputs.
    for dst in 0..q {
        if s[dst] > smax * 1e-13 && s[dst] > 0.0 {
            continue;
        }
        s[dst] = s[dst].max(0.0);
        let mut filled = false;
        for e in 0..p {
            let mut cand = vec![0.0; p];
            cand[e] = 1.0;
            for j in 0..q {
                if j == dst && !filled {
                    continue;
                }
                let mut dot = 0.0;
                for i in 0..p {
                    dot += cand[i] * u.data[i * q + j];
                }
                for i in 0..p {
                    cand[i] -= dot * u.data[i * q + j];
                }
            }
            let n = vec_norm(&cand);
            if n > 0.5 {
                for i in 0..p {
                    u.data[i * q + dst] = cand[i] / n;
                }
                filled = true;
                break;
            }
        }
        if !filled {
            return Err(Error::Degenerate("svd basis completion failed".into()));
        }
    }
    Ok((u, s, v_sorted))
}

/// Root of all randomness in an experiment. Each (round, client, module)
/// triple keys an independent ChaCha stream; the triple is embedded
/// verbatim in the 256-bit seed so distinct ids can never collide.
#[derive(Clone, Copy, Debug)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    #[must_use]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, round: u64, client: u64, module: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&round.to_le_bytes());
        key[16..24].copy_from_slice(&client.to_le_bytes());
        key[24..32].copy_from_slice(&module.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// `count` distinct indices from 0..n, uniform without replacement,
/// returned sorted. Partial Fisher-Yates over a scratch index vector.
pub fn sample_without_replacement(
    count: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    use rand::Rng;
    if count > n {
        return Err(Error::Config(format!("cannot draw {} of {} without replacement", count, n)));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut picked: Vec<usize> = pool[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
