//! Dense linear algebra and probability primitives.
//!
//! Vectors are plain `f64` slices; matrices are row-major [`Mat`]. All
//! reductions over exponentials go through max-subtraction so that large
//! logits never overflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Explicit random state threaded through every stochastic operation.
pub type RngState = ChaCha8Rng;

/// Tolerance on the total mass accepted by [`sample_categorical`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Mat { rows, cols, data })
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(v, &mut out);
        Ok(out)
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::DimensionMismatch {
                op: "matvec_t",
                left: (self.cols, self.rows),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(v, &mut out);
        Ok(out)
    }

    /// `out += self · v`, shapes assumed checked by the caller.
    #[inline]
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, v);
        }
    }

    /// `out += selfᵀ · v`, shapes assumed checked by the caller.
    #[inline]
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.rows, v.len());
        debug_assert_eq!(self.cols, out.len());
        for (&s, row) in v.iter().zip(self.data.chunks_exact(self.cols)) {
            if s != 0.0 {
                axpy(s, row, out);
            }
        }
    }

    /// `self += a ⊗ b` (rank-one update).
    #[inline]
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(self.rows, a.len());
        debug_assert_eq!(self.cols, b.len());
        for (&s, row) in a.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if s != 0.0 {
                axpy(s, b, row);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| x - lse).collect()
}

/// Lowest index attaining the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws an index with probability `p[i]` by inverting the cumulative sum.
pub fn sample_categorical(p: &[f64], rng: &mut RngState) -> Result<usize> {
    let sum: f64 = p.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > PROB_SUM_TOL || p.iter().any(|&x| x < 0.0) {
        return Err(Error::NotNormalized { sum });
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return Ok(i);
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1))
}

pub fn rng_from_seed(seed: u64) -> RngState {
    RngState::seed_from_u64(seed)
}

/// Derives an independent stream from a root seed and a path of indices,
/// e.g. `(seed, [epoch, example_index])`.
pub fn derive_rng(seed: u64, path: &[u64]) -> RngState {
    let mut s = splitmix64(seed);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    RngState::seed_from_u64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
