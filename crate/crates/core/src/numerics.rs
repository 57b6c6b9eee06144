//! Dense row-major matrices, masked softmax and labelled random streams.
//!
//! Every reduction in this module walks its index range in ascending order.
//! Row-parallel kernels only split work across output rows, so a result is
//! bit-identical whatever the size of the rayon pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
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

    /// Copies the listed rows, in the order given, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Mat { rows: self.rows, cols: self.cols, data })
    }

    /// Exact bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Mat) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Softmax over the allowed entries of `scores`; disallowed entries come back as 0.
pub fn masked_softmax_row(scores: &[f64], allow: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != allow.len() {
        return Err(Error::Shape(format!("scores has {} entries, allow has {}", scores.len(), allow.len())));
    }
    let mut out = vec![0.0; scores.len()];
    masked_softmax_into(scores, allow, &mut out)?;
    Ok(out)
}

/// In-place variant used by the attention kernel.
pub(crate) fn masked_softmax_into(scores: &[f64], allow: &[bool], out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (s, &a) in scores.iter().zip(allow) {
        if a && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionRow);
    }
    let mut sum = 0.0;
    for ((o, s), &a) in out.iter_mut().zip(scores).zip(allow) {
        if a {
            *o = (s - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for (o, &a) in out.iter_mut().zip(allow) {
        if a {
            *o /= sum;
        }
    }
    Ok(())
}

/// `x · w + b` with ascending-index accumulation.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    if x.cols != w.rows {
        return Err(Error::Shape(format!("affine: x is {}x{}, w is {}x{}", x.rows, x.cols, w.rows, w.cols)));
    }
    if b.len() != w.cols {
        return Err(Error::Shape(format!("affine: bias has {} entries, w has {} columns", b.len(), w.cols)));
    }
    let mut out = Mat::zeros(x.rows, w.cols);
    if w.cols == 0 {
        return Ok(out);
    }
    out.data.par_chunks_mut(w.cols).enumerate().for_each(|(r, orow)| {
        let xrow = x.row(r);
        for (c, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xv) in xrow.iter().enumerate() {
                acc += xv * w.data[j * w.cols + c];
            }
            *o = acc + b[c];
        }
    });
    Ok(out)
}

/// A labelled, seekable random stream.
///
/// The generator is ChaCha20 keyed with `SHA-256("bindattn-rng/v1" ‖ seed_le ‖ label)`;
/// the stream index selects the ChaCha stream id. Two streams with different labels
/// never share state, so adding a consumer never shifts existing sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    index: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha20-sha256key-v1";

    pub fn new(seed: u64, label: &str) -> Self {
        Self::indexed(seed, label, 0)
    }

    pub fn indexed(seed: u64, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"bindattn-rng/v1");
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(index);
        Self { seed, label: label.to_owned(), index, rng }
    }

    /// Fresh stream under `<label>/<sub>`; does not advance `self`.
    pub fn derive(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{sub}", self.label))
    }

    /// Fresh stream with the same key and a different stream index.
    pub fn at_index(&self, index: u64) -> Self {
        Self::indexed(self.seed, &self.label, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

/// `n` values uniformly drawn from `[lo, hi)`.
pub fn rng_uniform(stream: &mut RngStream, n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Validation(format!("rng_uniform needs finite lo < hi, got [{lo}, {hi})")));
    }
    Ok((0..n).map(|_| stream.rng.random_range(lo..hi)).collect())
}
