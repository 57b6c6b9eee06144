use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maskgen::LayerMask;
use crate::numerics::{affine, masked_softmax_into, Mat};

use super::weights::LayerWeights;

const NORM_EPS: f64 = 1e-6;

/// Per-row RMS normalization followed by a per-channel scale and shift.
pub fn rms_norm(x: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    let mut out = x.clone();
    let d = x.cols();
    out.data_mut().par_chunks_mut(d.max(1)).for_each(|row| {
        let mut ss = 0.0;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / d as f64 + NORM_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * inv * scale[j] + shift[j];
        }
    });
    out
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Masked multi-head attention over the whole sequence, output projection applied.
///
/// Queries and keys are projected from the normalized rows, values from the raw
/// residual rows `x`. Disallowed keys are skipped outright, which is the same as
/// a `-inf` bias on their scores. Keys are visited in ascending index order.
pub fn joint_attention(x: &Mat, normed: &Mat, lw: &LayerWeights, mask: &LayerMask, heads: usize) -> Result<Mat> {
    let n = x.rows();
    let d = x.cols();
    if mask.seq_len() != n || normed.rows() != n {
        return Err(Error::Shape(format!("mask covers {} tokens, sequence has {n}", mask.seq_len())));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("{d} channels do not split into {heads} heads")));
    }
    let zero = vec![0.0; d];
    let q = affine(normed, &lw.wq, &zero)?;
    let k = affine(normed, &lw.wk, &zero)?;
    let v = affine(x, &lw.wv, &zero)?;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut heads_out = Mat::zeros(n, d);
    heads_out.data_mut().par_chunks_mut(d).enumerate().try_for_each(|(qi, out)| -> Result<()> {
        let keys = mask.allowed_keys(qi);
        let allow = vec![true; keys.len()];
        let mut scores = vec![0.0; keys.len()];
        let mut probs = vec![0.0; keys.len()];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qrow = &q.row(qi)[cols.clone()];
            for (s, &kj) in scores.iter_mut().zip(&keys) {
                let krow = &k.row(kj)[cols.clone()];
                let mut acc = 0.0;
                for (a, b) in qrow.iter().zip(krow) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            masked_softmax_into(&scores, &allow, &mut probs)?;
            let o = &mut out[cols.clone()];
            for (p, &kj) in probs.iter().zip(&keys) {
                let vrow = &v.row(kj)[cols.clone()];
                for (oc, vc) in o.iter_mut().zip(vrow) {
                    *oc += p * vc;
                }
            }
        }
        Ok(())
    })?;
    affine(&heads_out, &lw.wo, &zero)
}

/// `x + Attn(norm(x))`, then `+ MLP(norm(·))`.
pub fn transformer_layer(x: &Mat, lw: &LayerWeights, mask: &LayerMask, heads: usize) -> Result<Mat> {
    let n1 = rms_norm(x, &lw.norm1_scale, &lw.norm1_shift);
    let attn = joint_attention(x, &n1, lw, mask, heads)?;
    let x1 = x.add(&attn)?;
    let n2 = rms_norm(&x1, &lw.norm2_scale, &lw.norm2_shift);
    let mut hidden = affine(&n2, &lw.mlp_in, &lw.mlp_in_bias)?;
    hidden.data_mut().par_iter_mut().for_each(|v| *v = gelu(*v));
    let mlp = affine(&hidden, &lw.mlp_out, &lw.mlp_out_bias)?;
    x1.add(&mlp)
}

/// Runs a layer stack, handing each intermediate state to `after_layer`.
pub fn run_layers(
    mut h: Mat,
    layers: &[LayerWeights],
    masks: &[LayerMask],
    heads: usize,
    mut before_layer: impl FnMut(usize, &mut Mat),
    mut after_layer: impl FnMut(usize, &Mat),
) -> Result<Mat> {
    if layers.len() != masks.len() {
        return Err(Error::Shape(format!("{} layers but {} masks", layers.len(), masks.len())));
    }
    for (l, (lw, mask)) in layers.iter().zip(masks).enumerate() {
        before_layer(l, &mut h);
        h = transformer_layer(&h, lw, mask, heads)?;
        after_layer(l, &h);
    }
    Ok(h)
}
