//! Numerically exact multi-head attention over padded and packed layouts.
//!
//! This is a reference semantics, not a fast kernel: every dot product,
//! softmax, and weighted sum runs in plain f64 with a fixed left-to-right
//! summation order. That rigidity is the point. Because the packed
//! ([`mha_unpadded`]) and rectangular ([`mha_padded`]) entry points funnel
//! each sequence through the same per-sequence kernel, removing padding
//! provably changes nothing: outputs agree bit for bit on every valid
//! token, which is the property the storage layer is sold on.
//!
//! Pad positions are excluded rather than neutralized. A padded key is
//! skipped outright instead of being pushed to negative infinity before the
//! softmax, and a padded query row is never computed, its output is exactly
//! zero. Softmax itself is the max-subtracted form, so scores of any
//! magnitude stay finite.

use crate::exec;
use crate::varlen;
use thiserror::Error;

/// Errors for the attention entry points.
#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    /// `num_heads` and `head_dim` must both be nonzero.
    #[error("attention shape must have nonzero heads and head_dim")]
    ZeroDim,
    /// A tensor buffer disagrees with the declared token count and width.
    #[error("tensor has {got} elements, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    /// `batch_offset` must start at 0, be nondecreasing, and end at the
    /// total token count.
    #[error("batch_offset is invalid at position {position}")]
    InvalidOffsets { position: usize },
    /// Attention masks must be contiguous prefixes of ones per row.
    #[error("mask row {row} is not a contiguous prefix of ones")]
    NonPrefixMask { row: usize },
}

/// Head layout of the attention inputs.
///
/// Token rows are `num_heads * head_dim` wide; head `h` owns the column
/// block `[h * head_dim, (h + 1) * head_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaConfig {
    pub num_heads: usize,
    pub head_dim: usize,
}

impl MhaConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self, AttentionError> {
        if num_heads == 0 || head_dim == 0 {
            return Err(AttentionError::ZeroDim);
        }
        Ok(Self {
            num_heads,
            head_dim,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Scaled dot-product attention for one packed sequence of `len` tokens.
///
/// Slices are `len * model_dim` long. Scores use `1/sqrt(head_dim)`
/// scaling; softmax subtracts the row max; score, normalizer, and value
/// accumulations all run left to right over the key index.
fn attend_sequence(q: &[f64], k: &[f64], v: &[f64], len: usize, cfg: &MhaConfig) -> Vec<f64> {
    let dim = cfg.head_dim;
    let width = cfg.model_dim();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = vec![0.0f64; len * width];
    let mut scores = vec![0.0f64; len];
    let mut weights = vec![0.0f64; len];
    for h in 0..cfg.num_heads {
        let col = h * dim;
        for i in 0..len {
            for j in 0..len {
                let mut s = 0.0f64;
                for e in 0..dim {
                    s += q[i * width + col + e] * k[j * width + col + e];
                }
                scores[j] = s * scale;
            }
            let mut row_max = f64::NEG_INFINITY;
            for &s in &scores[..len] {
                if s > row_max {
                    row_max = s;
                }
            }
            let mut normalizer = 0.0f64;
            for j in 0..len {
                let w = (scores[j] - row_max).exp();
                weights[j] = w;
                normalizer += w;
            }
            for e in 0..dim {
                let mut acc = 0.0f64;
                for j in 0..len {
                    acc += weights[j] * v[j * width + col + e];
                }
                out[i * width + col + e] = acc / normalizer;
            }
        }
    }
    out
}

fn check_shape(name_len: usize, expected: usize) -> Result<(), AttentionError> {
    if name_len != expected {
        return Err(AttentionError::ShapeMismatch {
            expected,
            got: name_len,
        });
    }
    Ok(())
}

fn mha_unpadded_impl(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch_offset: &[usize],
    cfg: &MhaConfig,
    par: bool,
) -> Result<Vec<f64>, AttentionError> {
    let lengths = varlen::lengths_from_offsets(batch_offset).map_err(|e| match e {
        varlen::VarlenError::InvalidOffsets { position } => {
            AttentionError::InvalidOffsets { position }
        }
        _ => AttentionError::InvalidOffsets { position: 0 },
    })?;
    let total = *batch_offset.last().expect("validated offsets");
    let width = cfg.model_dim();
    check_shape(q.len(), total * width)?;
    check_shape(k.len(), total * width)?;
    check_shape(v.len(), total * width)?;

    let per_sequence = |b: usize| {
        let start = batch_offset[b] * width;
        let end = batch_offset[b + 1] * width;
        attend_sequence(&q[start..end], &k[start..end], &v[start..end], lengths[b], cfg)
    };
    let blocks = if par {
        exec::map_indexed(lengths.len(), per_sequence)
    } else {
        exec::map_indexed_seq(lengths.len(), per_sequence)
    };
    Ok(blocks.concat())
}

/// Multi-head attention on the packed layout.
///
/// `q`, `k`, and `v` hold `total_tokens` rows of `model_dim` values;
/// `batch_offset` delimits sequences as in
/// [`varlen::compute_batch_offset`]. Attention never crosses a sequence
/// boundary. Output has the shape of `q`.
pub fn mha_unpadded(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch_offset: &[usize],
    cfg: &MhaConfig,
) -> Result<Vec<f64>, AttentionError> {
    mha_unpadded_impl(q, k, v, batch_offset, cfg, true)
}

/// Single-threaded twin of [`mha_unpadded`]; same bytes out, kept public so
/// the two can be compared and benchmarked against each other.
pub fn mha_unpadded_seq(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch_offset: &[usize],
    cfg: &MhaConfig,
) -> Result<Vec<f64>, AttentionError> {
    mha_unpadded_impl(q, k, v, batch_offset, cfg, false)
}

/// Multi-head attention on the rectangular layout.
///
/// `q`, `k`, and `v` hold `batch_size * max_seq_len` rows; `mask` flags the
/// valid prefix of each row block. Masked keys are skipped, not sent to
/// negative infinity, and masked query rows come back as exact zeros.
/// On the valid tokens the result is bitwise identical to running
/// [`mha_unpadded`] on the packed form of the same batch.
pub fn mha_padded(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &[bool],
    batch_size: usize,
    max_seq_len: usize,
    cfg: &MhaConfig,
) -> Result<Vec<f64>, AttentionError> {
    let width = cfg.model_dim();
    let tokens = batch_size * max_seq_len;
    check_shape(mask.len(), tokens)?;
    check_shape(q.len(), tokens * width)?;
    check_shape(k.len(), tokens * width)?;
    check_shape(v.len(), tokens * width)?;
    let mut lengths = Vec::with_capacity(batch_size);
    for row in 0..batch_size {
        let row_mask = &mask[row * max_seq_len..(row + 1) * max_seq_len];
        let len = row_mask.iter().take_while(|&&m| m).count();
        if row_mask[len..].iter().any(|&m| m) {
            return Err(AttentionError::NonPrefixMask { row });
        }
        lengths.push(len);
    }

    let blocks = exec::map_indexed(batch_size, |b| {
        let start = b * max_seq_len * width;
        let valid = lengths[b] * width;
        let mut block = vec![0.0f64; max_seq_len * width];
        let seq_out = attend_sequence(
            &q[start..start + valid],
            &k[start..start + valid],
            &v[start..start + valid],
            lengths[b],
            cfg,
        );
        block[..valid].copy_from_slice(&seq_out);
        block
    });
    Ok(blocks.concat())
}
