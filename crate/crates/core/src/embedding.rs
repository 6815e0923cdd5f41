//! Deterministic embedding-bag forward and backward passes.
//!
//! The backward pass of an embedding lookup is a scatter-add: every
//! occurrence of token id `t` adds its output gradient row into weight
//! gradient row `t`. Run with atomics, the addition order varies between
//! executions and the result is only reproducible up to rounding. Both
//! backends here fix the order instead:
//!
//! * [`backward_sorted`] groups occurrences by token id (stable sort),
//!   then accumulates each group in ascending occurrence position. The
//!   per-id segments are independent, so they parallelize without
//!   changing a single bit.
//! * [`backward_scatter`] models the nondeterministic baseline: it
//!   accumulates in a seeded random occurrence order, one definite
//!   sample from the orders a racy scatter-add could take.
//!
//! On integer-valued gradients both orders agree exactly; on reals they
//! differ by rounding only, which is precisely the discrepancy the
//! sorted backend exists to remove.

use crate::exec;
use serde::Serialize;
use thiserror::Error;

/// Errors for lookup and gradient accumulation.
#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("vocabulary must not be empty")]
    EmptyVocabulary,
    #[error("embedding_dim must be at least 1")]
    ZeroDim,
    #[error("token id {token} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab_size: usize,
    },
    #[error("gradient buffer holds {got} rows, expected one per token ({expected})")]
    GradRowMismatch { expected: usize, got: usize },
    #[error("row length {got} does not match embedding_dim {expected}")]
    RowMismatch { expected: usize, got: usize },
    #[error("lane width two needs an even embedding_dim, got {dim}")]
    PackingError { dim: usize },
}

/// Dense embedding table, row-major `vocab_size x embedding_dim`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingTable {
    vocab_size: usize,
    embedding_dim: usize,
    weights: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(
        vocab_size: usize,
        embedding_dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self, EmbeddingError> {
        if vocab_size == 0 {
            return Err(EmbeddingError::EmptyVocabulary);
        }
        if embedding_dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        if weights.len() != vocab_size * embedding_dim {
            return Err(EmbeddingError::RowMismatch {
                expected: vocab_size * embedding_dim,
                got: weights.len(),
            });
        }
        Ok(Self {
            vocab_size,
            embedding_dim,
            weights,
        })
    }

    /// Zero-initialized table, the shape gradient buffers take.
    pub fn zeros(vocab_size: usize, embedding_dim: usize) -> Result<Self, EmbeddingError> {
        Self::new(vocab_size, embedding_dim, vec![0.0; vocab_size * embedding_dim])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.weights[token * self.embedding_dim..(token + 1) * self.embedding_dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn check_tokens(tokens: &[usize], vocab_size: usize) -> Result<(), EmbeddingError> {
    for (position, &token) in tokens.iter().enumerate() {
        if token >= vocab_size {
            return Err(EmbeddingError::TokenOutOfRange {
                token,
                position,
                vocab_size,
            });
        }
    }
    Ok(())
}

/// Gathers one table row per token; output is `tokens.len()` rows of
/// `embedding_dim`, flat row-major.
pub fn forward(table: &EmbeddingTable, tokens: &[usize]) -> Result<Vec<f64>, EmbeddingError> {
    check_tokens(tokens, table.vocab_size)?;
    let dim = table.embedding_dim;
    let rows = exec::map_indexed(tokens.len(), |i| table.row(tokens[i]).to_vec());
    let mut out = Vec::with_capacity(tokens.len() * dim);
    for row in rows {
        out.extend_from_slice(&row);
    }
    Ok(out)
}

/// Column step of the accumulation inner loop. `Two` processes columns
/// in adjacent pairs, the shape a two-wide vector lane reads; each cell
/// still receives its additions in the same order, so results match
/// `One` bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LaneWidth {
    One,
    Two,
}

fn grad_dims(
    grad_output: &[f64],
    tokens: &[usize],
    vocab_size: usize,
    embedding_dim: usize,
    lane_width: LaneWidth,
) -> Result<(), EmbeddingError> {
    if embedding_dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    if vocab_size == 0 {
        return Err(EmbeddingError::EmptyVocabulary);
    }
    if lane_width == LaneWidth::Two && !embedding_dim.is_multiple_of(2) {
        return Err(EmbeddingError::PackingError { dim: embedding_dim });
    }
    if grad_output.len() != tokens.len() * embedding_dim {
        return Err(EmbeddingError::GradRowMismatch {
            expected: tokens.len(),
            got: grad_output.len().checked_div(embedding_dim).unwrap_or(0),
        });
    }
    check_tokens(tokens, vocab_size)
}

/// Adds `src` into `dst` column by column at the given lane width.
fn accumulate_row(dst: &mut [f64], src: &[f64], lane_width: LaneWidth) {
    match lane_width {
        LaneWidth::One => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        LaneWidth::Two => {
            for (d2, s2) in dst.chunks_exact_mut(2).zip(src.chunks_exact(2)) {
                d2[0] += s2[0];
                d2[1] += s2[1];
            }
        }
    }
}

fn backward_sorted_impl(
    grad_output: &[f64],
    tokens: &[usize],
    vocab_size: usize,
    embedding_dim: usize,
    lane_width: LaneWidth,
    par: bool,
) -> Result<Vec<f64>, EmbeddingError> {
    grad_dims(grad_output, tokens, vocab_size, embedding_dim, lane_width)?;

    // Stable sort on token id keeps equal ids in ascending occurrence
    // position, the defined accumulation order.
    let mut order: Vec<(usize, usize)> = tokens.iter().copied().zip(0..tokens.len()).collect();
    order.sort_by_key(|&(token, _)| token);

    // Segment boundaries: one run of `order` per distinct token id.
    let mut segments: Vec<(usize, std::ops::Range<usize>)> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let token = order[start].0;
        let mut end = start + 1;
        while end < order.len() && order[end].0 == token {
            end += 1;
        }
        segments.push((token, start..end));
        start = end;
    }

    let reduce_segment = |s: usize| {
        let (token, ref range) = segments[s];
        let mut acc = vec![0.0f64; embedding_dim];
        for &(_, position) in &order[range.clone()] {
            let src = &grad_output[position * embedding_dim..(position + 1) * embedding_dim];
            accumulate_row(&mut acc, src, lane_width);
        }
        (token, acc)
    };
    let reduced = if par {
        exec::map_indexed(segments.len(), reduce_segment)
    } else {
        exec::map_indexed_seq(segments.len(), reduce_segment)
    };

    let mut grad_weight = vec![0.0f64; vocab_size * embedding_dim];
    for (token, acc) in reduced {
        grad_weight[token * embedding_dim..(token + 1) * embedding_dim].copy_from_slice(&acc);
    }
    Ok(grad_weight)
}

/// Sort-based deterministic scatter-add: gradient rows grouped by token
/// id, each group summed in ascending occurrence position, groups
/// reduced independently. Returns the flat `vocab_size x embedding_dim`
/// weight gradient.
pub fn backward_sorted(
    grad_output: &[f64],
    tokens: &[usize],
    vocab_size: usize,
    embedding_dim: usize,
    lane_width: LaneWidth,
) -> Result<Vec<f64>, EmbeddingError> {
    backward_sorted_impl(grad_output, tokens, vocab_size, embedding_dim, lane_width, true)
}

/// Single-threaded twin of [`backward_sorted`]; same bytes out.
pub fn backward_sorted_seq(
    grad_output: &[f64],
    tokens: &[usize],
    vocab_size: usize,
    embedding_dim: usize,
    lane_width: LaneWidth,
) -> Result<Vec<f64>, EmbeddingError> {
    backward_sorted_impl(grad_output, tokens, vocab_size, embedding_dim, lane_width, false)
}

/// Scatter-add in a seeded random occurrence order.
///
/// Stands in for the atomic baseline whose addition order is whatever
/// the hardware serves: the seed picks one such order reproducibly.
/// Agreement with [`backward_sorted`] is exact when the additions are
/// (bitwise against rounding) order-independent, e.g. integer-valued
/// gradients, and within rounding otherwise.
pub fn backward_scatter(
    grad_output: &[f64],
    tokens: &[usize],
    vocab_size: usize,
    embedding_dim: usize,
    lane_width: LaneWidth,
    seed: u64,
) -> Result<Vec<f64>, EmbeddingError> {
    grad_dims(grad_output, tokens, vocab_size, embedding_dim, lane_width)?;
    let mut visit: Vec<usize> = (0..tokens.len()).collect();
    let mut rng = crate::rng::seeded(seed);
    crate::rng::shuffle(&mut rng, &mut visit);

    let mut grad_weight = vec![0.0f64; vocab_size * embedding_dim];
    for position in visit {
        let token = tokens[position];
        let dst = &mut grad_weight[token * embedding_dim..(token + 1) * embedding_dim];
        let src = &grad_output[position * embedding_dim..(position + 1) * embedding_dim];
        accumulate_row(dst, src, lane_width);
    }
    Ok(grad_weight)
}

/// Per-column sums of a flat row-major buffer. A scatter-add conserves
/// these: reordering additions never changes what was added, so the
/// column sums of the weight gradient must equal the column sums of the
/// output gradient (exactly, for integer-valued data).
pub fn column_sums(buffer: &[f64], dim: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; dim];
    for row in buffer.chunks_exact(dim) {
        for (s, x) in sums.iter_mut().zip(row) {
            *s += x;
        }
    }
    sums
}
