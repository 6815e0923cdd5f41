//! Ragged batch storage for variable-length token sequences.
//!
//! A batch of sequences with lengths `[2, 1, 3]` is conventionally stored
//! padded, as a `3 x max_seq_len` grid plus a 0/1 mask. The unpadded form
//! drops every pad position instead: all valid tokens live in one flat
//! buffer and a prefix-sum array `batch_offset` records where each sequence
//! starts. For lengths `[2, 1, 3]` the offsets are `[0, 2, 3, 6]`; sequence
//! `b` occupies `values[batch_offset[b]..batch_offset[b + 1]]`.
//!
//! Tokens are generic over the element type so the same machinery serves
//! integer ids, masks, and real-valued activation rows. Transforms in both
//! directions are exact gathers/scatters: `unpad(pad(x)) == x` bit for bit,
//! and padded grids round-trip as long as their pad positions actually hold
//! the pad value, which [`PaddedBatch::new`] enforces.
//!
//! The module also quantifies what padding costs ([`redundancy_ratio`]) and
//! samples synthetic length distributions ([`gen_lengths`]) so downstream
//! planners can be exercised on realistic ragged workloads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for ragged batch construction and transforms.
#[derive(Debug, Error, PartialEq)]
pub enum VarlenError {
    /// A batch must contain at least one sequence.
    #[error("batch is empty")]
    EmptyBatch,
    /// A sequence length fell outside `1..=max_seq_len`.
    #[error("length {len} at index {index} is outside 1..={max_seq_len}")]
    LengthOutOfRange {
        index: usize,
        len: usize,
        max_seq_len: usize,
    },
    /// A mask row had a 1 after a 0; only prefix-contiguous masks are valid.
    #[error("mask row {row} is not a contiguous prefix of ones")]
    NonPrefixMask { row: usize },
    /// A masked-out grid position did not hold the pad value.
    #[error("padded position ({row}, {col}) does not hold the pad value")]
    PadValueMismatch { row: usize, col: usize },
    /// Flat buffer sizes disagree with the declared shape.
    #[error("shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    /// `batch_offset` must start at 0, be nondecreasing, and end at the
    /// total token count.
    #[error("batch_offset is invalid at position {position}")]
    InvalidOffsets { position: usize },
    /// A sequence is too long to pad into the requested width.
    #[error("sequence {index} has {len} tokens, exceeding max_seq_len {max_seq_len}")]
    CapacityExceeded {
        index: usize,
        len: usize,
        max_seq_len: usize,
    },
    /// A sampling histogram was empty, had a negative or non-finite
    /// probability, a zero-length bin, or mass that does not sum to 1.
    #[error("invalid length histogram: {reason}")]
    InvalidHistogram { reason: String },
    /// Zero sequences were requested from the sampler.
    #[error("cannot sample an empty batch")]
    EmptySample,
}

/// Validated per-sequence token counts for one batch.
///
/// Invariants: the batch is non-empty and every length satisfies
/// `1 <= len <= max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SequenceLengths {
    lengths: Vec<usize>,
    max_seq_len: usize,
}

impl SequenceLengths {
    pub fn new(lengths: Vec<usize>, max_seq_len: usize) -> Result<Self, VarlenError> {
        if lengths.is_empty() {
            return Err(VarlenError::EmptyBatch);
        }
        for (index, &len) in lengths.iter().enumerate() {
            if len == 0 || len > max_seq_len {
                return Err(VarlenError::LengthOutOfRange {
                    index,
                    len,
                    max_seq_len,
                });
            }
        }
        Ok(Self {
            lengths,
            max_seq_len,
        })
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    /// Total number of real tokens in the batch.
    pub fn valid_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Number of grid slots the padded layout would allocate.
    pub fn padded_tokens(&self) -> usize {
        self.lengths.len() * self.max_seq_len
    }

    /// Exclusive prefix sums with the total appended; see
    /// [`compute_batch_offset`].
    pub fn batch_offset(&self) -> Vec<usize> {
        // Lengths are validated, so the free function cannot fail here.
        compute_batch_offset(&self.lengths).expect("validated lengths")
    }
}

/// Computes the ragged offset array for a list of sequence lengths.
///
/// The result has one more entry than `lengths`: entry `b` is the number of
/// tokens before sequence `b` and the final entry is the total.
///
/// ```
/// use unpad_core::varlen::compute_batch_offset;
/// assert_eq!(compute_batch_offset(&[2, 1, 3]).unwrap(), vec![0, 2, 3, 6]);
/// assert_eq!(compute_batch_offset(&[5]).unwrap(), vec![0, 5]);
/// ```
pub fn compute_batch_offset(lengths: &[usize]) -> Result<Vec<usize>, VarlenError> {
    if lengths.is_empty() {
        return Err(VarlenError::EmptyBatch);
    }
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    let mut running = 0usize;
    offsets.push(0);
    for &len in lengths {
        running += len;
        offsets.push(running);
    }
    Ok(offsets)
}

/// Recovers per-sequence lengths from an offset array by differencing.
///
/// Inverse of [`compute_batch_offset`]; used as an independent check that
/// offsets were built correctly.
pub fn lengths_from_offsets(batch_offset: &[usize]) -> Result<Vec<usize>, VarlenError> {
    validate_offsets(batch_offset)?;
    Ok(batch_offset
        .windows(2)
        .map(|pair| pair[1] - pair[0])
        .collect())
}

fn validate_offsets(batch_offset: &[usize]) -> Result<(), VarlenError> {
    if batch_offset.len() < 2 {
        return Err(VarlenError::InvalidOffsets {
            position: batch_offset.len(),
        });
    }
    if batch_offset[0] != 0 {
        return Err(VarlenError::InvalidOffsets { position: 0 });
    }
    for i in 1..batch_offset.len() {
        if batch_offset[i] < batch_offset[i - 1] {
            return Err(VarlenError::InvalidOffsets { position: i });
        }
    }
    Ok(())
}

/// Flat positions of the set entries of a row-major 0/1 grid, ascending.
///
/// For a padded batch mask this is exactly the gather index list that maps
/// grid rows to packed rows, which is how the pad and unpad transforms are
/// expressed on device.
///
/// ```
/// use unpad_core::varlen::nonzero_indices;
/// let mask = [true, true, false, true, false, false];
/// assert_eq!(nonzero_indices(&mask), vec![0, 1, 3]);
/// ```
pub fn nonzero_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Rectangular `batch_size x max_seq_len` grid with a prefix-contiguous
/// validity mask.
///
/// Invariants: `values` and `mask` both hold exactly
/// `batch_size * max_seq_len` entries, each mask row is a contiguous prefix
/// of `true`, and every masked-out position holds `pad_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<T> {
    values: Vec<T>,
    mask: Vec<bool>,
    batch_size: usize,
    max_seq_len: usize,
    pad_value: T,
}

impl<T: Clone + PartialEq> PaddedBatch<T> {
    pub fn new(
        values: Vec<T>,
        mask: Vec<bool>,
        batch_size: usize,
        max_seq_len: usize,
        pad_value: T,
    ) -> Result<Self, VarlenError> {
        if batch_size == 0 {
            return Err(VarlenError::EmptyBatch);
        }
        let expected = batch_size * max_seq_len;
        if values.len() != expected {
            return Err(VarlenError::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        if mask.len() != expected {
            return Err(VarlenError::ShapeMismatch {
                expected,
                got: mask.len(),
            });
        }
        for row in 0..batch_size {
            let row_mask = &mask[row * max_seq_len..(row + 1) * max_seq_len];
            let len = prefix_len(row_mask).ok_or(VarlenError::NonPrefixMask { row })?;
            for col in len..max_seq_len {
                if values[row * max_seq_len + col] != pad_value {
                    return Err(VarlenError::PadValueMismatch { row, col });
                }
            }
        }
        Ok(Self {
            values,
            mask,
            batch_size,
            max_seq_len,
            pad_value,
        })
    }
}

/// Length of the `true` prefix, or `None` if a `true` follows a `false`.
fn prefix_len(row_mask: &[bool]) -> Option<usize> {
    let len = row_mask.iter().take_while(|&&m| m).count();
    if row_mask[len..].iter().any(|&m| m) {
        None
    } else {
        Some(len)
    }
}

impl<T> PaddedBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn pad_value(&self) -> &T {
        &self.pad_value
    }

    pub fn row(&self, b: usize) -> &[T] {
        &self.values[b * self.max_seq_len..(b + 1) * self.max_seq_len]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_seq_len..(b + 1) * self.max_seq_len]
    }

    /// Valid token count of row `b`.
    pub fn row_len(&self, b: usize) -> usize {
        self.mask_row(b).iter().take_while(|&&m| m).count()
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch_size).map(|b| self.row_len(b)).collect()
    }

    /// Gather indices of the valid grid positions; see [`nonzero_indices`].
    pub fn nonzero_indices(&self) -> Vec<usize> {
        nonzero_indices(&self.mask)
    }
}

/// Packed ragged batch: all valid tokens plus the offset array.
///
/// Invariants: `batch_offset` starts at 0, is nondecreasing, and its last
/// entry equals `values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpaddedBatch<T> {
    values: Vec<T>,
    batch_offset: Vec<usize>,
}

impl<T> UnpaddedBatch<T> {
    pub fn from_parts(values: Vec<T>, batch_offset: Vec<usize>) -> Result<Self, VarlenError> {
        validate_offsets(&batch_offset)?;
        let total = *batch_offset.last().expect("validated offsets");
        if total != values.len() {
            return Err(VarlenError::ShapeMismatch {
                expected: total,
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            batch_offset,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn batch_offset(&self) -> &[usize] {
        &self.batch_offset
    }

    pub fn batch_size(&self) -> usize {
        self.batch_offset.len() - 1
    }

    pub fn total_tokens(&self) -> usize {
        self.values.len()
    }

    pub fn sequence(&self, b: usize) -> &[T] {
        &self.values[self.batch_offset[b]..self.batch_offset[b + 1]]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.batch_offset
            .windows(2)
            .map(|pair| pair[1] - pair[0])
            .collect()
    }
}

/// Gathers the valid tokens of a padded grid into the packed layout.
///
/// Infallible because [`PaddedBatch`] construction already rejected
/// non-prefix masks and misplaced pad values.
pub fn unpad<T: Clone>(padded: &PaddedBatch<T>) -> UnpaddedBatch<T> {
    let mut values = Vec::new();
    let mut batch_offset = Vec::with_capacity(padded.batch_size() + 1);
    batch_offset.push(0);
    for b in 0..padded.batch_size() {
        let len = padded.row_len(b);
        let start = b * padded.max_seq_len();
        values.extend_from_slice(&padded.values[start..start + len]);
        batch_offset.push(values.len());
    }
    UnpaddedBatch {
        values,
        batch_offset,
    }
}

/// Scatters a packed batch back into a `batch_size x max_seq_len` grid,
/// filling pad positions with `pad_value`.
///
/// Fails with [`VarlenError::CapacityExceeded`] when any sequence is longer
/// than `max_seq_len`.
pub fn pad<T: Clone + PartialEq>(
    unpadded: &UnpaddedBatch<T>,
    max_seq_len: usize,
    pad_value: T,
) -> Result<PaddedBatch<T>, VarlenError> {
    let batch_size = unpadded.batch_size();
    for (index, len) in unpadded.lengths().into_iter().enumerate() {
        if len > max_seq_len {
            return Err(VarlenError::CapacityExceeded {
                index,
                len,
                max_seq_len,
            });
        }
    }
    let mut values = vec![pad_value.clone(); batch_size * max_seq_len];
    let mut mask = vec![false; batch_size * max_seq_len];
    for b in 0..batch_size {
        let seq = unpadded.sequence(b);
        let start = b * max_seq_len;
        values[start..start + seq.len()].clone_from_slice(seq);
        mask[start..start + seq.len()].fill(true);
    }
    Ok(PaddedBatch {
        values,
        mask,
        batch_size,
        max_seq_len,
        pad_value,
    })
}

/// How much work the padded layout wastes for a given length profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RedundancyReport {
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub valid_tokens: usize,
    pub padded_tokens: usize,
    /// `padded_tokens / valid_tokens`; an upper bound on the throughput
    /// gain from removing padding for token-proportional work.
    pub theoretical_speedup: f64,
}

/// Token-count accounting for one batch. `theoretical_speedup` is 1.0 when
/// every sequence is full length.
pub fn redundancy_ratio(lengths: &SequenceLengths) -> RedundancyReport {
    let valid = lengths.valid_tokens();
    let padded = lengths.padded_tokens();
    RedundancyReport {
        batch_size: lengths.batch_size(),
        max_seq_len: lengths.max_seq_len(),
        valid_tokens: valid,
        padded_tokens: padded,
        theoretical_speedup: padded as f64 / valid as f64,
    }
}

/// One point mass of a length histogram: a sequence length and its
/// probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub upper: usize,
    pub p: f64,
}

/// Samples `n` sequence lengths from a histogram by inverse-CDF lookup.
///
/// The generator is ChaCha8 keyed with `seed_from_u64(seed)`; each draw
/// maps the high 53 bits of one 64-bit output to a uniform in [0, 1) and
/// walks the cumulative bin masses, with the final bin absorbing any
/// floating-point residue. The algorithm is pinned by this crate, so equal
/// seeds produce equal batches on every platform.
///
/// `max_seq_len` of the result is the largest bin length. Probabilities
/// must be nonnegative, finite, and sum to 1 within 1e-9.
pub fn gen_lengths(
    histogram: &[LengthBin],
    n: usize,
    seed: u64,
) -> Result<SequenceLengths, VarlenError> {
    if histogram.is_empty() {
        return Err(VarlenError::InvalidHistogram {
            reason: "no bins".to_string(),
        });
    }
    if n == 0 {
        return Err(VarlenError::EmptySample);
    }
    let mut mass = 0.0f64;
    for (i, bin) in histogram.iter().enumerate() {
        if bin.upper == 0 {
            return Err(VarlenError::InvalidHistogram {
                reason: format!("bin {i} has zero length"),
            });
        }
        if !bin.p.is_finite() || bin.p < 0.0 {
            return Err(VarlenError::InvalidHistogram {
                reason: format!("bin {i} has probability {}", bin.p),
            });
        }
        mass += bin.p;
    }
    if (mass - 1.0).abs() > 1e-9 {
        return Err(VarlenError::InvalidHistogram {
            reason: format!("probabilities sum to {mass}, not 1"),
        });
    }
    let max_seq_len = histogram.iter().map(|b| b.upper).max().expect("non-empty");

    let mut rng = crate::rng::seeded(seed);
    let mut lengths = Vec::with_capacity(n);
    for _ in 0..n {
        let u = crate::rng::uniform_f64(&mut rng);
        let mut cumulative = 0.0f64;
        let mut chosen = histogram.len() - 1;
        for (i, bin) in histogram.iter().enumerate() {
            cumulative += bin.p;
            if u < cumulative {
                chosen = i;
                break;
            }
        }
        lengths.push(histogram[chosen].upper);
    }
    SequenceLengths::new(lengths, max_seq_len)
}
