//! Padding exchange: sort-and-interleave load balancing across
//! data-parallel workers.
//!
//! With ragged batches, per-worker token counts diverge and every gradient
//! all-reduce waits on the slowest worker. The exchange protocol evens the
//! load in three deterministic steps: gather every worker's samples into
//! one list ordered by worker id, sort that list by valid token count, and
//! deal it back out so worker `i` takes positions `i, i + W, i + 2W, ...`.
//!
//! Every worker runs the same three steps on the same gathered data, so
//! all of them derive the identical plan with no extra coordination; ties
//! in the sort are broken by global sample id to keep the order total.
//! The interleaved assignment bounds the post-exchange spread of worker
//! token sums by `L_max - L_min`, the gap between the longest and shortest
//! sample in the step.

use serde::Serialize;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::slice::ParallelSliceMut;

/// Errors for shard validation and the exchange steps.
#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("no samples to exchange")]
    EmptyShards,
    /// Worker ids must be exactly 0..W-1, each present once.
    #[error("worker ids are not dense 0..{expected}")]
    NonDenseWorkerIds { expected: usize },
    /// The gather step requires the same sample count on every worker.
    #[error("worker {worker_id} holds {got} samples, expected {expected}")]
    UnequalShardSizes {
        worker_id: usize,
        got: usize,
        expected: usize,
    },
    #[error("global sample id {id} appears more than once")]
    DuplicateGlobalId { id: u64 },
    #[error("{len} samples cannot be interleave-sliced across {num_workers} workers")]
    IndivisibleLength { len: usize, num_workers: usize },
    #[error("worker {worker} out of range for {num_workers} workers")]
    WorkerOutOfRange { worker: usize, num_workers: usize },
}

/// One training sample as the balancer sees it. `payload` is an opaque
/// handle to the actual tensors (the five per-sample input tensors travel
/// together); the planner never inspects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Sample {
    pub global_id: u64,
    pub valid_tokens: usize,
    pub payload: u64,
}

/// The samples one worker holds before the exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerShard {
    pub worker_id: usize,
    pub samples: Vec<Sample>,
}

/// Deterministic post-exchange assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExchangePlan {
    /// Per worker, the samples it owns after the exchange, in pickup order.
    pub assignment: Vec<Vec<Sample>>,
    /// The globally sorted list the assignment was sliced from.
    pub sorted_order: Vec<Sample>,
}

impl ExchangePlan {
    pub fn num_workers(&self) -> usize {
        self.assignment.len()
    }

    pub fn assigned_ids(&self, worker: usize) -> Vec<u64> {
        self.assignment[worker].iter().map(|s| s.global_id).collect()
    }
}

/// Before/after balance accounting for one exchange.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceMetrics {
    pub tokens_before: Vec<usize>,
    pub tokens_after: Vec<usize>,
    /// max - min of per-worker token sums.
    pub spread_before: usize,
    pub spread_after: usize,
    /// max / mean of per-worker token sums; 1.0 when perfectly balanced.
    pub imbalance_before: f64,
    pub imbalance_after: f64,
}

fn validate_shards(shards: &[WorkerShard]) -> Result<Vec<usize>, BalanceError> {
    let num_workers = shards.len();
    if num_workers == 0 {
        return Err(BalanceError::EmptyShards);
    }
    // Dense 0..W-1, each id once: order within the slice is irrelevant.
    let mut order = vec![usize::MAX; num_workers];
    for (pos, shard) in shards.iter().enumerate() {
        if shard.worker_id >= num_workers || order[shard.worker_id] != usize::MAX {
            return Err(BalanceError::NonDenseWorkerIds {
                expected: num_workers,
            });
        }
        order[shard.worker_id] = pos;
    }
    let expected = shards[order[0]].samples.len();
    if expected == 0 {
        return Err(BalanceError::EmptyShards);
    }
    for &pos in &order {
        let shard = &shards[pos];
        if shard.samples.len() != expected {
            return Err(BalanceError::UnequalShardSizes {
                worker_id: shard.worker_id,
                got: shard.samples.len(),
                expected,
            });
        }
    }
    Ok(order)
}

/// Concatenates all shards in worker-id order (not slice order), modeling
/// the gather collective every worker performs identically.
///
/// Requires dense worker ids, equal shard sizes, and globally unique
/// sample ids.
pub fn all_gather(shards: &[WorkerShard]) -> Result<Vec<Sample>, BalanceError> {
    let order = validate_shards(shards)?;
    let mut gathered = Vec::with_capacity(shards.len() * shards[order[0]].samples.len());
    for &pos in &order {
        gathered.extend_from_slice(&shards[pos].samples);
    }
    let mut ids: Vec<u64> = gathered.iter().map(|s| s.global_id).collect();
    ids.sort_unstable();
    for pair in ids.windows(2) {
        if pair[0] == pair[1] {
            return Err(BalanceError::DuplicateGlobalId { id: pair[0] });
        }
    }
    Ok(gathered)
}

/// Sorts nondecreasing by valid token count, ties by global id ascending.
///
/// The key is a total order (ids are unique), so the unstable parallel
/// sort and a stable sequential sort produce the same bytes.
pub fn sort_by_valid_tokens(samples: &[Sample]) -> Vec<Sample> {
    let mut sorted = samples.to_vec();
    let key = |s: &Sample| (s.valid_tokens, s.global_id);
    #[cfg(feature = "parallel")]
    sorted.par_sort_unstable_by_key(key);
    #[cfg(not(feature = "parallel"))]
    sorted.sort_unstable_by_key(key);
    sorted
}

/// Positions `worker, worker + W, worker + 2W, ...` of the sorted list.
pub fn interleave_slice(
    sorted: &[Sample],
    worker: usize,
    num_workers: usize,
) -> Result<Vec<Sample>, BalanceError> {
    if worker >= num_workers {
        return Err(BalanceError::WorkerOutOfRange {
            worker,
            num_workers,
        });
    }
    if num_workers == 0 || !sorted.len().is_multiple_of(num_workers) {
        return Err(BalanceError::IndivisibleLength {
            len: sorted.len(),
            num_workers,
        });
    }
    Ok(sorted
        .iter()
        .skip(worker)
        .step_by(num_workers)
        .copied()
        .collect())
}

/// Runs the full exchange: gather, sort, interleave-slice for every
/// worker. Output depends only on the shard contents, never on which
/// worker computes it or in what order the shards are listed.
pub fn exchange_padding(
    shards: &[WorkerShard],
) -> Result<(ExchangePlan, BalanceMetrics), BalanceError> {
    let gathered = all_gather(shards)?;
    let sorted = sort_by_valid_tokens(&gathered);
    let num_workers = shards.len();
    let assignment = (0..num_workers)
        .map(|w| interleave_slice(&sorted, w, num_workers))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = ExchangePlan {
        assignment,
        sorted_order: sorted,
    };
    let metrics = balance_metrics(&plan, shards)?;
    Ok((plan, metrics))
}

fn summarize(sums: &[usize]) -> (usize, f64) {
    let max = sums.iter().copied().max().unwrap_or(0);
    let min = sums.iter().copied().min().unwrap_or(0);
    let total: usize = sums.iter().sum();
    let ratio = if total == 0 {
        1.0
    } else {
        max as f64 / (total as f64 / sums.len() as f64)
    };
    (max - min, ratio)
}

/// Token-sum spreads and imbalance ratios before vs after the exchange.
pub fn balance_metrics(
    plan: &ExchangePlan,
    shards: &[WorkerShard],
) -> Result<BalanceMetrics, BalanceError> {
    let order = validate_shards(shards)?;
    let tokens_before: Vec<usize> = order
        .iter()
        .map(|&pos| shards[pos].samples.iter().map(|s| s.valid_tokens).sum())
        .collect();
    let tokens_after: Vec<usize> = plan
        .assignment
        .iter()
        .map(|samples| samples.iter().map(|s| s.valid_tokens).sum())
        .collect();
    let (spread_before, imbalance_before) = summarize(&tokens_before);
    let (spread_after, imbalance_after) = summarize(&tokens_after);
    Ok(BalanceMetrics {
        tokens_before,
        tokens_after,
        spread_before,
        spread_after,
        imbalance_before,
        imbalance_after,
    })
}
