//! Chunked multi-tensor kernel-launch planning and a reference LAMB step.
//!
//! An optimizer touching hundreds of parameter tensors cannot afford one
//! kernel launch per tensor. The multi-tensor pattern packs (tensor
//! pointer, chunk) descriptors into the kernel argument buffer, which has
//! a hard byte budget, and launches once per packed batch. Two layouts
//! are planned here: the per-tensor descriptor table ([`plan_apex`]),
//! whose argument struct stores one pointer per tensor plus one
//! (tensor, chunk) record per chunk, and the flattened variant
//! ([`plan_contiguous`]), which stores a single base pointer and can
//! therefore pack far more chunks per launch.
//!
//! The norm reductions the LAMB optimizer needs (one global gradient
//! norm, one norm per parameter, one per trust-ratio tensor) are computed
//! over those chunk plans with partial sums combined in ascending
//! (tensor, chunk) order, so the chunked results are bit-reproducible and
//! can be checked against whole-buffer oracles. [`lamb_reference_step`]
//! wires the three norm cases into one full optimizer update.

use crate::exec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors for planning, norm evaluation, and the reference step.
#[derive(Debug, Error, PartialEq)]
pub enum LambError {
    #[error("chunk_size must be at least 1")]
    InvalidChunkSize,
    #[error("tensor at position {index} has zero elements")]
    EmptyTensor { index: usize },
    /// Tensor ids double as flat-buffer segment positions, so they must
    /// be 0, 1, 2, ... in list order.
    #[error("tensor ids must be dense and ascending; position {index} breaks the rule")]
    NonDenseTensorIds { index: usize },
    #[error("invalid budget: {reason}")]
    InvalidBudget { reason: String },
    #[error("metadata needs {required} bytes but the argument budget is {arg_budget_bytes}")]
    BudgetExceeded {
        required: usize,
        arg_budget_bytes: usize,
    },
    #[error("buffer holds {got} elements, plan covers {expected}")]
    BufferMismatch { expected: usize, got: usize },
    #[error("plan is inconsistent: {reason}")]
    PlanMismatch { reason: String },
    #[error("non-finite value at element {index}")]
    NumericDomain { index: usize },
    #[error("invalid hyperparameters: {reason}")]
    InvalidHyperparameters { reason: String },
}

/// One parameter tensor as the planner sees it: an id that doubles as its
/// position in the flat buffer layout, and its element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub tensor_id: usize,
    pub numel: usize,
}

impl TensorDesc {
    /// Descriptor list for tensors laid out back to back in list order.
    pub fn list_from_numels(numels: &[usize]) -> Vec<TensorDesc> {
        numels
            .iter()
            .enumerate()
            .map(|(tensor_id, &numel)| TensorDesc { tensor_id, numel })
            .collect()
    }
}

/// Kernel-argument accounting: how many tensors and chunks one launch may
/// describe, the byte widths of the descriptor fields, and the hard
/// argument-buffer limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMetaBudget {
    pub max_tensor_num: usize,
    pub max_chunk_num: usize,
    pub pointer_bytes: usize,
    pub int_bytes: usize,
    pub byte_bytes: usize,
    pub arg_budget_bytes: usize,
}

impl Default for ChunkMetaBudget {
    /// 110 tensors and 320 chunks per launch with 8-byte pointers and
    /// 4-byte ints inside a 4 KB argument buffer.
    fn default() -> Self {
        Self {
            max_tensor_num: 110,
            max_chunk_num: 320,
            pointer_bytes: 8,
            int_bytes: 4,
            byte_bytes: 1,
            arg_budget_bytes: 4096,
        }
    }
}

/// Argument-struct footprint in bytes.
///
/// The per-tensor table costs `max_tensor_num * (pointer + int)` (address
/// and size per tensor), each chunk record costs `byte + int` (tensor
/// slot and chunk index), and one trailing int marks the launch's start
/// tensor. The contiguous layout replaces the whole per-tensor table with
/// a single base pointer.
pub fn metadata_size(
    max_tensor_num: usize,
    max_chunk_num: usize,
    budget: &ChunkMetaBudget,
    contiguous: bool,
) -> usize {
    let tensor_table = if contiguous {
        budget.pointer_bytes
    } else {
        max_tensor_num * (budget.pointer_bytes + budget.int_bytes)
    };
    tensor_table + max_chunk_num * (budget.byte_bytes + budget.int_bytes) + budget.int_bytes
}

impl ChunkMetaBudget {
    pub fn validate(&self) -> Result<(), LambError> {
        for (name, v) in [
            ("max_tensor_num", self.max_tensor_num),
            ("max_chunk_num", self.max_chunk_num),
            ("pointer_bytes", self.pointer_bytes),
            ("int_bytes", self.int_bytes),
            ("byte_bytes", self.byte_bytes),
        ] {
            if v == 0 {
                return Err(LambError::InvalidBudget {
                    reason: format!("{name} must be at least 1"),
                });
            }
        }
        let required = metadata_size(self.max_tensor_num, self.max_chunk_num, self, false);
        if required > self.arg_budget_bytes {
            return Err(LambError::BudgetExceeded {
                required,
                arg_budget_bytes: self.arg_budget_bytes,
            });
        }
        Ok(())
    }

    /// Chunk capacity of the contiguous layout: with the tensor table
    /// collapsed to one pointer, every remaining argument byte holds
    /// chunk records. Never smaller than `max_chunk_num` whenever this
    /// budget admits at least one tensor in the per-tensor layout.
    pub fn contiguous_chunk_capacity(&self) -> Result<usize, LambError> {
        self.validate()?;
        let fixed = self.pointer_bytes + self.int_bytes;
        let per_chunk = self.byte_bytes + self.int_bytes;
        let capacity = self.arg_budget_bytes.saturating_sub(fixed) / per_chunk;
        if capacity == 0 {
            return Err(LambError::InvalidBudget {
                reason: "argument budget cannot hold a single chunk record".to_string(),
            });
        }
        Ok(capacity)
    }
}

/// One chunk of one tensor: `chunk_index` counts within the tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ChunkRef {
    pub tensor_id: usize,
    pub chunk_index: usize,
}

/// One kernel launch: the distinct tensors it touches (in first-chunk
/// order) and its chunk records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Launch {
    pub tensors: Vec<usize>,
    pub chunks: Vec<ChunkRef>,
}

/// A complete chunking of a tensor list into kernel launches. Every
/// (tensor, chunk) pair appears in exactly one launch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LaunchPlan {
    pub chunk_size: usize,
    pub tensors: Vec<TensorDesc>,
    pub launches: Vec<Launch>,
}

impl LaunchPlan {
    pub fn num_launches(&self) -> usize {
        self.launches.len()
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.len()
    }

    fn chunks_of(&self, tensor_id: usize) -> usize {
        self.tensors[tensor_id].numel.div_ceil(self.chunk_size)
    }

    /// Element range of one chunk in the flat buffer.
    fn chunk_range(&self, r: ChunkRef) -> std::ops::Range<usize> {
        let mut base = 0usize;
        for t in &self.tensors[..r.tensor_id] {
            base += t.numel;
        }
        let start = base + r.chunk_index * self.chunk_size;
        let end = (start + self.chunk_size).min(base + self.tensors[r.tensor_id].numel);
        start..end
    }

    /// All chunk refs in ascending (tensor, chunk) order, the defined
    /// combination order for norm partial sums.
    fn ordered_chunks(&self) -> Vec<ChunkRef> {
        let mut refs: Vec<ChunkRef> = self
            .launches
            .iter()
            .flat_map(|l| l.chunks.iter().copied())
            .collect();
        refs.sort_unstable();
        refs
    }

    /// Confirms the plan covers each (tensor, chunk) pair exactly once
    /// and that `buffer_len` matches the tensor layout.
    fn check_cover(&self, buffer_len: usize) -> Result<(), LambError> {
        if self.chunk_size == 0 {
            return Err(LambError::InvalidChunkSize);
        }
        let expected = self.total_numel();
        if buffer_len != expected {
            return Err(LambError::BufferMismatch {
                expected,
                got: buffer_len,
            });
        }
        let per_tensor: Vec<usize> = (0..self.tensors.len()).map(|t| self.chunks_of(t)).collect();
        let mut seen: Vec<Vec<bool>> = per_tensor.iter().map(|&n| vec![false; n]).collect();
        for launch in &self.launches {
            for &r in &launch.chunks {
                let slot = seen
                    .get_mut(r.tensor_id)
                    .and_then(|v| v.get_mut(r.chunk_index))
                    .ok_or_else(|| LambError::PlanMismatch {
                        reason: format!(
                            "chunk ({}, {}) is out of range",
                            r.tensor_id, r.chunk_index
                        ),
                    })?;
                if *slot {
                    return Err(LambError::PlanMismatch {
                        reason: format!(
                            "chunk ({}, {}) appears twice",
                            r.tensor_id, r.chunk_index
                        ),
                    });
                }
                *slot = true;
            }
        }
        for (tensor_id, flags) in seen.iter().enumerate() {
            if let Some(chunk_index) = flags.iter().position(|&s| !s) {
                return Err(LambError::PlanMismatch {
                    reason: format!("chunk ({tensor_id}, {chunk_index}) is missing"),
                });
            }
        }
        Ok(())
    }
}

fn validate_tensors(tensors: &[TensorDesc]) -> Result<(), LambError> {
    for (index, t) in tensors.iter().enumerate() {
        if t.numel == 0 {
            return Err(LambError::EmptyTensor { index });
        }
        if t.tensor_id != index {
            return Err(LambError::NonDenseTensorIds { index });
        }
    }
    Ok(())
}

/// Greedy per-tensor-table planner.
///
/// Walks tensors in order, appending `ceil(numel / chunk_size)` chunks
/// each; a launch closes when appending the next chunk would exceed the
/// chunk limit, or would introduce a tensor beyond the tensor limit. One
/// tensor's chunks may straddle launches.
pub fn plan_apex(
    tensors: &[TensorDesc],
    chunk_size: usize,
    budget: &ChunkMetaBudget,
) -> Result<LaunchPlan, LambError> {
    if chunk_size == 0 {
        return Err(LambError::InvalidChunkSize);
    }
    validate_tensors(tensors)?;
    budget.validate()?;

    let mut launches = Vec::new();
    let mut cur = Launch {
        tensors: Vec::new(),
        chunks: Vec::new(),
    };
    for t in tensors {
        for chunk_index in 0..t.numel.div_ceil(chunk_size) {
            let brings_new_tensor = cur.tensors.last() != Some(&t.tensor_id);
            let over_chunks = cur.chunks.len() + 1 > budget.max_chunk_num;
            let over_tensors =
                brings_new_tensor && cur.tensors.len() + 1 > budget.max_tensor_num;
            if over_chunks || over_tensors {
                launches.push(std::mem::replace(
                    &mut cur,
                    Launch {
                        tensors: Vec::new(),
                        chunks: Vec::new(),
                    },
                ));
            }
            if cur.tensors.last() != Some(&t.tensor_id) {
                cur.tensors.push(t.tensor_id);
            }
            cur.chunks.push(ChunkRef {
                tensor_id: t.tensor_id,
                chunk_index,
            });
        }
    }
    if !cur.chunks.is_empty() {
        launches.push(cur);
    }
    Ok(LaunchPlan {
        chunk_size,
        tensors: tensors.to_vec(),
        launches,
    })
}

/// Planner for the flattened layout: one logical tensor spanning
/// `total_numel`, chunk capacity recomputed from the collapsed argument
/// struct. Produces the fewest launches the budget allows.
pub fn plan_contiguous(
    total_numel: usize,
    chunk_size: usize,
    budget: &ChunkMetaBudget,
) -> Result<LaunchPlan, LambError> {
    if chunk_size == 0 {
        return Err(LambError::InvalidChunkSize);
    }
    if total_numel == 0 {
        return Err(LambError::EmptyTensor { index: 0 });
    }
    let capacity = budget.contiguous_chunk_capacity()?;
    let total_chunks = total_numel.div_ceil(chunk_size);
    let launches = (0..total_chunks)
        .collect::<Vec<_>>()
        .chunks(capacity)
        .map(|group| Launch {
            tensors: vec![0],
            chunks: group
                .iter()
                .map(|&chunk_index| ChunkRef {
                    tensor_id: 0,
                    chunk_index,
                })
                .collect(),
        })
        .collect();
    Ok(LaunchPlan {
        chunk_size,
        tensors: vec![TensorDesc {
            tensor_id: 0,
            numel: total_numel,
        }],
        launches,
    })
}

fn chunk_partial_sq(buffer: &[f64], range: std::ops::Range<usize>) -> f64 {
    let mut acc = 0.0f64;
    for &x in &buffer[range] {
        acc += x * x;
    }
    acc
}

fn case1_impl(grads: &[f64], plan: &LaunchPlan, par: bool) -> Result<f64, LambError> {
    plan.check_cover(grads.len())?;
    let refs = plan.ordered_chunks();
    let partial = |i: usize| chunk_partial_sq(grads, plan.chunk_range(refs[i]));
    let partials = if par {
        exec::map_indexed(refs.len(), partial)
    } else {
        exec::map_indexed_seq(refs.len(), partial)
    };
    // Chunk partials may be computed concurrently, but the combination
    // runs in ascending (tensor, chunk) order so the result is one fixed
    // value.
    Ok(partials.iter().fold(0.0f64, |acc, p| acc + p))
}

/// Global squared gradient norm over a chunk plan: sum over parameters of
/// the squared L2 norm, the quantity global gradient clipping divides by.
pub fn chunked_norm_case1(grads: &[f64], plan: &LaunchPlan) -> Result<f64, LambError> {
    case1_impl(grads, plan, true)
}

/// Single-threaded twin of [`chunked_norm_case1`]; same bytes out.
pub fn chunked_norm_case1_seq(grads: &[f64], plan: &LaunchPlan) -> Result<f64, LambError> {
    case1_impl(grads, plan, false)
}

/// The whole-buffer alternative backend: one left-to-right pass, no
/// chunking. Doubles as the oracle the chunked path is checked against.
pub fn global_sq_norm_single_pass(grads: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for &x in grads {
        acc += x * x;
    }
    acc
}

fn per_tensor_norms(buffer: &[f64], plan: &LaunchPlan) -> Result<Vec<f64>, LambError> {
    plan.check_cover(buffer.len())?;
    let refs = plan.ordered_chunks();
    let partials = exec::map_indexed(refs.len(), |i| chunk_partial_sq(buffer, plan.chunk_range(refs[i])));
    let mut sq = vec![0.0f64; plan.num_parameters()];
    for (r, p) in refs.iter().zip(&partials) {
        sq[r.tensor_id] += p;
    }
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

/// Per-parameter L2 norms of the master weights, one entry per tensor.
pub fn chunked_norm_case2(params: &[f64], plan: &LaunchPlan) -> Result<Vec<f64>, LambError> {
    per_tensor_norms(params, plan)
}

/// Per-parameter L2 norms of the trust-ratio (update) tensors; identical
/// contract to [`chunked_norm_case2`] on a different buffer.
pub fn chunked_norm_case3(updates: &[f64], plan: &LaunchPlan) -> Result<Vec<f64>, LambError> {
    per_tensor_norms(updates, plan)
}

/// LAMB hyperparameters. The scaling rule is the standard published LAMB
/// update with bias correction; these defaults are conventions of this
/// implementation, configurable because no single canonical set exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient clipping threshold on the L2 norm.
    pub clip_threshold: f64,
}

impl Default for LambParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            clip_threshold: 1.0,
        }
    }
}

impl LambParams {
    pub fn validate(&self) -> Result<(), LambError> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon.is_finite()
            && self.epsilon >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.clip_threshold > 0.0
            && self.clip_threshold.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LambError::InvalidHyperparameters {
                reason: format!("{self:?}"),
            })
        }
    }
}

/// Optimizer state: master parameters and both moment buffers, all flat
/// over the plan's tensor layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambState {
    pub params: Vec<f64>,
    pub exp_avg: Vec<f64>,
    pub exp_avg_sq: Vec<f64>,
    pub step: u64,
}

impl LambState {
    pub fn fresh(params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            params,
            exp_avg: vec![0.0; n],
            exp_avg_sq: vec![0.0; n],
            step: 0,
        }
    }
}

/// Layerwise scale `|w| / |r|`, defined as 1 when either norm is zero.
pub fn trust_ratio(param_norm: f64, update_norm: f64) -> f64 {
    if param_norm == 0.0 || update_norm == 0.0 {
        1.0
    } else {
        param_norm / update_norm
    }
}

/// Everything one step computed, for inspection and cross-checking.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambStepReport {
    pub global_grad_sq_norm: f64,
    pub clip_scale: f64,
    pub param_norms: Vec<f64>,
    pub update_norms: Vec<f64>,
    pub trust_ratios: Vec<f64>,
}

/// One full LAMB update over a chunk plan.
///
/// Gradients are scaled by `min(1, clip_threshold / global_norm)`, the
/// moments advance with bias correction, the raw update is
/// `m_hat / (sqrt(v_hat) + eps) + weight_decay * w`, and each tensor's
/// update is scaled by its trust ratio before `w -= lr * trust * r`.
/// All three norms go through the chunked reductions.
pub fn lamb_reference_step(
    state: &mut LambState,
    grads: &[f64],
    plan: &LaunchPlan,
    hp: &LambParams,
) -> Result<LambStepReport, LambError> {
    hp.validate()?;
    plan.check_cover(grads.len())?;
    let n = plan.total_numel();
    for got in [state.params.len(), state.exp_avg.len(), state.exp_avg_sq.len()] {
        if got != n {
            return Err(LambError::BufferMismatch { expected: n, got });
        }
    }
    for (index, value) in grads.iter().chain(&state.params).enumerate() {
        if !value.is_finite() {
            return Err(LambError::NumericDomain { index: index % n });
        }
    }

    let global_grad_sq_norm = chunked_norm_case1(grads, plan)?;
    let clip_scale = if global_grad_sq_norm == 0.0 {
        1.0
    } else {
        (hp.clip_threshold / global_grad_sq_norm.sqrt()).min(1.0)
    };

    let t = state.step + 1;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let mut update = vec![0.0f64; n];
    for i in 0..n {
        let g = grads[i] * clip_scale;
        state.exp_avg[i] = hp.beta1 * state.exp_avg[i] + (1.0 - hp.beta1) * g;
        state.exp_avg_sq[i] = hp.beta2 * state.exp_avg_sq[i] + (1.0 - hp.beta2) * (g * g);
        let m_hat = state.exp_avg[i] / bc1;
        let v_hat = state.exp_avg_sq[i] / bc2;
        update[i] = m_hat / (v_hat.sqrt() + hp.epsilon) + hp.weight_decay * state.params[i];
    }

    let param_norms = chunked_norm_case2(&state.params, plan)?;
    let update_norms = chunked_norm_case3(&update, plan)?;
    let trust_ratios: Vec<f64> = param_norms
        .iter()
        .zip(&update_norms)
        .map(|(&w, &r)| trust_ratio(w, r))
        .collect();

    let mut base = 0usize;
    for desc in &plan.tensors {
        let trust = trust_ratios[desc.tensor_id];
        let range = base..base + desc.numel;
        for (p, &u) in state.params[range.clone()].iter_mut().zip(&update[range]) {
            *p -= hp.lr * trust * u;
        }
        base += desc.numel;
    }
    state.step = t;
    Ok(LambStepReport {
        global_grad_sq_norm,
        clip_scale,
        param_norms,
        update_norms,
        trust_ratios,
    })
}
