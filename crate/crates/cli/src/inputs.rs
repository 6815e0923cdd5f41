//! Input file loaders shared by the subcommands.
//!
//! Accepted formats:
//! - lengths: one positive integer per line (UTF-8, LF), or a JSON
//!   document `{"max_seq_len": int, "lengths": [int, ...]}`
//! - histogram: JSON list of `{"upper": int, "p": float}`
//! - bucket set: JSON list of `{"lower": int, "upper": int}`
//! - balance input: JSON `{"num_workers": W, "batch_size": B,
//!   "lengths": [[...per worker...]]}`
//! - scenario: JSON `{"workers": W, "batches": [...], "costs": {...},
//!   "sync_every_n": n}` where each batch is either
//!   `{"samples": n, "worker_tokens": [...]}` or
//!   `{"lengths": [[...per worker...]]}`
//! - optimizer tensor list: JSON `{"tensors": [numel, ...],
//!   "chunk_size": int, "budget": {...}}`
//!
//! Unknown keys are rejected everywhere so a typo fails loudly instead of
//! silently falling back to a default.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use unpad_core::fmha::{BucketSet, LengthBucket};
use unpad_core::lamb::ChunkMetaBudget;
use unpad_core::pipeline::{BatchLoad, StageSpec};
use unpad_core::varlen::{LengthBin, SequenceLengths};

use crate::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::new(format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(format!("invalid {what} in {}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LengthsDoc {
    max_seq_len: usize,
    lengths: Vec<usize>,
}

/// Sniffs the two lengths formats: a leading `{` selects the JSON
/// document, anything else is parsed line by line. The line format infers
/// `max_seq_len` as the largest length present.
pub fn load_lengths(path: &Path) -> Result<SequenceLengths, CliError> {
    let text = read_text(path)?;
    if text.trim_start().starts_with('{') {
        let doc: LengthsDoc = serde_json::from_str(&text)
            .map_err(|e| CliError::new(format!("invalid lengths JSON in {}: {e}", path.display())))?;
        return SequenceLengths::new(doc.lengths, doc.max_seq_len).map_err(CliError::from_display);
    }
    let mut lengths = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| {
            CliError::new(format!(
                "{} line {}: expected a positive integer, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        lengths.push(v);
    }
    if lengths.is_empty() {
        return Err(CliError::new(format!("{} holds no lengths", path.display())));
    }
    let max = lengths.iter().copied().max().expect("non-empty");
    SequenceLengths::new(lengths, max).map_err(CliError::from_display)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BinDoc {
    upper: usize,
    p: f64,
}

pub fn load_histogram(path: &Path) -> Result<Vec<LengthBin>, CliError> {
    let bins: Vec<BinDoc> = parse_json(path, "histogram (list of {\"upper\", \"p\"})")?;
    Ok(bins
        .into_iter()
        .map(|b| LengthBin { upper: b.upper, p: b.p })
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BucketDoc {
    lower: usize,
    upper: usize,
}

pub fn load_buckets(path: &Path) -> Result<BucketSet, CliError> {
    let buckets: Vec<BucketDoc> = parse_json(path, "bucket set (list of {\"lower\", \"upper\"})")?;
    let buckets = buckets
        .into_iter()
        .enumerate()
        .map(|(kernel_id, b)| LengthBucket {
            lower: b.lower,
            upper: b.upper,
            kernel_id,
        })
        .collect();
    BucketSet::new(buckets).map_err(CliError::from_display)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceDoc {
    pub num_workers: usize,
    pub batch_size: usize,
    pub lengths: Vec<Vec<usize>>,
}

pub fn load_balance_doc(path: &Path) -> Result<BalanceDoc, CliError> {
    let doc: BalanceDoc = parse_json(
        path,
        "balance input ({\"num_workers\", \"batch_size\", \"lengths\"})",
    )?;
    if doc.lengths.len() != doc.num_workers {
        return Err(CliError::new(format!(
            "{}: lengths lists {} workers, num_workers says {}",
            path.display(),
            doc.lengths.len(),
            doc.num_workers
        )));
    }
    for (w, row) in doc.lengths.iter().enumerate() {
        if row.len() != doc.batch_size {
            return Err(CliError::new(format!(
                "{}: worker {} holds {} lengths, batch_size says {}",
                path.display(),
                w,
                row.len(),
                doc.batch_size
            )));
        }
    }
    Ok(doc)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokensEntry {
    samples: usize,
    worker_tokens: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LengthsEntry {
    lengths: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BatchEntry {
    Tokens(TokensEntry),
    Lengths(LengthsEntry),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct CostsDoc {
    exchange_per_sample: Option<u64>,
    h2d_per_token: Option<u64>,
    gpu_per_token: Option<u64>,
    allreduce_time: Option<u64>,
    d2h_sync_cost: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    workers: usize,
    batches: Vec<BatchEntry>,
    #[serde(default)]
    costs: CostsDoc,
    #[serde(default = "default_sync")]
    sync_every_n: usize,
}

fn default_sync() -> usize {
    1
}

pub struct Scenario {
    pub workers: usize,
    pub batches: Vec<BatchLoad>,
    pub spec: StageSpec,
}

/// Omitted cost fields fall back to the engine defaults; batch entries may
/// give per-worker token sums directly or per-worker sample lengths.
pub fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let doc: ScenarioDoc = parse_json(
        path,
        "scenario ({\"workers\", \"batches\", \"costs\", \"sync_every_n\"}; each batch \
         is {\"samples\", \"worker_tokens\"} or {\"lengths\": [[...]]})",
    )?;
    let d = StageSpec::default();
    let spec = StageSpec {
        exchange_per_sample: doc.costs.exchange_per_sample.unwrap_or(d.exchange_per_sample),
        h2d_per_token: doc.costs.h2d_per_token.unwrap_or(d.h2d_per_token),
        gpu_per_token: doc.costs.gpu_per_token.unwrap_or(d.gpu_per_token),
        allreduce_time: doc.costs.allreduce_time.unwrap_or(d.allreduce_time),
        d2h_sync_cost: doc.costs.d2h_sync_cost.unwrap_or(d.d2h_sync_cost),
        sync_every_n: doc.sync_every_n,
    };
    let mut batches = Vec::with_capacity(doc.batches.len());
    for (i, entry) in doc.batches.into_iter().enumerate() {
        let load = match entry {
            BatchEntry::Tokens(t) => {
                if t.worker_tokens.len() != doc.workers {
                    return Err(CliError::new(format!(
                        "{}: batch {} lists {} worker token sums, scenario declares {} workers",
                        path.display(),
                        i,
                        t.worker_tokens.len(),
                        doc.workers
                    )));
                }
                BatchLoad {
                    samples: t.samples,
                    worker_tokens: t.worker_tokens,
                }
            }
            BatchEntry::Lengths(l) => {
                if l.lengths.len() != doc.workers {
                    return Err(CliError::new(format!(
                        "{}: batch {} lists lengths for {} workers, scenario declares {}",
                        path.display(),
                        i,
                        l.lengths.len(),
                        doc.workers
                    )));
                }
                let samples = l.lengths.first().map(Vec::len).unwrap_or(0);
                if l.lengths.iter().any(|row| row.len() != samples) {
                    return Err(CliError::new(format!(
                        "{}: batch {} gives unequal sample counts across workers",
                        path.display(),
                        i
                    )));
                }
                BatchLoad {
                    samples,
                    worker_tokens: l.lengths.iter().map(|row| row.iter().sum()).collect(),
                }
            }
        };
        batches.push(load);
    }
    Ok(Scenario {
        workers: doc.workers,
        batches,
        spec,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambDoc {
    pub tensors: Vec<usize>,
    pub chunk_size: usize,
    #[serde(default)]
    pub budget: Option<ChunkMetaBudget>,
}

pub fn load_lamb_doc(path: &Path) -> Result<LambDoc, CliError> {
    parse_json(
        path,
        "tensor list ({\"tensors\", \"chunk_size\", \"budget\"})",
    )
}
