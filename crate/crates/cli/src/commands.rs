//! The nine subcommands: flag definitions, config overrides, and the run
//! functions that produce report bodies.
//!
//! Every parameter resolves as flag, else config value, else default, so
//! a config file can drive a whole run while any single flag still wins.
//! Required parameters missing from both sources are validation errors
//! (exit 1), not usage errors: the config file is a legitimate way to
//! supply them, so clap cannot enforce presence at parse time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use serde_json::{json, Value};

use unpad_core::embedding::LaneWidth;
use unpad_core::fusion::Phase;
use unpad_core::rng::ChaCha8Rng;
use unpad_core::{attention, balance, embedding, fmha, fusion, lamb, pipeline, rng, varlen};

use crate::report::ReportBody;
use crate::{command_config, CliError};

fn pick<T>(flag: Option<T>, cfg: Option<T>, default: T) -> T {
    flag.or(cfg).unwrap_or(default)
}

fn need<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(cfg).ok_or_else(|| {
        CliError::new(format!(
            "missing required parameter `{name}` (pass --{name} or set \"{name}\" in --config)"
        ))
    })
}

fn positive(value: usize, name: &str) -> Result<usize, CliError> {
    if value == 0 {
        return Err(CliError::new(format!("`{name}` must be positive")));
    }
    Ok(value)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn opt_path(p: &Option<PathBuf>) -> Value {
    match p {
        Some(p) => Value::String(path_str(p)),
        None => Value::Null,
    }
}

/// Uniform integer in 1..=upper from one generator draw.
fn draw(r: &mut ChaCha8Rng, upper: usize) -> usize {
    (rng::uniform_f64(r) * upper as f64) as usize + 1
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("core types hold no non-finite floats")
}

// ---------------------------------------------------------------- gen-lengths

#[derive(Args, Debug)]
pub struct GenLengthsArgs {
    /// Histogram file: JSON list of {"upper": int, "p": float}.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    /// Number of lengths to sample.
    #[arg(long)]
    pub count: Option<usize>,
    /// Also write the sampled lengths here, one per line.
    #[arg(long)]
    pub lengths_out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GenLengthsConfig {
    hist: Option<PathBuf>,
    count: Option<usize>,
    lengths_out: Option<PathBuf>,
}

pub fn gen_lengths(a: &GenLengthsArgs, cfg: Option<&Value>, seed: u64) -> Result<ReportBody, CliError> {
    let cfg: GenLengthsConfig = command_config(cfg)?;
    let hist = need(a.hist.clone(), cfg.hist, "hist")?;
    let count = positive(pick(a.count, cfg.count, 10_000), "count")?;
    let lengths_out = a.lengths_out.clone().or(cfg.lengths_out);

    let bins = crate::inputs::load_histogram(&hist)?;
    let lengths = varlen::gen_lengths(&bins, count, seed).map_err(CliError::from_display)?;
    let rr = varlen::redundancy_ratio(&lengths);
    let mean = rr.valid_tokens as f64 / rr.batch_size as f64;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in lengths.lengths() {
        *counts.entry(l).or_insert(0) += 1;
    }
    let length_counts: Vec<Value> = counts
        .iter()
        .map(|(l, c)| json!({"length": l, "count": c}))
        .collect();

    if let Some(path) = &lengths_out {
        let mut text = String::with_capacity(rr.batch_size * 4);
        for &l in lengths.lengths() {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote {} lengths to {}", rr.batch_size, path.display());
    }

    Ok(ReportBody {
        inputs: json!({
            "hist": path_str(&hist),
            "count": count,
            "seed": seed,
            "lengths_out": opt_path(&lengths_out),
        }),
        metrics: json!({
            "count": rr.batch_size,
            "max_seq_len": rr.max_seq_len,
            "mean_length": mean,
            "valid_tokens": rr.valid_tokens,
            "padded_tokens": rr.padded_tokens,
            "theoretical_speedup": rr.theoretical_speedup,
        }),
        detail: json!({
            "num_bins": bins.len(),
            "length_counts": length_counts,
        }),
    })
}

// ----------------------------------------------------------------- redundancy

#[derive(Args, Debug)]
pub struct RedundancyArgs {
    /// Lengths file: one integer per line, or JSON {"max_seq_len", "lengths"}.
    #[arg(long)]
    pub lengths: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RedundancyConfig {
    lengths: Option<PathBuf>,
}

pub fn redundancy(a: &RedundancyArgs, cfg: Option<&Value>, seed: u64) -> Result<ReportBody, CliError> {
    let cfg: RedundancyConfig = command_config(cfg)?;
    let lengths = need(a.lengths.clone(), cfg.lengths, "lengths")?;
    let sl = crate::inputs::load_lengths(&lengths)?;
    let rr = varlen::redundancy_ratio(&sl);
    Ok(ReportBody {
        inputs: json!({ "lengths": path_str(&lengths), "seed": seed }),
        metrics: to_value(&rr),
        detail: json!({}),
    })
}

// ------------------------------------------------------------ attention-check

#[derive(Args, Debug)]
pub struct AttentionCheckArgs {
    /// Randomized batches to compare.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sequences per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Longest sequence a batch may hold.
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-head feature width.
    #[arg(long)]
    pub head_dim: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionCheckConfig {
    trials: Option<usize>,
    batch_size: Option<usize>,
    max_seq_len: Option<usize>,
    heads: Option<usize>,
    head_dim: Option<usize>,
}

pub fn attention_check(
    a: &AttentionCheckArgs,
    cfg: Option<&Value>,
    seed: u64,
) -> Result<ReportBody, CliError> {
    let cfg: AttentionCheckConfig = command_config(cfg)?;
    let trials = positive(pick(a.trials, cfg.trials, 25), "trials")?;
    let batch_size = positive(pick(a.batch_size, cfg.batch_size, 4), "batch_size")?;
    let max_seq_len = positive(pick(a.max_seq_len, cfg.max_seq_len, 32), "max_seq_len")?;
    let heads = pick(a.heads, cfg.heads, 2);
    let head_dim = pick(a.head_dim, cfg.head_dim, 8);

    let mcfg = attention::MhaConfig::new(heads, head_dim).map_err(CliError::from_display)?;
    let dm = mcfg.model_dim();
    let mut r = rng::seeded(seed);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut bitwise = true;
    let mut perturb_ok = true;

    for _ in 0..trials {
        let lengths: Vec<usize> = (0..batch_size).map(|_| draw(&mut r, max_seq_len)).collect();
        let total: usize = lengths.iter().sum();
        let mut rand_buf = |n: usize| -> Vec<f64> {
            (0..n).map(|_| 2.0 * rng::uniform_f64(&mut r) - 1.0).collect()
        };
        let q = rand_buf(total * dm);
        let k = rand_buf(total * dm);
        let v = rand_buf(total * dm);
        let offsets = varlen::compute_batch_offset(&lengths).map_err(CliError::from_display)?;
        let out_u = attention::mha_unpadded(&q, &k, &v, &offsets, &mcfg)
            .map_err(CliError::from_display)?;

        let cells = batch_size * max_seq_len;
        let mut qp = vec![0.0f64; cells * dm];
        let mut kp = vec![0.0f64; cells * dm];
        let mut vp = vec![0.0f64; cells * dm];
        let mut mask = vec![false; cells];
        let mut cursor = 0usize;
        for (b, &len) in lengths.iter().enumerate() {
            for t in 0..len {
                let cell = b * max_seq_len + t;
                mask[cell] = true;
                let src = (cursor + t) * dm;
                let dst = cell * dm;
                qp[dst..dst + dm].copy_from_slice(&q[src..src + dm]);
                kp[dst..dst + dm].copy_from_slice(&k[src..src + dm]);
                vp[dst..dst + dm].copy_from_slice(&v[src..src + dm]);
            }
            cursor += len;
        }
        let out_p = attention::mha_padded(&qp, &kp, &vp, &mask, batch_size, max_seq_len, &mcfg)
            .map_err(CliError::from_display)?;

        let idx = varlen::nonzero_indices(&mask);
        for (row, &cell) in idx.iter().enumerate() {
            for d in 0..dm {
                let x = out_u[row * dm + d];
                let y = out_p[cell * dm + d];
                if x.to_bits() != y.to_bits() {
                    bitwise = false;
                }
                let abs = (x - y).abs();
                max_abs = max_abs.max(abs);
                if abs > 0.0 {
                    max_rel = max_rel.max(abs / x.abs().max(f64::MIN_POSITIVE));
                }
            }
        }

        let mut qq = qp.clone();
        let mut kk = kp.clone();
        let mut vv = vp.clone();
        for (cell, &m) in mask.iter().enumerate() {
            if !m {
                for d in 0..dm {
                    qq[cell * dm + d] = 7.5;
                    kk[cell * dm + d] = -3.25;
                    vv[cell * dm + d] = 11.0;
                }
            }
        }
        let out_p2 = attention::mha_padded(&qq, &kk, &vv, &mask, batch_size, max_seq_len, &mcfg)
            .map_err(CliError::from_display)?;
        for &cell in &idx {
            for d in 0..dm {
                if out_p2[cell * dm + d].to_bits() != out_p[cell * dm + d].to_bits() {
                    perturb_ok = false;
                }
            }
        }
    }

    let tolerance = 1e-10;
    let equivalent = max_rel <= tolerance && perturb_ok;
    if !equivalent {
        return Err(CliError::new(format!(
            "attention equivalence check failed: max relative deviation {max_rel:e}, \
             perturbation invariant: {perturb_ok}"
        )));
    }
    Ok(ReportBody {
        inputs: json!({
            "trials": trials,
            "batch_size": batch_size,
            "max_seq_len": max_seq_len,
            "heads": heads,
            "head_dim": head_dim,
            "seed": seed,
        }),
        metrics: json!({
            "model_dim": dm,
            "max_abs_diff": max_abs,
            "max_rel_deviation": max_rel,
            "bitwise_equal": bitwise,
            "perturbation_invariant": perturb_ok,
            "equivalent": equivalent,
        }),
        detail: json!({ "tolerance": tolerance }),
    })
}

// -------------------------------------------------------------- schedule-fmha

#[derive(Args, Debug)]
pub struct ScheduleFmhaArgs {
    /// Lengths file: one integer per line, or JSON {"max_seq_len", "lengths"}.
    #[arg(long)]
    pub lengths: Option<PathBuf>,
    /// Bucket set file: JSON list of {"lower": int, "upper": int}.
    /// Defaults to four uniform buckets covering (0, 512].
    #[arg(long)]
    pub buckets: Option<PathBuf>,
    /// Concurrent lanes to schedule onto.
    #[arg(long)]
    pub lanes: Option<usize>,
    /// Cost per sequence per squared bucket upper bound.
    #[arg(long)]
    pub c_quadratic: Option<f64>,
    /// Cost per sequence per bucket upper bound.
    #[arg(long)]
    pub c_linear: Option<f64>,
    /// Flat cost per kernel launch.
    #[arg(long)]
    pub c_launch: Option<f64>,
    /// Work units a lane retires per time unit.
    #[arg(long)]
    pub lane_capacity: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleFmhaConfig {
    lengths: Option<PathBuf>,
    buckets: Option<PathBuf>,
    lanes: Option<usize>,
    c_quadratic: Option<f64>,
    c_linear: Option<f64>,
    c_launch: Option<f64>,
    lane_capacity: Option<f64>,
}

pub fn schedule_fmha(
    a: &ScheduleFmhaArgs,
    cfg: Option<&Value>,
    seed: u64,
) -> Result<ReportBody, CliError> {
    let cfg: ScheduleFmhaConfig = command_config(cfg)?;
    let lengths = need(a.lengths.clone(), cfg.lengths, "lengths")?;
    let buckets = a.buckets.clone().or(cfg.buckets);
    let lanes = pick(a.lanes, cfg.lanes, 4);
    let default_model = fmha::FmhaCostModel::default();
    let model = fmha::FmhaCostModel {
        c_quadratic: pick(a.c_quadratic, cfg.c_quadratic, default_model.c_quadratic),
        c_linear: pick(a.c_linear, cfg.c_linear, default_model.c_linear),
        c_launch: pick(a.c_launch, cfg.c_launch, default_model.c_launch),
        lane_capacity: pick(a.lane_capacity, cfg.lane_capacity, default_model.lane_capacity),
    };

    let sl = crate::inputs::load_lengths(&lengths)?;
    let bucket_set = match &buckets {
        Some(p) => crate::inputs::load_buckets(p)?,
        None => fmha::BucketSet::default_512(),
    };
    let plan = fmha::group_sequences(&sl, &bucket_set).map_err(CliError::from_display)?;
    let schedule = fmha::build_stream_schedule(&plan, lanes, &model).map_err(CliError::from_display)?;
    let est = fmha::estimate_time(&schedule, &model).map_err(CliError::from_display)?;
    let baseline =
        fmha::baseline_max_length_cost(&sl, &bucket_set, &model).map_err(CliError::from_display)?;

    let groups: Vec<Value> = plan
        .groups
        .iter()
        .map(|g| {
            json!({
                "bucket_index": g.bucket_index,
                "lower": g.bucket.lower,
                "upper": g.bucket.upper,
                "count": g.count(),
            })
        })
        .collect();
    let task_times: Vec<Value> = est.task_times.iter().map(|(s, e)| json!([s, e])).collect();

    Ok(ReportBody {
        inputs: json!({
            "lengths": path_str(&lengths),
            "buckets": opt_path(&buckets),
            "lanes": lanes,
            "cost_model": to_value(&model),
            "seed": seed,
        }),
        metrics: json!({
            "num_sequences": sl.batch_size(),
            "max_seq_len": sl.max_seq_len(),
            "num_groups": plan.groups.len(),
            "lanes": lanes,
            "serial_time": est.serial_time,
            "multi_lane_time": est.multi_lane_time,
            "speedup": est.speedup,
            "baseline_max_length_cost": baseline,
        }),
        detail: json!({
            "groups": groups,
            "schedule": to_value(&schedule),
            "task_times": task_times,
        }),
    })
}

// -------------------------------------------------------------------- balance

#[derive(Args, Debug)]
pub struct BalanceArgs {
    /// Input file: JSON {"num_workers", "batch_size", "lengths": [[...]]}.
    #[arg(long, conflicts_with_all = ["lengths", "workers"])]
    pub input: Option<PathBuf>,
    /// Lengths file to split into contiguous per-worker slabs.
    #[arg(long)]
    pub lengths: Option<PathBuf>,
    /// Worker count for the slab split; sample count must divide evenly.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    input: Option<PathBuf>,
    lengths: Option<PathBuf>,
    workers: Option<usize>,
}

pub fn balance_cmd(a: &BalanceArgs, cfg: Option<&Value>, seed: u64) -> Result<ReportBody, CliError> {
    let cfg: BalanceConfig = command_config(cfg)?;
    let input = a.input.clone().or(cfg.input);
    let lengths_path = a.lengths.clone().or(cfg.lengths);
    let workers_arg = a.workers.or(cfg.workers);

    let (shards, num_workers, batch_size) = match (&input, &lengths_path) {
        (Some(_), Some(_)) => {
            return Err(CliError::new("give either `input` or `lengths`, not both"));
        }
        (None, None) => {
            return Err(CliError::new(
                "missing input: pass --input <json>, or --lengths <file> with --workers",
            ));
        }
        (Some(path), None) => {
            let doc = crate::inputs::load_balance_doc(path)?;
            let shards = shards_from_rows(&doc.lengths);
            (shards, doc.num_workers, doc.batch_size)
        }
        (None, Some(path)) => {
            let workers = positive(
                workers_arg.ok_or_else(|| {
                    CliError::new("`workers` is required when deriving shards from a lengths file")
                })?,
                "workers",
            )?;
            let sl = crate::inputs::load_lengths(path)?;
            let n = sl.batch_size();
            if n % workers != 0 {
                return Err(CliError::new(format!(
                    "cannot split {n} samples across {workers} workers evenly"
                )));
            }
            let batch_size = n / workers;
            let rows: Vec<Vec<usize>> = sl
                .lengths()
                .chunks(batch_size)
                .map(|c| c.to_vec())
                .collect();
            (shards_from_rows(&rows), workers, batch_size)
        }
    };

    let (plan, metrics) = balance::exchange_padding(&shards).map_err(CliError::from_display)?;
    let mut metrics_value = to_value(&metrics);
    let obj = metrics_value.as_object_mut().expect("struct serializes to an object");
    obj.insert("num_workers".into(), json!(num_workers));
    obj.insert("batch_size".into(), json!(batch_size));

    Ok(ReportBody {
        inputs: json!({
            "input": opt_path(&input),
            "lengths": opt_path(&lengths_path),
            "workers": workers_arg,
            "seed": seed,
        }),
        metrics: metrics_value,
        detail: json!({ "plan": to_value(&plan) }),
    })
}

/// Row `w` becomes worker `w`'s shard; global ids number samples in row
/// order so the id doubles as the payload handle.
fn shards_from_rows(rows: &[Vec<usize>]) -> Vec<balance::WorkerShard> {
    let mut next_id = 0u64;
    rows.iter()
        .enumerate()
        .map(|(worker_id, row)| {
            let samples = row
                .iter()
                .map(|&valid_tokens| {
                    let s = balance::Sample {
                        global_id: next_id,
                        valid_tokens,
                        payload: next_id,
                    };
                    next_id += 1;
                    s
                })
                .collect();
            balance::WorkerShard { worker_id, samples }
        })
        .collect()
}

// ---------------------------------------------------------- simulate-pipeline

#[derive(Args, Debug)]
pub struct SimulatePipelineArgs {
    /// Scenario file: JSON {"workers", "batches", "costs", "sync_every_n"}.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Write both timelines here as CSV (mode,lane,label,batch,start,end).
    #[arg(long)]
    pub timeline_out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatePipelineConfig {
    scenario: Option<PathBuf>,
    timeline_out: Option<PathBuf>,
}

pub fn simulate_pipeline(
    a: &SimulatePipelineArgs,
    cfg: Option<&Value>,
    seed: u64,
) -> Result<ReportBody, CliError> {
    let cfg: SimulatePipelineConfig = command_config(cfg)?;
    let scenario = need(a.scenario.clone(), cfg.scenario, "scenario")?;
    let timeline_out = a.timeline_out.clone().or(cfg.timeline_out);

    let sc = crate::inputs::load_scenario(&scenario)?;
    let report = pipeline::compare_pipelines(&sc.batches, &sc.spec, sc.workers)
        .map_err(CliError::from_display)?;

    if let Some(path) = &timeline_out {
        let serial = pipeline::simulate_serial(&sc.batches, &sc.spec, sc.workers)
            .map_err(CliError::from_display)?;
        let overlapped = pipeline::simulate_overlapped(&sc.batches, &sc.spec, sc.workers)
            .map_err(CliError::from_display)?;
        let mut text = String::from("mode,lane,label,batch,start,end\n");
        for (mode, timeline) in [("serial", &serial), ("overlapped", &overlapped)] {
            for e in &timeline.events {
                text.push_str(&format!(
                    "{mode},{},{},{},{},{}\n",
                    e.lane, e.label, e.batch, e.start, e.end
                ));
            }
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::new(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote timelines to {}", path.display());
    }

    Ok(ReportBody {
        inputs: json!({
            "scenario": path_str(&scenario),
            "timeline_out": opt_path(&timeline_out),
            "workers": sc.workers,
            "num_batches": sc.batches.len(),
            "sync_every_n": sc.spec.sync_every_n,
            "seed": seed,
        }),
        metrics: json!({
            "makespan_serial": report.makespan_serial,
            "makespan_overlapped": report.makespan_overlapped,
            "speedup": report.speedup,
            "allreduce_wait_total": report.allreduce_wait_total,
        }),
        detail: json!({ "sim": to_value(&report) }),
    })
}

// ------------------------------------------------------------------ plan-lamb

#[derive(Args, Debug)]
pub struct PlanLambArgs {
    /// Tensor list file: JSON {"tensors": [numel...], "chunk_size", "budget"}.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlanLambConfig {
    input: Option<PathBuf>,
}

pub fn plan_lamb(a: &PlanLambArgs, cfg: Option<&Value>, seed: u64) -> Result<ReportBody, CliError> {
    let cfg: PlanLambConfig = command_config(cfg)?;
    let input = need(a.input.clone(), cfg.input, "input")?;

    let doc = crate::inputs::load_lamb_doc(&input)?;
    let budget = doc.budget.unwrap_or_default();
    let descs = lamb::TensorDesc::list_from_numels(&doc.tensors);
    let apex = lamb::plan_apex(&descs, doc.chunk_size, &budget).map_err(CliError::from_display)?;
    let contiguous = lamb::plan_contiguous(apex.total_numel(), doc.chunk_size, &budget)
        .map_err(CliError::from_display)?;
    let capacity = budget.contiguous_chunk_capacity().map_err(CliError::from_display)?;

    let launch_rows = |plan: &lamb::LaunchPlan, contiguous: bool| -> Vec<Value> {
        plan.launches
            .iter()
            .map(|l| {
                json!({
                    "tensors": l.tensors.len(),
                    "chunks": l.chunks.len(),
                    "metadata_bytes": lamb::metadata_size(
                        l.tensors.len(),
                        l.chunks.len(),
                        &budget,
                        contiguous,
                    ),
                })
            })
            .collect()
    };
    let meta_max = |plan: &lamb::LaunchPlan, contiguous: bool| -> usize {
        plan.launches
            .iter()
            .map(|l| lamb::metadata_size(l.tensors.len(), l.chunks.len(), &budget, contiguous))
            .max()
            .unwrap_or(0)
    };
    let chunk_total =
        |plan: &lamb::LaunchPlan| -> usize { plan.launches.iter().map(|l| l.chunks.len()).sum() };

    Ok(ReportBody {
        inputs: json!({ "input": path_str(&input), "seed": seed }),
        metrics: json!({
            "num_tensors": doc.tensors.len(),
            "total_numel": apex.total_numel(),
            "chunk_size": doc.chunk_size,
            "launches_apex": apex.num_launches(),
            "launches_contiguous": contiguous.num_launches(),
            "total_chunks_apex": chunk_total(&apex),
            "total_chunks_contiguous": chunk_total(&contiguous),
            "metadata_bytes_apex": meta_max(&apex, false),
            "metadata_bytes_contiguous": meta_max(&contiguous, true),
            "contiguous_chunk_capacity": capacity,
        }),
        detail: json!({
            "budget": to_value(&budget),
            "apex_launches": launch_rows(&apex, false),
            "contiguous_launches": launch_rows(&contiguous, true),
        }),
    })
}

// -------------------------------------------------------------- fusion-report

#[derive(Args, Debug)]
pub struct FusionReportArgs {
    /// Rule subset, comma separated. Defaults to all four rules.
    #[arg(long, value_delimiter = ',')]
    pub rules: Option<Vec<String>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FusionReportConfig {
    rules: Option<Vec<String>>,
}

pub fn fusion_report(
    a: &FusionReportArgs,
    cfg: Option<&Value>,
    seed: u64,
) -> Result<ReportBody, CliError> {
    let cfg: FusionReportConfig = command_config(cfg)?;
    let names = pick(
        a.rules.clone(),
        cfg.rules,
        fusion::RuleName::ALL.iter().map(|r| r.to_string()).collect(),
    );
    let mut selected = Vec::new();
    for name in &names {
        let rule = fusion::RuleName::ALL
            .iter()
            .copied()
            .find(|r| r.to_string() == *name)
            .ok_or_else(|| {
                CliError::new(format!(
                    "unknown rule `{name}`; valid rules: {}",
                    fusion::RuleName::ALL.map(|r| r.to_string()).join(", ")
                ))
            })?;
        if !selected.contains(&rule) {
            selected.push(rule);
        }
    }
    let rules: Vec<fusion::FusionRule> = fusion::standard_rules()
        .into_iter()
        .filter(|r| selected.contains(&r.name))
        .collect();

    let graph = fusion::OpGraph::canonical_encoder_graph();
    let rep = fusion::count_kernels(&graph, &rules).map_err(CliError::from_display)?;
    let mut rows = rep.rows.clone();
    rows.sort_by_key(|row| {
        fusion::RuleName::ALL
            .iter()
            .position(|r| *r == row.rule)
            .expect("row names come from ALL")
    });
    let ratio = if rep.fused.total == 0 {
        1.0
    } else {
        rep.unfused.total as f64 / rep.fused.total as f64
    };

    Ok(ReportBody {
        inputs: json!({ "rules": names, "seed": seed }),
        metrics: json!({
            "num_nodes": graph.num_nodes(),
            "forward_nodes": graph.phase_len(Phase::Forward),
            "backward_nodes": graph.phase_len(Phase::Backward),
            "unfused_forward": rep.unfused.forward,
            "unfused_backward": rep.unfused.backward,
            "unfused_total": rep.unfused.total,
            "fused_forward": rep.fused.forward,
            "fused_backward": rep.fused.backward,
            "fused_total": rep.fused.total,
            "stray_forward": rep.stray_forward,
            "stray_backward": rep.stray_backward,
            "reduction_ratio": ratio,
        }),
        detail: json!({ "rows": to_value(&rows) }),
    })
}

// ---------------------------------------------------------------- embed-check

#[derive(Args, Debug)]
pub struct EmbedCheckArgs {
    /// Vocabulary rows in the embedding table.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Token stream length.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Seeded scatter visit orders to compare against the sorted path.
    #[arg(long)]
    pub permutations: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedCheckConfig {
    vocab: Option<usize>,
    dim: Option<usize>,
    tokens: Option<usize>,
    permutations: Option<usize>,
}

pub fn embed_check(a: &EmbedCheckArgs, cfg: Option<&Value>, seed: u64) -> Result<ReportBody, CliError> {
    let cfg: EmbedCheckConfig = command_config(cfg)?;
    let vocab = positive(pick(a.vocab, cfg.vocab, 50), "vocab")?;
    let dim = positive(pick(a.dim, cfg.dim, 8), "dim")?;
    let tokens = positive(pick(a.tokens, cfg.tokens, 256), "tokens")?;
    let permutations = positive(pick(a.permutations, cfg.permutations, 100), "permutations")?;

    let mut r = rng::seeded(seed);
    let toks: Vec<usize> = (0..tokens)
        .map(|_| (rng::uniform_f64(&mut r) * vocab as f64) as usize)
        .collect();
    // Small-integer gradients make every accumulation order exact, so any
    // mismatch is a real ordering bug, not float noise.
    let grad: Vec<f64> = (0..tokens * dim)
        .map(|_| (rng::uniform_f64(&mut r) * 9.0).floor() - 4.0)
        .collect();

    let sorted = embedding::backward_sorted(&grad, &toks, vocab, dim, LaneWidth::One)
        .map_err(CliError::from_display)?;

    let lane_width_neutral = if dim % 2 == 0 {
        let two = embedding::backward_sorted(&grad, &toks, vocab, dim, LaneWidth::Two)
            .map_err(CliError::from_display)?;
        Some(bits_equal(&sorted, &two))
    } else {
        None
    };

    let mut scatter_matches = true;
    for s in 0..permutations {
        let visit_seed = seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let scattered =
            embedding::backward_scatter(&grad, &toks, vocab, dim, LaneWidth::One, visit_seed)
                .map_err(CliError::from_display)?;
        if !bits_equal(&sorted, &scattered) {
            scatter_matches = false;
        }
    }

    let grad_sums = embedding::column_sums(&grad, dim);
    let table_sums = embedding::column_sums(&sorted, dim);
    let conserved = bits_equal(&grad_sums, &table_sums);

    let all_passed = scatter_matches && lane_width_neutral.unwrap_or(true) && conserved;
    if !all_passed {
        return Err(CliError::new(format!(
            "embedding backward check failed: scatter matches sorted: {scatter_matches}, \
             lane width neutral: {lane_width_neutral:?}, column sums conserved: {conserved}"
        )));
    }
    Ok(ReportBody {
        inputs: json!({
            "vocab": vocab,
            "dim": dim,
            "tokens": tokens,
            "permutations": permutations,
            "seed": seed,
        }),
        metrics: json!({
            "scatter_matches_sorted": scatter_matches,
            "lane_width_neutral": lane_width_neutral,
            "column_sums_conserved": conserved,
            "all_passed": all_passed,
        }),
        detail: json!({
            "grad_column_sums": grad_sums,
            "table_column_sums": table_sums,
        }),
    })
}
