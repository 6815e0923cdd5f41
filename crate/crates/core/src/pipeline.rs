//! Discrete-event model of the training step pipeline: serial versus
//! overlapped padding exchange.
//!
//! Each training step moves one batch through four resources: the CPU
//! (padding exchange), the host-to-device copy engine, one GPU compute
//! lane per worker, and a communication lane (gradient all-reduce plus an
//! optional device-to-host metric fetch every `sync_every_n` steps).
//!
//! In the serial pipeline every stage of step `b` waits for step `b-1` to
//! finish completely. In the overlapped pipeline the CPU exchanges batch
//! `b+1` while the GPUs compute batch `b`, and the copy engine runs as
//! soon as its input is exchanged; compute still waits for its own copy
//! and for the previous step's gradient synchronization. Time is integer,
//! so orderings are exact and every simulation is reproducible.
//!
//! [`steady_state_bound`] is the closed form for the overlapped makespan
//! when prefetch always finishes in time; the event engine must agree
//! with it exactly whenever the precondition holds, which is the main
//! correctness check on the engine itself.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Errors for scenario validation and bound applicability.
#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("scenario has no batches")]
    EmptyBatches,
    #[error("scenario has no workers")]
    NoWorkers,
    #[error("batch {batch} lists {got} worker token counts, expected {expected}")]
    WorkerMismatch {
        batch: usize,
        got: usize,
        expected: usize,
    },
    #[error("sync_every_n must be at least 1")]
    InvalidSyncEvery,
    /// The steady-state formula only applies when prefetch for batch b
    /// fits inside step b-1.
    #[error("prefetch for batch {batch} does not fit in the previous step")]
    BoundNotApplicable { batch: usize },
}

/// Work content of one batch: how many samples the CPU exchanges and how
/// many valid tokens each worker computes on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLoad {
    pub samples: usize,
    pub worker_tokens: Vec<usize>,
}

impl BatchLoad {
    pub fn total_tokens(&self) -> usize {
        self.worker_tokens.iter().sum()
    }
}

/// Stage cost coefficients in abstract integer time units.
///
/// Exchange time scales with gathered samples, copy time with total valid
/// tokens, GPU time with the worker's own valid tokens; all-reduce and the
/// d2h metric fetch are flat. The fetch is charged only on steps where
/// `(b + 1) % sync_every_n == 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub exchange_per_sample: u64,
    pub h2d_per_token: u64,
    pub gpu_per_token: u64,
    pub allreduce_time: u64,
    pub d2h_sync_cost: u64,
    pub sync_every_n: usize,
}

impl Default for StageSpec {
    fn default() -> Self {
        Self {
            exchange_per_sample: 1,
            h2d_per_token: 1,
            gpu_per_token: 1,
            allreduce_time: 1,
            d2h_sync_cost: 1,
            sync_every_n: 1,
        }
    }
}

impl StageSpec {
    pub fn exchange_time(&self, batch: &BatchLoad) -> u64 {
        self.exchange_per_sample * batch.samples as u64
    }

    pub fn h2d_time(&self, batch: &BatchLoad) -> u64 {
        self.h2d_per_token * batch.total_tokens() as u64
    }

    pub fn gpu_time(&self, batch: &BatchLoad, worker: usize) -> u64 {
        self.gpu_per_token * batch.worker_tokens[worker] as u64
    }

    fn fetch_charged(&self, batch_index: usize) -> bool {
        (batch_index + 1).is_multiple_of(self.sync_every_n)
    }

    /// GPU-side length of step `b`: slowest worker plus the communication
    /// tail (all-reduce, and the fetch when charged).
    pub fn step_time(&self, batch: &BatchLoad, batch_index: usize) -> u64 {
        let slowest = (0..batch.worker_tokens.len())
            .map(|w| self.gpu_time(batch, w))
            .max()
            .unwrap_or(0);
        let fetch = if self.fetch_charged(batch_index) {
            self.d2h_sync_cost
        } else {
            0
        };
        slowest + self.allreduce_time + fetch
    }
}

/// The four modeled resources. The derived order (CPU, H2D, GPU by worker,
/// COMM) is the tie-break used when sorting simultaneous events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Cpu,
    H2d,
    Gpu(usize),
    Comm,
}

impl fmt::Display for Lane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lane::Cpu => write!(f, "cpu"),
            Lane::H2d => write!(f, "h2d"),
            Lane::Gpu(w) => write!(f, "gpu{w}"),
            Lane::Comm => write!(f, "comm"),
        }
    }
}

/// One scheduled interval on one lane. Zero-length events are kept so the
/// step structure stays visible even when a stage costs nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub lane: Lane,
    pub label: &'static str,
    pub batch: usize,
    pub start: u64,
    pub end: u64,
}

/// Full event record of one simulation, sorted by (start, lane, batch).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    pub fn makespan(&self) -> u64 {
        self.events.iter().map(|e| e.end).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Serial,
    Overlapped,
}

fn validate(batches: &[BatchLoad], spec: &StageSpec, workers: usize) -> Result<(), PipelineError> {
    if batches.is_empty() {
        return Err(PipelineError::EmptyBatches);
    }
    if workers == 0 {
        return Err(PipelineError::NoWorkers);
    }
    if spec.sync_every_n == 0 {
        return Err(PipelineError::InvalidSyncEvery);
    }
    for (batch, load) in batches.iter().enumerate() {
        if load.worker_tokens.len() != workers {
            return Err(PipelineError::WorkerMismatch {
                batch,
                got: load.worker_tokens.len(),
                expected: workers,
            });
        }
    }
    Ok(())
}

/// Shared engine. The only difference between the two pipelines is when
/// the CPU may begin exchanging batch `b`: immediately after its previous
/// exchange (overlapped), or only after step `b-1` has fully finished
/// (serial). Everything downstream follows from resource-availability and
/// dependency maxima.
fn run_engine(batches: &[BatchLoad], spec: &StageSpec, workers: usize, overlapped: bool) -> Timeline {
    let mut events = Vec::new();
    let mut cpu_free = 0u64;
    let mut h2d_free = 0u64;
    let mut gpu_free = vec![0u64; workers];
    let mut comm_free = 0u64;
    // End of the previous step's communication phase; gates this step's
    // compute (gradients must be synchronized) and, in serial mode, the
    // exchange as well.
    let mut sync_ready = 0u64;

    for (b, batch) in batches.iter().enumerate() {
        let ex_start = if overlapped {
            cpu_free
        } else {
            cpu_free.max(sync_ready)
        };
        let ex_end = ex_start + spec.exchange_time(batch);
        cpu_free = ex_end;
        events.push(Event {
            lane: Lane::Cpu,
            label: "exchange",
            batch: b,
            start: ex_start,
            end: ex_end,
        });

        let h2d_start = h2d_free.max(ex_end);
        let h2d_end = h2d_start + spec.h2d_time(batch);
        h2d_free = h2d_end;
        events.push(Event {
            lane: Lane::H2d,
            label: "h2d_copy",
            batch: b,
            start: h2d_start,
            end: h2d_end,
        });

        let mut join = 0u64;
        for (w, free) in gpu_free.iter_mut().enumerate() {
            let g_start = h2d_end.max(*free).max(sync_ready);
            let g_end = g_start + spec.gpu_time(batch, w);
            *free = g_end;
            join = join.max(g_end);
            events.push(Event {
                lane: Lane::Gpu(w),
                label: "gpu_step",
                batch: b,
                start: g_start,
                end: g_end,
            });
        }

        let ar_start = join.max(comm_free);
        let ar_end = ar_start + spec.allreduce_time;
        events.push(Event {
            lane: Lane::Comm,
            label: "allreduce",
            batch: b,
            start: ar_start,
            end: ar_end,
        });
        comm_free = ar_end;
        let mut step_end = ar_end;

        if spec.fetch_charged(b) {
            let f_end = step_end + spec.d2h_sync_cost;
            events.push(Event {
                lane: Lane::Comm,
                label: "d2h_fetch",
                batch: b,
                start: step_end,
                end: f_end,
            });
            comm_free = f_end;
            step_end = f_end;
        }
        sync_ready = step_end;
    }

    events.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then(a.lane.cmp(&b.lane))
            .then(a.batch.cmp(&b.batch))
    });
    Timeline { events }
}

/// Pipeline where exchange, copy, and compute of one step run back to
/// back and the next step starts only after the previous one ends.
pub fn simulate_serial(
    batches: &[BatchLoad],
    spec: &StageSpec,
    workers: usize,
) -> Result<Timeline, PipelineError> {
    validate(batches, spec, workers)?;
    Ok(run_engine(batches, spec, workers, false))
}

/// Pipeline where the CPU pre-exchanges future batches and the copy
/// engine streams them up while the GPUs compute the current step.
pub fn simulate_overlapped(
    batches: &[BatchLoad],
    spec: &StageSpec,
    workers: usize,
) -> Result<Timeline, PipelineError> {
    validate(batches, spec, workers)?;
    Ok(run_engine(batches, spec, workers, true))
}

/// Closed-form overlapped makespan when every prefetch lands in time:
/// the first batch's exchange and copy, then one GPU-side step time per
/// batch.
///
/// Applicable only when `exchange(b) + h2d(b) <= step_time(b-1)` for every
/// b >= 1; under that precondition the event engine matches this value
/// exactly.
pub fn steady_state_bound(batches: &[BatchLoad], spec: &StageSpec) -> Result<u64, PipelineError> {
    let workers = batches.first().map(|b| b.worker_tokens.len()).unwrap_or(0);
    validate(batches, spec, workers)?;
    for b in 1..batches.len() {
        let prefetch = spec.exchange_time(&batches[b]) + spec.h2d_time(&batches[b]);
        if prefetch > spec.step_time(&batches[b - 1], b - 1) {
            return Err(PipelineError::BoundNotApplicable { batch: b });
        }
    }
    let mut bound = spec.exchange_time(&batches[0]) + spec.h2d_time(&batches[0]);
    for (b, batch) in batches.iter().enumerate() {
        bound += spec.step_time(batch, b);
    }
    Ok(bound)
}

/// Re-prices the d2h fetch cadence and re-runs the scenario, returning
/// the adjusted timeline. `sync_every_n = 1` reproduces the input spec's
/// every-step behavior.
pub fn apply_sync_policy(
    batches: &[BatchLoad],
    spec: &StageSpec,
    workers: usize,
    mode: PipelineMode,
    sync_every_n: usize,
) -> Result<Timeline, PipelineError> {
    let adjusted = StageSpec {
        sync_every_n,
        ..spec.clone()
    };
    match mode {
        PipelineMode::Serial => simulate_serial(batches, &adjusted, workers),
        PipelineMode::Overlapped => simulate_overlapped(batches, &adjusted, workers),
    }
}

/// Busy time per lane within one timeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaneUtilization {
    pub lane: Lane,
    pub busy: u64,
    /// busy / makespan; 0 when the makespan is zero.
    pub utilization: f64,
}

/// Serial vs overlapped comparison plus waiting metrics for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub makespan_serial: u64,
    pub makespan_overlapped: u64,
    /// serial / overlapped; 1.0 when both are zero.
    pub speedup: f64,
    /// Lane busy fractions of the overlapped timeline.
    pub lane_utilization: Vec<LaneUtilization>,
    /// Per step, the summed idle time of workers waiting at the gradient
    /// join for the slowest one (the short-board cost of imbalance).
    pub allreduce_wait_per_step: Vec<u64>,
    pub allreduce_wait_total: u64,
}

/// Per-step sum over workers of (join time - own finish time) in a
/// timeline's GPU events.
pub fn allreduce_wait_per_step(timeline: &Timeline, num_batches: usize) -> Vec<u64> {
    let mut ends: Vec<Vec<u64>> = vec![Vec::new(); num_batches];
    for e in &timeline.events {
        if let Lane::Gpu(_) = e.lane {
            ends[e.batch].push(e.end);
        }
    }
    ends.into_iter()
        .map(|step| {
            let join = step.iter().copied().max().unwrap_or(0);
            step.iter().map(|&end| join - end).sum()
        })
        .collect()
}

/// Runs both pipelines on one scenario and assembles the comparison.
pub fn compare_pipelines(
    batches: &[BatchLoad],
    spec: &StageSpec,
    workers: usize,
) -> Result<SimReport, PipelineError> {
    let serial = simulate_serial(batches, spec, workers)?;
    let overlapped = simulate_overlapped(batches, spec, workers)?;
    let makespan_serial = serial.makespan();
    let makespan_overlapped = overlapped.makespan();
    let speedup = if makespan_overlapped == 0 {
        1.0
    } else {
        makespan_serial as f64 / makespan_overlapped as f64
    };

    let mut lanes: Vec<Lane> = overlapped.events.iter().map(|e| e.lane).collect();
    lanes.sort_unstable();
    lanes.dedup();
    let lane_utilization = lanes
        .into_iter()
        .map(|lane| {
            let busy: u64 = overlapped
                .events
                .iter()
                .filter(|e| e.lane == lane)
                .map(|e| e.end - e.start)
                .sum();
            LaneUtilization {
                lane,
                busy,
                utilization: if makespan_overlapped == 0 {
                    0.0
                } else {
                    busy as f64 / makespan_overlapped as f64
                },
            }
        })
        .collect();

    let allreduce_wait_per_step = allreduce_wait_per_step(&overlapped, batches.len());
    let allreduce_wait_total = allreduce_wait_per_step.iter().sum();
    Ok(SimReport {
        makespan_serial,
        makespan_overlapped,
        speedup,
        lane_utilization,
        allreduce_wait_per_step,
        allreduce_wait_total,
    })
}
