//! Deterministic, desk-scale reference models for the mechanics of
//! variable-length ("unpadded") transformer training.
//!
//! Training batches of ragged token sequences are usually padded to a
//! rectangle, which wastes compute on pad positions and skews per-worker
//! load. This crate implements the bookkeeping that removes the padding and
//! the planning layers that make the unpadded form fast, each as an exact,
//! testable model rather than a GPU kernel:
//!
//! - [`varlen`]: flat ragged batch storage with prefix-sum offsets, the
//!   pad/unpad transforms, and seeded length sampling.
//! - [`attention`]: numerically exact multi-head attention over both layouts,
//!   used to prove the transforms leak nothing.
//! - [`fmha`]: length-bucketed kernel grouping and a multi-lane schedule with
//!   an abstract cost model.
//! - [`balance`]: the gather/sort/interleave padding exchange that evens out
//!   per-worker token counts.
//! - [`pipeline`]: an integer-time event engine for serial vs. overlapped
//!   step pipelines.
//! - [`lamb`]: chunked multi-tensor launch planning under a kernel-argument
//!   byte budget, plus a reference LAMB optimizer step.
//! - [`embedding`]: embedding forward/backward with sorted segment sums
//!   checked against scatter accumulation.
//! - [`fusion`]: an operator-graph ledger that counts kernel launches before
//!   and after fusion rules.
//! - [`rng`]: seeded randomness with the algorithm pinned by this crate, so
//!   fixtures are reproducible byte for byte.
//!
//! Everything is pure CPU code with explicit summation orders, so results
//! are bit-reproducible across runs, seeds are portable, and the parallel
//! feature (on by default) never changes output bytes.

pub mod attention;
pub mod balance;
pub mod embedding;
pub mod exec;
pub mod fmha;
pub mod fusion;
pub mod lamb;
pub mod pipeline;
pub mod rng;
pub mod varlen;
