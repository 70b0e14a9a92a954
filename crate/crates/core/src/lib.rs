//! Desk-scale runtime kit and simulator for pipeline-parallel LLM decode.
//!
//! The crate is organized around the mechanisms that keep a decode pipeline
//! saturated, plus the instrumentation needed to verify them without GPUs:
//!
//! - [`perf`]: closed-form throughput/delay models and configuration sweeps.
//! - [`rng`]: counter-based deterministic random numbers; every draw in the
//!   system is a pure function of (seed, counter).
//! - [`sampler`]: incremental column-wise token sampling over transposed
//!   logits, with penalty buffers maintained across iterations.
//! - [`oracle`]: from-scratch row-major reference sampler used for
//!   equivalence testing and benchmarking.
//! - [`tsem`]: token-safe execution model: double-buffered, indicator-guarded
//!   decoupling of input preparation from forward execution.
//! - [`sat`]: structure-aware transmission of inter-stage tensor
//!   dictionaries over byte streams.
//! - [`bic`]: buffered IPC channels: lock-ahead shared-memory rings and a
//!   stream-based multi-producer combine channel.
//! - [`pipeline`]: end-to-end orchestration, bubble accounting, and A/B
//!   feature comparison, runnable threaded or on a deterministic clock.

pub mod bic;
pub mod oracle;
pub mod perf;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod sat;
pub mod tsem;
