//! Carbyne: a counting-bloom-filter transaction pool engine.
//!
//! The crate provides four layers that build on each other:
//!
//! * [`filter`]: a counting bloom filter with saturating counters,
//!   double-hashed bucket indexing, and analytic dimensioning helpers.
//! * [`expiry`]: two forgetting strategies layered over the filter, a
//!   two-slot rotating pair and a capacity-triggered dynamic chain.
//! * [`mempool`]: the Carbyne transaction-pool state machine plus an
//!   exact reference pool that serves as ground truth.
//! * [`trace`] and [`harness`]: a seeded synthetic workload generator,
//!   a newline-delimited trace format, and a lockstep replay harness
//!   that classifies every filter answer against the reference pool.
//!
//! All randomness is seeded. Given the same seeds, configuration, and
//! trace, every run is bit-reproducible, including CSV output.

pub mod expiry;
pub mod filter;
pub mod harness;
pub mod mempool;
pub mod trace;

pub use expiry::{
    DynamicFilterChain, ExpiryError, RotatingFilter, Slot, DEFAULT_CHAIN_CAPACITY,
    DEFAULT_LINK_EXPIRY_S, DEFAULT_ROTATION_INTERVAL_S,
};
pub use filter::{
    derive_m, memory_bytes, optimal_k, theoretical_fpr, CountingBloomFilter, FilterError,
    FilterParams, IndexTable,
};
pub use harness::{
    bench_ops, compute_rates, recovery_rate, replay, write_hourly_csv, write_summary_csv, BenchRow,
    ConfusionCounters, DecisionRecord, EventOutcome, HarnessError, HourlyRow, KindCounts,
    MetricsReport, Rates, RecoveryEstimate, ReplayConfig, BENCH_MIN_ITERATIONS, RECOVERY_UNIVERSE,
};
pub use mempool::{
    CarbynePool, EntryDecision, ExitDecision, ExitReason, FilterSpec, InvDecision, Membership,
    MemoryReport, OutPoint, PoolConfig, PoolError, ReferencePool, Transaction, TxId, TxStrategy,
    DEFAULT_INPUTS_RESET_INTERVAL_S, DEFAULT_RBF_THRESHOLD, REFERENCE_EXPIRY_S,
};
pub use trace::{
    generate, read_trace, write_trace, CongestionConfig, Generator, TraceError, TraceEvent,
    WorkloadConfig, ENTRY_VSIZE_BYTES,
};
