//! Lockstep replay of a trace through [`CarbynePool`] and
//! [`ReferencePool`], confusion-matrix classification, rate computation,
//! CSV reporting, the multi-peer recovery experiment, and operation
//! latency benchmarks.
//!
//! Classification covers the txid membership query behind each event. The
//! pool's claimed presence is read off its decision: AlreadyHave at inv,
//! DuplicateDrop at entry, Removed at exit. Ground truth is reference
//! presence immediately before the event, after maintenance at the event
//! time. A DoubleSpendDrop therefore classifies as a negative membership
//! claim: the txid itself was unseen.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::filter::{CountingBloomFilter, FilterParams};
use crate::mempool::{
    CarbynePool, EntryDecision, ExitDecision, ExitReason, InvDecision, PoolConfig, PoolError,
    ReferencePool, TxId,
};
use crate::trace::{StreamValidator, TraceError, TraceEvent};

/// Universe size for the recovery experiment.
pub const RECOVERY_UNIVERSE: u64 = 100_000;
/// Benchmarks below this many operations per batch are too noisy to trust.
pub const BENCH_MIN_ITERATIONS: u64 = 100_000;

/// All benchmark filters share this bucket count so that query cost
/// depends only on k, never on how full the filter is.
const BENCH_M: u64 = 4_000_000;
const BENCH_BATCHES: usize = 9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("retention fraction must lie in (0, 1]")]
    BadRecoveryFraction,
    #[error("peer count must be positive")]
    ZeroPeers,
    #[error("trial count must be positive")]
    ZeroTrials,
    #[error("{got} iterations per batch is below the minimum {min}")]
    TooFewIterations { got: u64, min: u64 },
}

/// Confusion cells for one event kind.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct KindCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl KindCounts {
    pub fn queries(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    fn record(&mut self, claimed: bool, truth: bool) {
        match (claimed, truth) {
            (true, true) => self.true_pos += 1,
            (false, false) => self.true_neg += 1,
            (true, false) => self.false_pos += 1,
            (false, true) => self.false_neg += 1,
        }
    }
}

/// Per-kind confusion counts for a whole run.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounters {
    pub inv: KindCounts,
    pub entry: KindCounts,
    pub exit: KindCounts,
}

impl ConfusionCounters {
    pub fn total_queries(&self) -> u64 {
        self.inv.queries() + self.entry.queries() + self.exit.queries()
    }

    pub fn total_false_pos(&self) -> u64 {
        self.inv.false_pos + self.entry.false_pos + self.exit.false_pos
    }
}

/// Cumulative rates. Any rate whose denominator was zero is reported as
/// zero with `zero_query_warning` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub fpr: f64,
    pub discarded_rate: f64,
    pub reprocessed_rate: f64,
    pub zero_query_warning: bool,
}

/// False positives over all membership queries; wrongly discarded
/// transactions over inv and entry queries; reprocessed announcements
/// over inv queries.
pub fn compute_rates(counters: &ConfusionCounters) -> Rates {
    let mut warning = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            warning = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let fpr = ratio(counters.total_false_pos(), counters.total_queries());
    let discarded_rate = ratio(
        counters.inv.false_pos + counters.entry.false_pos,
        counters.inv.queries() + counters.entry.queries(),
    );
    let reprocessed_rate = ratio(counters.inv.false_neg, counters.inv.queries());
    Rates {
        fpr,
        discarded_rate,
        reprocessed_rate,
        zero_query_warning: warning,
    }
}

/// One closed hourly window. Cell counts cover events inside the window;
/// resident and memory figures are snapshots at close.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlyRow {
    pub hour: u64,
    pub ref_resident: u64,
    pub carbyne_resident: u64,
    pub fp_entry: u64,
    pub fn_entry: u64,
    pub fp_inv: u64,
    pub fn_inv: u64,
    pub fp_exit: u64,
    pub fn_exit: u64,
    pub window_fpr: f64,
    pub mem_bytes: u64,
}

/// Both pools' decisions for one event, kept only when forensics are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventOutcome {
    Inv {
        carbyne: InvDecision,
        reference: InvDecision,
    },
    Entry {
        carbyne: EntryDecision,
        reference: EntryDecision,
    },
    Exit {
        carbyne: ExitDecision,
        reference: ExitDecision,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionRecord {
    /// 1-based event position in the stream.
    pub index: u64,
    pub t_s: u64,
    pub txid: TxId,
    pub outcome: EventOutcome,
}

/// Full result of one replay.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub events: u64,
    pub counters: ConfusionCounters,
    pub rates: Rates,
    pub hourly: Vec<HourlyRow>,
    /// Pool memory at end of run, from the analytic per-filter formula.
    pub mem_bytes: u64,
    pub ref_resident_final: u64,
    pub carbyne_resident_final: u64,
    /// Largest chain length observed; absent under the rotating strategy.
    pub peak_links: Option<u64>,
    /// Exit events by reason, indexed per [`ExitReason::index`].
    pub exits_by_reason: [u64; 6],
    pub decisions: Option<Vec<DecisionRecord>>,
}

#[derive(Debug, Clone)]
pub struct ReplayConfig {
    pub pool: PoolConfig,
    /// Keep a per-event decision log in the report.
    pub record_decisions: bool,
}

impl ReplayConfig {
    pub fn new(pool: PoolConfig) -> Self {
        ReplayConfig {
            pool,
            record_decisions: false,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct WindowCells {
    fp_entry: u64,
    fn_entry: u64,
    fp_inv: u64,
    fn_inv: u64,
    fp_exit: u64,
    fn_exit: u64,
    queries: u64,
}

impl WindowCells {
    fn fpr(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            (self.fp_entry + self.fp_inv + self.fp_exit) as f64 / self.queries as f64
        }
    }
}

/// Drive both pools through the event stream in lockstep and classify
/// every membership query. The stream is validated as it is consumed;
/// violations abort with the 1-based event position.
pub fn replay<I>(events: I, config: &ReplayConfig) -> Result<MetricsReport, HarnessError>
where
    I: IntoIterator<Item = TraceEvent>,
{
    let mut pool = CarbynePool::new(&config.pool)?;
    let mut reference = ReferencePool::new();
    let mut validator = StreamValidator::new();
    let mut counters = ConfusionCounters::default();
    let mut hourly = Vec::new();
    let mut window = WindowCells::default();
    let mut current_hour = 0u64;
    let mut events_seen = 0u64;
    let mut peak_links = pool.chain_links();
    let mut exits_by_reason = [0u64; 6];
    let mut decisions: Option<Vec<DecisionRecord>> = config.record_decisions.then(Vec::new);

    let close_row = |hour: u64,
                     window: &mut WindowCells,
                     hourly: &mut Vec<HourlyRow>,
                     pool: &CarbynePool,
                     reference: &ReferencePool| {
        hourly.push(HourlyRow {
            hour,
            ref_resident: reference.resident(),
            carbyne_resident: pool.live_inserts(),
            fp_entry: window.fp_entry,
            fn_entry: window.fn_entry,
            fp_inv: window.fp_inv,
            fn_inv: window.fn_inv,
            fp_exit: window.fp_exit,
            fn_exit: window.fn_exit,
            window_fpr: window.fpr(),
            mem_bytes: pool.memory_report().total_bytes,
        });
        *window = WindowCells::default();
    };

    for event in events {
        validator.check(&event)?;
        events_seen += 1;
        let t = event.t_s();
        // Close every window that ended before this event, including
        // whole idle hours, before time advances the pools.
        let hour = t / 3600;
        while current_hour < hour {
            close_row(current_hour, &mut window, &mut hourly, &pool, &reference);
            current_hour += 1;
        }
        pool.maintenance(t)?;
        reference.maintenance(t)?;
        let truth = reference.contains(&event.txid());
        let (claimed, ref_claimed, outcome) = match &event {
            TraceEvent::Inv { t_s, txid } => {
                let carbyne = pool.on_inv(txid, *t_s)?;
                let refd = reference.on_inv(txid, *t_s)?;
                (
                    carbyne == InvDecision::AlreadyHave,
                    refd == InvDecision::AlreadyHave,
                    EventOutcome::Inv {
                        carbyne,
                        reference: refd,
                    },
                )
            }
            TraceEvent::Entry { t_s, tx } => {
                let carbyne = pool.on_entry(tx, *t_s)?;
                let refd = reference.on_entry(tx, *t_s)?;
                (
                    carbyne == EntryDecision::DuplicateDrop,
                    refd == EntryDecision::DuplicateDrop,
                    EventOutcome::Entry {
                        carbyne,
                        reference: refd,
                    },
                )
            }
            TraceEvent::Exit { t_s, txid, reason } => {
                exits_by_reason[reason.index()] += 1;
                let carbyne = pool.on_exit(txid, *reason, *t_s)?;
                let refd = reference.on_exit(txid, *reason, *t_s)?;
                (
                    carbyne == ExitDecision::Removed,
                    refd == ExitDecision::Removed,
                    EventOutcome::Exit {
                        carbyne,
                        reference: refd,
                    },
                )
            }
        };
        assert_eq!(
            ref_claimed, truth,
            "reference decision diverged from reference state"
        );
        let (kind_counts, window_fp, window_fn) = match &event {
            TraceEvent::Inv { .. } => (&mut counters.inv, &mut window.fp_inv, &mut window.fn_inv),
            TraceEvent::Entry { .. } => (
                &mut counters.entry,
                &mut window.fp_entry,
                &mut window.fn_entry,
            ),
            TraceEvent::Exit { .. } => {
                (&mut counters.exit, &mut window.fp_exit, &mut window.fn_exit)
            }
        };
        kind_counts.record(claimed, truth);
        window.queries += 1;
        if claimed && !truth {
            *window_fp += 1;
        } else if !claimed && truth {
            *window_fn += 1;
        }
        if let Some(links) = pool.chain_links() {
            peak_links = Some(peak_links.unwrap_or(0).max(links));
        }
        if let Some(log) = decisions.as_mut() {
            log.push(DecisionRecord {
                index: events_seen,
                t_s: t,
                txid: event.txid(),
                outcome,
            });
        }
    }
    if events_seen > 0 {
        close_row(current_hour, &mut window, &mut hourly, &pool, &reference);
    }
    Ok(MetricsReport {
        events: events_seen,
        counters,
        rates: compute_rates(&counters),
        hourly,
        mem_bytes: pool.memory_report().total_bytes,
        ref_resident_final: reference.resident(),
        carbyne_resident_final: pool.live_inserts(),
        peak_links,
        exits_by_reason,
        decisions,
    })
}

fn write_atomic<F>(path: &Path, fill: F) -> Result<(), HarnessError>
where
    F: FnOnce(&mut BufWriter<NamedTempFile>) -> std::io::Result<()>,
{
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(parent)?;
    let mut writer = BufWriter::new(tmp);
    fill(&mut writer)?;
    let tmp = writer
        .into_inner()
        .map_err(|e| HarnessError::Io(e.into_error()))?;
    tmp.persist(path).map_err(|e| HarnessError::Io(e.error))?;
    Ok(())
}

/// Hourly series as CSV, written via a temporary file and rename.
pub fn write_hourly_csv(report: &MetricsReport, path: &Path) -> Result<(), HarnessError> {
    write_atomic(path, |w| {
        writeln!(
            w,
            "hour,ref_resident,carbyne_resident,fp_entry,fn_entry,fp_inv,fn_inv,fp_exit,fn_exit,window_fpr,mem_bytes"
        )?;
        for r in &report.hourly {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{:.9},{}",
                r.hour,
                r.ref_resident,
                r.carbyne_resident,
                r.fp_entry,
                r.fn_entry,
                r.fp_inv,
                r.fn_inv,
                r.fp_exit,
                r.fn_exit,
                r.window_fpr,
                r.mem_bytes
            )?;
        }
        Ok(())
    })
}

/// Cumulative counters and rates as a two-column CSV.
pub fn write_summary_csv(report: &MetricsReport, path: &Path) -> Result<(), HarnessError> {
    write_atomic(path, |w| {
        writeln!(w, "metric,value")?;
        writeln!(w, "events,{}", report.events)?;
        let kinds = [
            ("inv", &report.counters.inv),
            ("entry", &report.counters.entry),
            ("exit", &report.counters.exit),
        ];
        for (name, c) in kinds {
            writeln!(w, "queries_{name},{}", c.queries())?;
            writeln!(w, "tp_{name},{}", c.true_pos)?;
            writeln!(w, "tn_{name},{}", c.true_neg)?;
            writeln!(w, "fp_{name},{}", c.false_pos)?;
            writeln!(w, "fn_{name},{}", c.false_neg)?;
        }
        writeln!(w, "fpr,{:.9}", report.rates.fpr)?;
        writeln!(w, "discarded_rate,{:.9}", report.rates.discarded_rate)?;
        writeln!(w, "reprocessed_rate,{:.9}", report.rates.reprocessed_rate)?;
        writeln!(w, "ref_resident_final,{}", report.ref_resident_final)?;
        writeln!(
            w,
            "carbyne_resident_final,{}",
            report.carbyne_resident_final
        )?;
        writeln!(w, "mem_bytes,{}", report.mem_bytes)?;
        if let Some(links) = report.peak_links {
            writeln!(w, "peak_links,{links}")?;
        }
        for reason in ExitReason::ALL {
            writeln!(
                w,
                "exits_{},{}",
                reason.as_str(),
                report.exits_by_reason[reason.index()]
            )?;
        }
        Ok(())
    })
}

/// Union coverage of one mempool by `peers_c` peers that each retain every
/// transaction independently with probability `retain_f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryEstimate {
    pub simulated: f64,
    /// 1 − (1 − f)^c.
    pub analytic: f64,
}

/// Monte Carlo over a universe of [`RECOVERY_UNIVERSE`] transactions.
pub fn recovery_rate(
    retain_f: f64,
    peers_c: u32,
    trials: u32,
    seed: u64,
) -> Result<RecoveryEstimate, HarnessError> {
    if !(retain_f > 0.0 && retain_f <= 1.0) {
        return Err(HarnessError::BadRecoveryFraction);
    }
    if peers_c == 0 {
        return Err(HarnessError::ZeroPeers);
    }
    if trials == 0 {
        return Err(HarnessError::ZeroTrials);
    }
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut covered = 0u64;
    for _ in 0..trials {
        for _ in 0..RECOVERY_UNIVERSE {
            for _ in 0..peers_c {
                if rng.random_bool(retain_f) {
                    covered += 1;
                    break;
                }
            }
        }
    }
    let samples = trials as u64 * RECOVERY_UNIVERSE;
    Ok(RecoveryEstimate {
        simulated: covered as f64 / samples as f64,
        analytic: 1.0 - (1.0 - retain_f).powi(peers_c as i32),
    })
}

/// One measured operation latency.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub structure: &'static str,
    pub op: &'static str,
    /// Zero for the map baseline, which has no hash count.
    pub k: u32,
    pub n: u64,
    pub ns_per_op: f64,
}

fn random_keys(rng: &mut SmallRng, count: usize) -> Vec<[u8; 32]> {
    let mut keys = vec![[0u8; 32]; count];
    for key in &mut keys {
        rng.fill(&mut key[..]);
    }
    keys
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

/// Median per-op latency over fixed-size batches: counting-filter query,
/// insert, and remove+insert pairs at each (k, preloaded n), plus an
/// ordered-map query baseline at each n in `map_scales`.
pub fn bench_ops(
    cbf_params: &[(u32, u64)],
    map_scales: &[u64],
    iterations: u64,
    seed: u64,
) -> Result<Vec<BenchRow>, HarnessError> {
    if iterations < BENCH_MIN_ITERATIONS {
        return Err(HarnessError::TooFewIterations {
            got: iterations,
            min: BENCH_MIN_ITERATIONS,
        });
    }
    let mut rng = SmallRng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let batch = |body: &mut dyn FnMut()| -> f64 {
        let start = Instant::now();
        body();
        start.elapsed().as_nanos() as f64 / iterations as f64
    };
    for &(k, n) in cbf_params {
        let keys = random_keys(&mut rng, n as usize);
        let params = FilterParams::new(BENCH_M, k).with_seed(rng.random::<u128>());
        let mut filter = CountingBloomFilter::new(params)?;
        for key in &keys {
            filter.insert(key);
        }
        let mut cycle = 0usize;
        let next = |keys: &[[u8; 32]], cycle: &mut usize| {
            let i = *cycle;
            *cycle += 1;
            if *cycle == keys.len() {
                *cycle = 0;
            }
            i
        };
        let mut samples = Vec::with_capacity(BENCH_BATCHES);
        for _ in 0..BENCH_BATCHES {
            samples.push(batch(&mut || {
                for _ in 0..iterations {
                    let i = next(&keys, &mut cycle);
                    black_box(filter.contains(black_box(&keys[i])));
                }
            }));
        }
        rows.push(BenchRow {
            structure: "cbf",
            op: "query",
            k,
            n,
            ns_per_op: median(samples),
        });
        let mut samples = Vec::with_capacity(BENCH_BATCHES);
        for _ in 0..BENCH_BATCHES {
            let fresh = random_keys(&mut rng, iterations as usize);
            samples.push(batch(&mut || {
                for key in &fresh {
                    filter.insert(black_box(key));
                }
            }));
        }
        rows.push(BenchRow {
            structure: "cbf",
            op: "insert",
            k,
            n,
            ns_per_op: median(samples),
        });
        let mut samples = Vec::with_capacity(BENCH_BATCHES);
        for _ in 0..BENCH_BATCHES {
            samples.push(batch(&mut || {
                for _ in 0..iterations {
                    let i = next(&keys, &mut cycle);
                    // Collisions can fail a removal; the pair is timed
                    // either way.
                    let _ = black_box(filter.remove(black_box(&keys[i])));
                    filter.insert(black_box(&keys[i]));
                }
            }));
        }
        rows.push(BenchRow {
            structure: "cbf",
            op: "remove_insert_pair",
            k,
            n,
            ns_per_op: median(samples),
        });
    }
    for &n in map_scales {
        let keys = random_keys(&mut rng, n as usize);
        let map: BTreeMap<[u8; 32], ()> = keys.iter().map(|k| (*k, ())).collect();
        let mut cycle = 0usize;
        let mut samples = Vec::with_capacity(BENCH_BATCHES);
        for _ in 0..BENCH_BATCHES {
            samples.push(batch(&mut || {
                for _ in 0..iterations {
                    let i = cycle;
                    cycle += 1;
                    if cycle == keys.len() {
                        cycle = 0;
                    }
                    black_box(map.contains_key(black_box(&keys[i])));
                }
            }));
        }
        rows.push(BenchRow {
            structure: "btree_map",
            op: "query",
            k: 0,
            n,
            ns_per_op: median(samples),
        });
    }
    Ok(rows)
}
