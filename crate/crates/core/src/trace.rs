//! Event model, trace file format, and the seeded synthetic workload
//! generator.
//!
//! A trace is a newline-delimited UTF-8 file, one JSON object per line
//! with keys drawn from {"t","ev","txid","inputs","reason"}. Events are
//! sorted by timestamp with ties broken by line order, every exit's txid
//! has a prior entry, and every entry has a prior inv.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::mempool::{ExitReason, OutPoint, PoolError, Transaction, TxId};

/// Trace records carry no size field; entries are reconstructed with this
/// fixed virtual size so that write followed by read is the identity.
pub const ENTRY_VSIZE_BYTES: u32 = 226;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("line {line}: timestamp {t} precedes earlier timestamp {prev}")]
    OutOfOrder { line: u64, t: u64, prev: u64 },
    #[error("line {line}: exit for a txid with no prior entry")]
    ExitWithoutEntry { line: u64 },
    #[error("line {line}: entry for a txid with no prior inv")]
    EntryWithoutInv { line: u64 },
    #[error("invalid workload config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One timestamped pool event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Inv {
        t_s: u64,
        txid: TxId,
    },
    Entry {
        t_s: u64,
        tx: Transaction,
    },
    Exit {
        t_s: u64,
        txid: TxId,
        reason: ExitReason,
    },
}

impl TraceEvent {
    pub fn t_s(&self) -> u64 {
        match self {
            TraceEvent::Inv { t_s, .. }
            | TraceEvent::Entry { t_s, .. }
            | TraceEvent::Exit { t_s, .. } => *t_s,
        }
    }

    pub fn txid(&self) -> TxId {
        match self {
            TraceEvent::Inv { txid, .. } | TraceEvent::Exit { txid, .. } => *txid,
            TraceEvent::Entry { tx, .. } => tx.txid,
        }
    }
}

/// Incremental checker for the stream invariants. Positions are 1-based
/// and equal line numbers when the stream comes from a file.
#[derive(Default)]
pub(crate) struct StreamValidator {
    prev_t: Option<u64>,
    inved: HashSet<TxId>,
    entered: HashSet<TxId>,
    pos: u64,
}

impl StreamValidator {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    pub(crate) fn check(&mut self, event: &TraceEvent) -> Result<(), TraceError> {
        self.pos += 1;
        let t = event.t_s();
        if let Some(prev) = self.prev_t {
            if t < prev {
                return Err(TraceError::OutOfOrder {
                    line: self.pos,
                    t,
                    prev,
                });
            }
        }
        self.prev_t = Some(t);
        match event {
            TraceEvent::Inv { txid, .. } => {
                self.inved.insert(*txid);
            }
            TraceEvent::Entry { tx, .. } => {
                if !self.inved.contains(&tx.txid) {
                    return Err(TraceError::EntryWithoutInv { line: self.pos });
                }
                self.entered.insert(tx.txid);
            }
            TraceEvent::Exit { txid, .. } => {
                if !self.entered.contains(txid) {
                    return Err(TraceError::ExitWithoutEntry { line: self.pos });
                }
            }
        }
        Ok(())
    }
}

/// Wire form of one line. Field order fixes the key order in output.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    t: u64,
    ev: String,
    txid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<Vec<RawInput>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    txid: String,
    idx: u32,
}

fn to_raw(event: &TraceEvent) -> RawRecord {
    match event {
        TraceEvent::Inv { t_s, txid } => RawRecord {
            t: *t_s,
            ev: "inv".into(),
            txid: txid.to_hex(),
            inputs: None,
            reason: None,
        },
        TraceEvent::Entry { t_s, tx } => RawRecord {
            t: *t_s,
            ev: "entry".into(),
            txid: tx.txid.to_hex(),
            inputs: Some(
                tx.inputs
                    .iter()
                    .map(|i| RawInput {
                        txid: i.prev_txid.to_hex(),
                        idx: i.index,
                    })
                    .collect(),
            ),
            reason: None,
        },
        TraceEvent::Exit { t_s, txid, reason } => RawRecord {
            t: *t_s,
            ev: "exit".into(),
            txid: txid.to_hex(),
            inputs: None,
            reason: Some(reason.as_str().into()),
        },
    }
}

fn malformed(line: u64, msg: impl Into<String>) -> TraceError {
    TraceError::Malformed {
        line,
        msg: msg.into(),
    }
}

fn parse_txid(s: &str, line: u64) -> Result<TxId, TraceError> {
    TxId::from_hex(s).map_err(|_| malformed(line, "txid must be 64 lowercase hex characters"))
}

fn from_raw(raw: RawRecord, line: u64) -> Result<TraceEvent, TraceError> {
    let txid = parse_txid(&raw.txid, line)?;
    match raw.ev.as_str() {
        "inv" => {
            if raw.inputs.is_some() || raw.reason.is_some() {
                return Err(malformed(line, "inv carries neither inputs nor reason"));
            }
            Ok(TraceEvent::Inv { t_s: raw.t, txid })
        }
        "entry" => {
            if raw.reason.is_some() {
                return Err(malformed(line, "entry carries no reason"));
            }
            let raw_inputs = raw
                .inputs
                .ok_or_else(|| malformed(line, "entry requires inputs"))?;
            let mut inputs = Vec::with_capacity(raw_inputs.len());
            for ri in raw_inputs {
                inputs.push(OutPoint {
                    prev_txid: parse_txid(&ri.txid, line)?,
                    index: ri.idx,
                });
            }
            let tx = Transaction::new(txid, inputs, ENTRY_VSIZE_BYTES).map_err(|e| match e {
                PoolError::NoInputs => malformed(line, "entry requires at least one input"),
                _ => malformed(line, "entry inputs must be pairwise distinct"),
            })?;
            Ok(TraceEvent::Entry { t_s: raw.t, tx })
        }
        "exit" => {
            if raw.inputs.is_some() {
                return Err(malformed(line, "exit carries no inputs"));
            }
            let reason_str = raw
                .reason
                .ok_or_else(|| malformed(line, "exit requires a reason"))?;
            let reason = ExitReason::parse(&reason_str)
                .ok_or_else(|| malformed(line, format!("unknown exit reason {reason_str:?}")))?;
            Ok(TraceEvent::Exit {
                t_s: raw.t,
                txid,
                reason,
            })
        }
        other => Err(malformed(line, format!("unknown event kind {other:?}"))),
    }
}

/// Read and validate a whole trace file. An empty file is an empty trace.
pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    let mut validator = StreamValidator::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let text = line?;
        let raw: RawRecord =
            serde_json::from_str(&text).map_err(|e| malformed(line_no, e.to_string()))?;
        let event = from_raw(raw, line_no)?;
        validator.check(&event)?;
        events.push(event);
    }
    Ok(events)
}

/// Write a stream to disk, one record per line, via a temporary file that
/// is renamed into place on success. Returns the number of records.
pub fn write_trace<I>(events: I, path: &Path) -> Result<u64, TraceError>
where
    I: IntoIterator<Item = TraceEvent>,
{
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = NamedTempFile::new_in(parent)?;
    let mut writer = BufWriter::new(tmp);
    let mut validator = StreamValidator::new();
    let mut count = 0u64;
    for event in events {
        validator.check(&event)?;
        let json = serde_json::to_string(&to_raw(&event)).expect("record serializes");
        writeln!(writer, "{json}")?;
        count += 1;
    }
    let tmp = writer
        .into_inner()
        .map_err(|e| TraceError::Io(e.into_error()))?;
    tmp.persist(path).map_err(|e| TraceError::Io(e.error))?;
    Ok(count)
}

/// Optional exit-halting phase: from `start_s` onward no transaction
/// leaves until the live backlog reaches `target_backlog`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionConfig {
    pub start_s: u64,
    #[serde(default = "default_target_backlog")]
    pub target_backlog: u64,
}

fn default_target_backlog() -> u64 {
    600_000
}

/// Synthetic workload shape. Arrivals are Poisson; each transaction gets
/// one inv at arrival, an entry one second later, late duplicate invs, and
/// one exit (confirmation or expiry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    #[serde(default)]
    pub seed: u64,
    pub duration_s: u64,
    #[serde(default = "default_tx_rate")]
    pub tx_rate_per_s: f64,
    #[serde(default = "default_mean_inputs")]
    pub mean_inputs_per_tx: f64,
    #[serde(default = "default_mean_invs")]
    pub mean_invs_per_tx: f64,
    #[serde(default = "default_mean_confirm")]
    pub mean_confirm_delay_s: f64,
    #[serde(default = "default_expiry")]
    pub unconfirmed_expiry_s: u64,
    #[serde(default)]
    pub congestion: Option<CongestionConfig>,
    #[serde(default = "default_conflict_rate")]
    pub conflict_rate: f64,
}

fn default_tx_rate() -> f64 {
    3.73
}

fn default_mean_inputs() -> f64 {
    3.0
}

fn default_mean_invs() -> f64 {
    3.0
}

fn default_mean_confirm() -> f64 {
    6240.0
}

fn default_expiry() -> u64 {
    1_209_600
}

fn default_conflict_rate() -> f64 {
    0.001
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            seed: 0,
            duration_s: 3600,
            tx_rate_per_s: default_tx_rate(),
            mean_inputs_per_tx: default_mean_inputs(),
            mean_invs_per_tx: default_mean_invs(),
            mean_confirm_delay_s: default_mean_confirm(),
            unconfirmed_expiry_s: default_expiry(),
            congestion: None,
            conflict_rate: default_conflict_rate(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |msg: &str| Err(TraceError::BadConfig(msg.into()));
        if self.duration_s == 0 {
            return bad("duration_s must be positive");
        }
        if !(self.tx_rate_per_s > 0.0 && self.tx_rate_per_s.is_finite()) {
            return bad("tx_rate_per_s must be positive and finite");
        }
        if !(self.mean_inputs_per_tx >= 1.0 && self.mean_inputs_per_tx.is_finite()) {
            return bad("mean_inputs_per_tx must be at least 1");
        }
        if !(self.mean_invs_per_tx >= 1.0 && self.mean_invs_per_tx.is_finite()) {
            return bad("mean_invs_per_tx must be at least 1");
        }
        if !(self.mean_confirm_delay_s > 0.0 && self.mean_confirm_delay_s.is_finite()) {
            return bad("mean_confirm_delay_s must be positive and finite");
        }
        if self.unconfirmed_expiry_s == 0 {
            return bad("unconfirmed_expiry_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.conflict_rate) {
            return bad("conflict_rate must lie in [0, 1]");
        }
        if let Some(c) = &self.congestion {
            if c.start_s >= self.duration_s {
                return bad("congestion.start_s must precede duration_s");
            }
            if c.target_backlog == 0 {
                return bad("congestion.target_backlog must be positive");
            }
        }
        Ok(())
    }
}

/// A transaction's lifecycle, scheduled in full when its arrival pops.
enum PendingKind {
    Arrival,
    Inv(TxId),
    Entry {
        txid: TxId,
        inputs: Vec<OutPoint>,
        conflict: bool,
    },
    Exit {
        txid: TxId,
        reason: ExitReason,
    },
}

/// Heap entry ordered by time, then by scheduling order. Sequence numbers
/// are unique, which makes the order total.
struct Pending {
    t: f64,
    seq: u64,
    kind: PendingKind,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

use std::cmp::Reverse;

/// Streaming trace source. Events pop in time order; nothing at or past
/// `duration_s` is emitted.
pub struct Generator {
    rng: ChaCha12Rng,
    heap: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    duration_f: f64,
    arrival_gap: Exp<f64>,
    extra_inputs: Geometric,
    extra_invs: Option<Poisson<f64>>,
    inv_spread: Exp<f64>,
    confirm: Exp<f64>,
    expiry_f: f64,
    conflict_rate: f64,
    congestion_start: Option<f64>,
    target_backlog: u64,
    released: bool,
    deferred: Vec<(f64, TxId, ExitReason)>,
    /// Resident transactions with one representative input each, kept for
    /// conflict cloning. The map stores positions into `live_list`.
    live: HashMap<TxId, usize>,
    live_list: Vec<(TxId, OutPoint)>,
}

/// Build the deterministic event stream for a validated config.
pub fn generate(config: &WorkloadConfig) -> Result<Generator, TraceError> {
    config.validate()?;
    let bad = |msg: String| TraceError::BadConfig(msg);
    let arrival_gap =
        Exp::new(config.tx_rate_per_s).map_err(|e| bad(format!("tx_rate_per_s: {e}")))?;
    let extra_inputs = Geometric::new(1.0 / config.mean_inputs_per_tx)
        .map_err(|e| bad(format!("mean_inputs_per_tx: {e}")))?;
    let extra_invs = if config.mean_invs_per_tx > 1.0 {
        Some(
            Poisson::new(config.mean_invs_per_tx - 1.0)
                .map_err(|e| bad(format!("mean_invs_per_tx: {e}")))?,
        )
    } else {
        None
    };
    let inv_spread = Exp::new(1.0 / 60.0).expect("fixed positive rate");
    let confirm = Exp::new(1.0 / config.mean_confirm_delay_s)
        .map_err(|e| bad(format!("mean_confirm_delay_s: {e}")))?;
    let mut gen = Generator {
        rng: ChaCha12Rng::seed_from_u64(config.seed),
        heap: BinaryHeap::new(),
        seq: 0,
        duration_f: config.duration_s as f64,
        arrival_gap,
        extra_inputs,
        extra_invs,
        inv_spread,
        confirm,
        expiry_f: config.unconfirmed_expiry_s as f64,
        conflict_rate: config.conflict_rate,
        congestion_start: config.congestion.map(|c| c.start_s as f64),
        target_backlog: config.congestion.map(|c| c.target_backlog).unwrap_or(0),
        released: config.congestion.is_none(),
        deferred: Vec::new(),
        live: HashMap::new(),
        live_list: Vec::new(),
    };
    let first = gen.arrival_gap.sample(&mut gen.rng);
    if first < gen.duration_f {
        gen.push(first, PendingKind::Arrival);
    }
    Ok(gen)
}

impl Generator {
    fn push(&mut self, t: f64, kind: PendingKind) {
        self.heap.push(Reverse(Pending {
            t,
            seq: self.seq,
            kind,
        }));
        self.seq += 1;
    }

    fn random_txid(&mut self) -> TxId {
        let mut bytes = [0u8; 32];
        self.rng.fill(&mut bytes);
        TxId(bytes)
    }

    /// Schedule one transaction's whole lifecycle relative to arrival `t`,
    /// plus the next arrival. Draw order is part of the determinism
    /// contract.
    fn on_arrival(&mut self, t: f64) {
        let txid = self.random_txid();
        let n_inputs = 1 + self.extra_inputs.sample(&mut self.rng);
        let mut inputs = Vec::with_capacity(n_inputs as usize);
        for _ in 0..n_inputs {
            let prev = self.random_txid();
            let index = self.rng.random_range(0..1024u32);
            inputs.push(OutPoint {
                prev_txid: prev,
                index,
            });
        }
        let conflict = self.rng.random_bool(self.conflict_rate);
        let entry_t = t + 1.0;
        self.push(t, PendingKind::Inv(txid));
        self.push(
            entry_t,
            PendingKind::Entry {
                txid,
                inputs,
                conflict,
            },
        );
        let n_extra = match self.extra_invs {
            Some(dist) => dist.sample(&mut self.rng) as u64,
            None => 0,
        };
        for _ in 0..n_extra {
            let at = entry_t + self.inv_spread.sample(&mut self.rng);
            self.push(at, PendingKind::Inv(txid));
        }
        let confirm_delay = self.confirm.sample(&mut self.rng);
        let (exit_t, reason) = if confirm_delay >= self.expiry_f {
            (entry_t + self.expiry_f, ExitReason::Expired)
        } else {
            (entry_t + confirm_delay, ExitReason::Block)
        };
        self.push(exit_t, PendingKind::Exit { txid, reason });
        let next = t + self.arrival_gap.sample(&mut self.rng);
        if next < self.duration_f {
            self.push(next, PendingKind::Arrival);
        }
    }

    fn remove_live(&mut self, txid: &TxId) {
        if let Some(pos) = self.live.remove(txid) {
            self.live_list.swap_remove(pos);
            if pos < self.live_list.len() {
                let moved = self.live_list[pos].0;
                self.live.insert(moved, pos);
            }
        }
    }

    /// Replay the held-back exits, preserving their spacing from the
    /// moment the backlog target was met.
    fn release(&mut self, now: f64) {
        self.released = true;
        if let Some(&(first_t, ..)) = self.deferred.first() {
            let shift = now - first_t;
            for (t, txid, reason) in std::mem::take(&mut self.deferred) {
                self.push(t + shift, PendingKind::Exit { txid, reason });
            }
        }
    }
}

impl Iterator for Generator {
    type Item = TraceEvent;

    fn next(&mut self) -> Option<TraceEvent> {
        loop {
            let Reverse(pending) = self.heap.pop()?;
            let t = pending.t;
            // Scheduling never goes backwards, so the first event at or
            // past the horizon ends the stream.
            if t >= self.duration_f {
                self.heap.clear();
                return None;
            }
            match pending.kind {
                PendingKind::Arrival => {
                    self.on_arrival(t);
                }
                PendingKind::Inv(txid) => {
                    return Some(TraceEvent::Inv {
                        t_s: t as u64,
                        txid,
                    });
                }
                PendingKind::Entry {
                    txid,
                    mut inputs,
                    conflict,
                } => {
                    let substituted = conflict && !self.live_list.is_empty();
                    if substituted {
                        let i = self.rng.random_range(0..self.live_list.len());
                        let victim = self.live_list[i].1;
                        if !inputs.contains(&victim) {
                            inputs[0] = victim;
                        }
                    } else {
                        // The reference pool will accept, so the tx is
                        // live until its own exit pops.
                        self.live.insert(txid, self.live_list.len());
                        self.live_list.push((txid, inputs[0]));
                        if !self.released && self.live_list.len() as u64 >= self.target_backlog {
                            self.release(t);
                        }
                    }
                    let tx = Transaction::new(txid, inputs, ENTRY_VSIZE_BYTES)
                        .expect("generated inputs are non-empty and distinct");
                    return Some(TraceEvent::Entry { t_s: t as u64, tx });
                }
                PendingKind::Exit { txid, reason } => {
                    // A conflict-substituted tx was dropped at entry and
                    // never leaves the pool.
                    if !self.live.contains_key(&txid) {
                        continue;
                    }
                    if !self.released && t >= self.congestion_start.unwrap_or(f64::INFINITY) {
                        self.deferred.push((t, txid, reason));
                        continue;
                    }
                    self.remove_live(&txid);
                    return Some(TraceEvent::Exit {
                        t_s: t as u64,
                        txid,
                        reason,
                    });
                }
            }
        }
    }
}
