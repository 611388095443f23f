//! The Carbyne pool state machine and the exact reference pool.
//!
//! [`CarbynePool`] answers inv, entry, and exit events from two filters: a
//! transaction-id filter under a forgetting strategy, and a flat inputs
//! filter that is wiped on a fixed reset interval rather than per key.
//! [`ReferencePool`] answers the same events from exact sets and serves as
//! ground truth during replay.
//!
//! Decision rules at entry, in order: a transaction whose id already tests
//! present is a duplicate; otherwise a transaction with any input at or
//! above the replacement threshold is a double spend; otherwise it is
//! accepted, its id and all of its inputs are inserted. Exits remove the
//! id from whichever slot or link answered for it. Under filters, inputs
//! are never removed one by one; the exact test substitution releases an
//! exiting transaction's inputs so that its decisions match the reference
//! pool between boundaries.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expiry::{
    DynamicFilterChain, ExpiryError, RotatingFilter, DEFAULT_CHAIN_CAPACITY, DEFAULT_LINK_EXPIRY_S,
    DEFAULT_ROTATION_INTERVAL_S,
};
use crate::filter::{CountingBloomFilter, FilterError, FilterParams, IndexTable};

/// Default inputs-filter reset interval, one hour.
pub const DEFAULT_INPUTS_RESET_INTERVAL_S: u64 = 3600;
/// Default double-spend threshold: one standing counter blocks a conflict.
pub const DEFAULT_RBF_THRESHOLD: u8 = 1;
/// Reference pool transaction expiry, fourteen days in seconds.
pub const REFERENCE_EXPIRY_S: u64 = 1_209_600;

/// 32-byte transaction identifier, written as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxId(pub [u8; 32]);

impl TxId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Parse the canonical text form, exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, PoolError> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(PoolError::BadTxIdHex);
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| PoolError::BadTxIdHex)?;
        Ok(TxId(out))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxId({})", self.to_hex())
    }
}

/// A spendable output reference: previous transaction id plus output index.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct OutPoint {
    pub prev_txid: TxId,
    pub index: u32,
}

impl OutPoint {
    /// Hashing form: the previous txid followed by the index as four
    /// fixed-width bytes, most significant byte first.
    pub fn ser_bytes(&self) -> [u8; 36] {
        let mut out = [0u8; 36];
        out[..32].copy_from_slice(&self.prev_txid.0);
        out[32..].copy_from_slice(&self.index.to_be_bytes());
        out
    }
}

/// An unconfirmed transaction as seen by the pool layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub txid: TxId,
    pub inputs: Vec<OutPoint>,
    /// Raw-size statistic; carries no behavior.
    pub vsize_bytes: u32,
}

impl Transaction {
    /// Inputs must be non-empty and pairwise distinct; vsize positive.
    pub fn new(txid: TxId, inputs: Vec<OutPoint>, vsize_bytes: u32) -> Result<Self, PoolError> {
        if inputs.is_empty() {
            return Err(PoolError::NoInputs);
        }
        let mut seen = HashSet::with_capacity(inputs.len());
        for input in &inputs {
            if !seen.insert(*input) {
                return Err(PoolError::DuplicateInput);
            }
        }
        if vsize_bytes == 0 {
            return Err(PoolError::ZeroVsize);
        }
        Ok(Transaction {
            txid,
            inputs,
            vsize_bytes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvDecision {
    /// The pool has not seen this txid and would fetch the transaction.
    Request,
    AlreadyHave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryDecision {
    Accept,
    /// The txid already tests present.
    DuplicateDrop,
    /// Some input is already spent at the configured threshold.
    DoubleSpendDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitDecision {
    Removed,
    NotFound,
}

/// Why a transaction left the pool. Metrics metadata only; every reason is
/// handled identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    Block,
    Conflict,
    Replaced,
    SizeEvict,
    Reorg,
    Expired,
}

impl ExitReason {
    pub const ALL: [ExitReason; 6] = [
        ExitReason::Block,
        ExitReason::Conflict,
        ExitReason::Replaced,
        ExitReason::SizeEvict,
        ExitReason::Reorg,
        ExitReason::Expired,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExitReason::Block => "block",
            ExitReason::Conflict => "conflict",
            ExitReason::Replaced => "replaced",
            ExitReason::SizeEvict => "size_evict",
            ExitReason::Reorg => "reorg",
            ExitReason::Expired => "expired",
        }
    }

    pub fn parse(s: &str) -> Option<ExitReason> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|r| r == self).unwrap()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("transaction must have at least one input")]
    NoInputs,
    #[error("transaction inputs must be pairwise distinct")]
    DuplicateInput,
    #[error("virtual size must be positive")]
    ZeroVsize,
    #[error("txid must be exactly 64 lowercase hex characters")]
    BadTxIdHex,
    #[error("rbf threshold {threshold} is not in 1..={capacity}")]
    BadRbfThreshold { threshold: u8, capacity: u8 },
    #[error("inputs reset interval must be positive")]
    ZeroResetInterval,
    #[error("clock went backwards: {now} < {last}")]
    TimeRegression { now: u64, last: u64 },
    #[error("exact membership supports only the rotating strategy")]
    ExactChainUnsupported,
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Expiry(#[from] ExpiryError),
}

/// Forgetting strategy for the transaction-id filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStrategy {
    Rotating { interval_s: u64 },
    Chain { capacity_n: u64, link_expiry_s: u64 },
}

/// Whether membership is answered by counting bloom filters or by exact
/// sets. Exact membership is a test hook that removes every probabilistic
/// effect while keeping the decision logic identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    Filter,
    Exact,
}

/// Shape of one filter, seedless; pool seeds are derived from the pool's
/// master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterSpec {
    pub m: u64,
    pub k: u32,
    pub bucket_bits: u8,
    pub reseed_on_clear: bool,
}

impl FilterSpec {
    pub fn new(m: u64, k: u32) -> Self {
        FilterSpec {
            m,
            k,
            bucket_bits: 2,
            reseed_on_clear: true,
        }
    }

    fn params(&self, seed: u128) -> FilterParams {
        FilterParams {
            m: self.m,
            k: self.k,
            bucket_bits: self.bucket_bits,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub tx_strategy: TxStrategy,
    pub tx_filter: FilterSpec,
    pub inputs_filter: FilterSpec,
    pub membership: Membership,
    pub inputs_reset_interval_s: u64,
    pub rbf_threshold: u8,
    /// Master seed; every filter seed is derived from it.
    pub seed: u64,
    /// Forced bucket indices for selected keys, applied to both filters.
    pub index_table: Option<Arc<IndexTable>>,
}

impl PoolConfig {
    /// Rotating-strategy pool with both filters shaped `m` by `k` and all
    /// intervals at their defaults.
    pub fn rotating(m: u64, k: u32) -> Self {
        PoolConfig {
            tx_strategy: TxStrategy::Rotating {
                interval_s: DEFAULT_ROTATION_INTERVAL_S,
            },
            tx_filter: FilterSpec::new(m, k),
            inputs_filter: FilterSpec::new(m, k),
            membership: Membership::Filter,
            inputs_reset_interval_s: DEFAULT_INPUTS_RESET_INTERVAL_S,
            rbf_threshold: DEFAULT_RBF_THRESHOLD,
            seed: 0,
            index_table: None,
        }
    }

    /// Chain-strategy pool with default capacity and link expiry.
    pub fn chain(m: u64, k: u32) -> Self {
        PoolConfig {
            tx_strategy: TxStrategy::Chain {
                capacity_n: DEFAULT_CHAIN_CAPACITY,
                link_expiry_s: DEFAULT_LINK_EXPIRY_S,
            },
            ..Self::rotating(m, k)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rbf_threshold(mut self, threshold: u8) -> Self {
        self.rbf_threshold = threshold;
        self
    }

    pub fn with_membership(mut self, membership: Membership) -> Self {
        self.membership = membership;
        self
    }

    pub fn with_index_table(mut self, table: Arc<IndexTable>) -> Self {
        self.index_table = Some(table);
        self
    }
}

#[derive(Debug)]
enum TxFilterImpl {
    Rotating(RotatingFilter),
    Chain(DynamicFilterChain),
    ExactRotating {
        primary: HashSet<TxId>,
        secondary: HashSet<TxId>,
        interval_s: u64,
        last_advance_s: u64,
    },
}

#[derive(Debug)]
enum InputsFilterImpl {
    Cbf(CountingBloomFilter),
    /// Exact spent-input counts. Unlike the filter, the exact form
    /// remembers which inputs belong to which transaction and releases
    /// them when that transaction exits, so decisions match the reference
    /// pool until a reset or rotation boundary is crossed.
    Exact {
        counts: HashMap<OutPoint, u32>,
        by_tx: HashMap<TxId, Vec<OutPoint>>,
    },
}

/// Bytes held by each pool component. Exact membership holds no filter
/// arrays and reports zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub tx_filter_bytes: u64,
    pub inputs_filter_bytes: u64,
    pub total_bytes: u64,
    /// Number of tx-filter units: two rotating slots or the current
    /// number of chain links.
    pub tx_filter_count: u64,
}

/// The Carbyne transaction pool.
#[derive(Debug)]
pub struct CarbynePool {
    tx_filter: TxFilterImpl,
    inputs_filter: InputsFilterImpl,
    inputs_reset_interval_s: u64,
    last_inputs_reset_s: u64,
    rbf_threshold: u8,
    last_now_s: u64,
}

impl CarbynePool {
    pub fn new(config: &PoolConfig) -> Result<Self, PoolError> {
        if config.inputs_reset_interval_s == 0 {
            return Err(PoolError::ZeroResetInterval);
        }
        let inputs_capacity = match config.membership {
            Membership::Filter => ((1u16 << config.inputs_filter.bucket_bits) - 1) as u8,
            Membership::Exact => u8::MAX,
        };
        if config.rbf_threshold == 0 || config.rbf_threshold > inputs_capacity {
            return Err(PoolError::BadRbfThreshold {
                threshold: config.rbf_threshold,
                capacity: inputs_capacity,
            });
        }
        let mut seeds = ChaCha12Rng::seed_from_u64(config.seed);
        let tx_seed = seeds.random::<u128>();
        let inputs_seed = seeds.random::<u128>();
        let tx_filter = match (config.membership, config.tx_strategy) {
            (Membership::Filter, TxStrategy::Rotating { interval_s }) => {
                TxFilterImpl::Rotating(RotatingFilter::with_options(
                    config.tx_filter.params(tx_seed),
                    interval_s,
                    config.tx_filter.reseed_on_clear,
                    config.index_table.clone(),
                )?)
            }
            (
                Membership::Filter,
                TxStrategy::Chain {
                    capacity_n,
                    link_expiry_s,
                },
            ) => TxFilterImpl::Chain(DynamicFilterChain::with_options(
                config.tx_filter.params(tx_seed),
                capacity_n,
                link_expiry_s,
                config.tx_filter.reseed_on_clear,
                config.index_table.clone(),
            )?),
            (Membership::Exact, TxStrategy::Rotating { interval_s }) => {
                if interval_s == 0 {
                    return Err(PoolError::Expiry(ExpiryError::ZeroInterval));
                }
                TxFilterImpl::ExactRotating {
                    primary: HashSet::new(),
                    secondary: HashSet::new(),
                    interval_s,
                    last_advance_s: 0,
                }
            }
            (Membership::Exact, TxStrategy::Chain { .. }) => {
                return Err(PoolError::ExactChainUnsupported);
            }
        };
        let inputs_filter = match config.membership {
            Membership::Filter => InputsFilterImpl::Cbf(CountingBloomFilter::with_options(
                config.inputs_filter.params(inputs_seed),
                config.inputs_filter.reseed_on_clear,
                config.index_table.clone(),
            )?),
            Membership::Exact => InputsFilterImpl::Exact {
                counts: HashMap::new(),
                by_tx: HashMap::new(),
            },
        };
        Ok(CarbynePool {
            tx_filter,
            inputs_filter,
            inputs_reset_interval_s: config.inputs_reset_interval_s,
            last_inputs_reset_s: 0,
            rbf_threshold: config.rbf_threshold,
            last_now_s: 0,
        })
    }

    /// Apply time: wipe the inputs filter at every elapsed reset boundary
    /// (boundary inclusive) and run the tx-filter forgetting strategy.
    /// Time must be nondecreasing across every call into the pool.
    pub fn maintenance(&mut self, now: u64) -> Result<(), PoolError> {
        if now < self.last_now_s {
            return Err(PoolError::TimeRegression {
                now,
                last: self.last_now_s,
            });
        }
        self.last_now_s = now;
        while now - self.last_inputs_reset_s >= self.inputs_reset_interval_s {
            match &mut self.inputs_filter {
                InputsFilterImpl::Cbf(f) => f.clear(),
                InputsFilterImpl::Exact { counts, by_tx } => {
                    counts.clear();
                    by_tx.clear();
                }
            }
            self.last_inputs_reset_s += self.inputs_reset_interval_s;
        }
        match &mut self.tx_filter {
            TxFilterImpl::Rotating(rf) => {
                rf.advance(now)?;
            }
            TxFilterImpl::Chain(ch) => ch.advance(now)?,
            TxFilterImpl::ExactRotating {
                primary,
                secondary,
                interval_s,
                last_advance_s,
            } => {
                while now - *last_advance_s >= *interval_s {
                    secondary.clear();
                    std::mem::swap(primary, secondary);
                    *last_advance_s += *interval_s;
                }
            }
        }
        Ok(())
    }

    fn tx_contains(&self, txid: &TxId) -> bool {
        match &self.tx_filter {
            TxFilterImpl::Rotating(rf) => rf.contains(txid.as_bytes()),
            TxFilterImpl::Chain(ch) => ch.contains(txid.as_bytes()),
            TxFilterImpl::ExactRotating {
                primary, secondary, ..
            } => primary.contains(txid) || secondary.contains(txid),
        }
    }

    fn tx_insert(&mut self, txid: &TxId) -> Result<(), PoolError> {
        match &mut self.tx_filter {
            TxFilterImpl::Rotating(rf) => rf.insert(txid.as_bytes()),
            TxFilterImpl::Chain(ch) => ch.insert(txid.as_bytes())?,
            TxFilterImpl::ExactRotating { primary, .. } => {
                primary.insert(*txid);
            }
        }
        Ok(())
    }

    fn tx_remove_answering(&mut self, txid: &TxId) -> bool {
        match &mut self.tx_filter {
            TxFilterImpl::Rotating(rf) => rf.remove(txid.as_bytes()),
            TxFilterImpl::Chain(ch) => ch.remove(txid.as_bytes()),
            TxFilterImpl::ExactRotating {
                primary, secondary, ..
            } => primary.remove(txid) || secondary.remove(txid),
        }
    }

    fn inputs_contains_at_least(&self, input: &OutPoint, threshold: u8) -> Result<bool, PoolError> {
        match &self.inputs_filter {
            InputsFilterImpl::Cbf(f) => Ok(f.contains_at_least(&input.ser_bytes(), threshold)?),
            InputsFilterImpl::Exact { counts, .. } => {
                Ok(counts.get(input).copied().unwrap_or(0) >= threshold as u32)
            }
        }
    }

    fn inputs_admit(&mut self, tx: &Transaction) {
        match &mut self.inputs_filter {
            InputsFilterImpl::Cbf(f) => {
                for input in &tx.inputs {
                    f.insert(&input.ser_bytes());
                }
            }
            InputsFilterImpl::Exact { counts, by_tx } => {
                for input in &tx.inputs {
                    *counts.entry(*input).or_insert(0) += 1;
                }
                by_tx.insert(tx.txid, tx.inputs.clone());
            }
        }
    }

    /// Give back an exiting transaction's inputs. A deliberate no-op for
    /// the filter form, which cannot know which inputs the txid spent.
    fn inputs_release(&mut self, txid: &TxId) {
        if let InputsFilterImpl::Exact { counts, by_tx } = &mut self.inputs_filter {
            if let Some(inputs) = by_tx.remove(txid) {
                for input in inputs {
                    if let Some(count) = counts.get_mut(&input) {
                        *count -= 1;
                        if *count == 0 {
                            counts.remove(&input);
                        }
                    }
                }
            }
        }
    }

    /// Would the pool fetch the announced transaction? No filter state
    /// changes beyond maintenance.
    pub fn on_inv(&mut self, txid: &TxId, now: u64) -> Result<InvDecision, PoolError> {
        self.maintenance(now)?;
        Ok(if self.tx_contains(txid) {
            InvDecision::AlreadyHave
        } else {
            InvDecision::Request
        })
    }

    /// Admit, or drop, a full transaction.
    pub fn on_entry(&mut self, tx: &Transaction, now: u64) -> Result<EntryDecision, PoolError> {
        self.maintenance(now)?;
        if self.tx_contains(&tx.txid) {
            return Ok(EntryDecision::DuplicateDrop);
        }
        for input in &tx.inputs {
            if self.inputs_contains_at_least(input, self.rbf_threshold)? {
                return Ok(EntryDecision::DoubleSpendDrop);
            }
        }
        self.tx_insert(&tx.txid)?;
        self.inputs_admit(tx);
        Ok(EntryDecision::Accept)
    }

    /// Process a departure. The reason is metrics metadata; behavior does
    /// not depend on it. Removal proceeds whenever the id tests present,
    /// and a genuinely absent id mutates nothing.
    pub fn on_exit(
        &mut self,
        txid: &TxId,
        _reason: ExitReason,
        now: u64,
    ) -> Result<ExitDecision, PoolError> {
        self.maintenance(now)?;
        Ok(if self.tx_remove_answering(txid) {
            self.inputs_release(txid);
            ExitDecision::Removed
        } else {
            ExitDecision::NotFound
        })
    }

    /// Membership of the txid at this instant, without applying time.
    pub fn contains(&self, txid: &TxId) -> bool {
        self.tx_contains(txid)
    }

    /// Live inserts across all tx-filter units, the pool's resident-count
    /// estimate.
    pub fn live_inserts(&self) -> u64 {
        match &self.tx_filter {
            TxFilterImpl::Rotating(rf) => rf.live_inserts(),
            TxFilterImpl::Chain(ch) => ch.live_inserts(),
            TxFilterImpl::ExactRotating {
                primary, secondary, ..
            } => (primary.len() + secondary.len()) as u64,
        }
    }

    /// Current chain length, when the chain strategy is active.
    pub fn chain_links(&self) -> Option<u64> {
        match &self.tx_filter {
            TxFilterImpl::Chain(ch) => Some(ch.link_count() as u64),
            _ => None,
        }
    }

    pub fn memory_report(&self) -> MemoryReport {
        let (tx_filter_bytes, tx_filter_count) = match &self.tx_filter {
            TxFilterImpl::Rotating(rf) => (rf.memory_bytes(), 2),
            TxFilterImpl::Chain(ch) => (ch.memory_bytes(), ch.link_count() as u64),
            TxFilterImpl::ExactRotating { .. } => (0, 2),
        };
        let inputs_filter_bytes = match &self.inputs_filter {
            InputsFilterImpl::Cbf(f) => f.memory_bytes(),
            InputsFilterImpl::Exact { .. } => 0,
        };
        MemoryReport {
            tx_filter_bytes,
            inputs_filter_bytes,
            total_bytes: tx_filter_bytes + inputs_filter_bytes,
            tx_filter_count,
        }
    }
}

#[derive(Debug, Clone)]
struct RefEntry {
    inputs: Vec<OutPoint>,
    inserted_at_s: u64,
}

/// Exact-set mempool mirror used as ground truth.
///
/// Invariant: `spent` is exactly the union of the inputs of resident
/// transactions, which the accept rule keeps collision-free.
#[derive(Debug)]
pub struct ReferencePool {
    tx: HashMap<TxId, RefEntry>,
    spent: HashSet<OutPoint>,
    /// Insertion order for the expiry sweep; stale stamps are skipped.
    queue: VecDeque<(u64, TxId)>,
    expiry_s: u64,
    last_now_s: u64,
}

impl Default for ReferencePool {
    fn default() -> Self {
        Self::new()
    }
}

impl ReferencePool {
    pub fn new() -> Self {
        Self::with_expiry(REFERENCE_EXPIRY_S)
    }

    pub fn with_expiry(expiry_s: u64) -> Self {
        ReferencePool {
            tx: HashMap::new(),
            spent: HashSet::new(),
            queue: VecDeque::new(),
            expiry_s,
            last_now_s: 0,
        }
    }

    /// Expire transactions resident for the full expiry period.
    pub fn maintenance(&mut self, now: u64) -> Result<(), PoolError> {
        if now < self.last_now_s {
            return Err(PoolError::TimeRegression {
                now,
                last: self.last_now_s,
            });
        }
        self.last_now_s = now;
        while let Some(&(at, txid)) = self.queue.front() {
            if now - at < self.expiry_s {
                break;
            }
            self.queue.pop_front();
            // A stale stamp means the tx exited and possibly re-entered.
            if self.tx.get(&txid).map(|e| e.inserted_at_s) == Some(at) {
                self.evict(&txid);
            }
        }
        Ok(())
    }

    fn evict(&mut self, txid: &TxId) {
        if let Some(entry) = self.tx.remove(txid) {
            for input in &entry.inputs {
                self.spent.remove(input);
            }
        }
    }

    pub fn on_inv(&mut self, txid: &TxId, now: u64) -> Result<InvDecision, PoolError> {
        self.maintenance(now)?;
        Ok(if self.tx.contains_key(txid) {
            InvDecision::AlreadyHave
        } else {
            InvDecision::Request
        })
    }

    pub fn on_entry(&mut self, tx: &Transaction, now: u64) -> Result<EntryDecision, PoolError> {
        self.maintenance(now)?;
        if self.tx.contains_key(&tx.txid) {
            return Ok(EntryDecision::DuplicateDrop);
        }
        if tx.inputs.iter().any(|i| self.spent.contains(i)) {
            return Ok(EntryDecision::DoubleSpendDrop);
        }
        self.tx.insert(
            tx.txid,
            RefEntry {
                inputs: tx.inputs.clone(),
                inserted_at_s: now,
            },
        );
        for input in &tx.inputs {
            self.spent.insert(*input);
        }
        self.queue.push_back((now, tx.txid));
        Ok(EntryDecision::Accept)
    }

    pub fn on_exit(
        &mut self,
        txid: &TxId,
        _reason: ExitReason,
        now: u64,
    ) -> Result<ExitDecision, PoolError> {
        self.maintenance(now)?;
        Ok(if self.tx.contains_key(txid) {
            self.evict(txid);
            ExitDecision::Removed
        } else {
            ExitDecision::NotFound
        })
    }

    pub fn contains(&self, txid: &TxId) -> bool {
        self.tx.contains_key(txid)
    }

    pub fn resident(&self) -> u64 {
        self.tx.len() as u64
    }

    pub fn spent_inputs(&self) -> u64 {
        self.spent.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn txid(tag: u8) -> TxId {
        TxId([tag; 32])
    }

    fn outpoint(tag: u8, index: u32) -> OutPoint {
        OutPoint {
            prev_txid: txid(tag),
            index,
        }
    }

    fn tx(tag: u8, inputs: &[OutPoint]) -> Transaction {
        Transaction::new(txid(tag), inputs.to_vec(), 1).unwrap()
    }

    fn small_pool() -> CarbynePool {
        CarbynePool::new(&PoolConfig::rotating(4096, 4).with_seed(11)).unwrap()
    }

    #[test]
    fn txid_hex_round_trip_and_validation() {
        let id = txid(0xab);
        let hex = id.to_hex();
        assert_eq!(hex.len(), 64);
        assert_eq!(TxId::from_hex(&hex).unwrap(), id);
        assert_eq!(TxId::from_hex("ab"), Err(PoolError::BadTxIdHex));
        let upper = hex.to_uppercase();
        assert_eq!(TxId::from_hex(&upper), Err(PoolError::BadTxIdHex));
    }

    #[test]
    fn outpoint_serialization_is_txid_then_big_endian_index() {
        let op = OutPoint {
            prev_txid: txid(0x11),
            index: 0x01020304,
        };
        let bytes = op.ser_bytes();
        assert_eq!(&bytes[..32], &[0x11; 32]);
        assert_eq!(&bytes[32..], &[1, 2, 3, 4]);
    }

    #[test]
    fn transaction_validation() {
        assert_eq!(
            Transaction::new(txid(1), vec![], 1),
            Err(PoolError::NoInputs)
        );
        let dup = outpoint(2, 0);
        assert_eq!(
            Transaction::new(txid(1), vec![dup, dup], 1),
            Err(PoolError::DuplicateInput)
        );
        assert_eq!(
            Transaction::new(txid(1), vec![dup], 0),
            Err(PoolError::ZeroVsize)
        );
    }

    #[test]
    fn exit_reason_strings_round_trip() {
        for reason in ExitReason::ALL {
            assert_eq!(ExitReason::parse(reason.as_str()), Some(reason));
        }
        assert_eq!(ExitReason::parse("unknown"), None);
        assert_eq!(ExitReason::SizeEvict.as_str(), "size_evict");
    }

    #[test]
    fn fresh_tx_accepts_and_duplicate_drops() {
        let mut pool = small_pool();
        let a = tx(1, &[outpoint(10, 0)]);
        assert_eq!(pool.on_inv(&a.txid, 0).unwrap(), InvDecision::Request);
        assert_eq!(pool.on_entry(&a, 0).unwrap(), EntryDecision::Accept);
        assert_eq!(pool.on_inv(&a.txid, 1).unwrap(), InvDecision::AlreadyHave);
        assert_eq!(pool.on_entry(&a, 2).unwrap(), EntryDecision::DuplicateDrop);
        assert_eq!(pool.live_inserts(), 1);
    }

    #[test]
    fn conflicting_input_drops_within_one_window() {
        let mut pool = small_pool();
        let shared = outpoint(10, 3);
        let a = tx(1, &[shared]);
        let b = tx(2, &[shared, outpoint(11, 0)]);
        assert_eq!(pool.on_entry(&a, 100).unwrap(), EntryDecision::Accept);
        assert_eq!(
            pool.on_entry(&b, 200).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
    }

    #[test]
    fn conflict_accepts_after_inputs_reset_boundary() {
        let mut pool = small_pool();
        let shared = outpoint(10, 3);
        let a = tx(1, &[shared]);
        let b = tx(2, &[shared]);
        assert_eq!(pool.on_entry(&a, 100).unwrap(), EntryDecision::Accept);
        // The hourly boundary at 3600 wipes standing input counters.
        assert_eq!(pool.on_entry(&b, 3601).unwrap(), EntryDecision::Accept);
    }

    #[test]
    fn reset_fires_exactly_at_the_boundary() {
        let mut a = small_pool();
        let shared = outpoint(10, 3);
        assert_eq!(
            a.on_entry(&tx(1, &[shared]), 100).unwrap(),
            EntryDecision::Accept
        );
        a.maintenance(3600).unwrap();
        assert_eq!(
            a.on_entry(&tx(2, &[shared]), 3600).unwrap(),
            EntryDecision::Accept
        );

        let mut b = small_pool();
        assert_eq!(
            b.on_entry(&tx(1, &[shared]), 100).unwrap(),
            EntryDecision::Accept
        );
        b.maintenance(3599).unwrap();
        assert_eq!(
            b.on_entry(&tx(2, &[shared]), 3599).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
    }

    #[test]
    fn at_most_one_reset_per_window() {
        let mut pool = small_pool();
        let shared = outpoint(10, 3);
        assert_eq!(
            pool.on_entry(&tx(1, &[shared]), 3600).unwrap(),
            EntryDecision::Accept
        );
        // Both calls sit inside the window starting at 3600; the counters
        // planted at 3600 must survive to 7199.
        pool.maintenance(3800).unwrap();
        pool.maintenance(7199).unwrap();
        assert_eq!(
            pool.on_entry(&tx(2, &[shared]), 7199).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
        assert_eq!(
            pool.on_entry(&tx(3, &[shared]), 7200).unwrap(),
            EntryDecision::Accept
        );
    }

    #[test]
    fn rbf_threshold_two_admits_exactly_one_replacement() {
        let config = PoolConfig::rotating(4096, 4)
            .with_seed(3)
            .with_rbf_threshold(2);
        let mut pool = CarbynePool::new(&config).unwrap();
        let shared = outpoint(10, 3);
        assert_eq!(
            pool.on_entry(&tx(1, &[shared]), 0).unwrap(),
            EntryDecision::Accept
        );
        assert_eq!(
            pool.on_entry(&tx(2, &[shared]), 1).unwrap(),
            EntryDecision::Accept
        );
        assert_eq!(
            pool.on_entry(&tx(3, &[shared]), 2).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
    }

    #[test]
    fn rbf_threshold_must_fit_counter_capacity() {
        let bad = PoolConfig::rotating(4096, 4).with_rbf_threshold(4);
        assert_eq!(
            CarbynePool::new(&bad).unwrap_err(),
            PoolError::BadRbfThreshold {
                threshold: 4,
                capacity: 3
            }
        );
        assert_eq!(
            CarbynePool::new(&PoolConfig::rotating(4096, 4).with_rbf_threshold(0)).unwrap_err(),
            PoolError::BadRbfThreshold {
                threshold: 0,
                capacity: 3
            }
        );
    }

    #[test]
    fn exit_removes_and_absent_exit_is_not_found() {
        let mut pool = small_pool();
        let a = tx(1, &[outpoint(10, 0)]);
        pool.on_entry(&a, 0).unwrap();
        assert_eq!(
            pool.on_exit(&a.txid, ExitReason::Block, 5).unwrap(),
            ExitDecision::Removed
        );
        assert_eq!(
            pool.on_exit(&a.txid, ExitReason::Block, 6).unwrap(),
            ExitDecision::NotFound
        );
        assert_eq!(
            pool.on_exit(&txid(9), ExitReason::Expired, 7).unwrap(),
            ExitDecision::NotFound
        );
        assert_eq!(pool.live_inserts(), 0);
    }

    #[test]
    fn non_block_exits_are_handled_identically() {
        for reason in ExitReason::ALL {
            let mut pool = small_pool();
            let a = tx(1, &[outpoint(10, 0)]);
            pool.on_entry(&a, 0).unwrap();
            assert_eq!(
                pool.on_exit(&a.txid, reason, 5).unwrap(),
                ExitDecision::Removed
            );
        }
    }

    #[test]
    fn exact_membership_frees_inputs_on_exit() {
        let config = PoolConfig::rotating(64, 2).with_membership(Membership::Exact);
        let mut pool = CarbynePool::new(&config).unwrap();
        let shared = outpoint(10, 3);
        pool.on_entry(&tx(1, &[shared]), 0).unwrap();
        assert_eq!(
            pool.on_entry(&tx(2, &[shared]), 1).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
        pool.on_exit(&txid(1), ExitReason::Block, 2).unwrap();
        assert_eq!(
            pool.on_entry(&tx(2, &[shared]), 3).unwrap(),
            EntryDecision::Accept
        );
    }

    #[test]
    fn inputs_survive_tx_exit_until_reset() {
        let mut pool = small_pool();
        let shared = outpoint(10, 3);
        pool.on_entry(&tx(1, &[shared]), 0).unwrap();
        pool.on_exit(&txid(1), ExitReason::Block, 10).unwrap();
        // Inputs are wiped in batches only, never per transaction, so the
        // conflict still drops inside the same window.
        assert_eq!(
            pool.on_entry(&tx(2, &[shared]), 20).unwrap(),
            EntryDecision::DoubleSpendDrop
        );
    }

    #[test]
    fn aged_txid_requests_again_after_two_rotations() {
        let config = PoolConfig {
            tx_strategy: TxStrategy::Rotating { interval_s: 1000 },
            ..PoolConfig::rotating(4096, 4).with_seed(5)
        };
        let mut pool = CarbynePool::new(&config).unwrap();
        let a = tx(1, &[outpoint(10, 0)]);
        pool.on_entry(&a, 0).unwrap();
        assert_eq!(
            pool.on_inv(&a.txid, 1500).unwrap(),
            InvDecision::AlreadyHave
        );
        assert_eq!(pool.on_inv(&a.txid, 2000).unwrap(), InvDecision::Request);
    }

    #[test]
    fn time_regression_is_an_error() {
        let mut pool = small_pool();
        pool.maintenance(100).unwrap();
        assert_eq!(
            pool.maintenance(99).unwrap_err(),
            PoolError::TimeRegression { now: 99, last: 100 }
        );
        let mut rp = ReferencePool::new();
        rp.maintenance(100).unwrap();
        assert_eq!(
            rp.maintenance(99).unwrap_err(),
            PoolError::TimeRegression { now: 99, last: 100 }
        );
    }

    #[test]
    fn memory_report_fixed_points() {
        // Rotating pair of 1 MB filters plus a 1 MB inputs filter.
        let pool = CarbynePool::new(&PoolConfig::rotating(4_000_000, 14)).unwrap();
        let report = pool.memory_report();
        assert_eq!(report.tx_filter_bytes, 2_000_000);
        assert_eq!(report.inputs_filter_bytes, 1_000_000);
        assert_eq!(report.total_bytes, 3_000_000);
        assert_eq!(report.tx_filter_count, 2);

        let pool = CarbynePool::new(&PoolConfig::rotating(2_400_000, 8)).unwrap();
        assert_eq!(pool.memory_report().total_bytes, 1_800_000);
    }

    #[test]
    fn chain_memory_report_counts_links() {
        let config = PoolConfig {
            tx_strategy: TxStrategy::Chain {
                capacity_n: 2,
                link_expiry_s: 1000,
            },
            ..PoolConfig::chain(16_000_000, 14)
        };
        let mut pool = CarbynePool::new(&config).unwrap();
        for tag in 0..7u8 {
            pool.on_entry(&tx(tag, &[outpoint(100 + tag, 0)]), 0)
                .unwrap();
        }
        let report = pool.memory_report();
        assert_eq!(report.tx_filter_count, 4);
        assert_eq!(report.tx_filter_bytes, 16_000_000);
        assert_eq!(report.inputs_filter_bytes, 4_000_000);
        assert_eq!(report.total_bytes, 20_000_000);
        assert_eq!(pool.chain_links(), Some(4));
    }

    #[test]
    fn reference_pool_mirrors_decision_logic() {
        let mut rp = ReferencePool::new();
        let shared = outpoint(10, 3);
        let a = tx(1, &[shared]);
        let b = tx(2, &[shared]);
        assert_eq!(rp.on_inv(&a.txid, 0).unwrap(), InvDecision::Request);
        assert_eq!(rp.on_entry(&a, 0).unwrap(), EntryDecision::Accept);
        assert_eq!(rp.on_inv(&a.txid, 1).unwrap(), InvDecision::AlreadyHave);
        assert_eq!(rp.on_entry(&a, 1).unwrap(), EntryDecision::DuplicateDrop);
        assert_eq!(rp.on_entry(&b, 2).unwrap(), EntryDecision::DoubleSpendDrop);
        assert_eq!(
            rp.on_exit(&a.txid, ExitReason::Block, 3).unwrap(),
            ExitDecision::Removed
        );
        // Inputs free exactly with their transaction in the exact pool.
        assert_eq!(rp.on_entry(&b, 4).unwrap(), EntryDecision::Accept);
        assert_eq!(
            rp.on_exit(&a.txid, ExitReason::Block, 5).unwrap(),
            ExitDecision::NotFound
        );
    }

    #[test]
    fn reference_pool_expires_after_fourteen_days() {
        let mut rp = ReferencePool::new();
        let a = tx(1, &[outpoint(10, 0)]);
        rp.on_entry(&a, 0).unwrap();
        rp.maintenance(REFERENCE_EXPIRY_S - 1).unwrap();
        assert!(rp.contains(&a.txid));
        rp.maintenance(REFERENCE_EXPIRY_S).unwrap();
        assert!(!rp.contains(&a.txid));
        assert_eq!(rp.spent_inputs(), 0);
    }

    #[test]
    fn reference_expiry_skips_stale_stamps() {
        let mut rp = ReferencePool::with_expiry(1000);
        let a = tx(1, &[outpoint(10, 0)]);
        rp.on_entry(&a, 0).unwrap();
        rp.on_exit(&a.txid, ExitReason::Block, 10).unwrap();
        // Re-entry at 500 must survive the sweep of the stale stamp at 0.
        rp.on_entry(&a, 500).unwrap();
        rp.maintenance(1000).unwrap();
        assert!(rp.contains(&a.txid));
        rp.maintenance(1500).unwrap();
        assert!(!rp.contains(&a.txid));
    }

    /// Strategies for small random transaction streams. Tiny alphabets
    /// force txid duplicates and input conflicts.
    fn arb_tx() -> impl Strategy<Value = Transaction> {
        (0u8..12, prop::collection::vec((0u8..8, 0u32..2), 1..4)).prop_map(|(id, raw)| {
            let mut inputs: Vec<OutPoint> = Vec::new();
            for (tag, index) in raw {
                let op = outpoint(tag, index);
                if !inputs.contains(&op) {
                    inputs.push(op);
                }
            }
            Transaction::new(txid(id), inputs, 1).unwrap()
        })
    }

    #[derive(Debug, Clone)]
    enum Step {
        Inv(u8),
        Entry(Transaction),
        Exit(u8, ExitReason),
    }

    fn arb_step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0u8..12).prop_map(Step::Inv),
            arb_tx().prop_map(Step::Entry),
            (0u8..12, 0usize..6).prop_map(|(id, r)| Step::Exit(id, ExitReason::ALL[r])),
        ]
    }

    proptest! {
        /// With exact membership and no boundary crossings every pool
        /// decision equals the reference decision.
        #[test]
        fn exact_membership_matches_reference(
            steps in prop::collection::vec(arb_step(), 1..60),
        ) {
            let config = PoolConfig::rotating(4096, 4)
                .with_membership(Membership::Exact);
            let mut pool = CarbynePool::new(&config).unwrap();
            let mut rp = ReferencePool::new();
            for (i, step) in steps.iter().enumerate() {
                let now = i as u64;
                match step {
                    Step::Inv(id) => prop_assert_eq!(
                        pool.on_inv(&txid(*id), now).unwrap(),
                        rp.on_inv(&txid(*id), now).unwrap()
                    ),
                    Step::Entry(tx) => prop_assert_eq!(
                        pool.on_entry(tx, now).unwrap(),
                        rp.on_entry(tx, now).unwrap()
                    ),
                    Step::Exit(id, reason) => prop_assert_eq!(
                        pool.on_exit(&txid(*id), *reason, now).unwrap(),
                        rp.on_exit(&txid(*id), *reason, now).unwrap()
                    ),
                }
            }
            prop_assert_eq!(pool.live_inserts(), rp.resident());
        }

        /// Within one reset window at threshold 1, two transactions sharing
        /// an input never both accept, with real filters and any seed.
        #[test]
        fn no_double_spend_admission_in_one_window(
            txs in prop::collection::vec(arb_tx(), 1..40),
            seed in any::<u64>(),
        ) {
            // Deliberately tiny filters so false positives are common.
            let config = PoolConfig::rotating(64, 2).with_seed(seed);
            let mut pool = CarbynePool::new(&config).unwrap();
            let mut accepted: Vec<Transaction> = Vec::new();
            for (i, tx) in txs.iter().enumerate() {
                if accepted.iter().any(|a| a.txid == tx.txid) {
                    continue;
                }
                if pool.on_entry(tx, i as u64).unwrap() == EntryDecision::Accept {
                    for prior in &accepted {
                        for input in &tx.inputs {
                            prop_assert!(
                                !prior.inputs.contains(input),
                                "conflicting accept of input {:?}", input
                            );
                        }
                    }
                    accepted.push(tx.clone());
                }
            }
        }

        /// Identical seeds and event streams give identical decisions.
        #[test]
        fn decisions_are_reproducible(
            steps in prop::collection::vec(arb_step(), 1..40),
            seed in any::<u64>(),
        ) {
            let config = PoolConfig::rotating(256, 3).with_seed(seed);
            let mut a = CarbynePool::new(&config).unwrap();
            let mut b = CarbynePool::new(&config).unwrap();
            for (i, step) in steps.iter().enumerate() {
                let now = i as u64;
                match step {
                    Step::Inv(id) => prop_assert_eq!(
                        a.on_inv(&txid(*id), now).unwrap(),
                        b.on_inv(&txid(*id), now).unwrap()
                    ),
                    Step::Entry(tx) => prop_assert_eq!(
                        a.on_entry(tx, now).unwrap(),
                        b.on_entry(tx, now).unwrap()
                    ),
                    Step::Exit(id, reason) => prop_assert_eq!(
                        a.on_exit(&txid(*id), *reason, now).unwrap(),
                        b.on_exit(&txid(*id), *reason, now).unwrap()
                    ),
                }
            }
        }
    }
}
