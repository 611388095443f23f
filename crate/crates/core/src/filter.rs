//! Counting bloom filter with saturating counters and seeded double hashing.
//!
//! Buckets are small counters packed into a byte array, 2, 4, or 8 bits
//! wide. Insertion increments the k buckets a key hashes to, removal
//! decrements them, and membership asks whether every one of them meets a
//! threshold. A bucket that loses an increment at its cap is pinned there
//! for the life of the filter, which preserves the no-false-negative
//! guarantee for keys that were never removed.
//!
//! Bucket indices come from one 128-bit keyed hash split into two 64-bit
//! halves, extended by double hashing: `index_i = (h1 + i * h2) mod m`.
//! An optional per-key index table can override the hash for selected
//! keys so that hand-checkable scenarios can be replayed exactly.

use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use siphasher::sip128::{Hasher128, SipHasher13};
use thiserror::Error;

/// Hard upper bound on the number of hash functions.
pub const MAX_HASHES: u32 = 64;

/// Forced bucket indices for selected keys, keyed by the exact bytes the
/// filter would otherwise hash. Every value must hold exactly `k` indices,
/// each below `m`. Keys absent from the table fall back to double hashing.
pub type IndexTable = HashMap<Vec<u8>, Vec<u64>>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("bucket count must be at least 1")]
    ZeroBuckets,
    #[error("hash count {0} is outside 1..={MAX_HASHES}")]
    BadHashCount(u32),
    #[error("bucket width {0} bits is not one of 2, 4, 8")]
    BadBucketBits(u8),
    #[error("population size must be at least 1")]
    ZeroPopulation,
    #[error("target false-positive rate must lie strictly between 0 and 1")]
    BadTargetRate,
    #[error("threshold {threshold} exceeds counter capacity {capacity}")]
    ThresholdTooHigh { threshold: u8, capacity: u8 },
    #[error("cannot remove a key the filter reports as absent")]
    RemoveAbsent,
    #[error("index table entry has {got} indices, expected {expected}")]
    TableArity { got: usize, expected: usize },
    #[error("index table index {index} is out of range for {buckets} buckets")]
    TableIndexRange { index: u64, buckets: u64 },
}

/// Required bucket count for `n` keys at target false-positive rate `p`,
/// rounded up: `m = ceil(n * -ln(p) / ln(2)^2)`.
pub fn derive_m(n: u64, p: f64) -> Result<u64, FilterError> {
    if n == 0 {
        return Err(FilterError::ZeroPopulation);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(FilterError::BadTargetRate);
    }
    let ln2 = std::f64::consts::LN_2;
    Ok((n as f64 * (-p.ln()) / (ln2 * ln2)).ceil() as u64)
}

/// Hash count minimizing the false-positive rate for `m` buckets holding
/// `n` keys: `k = max(1, round((m / n) * ln 2))`, ties rounding to even.
pub fn optimal_k(m: u64, n: u64) -> Result<u32, FilterError> {
    if m == 0 {
        return Err(FilterError::ZeroBuckets);
    }
    if n == 0 {
        return Err(FilterError::ZeroPopulation);
    }
    let raw = (m as f64 / n as f64) * std::f64::consts::LN_2;
    Ok((raw.round_ties_even() as u32).max(1))
}

/// Expected false-positive rate of a filter with `m` buckets and `k`
/// hashes after `n` distinct insertions: `(1 - e^(-k n / m))^k`.
/// An empty filter (`n = 0`) cannot produce false positives.
pub fn theoretical_fpr(m: u64, k: u32, n: u64) -> f64 {
    assert!(m >= 1 && k >= 1, "m and k must be positive");
    if n == 0 {
        return 0.0;
    }
    let load = (k as f64) * (n as f64) / (m as f64);
    (1.0 - (-load).exp()).powi(k as i32)
}

/// Bytes occupied by `m` packed buckets of the given width, rounded up to
/// whole bytes.
pub fn memory_bytes(m: u64, bucket_bits: u8) -> u64 {
    (m * bucket_bits as u64 + 7) / 8
}

/// Shape and seed of one counting bloom filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    /// Number of counter buckets, at least 1.
    pub m: u64,
    /// Number of hash functions, 1..=64.
    pub k: u32,
    /// Counter width in bits, one of 2, 4, or 8.
    pub bucket_bits: u8,
    /// 128-bit hashing seed. The low and high halves key the hash.
    pub seed: u128,
}

impl FilterParams {
    /// Params with the default 2-bit buckets and a zero seed.
    pub fn new(m: u64, k: u32) -> Self {
        FilterParams {
            m,
            k,
            bucket_bits: 2,
            seed: 0,
        }
    }

    pub fn with_bucket_bits(mut self, bucket_bits: u8) -> Self {
        self.bucket_bits = bucket_bits;
        self
    }

    pub fn with_seed(mut self, seed: u128) -> Self {
        self.seed = seed;
        self
    }
}

/// Deterministic successor seed used when a filter clears itself.
/// Distinct from the input with overwhelming probability, so recycled
/// filter space does not replay the previous epoch's collisions.
pub(crate) fn next_seed(seed: u128) -> u128 {
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(&seed.to_le_bytes());
    key[16..].copy_from_slice(b"cbf.reseed.v1\0\0\0");
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.random::<u128>()
}

/// A counting bloom filter over byte-string keys.
///
/// Invariants maintained across every operation:
///
/// * a key that was inserted and never removed always tests present at
///   threshold 1, regardless of saturation;
/// * absent saturation, the sum of all counters equals `k` times the
///   number of insertions minus successful removals;
/// * a bucket whose increment was lost at the counter cap never changes
///   again, in either direction.
#[derive(Debug, Clone)]
pub struct CountingBloomFilter {
    m: u64,
    k: u32,
    bucket_bits: u8,
    seed: u128,
    sip_keys: (u64, u64),
    reseed_on_clear: bool,
    index_table: Option<Arc<IndexTable>>,
    /// Packed counters, `bucket_bits` per bucket, little-end first within
    /// each byte.
    buckets: Vec<u8>,
    /// One bit per bucket, set when an increment was lost at the cap.
    pinned: Vec<u64>,
    live_inserts: u64,
}

impl CountingBloomFilter {
    pub fn new(params: FilterParams) -> Result<Self, FilterError> {
        Self::with_options(params, true, None)
    }

    /// Full constructor. `reseed_on_clear` controls whether [`clear`]
    /// draws a fresh hashing seed (the default) or keeps the current one.
    /// `index_table` optionally forces bucket indices for selected keys.
    ///
    /// [`clear`]: CountingBloomFilter::clear
    pub fn with_options(
        params: FilterParams,
        reseed_on_clear: bool,
        index_table: Option<Arc<IndexTable>>,
    ) -> Result<Self, FilterError> {
        if params.m == 0 {
            return Err(FilterError::ZeroBuckets);
        }
        if params.k == 0 || params.k > MAX_HASHES {
            return Err(FilterError::BadHashCount(params.k));
        }
        if !matches!(params.bucket_bits, 2 | 4 | 8) {
            return Err(FilterError::BadBucketBits(params.bucket_bits));
        }
        if let Some(table) = &index_table {
            for indices in table.values() {
                if indices.len() != params.k as usize {
                    return Err(FilterError::TableArity {
                        got: indices.len(),
                        expected: params.k as usize,
                    });
                }
                for &index in indices {
                    if index >= params.m {
                        return Err(FilterError::TableIndexRange {
                            index,
                            buckets: params.m,
                        });
                    }
                }
            }
        }
        let bytes = memory_bytes(params.m, params.bucket_bits) as usize;
        let flag_words = (params.m as usize + 63) / 64;
        Ok(CountingBloomFilter {
            m: params.m,
            k: params.k,
            bucket_bits: params.bucket_bits,
            seed: params.seed,
            sip_keys: (params.seed as u64, (params.seed >> 64) as u64),
            reseed_on_clear,
            index_table,
            buckets: vec![0u8; bytes],
            pinned: vec![0u64; flag_words],
            live_inserts: 0,
        })
    }

    pub fn params(&self) -> FilterParams {
        FilterParams {
            m: self.m,
            k: self.k,
            bucket_bits: self.bucket_bits,
            seed: self.seed,
        }
    }

    /// Largest value one counter can hold.
    pub fn counter_capacity(&self) -> u8 {
        ((1u16 << self.bucket_bits) - 1) as u8
    }

    /// Insertions minus successful removals, floored at zero. The floor is
    /// only reachable when false-positive removals outnumber insertions.
    pub fn live_inserts(&self) -> u64 {
        self.live_inserts
    }

    /// Bytes held by the packed counter array.
    pub fn memory_bytes(&self) -> u64 {
        memory_bytes(self.m, self.bucket_bits)
    }

    pub fn seed(&self) -> u128 {
        self.seed
    }

    fn fill_indices(&self, key: &[u8], out: &mut [u64; MAX_HASHES as usize]) -> usize {
        let k = self.k as usize;
        if let Some(table) = &self.index_table {
            if let Some(forced) = table.get(key) {
                out[..k].copy_from_slice(&forced[..k]);
                return k;
            }
        }
        let mut hasher = SipHasher13::new_with_keys(self.sip_keys.0, self.sip_keys.1);
        hasher.write(key);
        let h = hasher.finish128();
        for (i, slot) in out.iter_mut().enumerate().take(k) {
            *slot = h.h1.wrapping_add((i as u64).wrapping_mul(h.h2)) % self.m;
        }
        k
    }

    /// The `k` bucket indices this key maps to, in hash order.
    pub fn bucket_indices(&self, key: &[u8]) -> Vec<u64> {
        let mut buf = [0u64; MAX_HASHES as usize];
        let k = self.fill_indices(key, &mut buf);
        buf[..k].to_vec()
    }

    /// Current value of one counter.
    pub fn counter(&self, index: u64) -> u8 {
        debug_assert!(index < self.m);
        let i = index as usize;
        match self.bucket_bits {
            2 => (self.buckets[i / 4] >> ((i % 4) * 2)) & 0b11,
            4 => (self.buckets[i / 2] >> ((i % 2) * 4)) & 0b1111,
            _ => self.buckets[i],
        }
    }

    fn set_counter(&mut self, index: u64, value: u8) {
        let i = index as usize;
        match self.bucket_bits {
            2 => {
                let shift = (i % 4) * 2;
                let byte = &mut self.buckets[i / 4];
                *byte = (*byte & !(0b11 << shift)) | ((value & 0b11) << shift);
            }
            4 => {
                let shift = (i % 2) * 4;
                let byte = &mut self.buckets[i / 2];
                *byte = (*byte & !(0b1111 << shift)) | ((value & 0b1111) << shift);
            }
            _ => self.buckets[i] = value,
        }
    }

    fn is_pinned(&self, index: u64) -> bool {
        self.pinned[(index / 64) as usize] >> (index % 64) & 1 == 1
    }

    fn pin(&mut self, index: u64) {
        self.pinned[(index / 64) as usize] |= 1u64 << (index % 64);
    }

    /// Number of buckets pinned at the counter cap.
    pub fn saturated_buckets(&self) -> u64 {
        self.pinned.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Sum of all counter values.
    pub fn counter_sum(&self) -> u64 {
        (0..self.m).map(|i| self.counter(i) as u64).sum()
    }

    /// Increment the key's buckets. An increment that arrives at a bucket
    /// already holding the cap is lost and pins that bucket permanently.
    pub fn insert(&mut self, key: &[u8]) {
        let mut buf = [0u64; MAX_HASHES as usize];
        let k = self.fill_indices(key, &mut buf);
        let cap = self.counter_capacity();
        for &index in &buf[..k] {
            if self.is_pinned(index) {
                continue;
            }
            let value = self.counter(index);
            if value == cap {
                self.pin(index);
            } else {
                self.set_counter(index, value + 1);
            }
        }
        self.live_inserts += 1;
    }

    /// Membership at threshold 1.
    pub fn contains(&self, key: &[u8]) -> bool {
        self.contains_at_least(key, 1).unwrap()
    }

    /// True when every bucket the key maps to holds at least `threshold`.
    pub fn contains_at_least(&self, key: &[u8], threshold: u8) -> Result<bool, FilterError> {
        let cap = self.counter_capacity();
        if threshold > cap {
            return Err(FilterError::ThresholdTooHigh {
                threshold,
                capacity: cap,
            });
        }
        let mut buf = [0u64; MAX_HASHES as usize];
        let k = self.fill_indices(key, &mut buf);
        Ok(buf[..k].iter().all(|&i| self.counter(i) >= threshold))
    }

    /// Decrement the key's buckets. Errors when the filter already reports
    /// the key absent. Pinned buckets are skipped and a zero bucket stays
    /// at zero, which can only arise when the key repeats an index.
    pub fn remove(&mut self, key: &[u8]) -> Result<(), FilterError> {
        if !self.contains(key) {
            return Err(FilterError::RemoveAbsent);
        }
        let mut buf = [0u64; MAX_HASHES as usize];
        let k = self.fill_indices(key, &mut buf);
        for &index in &buf[..k] {
            if self.is_pinned(index) {
                continue;
            }
            let value = self.counter(index);
            if value > 0 {
                self.set_counter(index, value - 1);
            }
        }
        self.live_inserts = self.live_inserts.saturating_sub(1);
        Ok(())
    }

    /// Zero every counter, unpin every bucket, and reset the live count.
    /// Draws a successor hashing seed unless the filter was built with
    /// `reseed_on_clear` off.
    pub fn clear(&mut self) {
        self.buckets.fill(0);
        self.pinned.fill(0);
        self.live_inserts = 0;
        if self.reseed_on_clear {
            self.seed = next_seed(self.seed);
            self.sip_keys = (self.seed as u64, (self.seed >> 64) as u64);
        }
    }
}
