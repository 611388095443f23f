//! Forgetting strategies layered over the counting bloom filter.
//!
//! [`RotatingFilter`] keeps two same-shape filters and alternates them on a
//! fixed interval. Inserts land in the primary slot, queries consult the
//! primary then the secondary, and each rotation clears the slot that is
//! about to become primary. A key inserted at time `t` therefore stays
//! visible for queries before `t + interval` and is gone for queries at or
//! after `t + 2 * interval`.
//!
//! [`DynamicFilterChain`] grows a list of filters instead. Inserts fill the
//! newest link, a fresh link is spawned when the newest reaches its
//! configured key capacity, and whole links are dropped once their age
//! reaches the link expiry. The sole remaining link is never dropped, it is
//! cleared in place and restamped.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::filter::{memory_bytes, CountingBloomFilter, FilterError, FilterParams, IndexTable};

/// Default rotation interval, fourteen days in seconds.
pub const DEFAULT_ROTATION_INTERVAL_S: u64 = 1_209_600;
/// Default key capacity of one chain link.
pub const DEFAULT_CHAIN_CAPACITY: u64 = 200_000;
/// Default chain link expiry, fourteen days in seconds.
pub const DEFAULT_LINK_EXPIRY_S: u64 = 1_209_600;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpiryError {
    #[error("interval must be positive")]
    ZeroInterval,
    #[error("link capacity must be positive")]
    ZeroCapacity,
    #[error("clock went backwards: {now} < {last}")]
    TimeRegression { now: u64, last: u64 },
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Which slot of a [`RotatingFilter`] answered a membership query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Primary,
    Secondary,
}

fn slot_seeds(master: u128, tag: &[u8; 16]) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(&master.to_le_bytes());
    key[16..].copy_from_slice(tag);
    ChaCha12Rng::from_seed(key)
}

/// Two same-shape filters alternating on a fixed interval.
///
/// Clock invariant: `advance` times are nondecreasing, and rotations fire
/// once per whole elapsed interval, boundary inclusive.
#[derive(Debug, Clone)]
pub struct RotatingFilter {
    primary: CountingBloomFilter,
    secondary: CountingBloomFilter,
    interval_s: u64,
    last_advance_s: u64,
    last_now_s: u64,
}

impl RotatingFilter {
    /// Both slots share the shape of `params`; their hashing seeds are
    /// drawn independently from `params.seed`.
    pub fn new(params: FilterParams, interval_s: u64) -> Result<Self, ExpiryError> {
        Self::with_options(params, interval_s, true, None)
    }

    pub fn with_options(
        params: FilterParams,
        interval_s: u64,
        reseed_on_clear: bool,
        index_table: Option<Arc<IndexTable>>,
    ) -> Result<Self, ExpiryError> {
        if interval_s == 0 {
            return Err(ExpiryError::ZeroInterval);
        }
        let mut seeds = slot_seeds(params.seed, b"rot.slots.v1\0\0\0\0");
        let slot = |seed: u128| {
            CountingBloomFilter::with_options(
                FilterParams { seed, ..params },
                reseed_on_clear,
                index_table.clone(),
            )
        };
        let primary = slot(seeds.random::<u128>())?;
        let secondary = slot(seeds.random::<u128>())?;
        Ok(RotatingFilter {
            primary,
            secondary,
            interval_s,
            last_advance_s: 0,
            last_now_s: 0,
        })
    }

    pub fn interval_s(&self) -> u64 {
        self.interval_s
    }

    pub fn primary(&self) -> &CountingBloomFilter {
        &self.primary
    }

    pub fn secondary(&self) -> &CountingBloomFilter {
        &self.secondary
    }

    /// Apply every rotation whose boundary has elapsed since the last
    /// advance. Returns how many rotations fired.
    pub fn advance(&mut self, now: u64) -> Result<u64, ExpiryError> {
        if now < self.last_now_s {
            return Err(ExpiryError::TimeRegression {
                now,
                last: self.last_now_s,
            });
        }
        self.last_now_s = now;
        let mut rotations = 0;
        while now - self.last_advance_s >= self.interval_s {
            // The old secondary is wiped and becomes the insert target;
            // the old primary keeps answering queries for one more epoch.
            self.secondary.clear();
            std::mem::swap(&mut self.primary, &mut self.secondary);
            self.last_advance_s += self.interval_s;
            rotations += 1;
        }
        Ok(rotations)
    }

    /// Insert into the primary slot only.
    pub fn insert(&mut self, key: &[u8]) {
        self.primary.insert(key);
    }

    /// Which slot reports the key present, primary consulted first.
    pub fn locate(&self, key: &[u8]) -> Option<Slot> {
        if self.primary.contains(key) {
            Some(Slot::Primary)
        } else if self.secondary.contains(key) {
            Some(Slot::Secondary)
        } else {
            None
        }
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.locate(key).is_some()
    }

    /// Decrement the key in the slot that answers for it. Returns false
    /// when neither slot reports the key present.
    pub fn remove(&mut self, key: &[u8]) -> bool {
        match self.locate(key) {
            Some(Slot::Primary) => {
                self.primary.remove(key).expect("checked present");
                true
            }
            Some(Slot::Secondary) => {
                self.secondary.remove(key).expect("checked present");
                true
            }
            None => false,
        }
    }

    /// Live inserts summed over both slots.
    pub fn live_inserts(&self) -> u64 {
        self.primary.live_inserts() + self.secondary.live_inserts()
    }

    /// Bytes held by both slots.
    pub fn memory_bytes(&self) -> u64 {
        self.primary.memory_bytes() + self.secondary.memory_bytes()
    }
}

#[derive(Debug, Clone)]
struct ChainLink {
    filter: CountingBloomFilter,
    created_at_s: u64,
}

/// A growable list of filters absorbing load beyond a per-link capacity.
///
/// Invariants: links are ordered oldest to newest with nondecreasing
/// creation stamps, inserts target the newest link only, and at least one
/// link always exists.
#[derive(Debug, Clone)]
pub struct DynamicFilterChain {
    shape: FilterParams,
    reseed_on_clear: bool,
    index_table: Option<Arc<IndexTable>>,
    capacity_n: u64,
    link_expiry_s: u64,
    links: Vec<ChainLink>,
    seed_rng: ChaCha12Rng,
    now_s: u64,
}

impl DynamicFilterChain {
    /// Link shape from `params` (its seed feeds the per-link seed stream),
    /// spawning a new link whenever the newest holds `capacity_n` live
    /// keys, and dropping links aged `link_expiry_s` or more.
    pub fn new(
        params: FilterParams,
        capacity_n: u64,
        link_expiry_s: u64,
    ) -> Result<Self, ExpiryError> {
        Self::with_options(params, capacity_n, link_expiry_s, true, None)
    }

    pub fn with_options(
        params: FilterParams,
        capacity_n: u64,
        link_expiry_s: u64,
        reseed_on_clear: bool,
        index_table: Option<Arc<IndexTable>>,
    ) -> Result<Self, ExpiryError> {
        if capacity_n == 0 {
            return Err(ExpiryError::ZeroCapacity);
        }
        if link_expiry_s == 0 {
            return Err(ExpiryError::ZeroInterval);
        }
        let mut chain = DynamicFilterChain {
            shape: params,
            reseed_on_clear,
            index_table,
            capacity_n,
            link_expiry_s,
            links: Vec::new(),
            seed_rng: slot_seeds(params.seed, b"chain.seeds.v1\0\0"),
            now_s: 0,
        };
        let first = chain.fresh_link(0)?;
        chain.links.push(first);
        Ok(chain)
    }

    fn fresh_link(&mut self, created_at_s: u64) -> Result<ChainLink, ExpiryError> {
        let seed = self.seed_rng.random::<u128>();
        let filter = CountingBloomFilter::with_options(
            FilterParams { seed, ..self.shape },
            self.reseed_on_clear,
            self.index_table.clone(),
        )?;
        Ok(ChainLink {
            filter,
            created_at_s,
        })
    }

    pub fn capacity_n(&self) -> u64 {
        self.capacity_n
    }

    pub fn link_expiry_s(&self) -> u64 {
        self.link_expiry_s
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Creation stamps, oldest first.
    pub fn link_created_at(&self) -> Vec<u64> {
        self.links.iter().map(|l| l.created_at_s).collect()
    }

    /// Drop links whose age reached the expiry; a sole surviving link is
    /// cleared in place and restamped instead of dropped. Advances the
    /// clock used to stamp spawned links.
    pub fn advance(&mut self, now: u64) -> Result<(), ExpiryError> {
        if now < self.now_s {
            return Err(ExpiryError::TimeRegression {
                now,
                last: self.now_s,
            });
        }
        self.now_s = now;
        // Stamps are nondecreasing, so expired links form a prefix.
        let alive_from = self
            .links
            .iter()
            .position(|l| now - l.created_at_s < self.link_expiry_s);
        match alive_from {
            Some(0) => {}
            Some(i) => {
                self.links.drain(..i);
            }
            None => {
                let mut last = self.links.pop().expect("chain is never empty");
                self.links.clear();
                last.filter.clear();
                last.created_at_s = now;
                self.links.push(last);
            }
        }
        Ok(())
    }

    /// Insert into the newest link, spawning a fresh one first when the
    /// newest is at capacity. The spawned link is stamped with the clock
    /// of the last advance.
    pub fn insert(&mut self, key: &[u8]) -> Result<(), ExpiryError> {
        if self
            .links
            .last()
            .expect("chain is never empty")
            .filter
            .live_inserts()
            >= self.capacity_n
        {
            let link = self.fresh_link(self.now_s)?;
            self.links.push(link);
        }
        self.links.last_mut().unwrap().filter.insert(key);
        Ok(())
    }

    /// Index of the link answering for the key, searched newest first.
    pub fn locate(&self, key: &[u8]) -> Option<usize> {
        (0..self.links.len())
            .rev()
            .find(|&i| self.links[i].filter.contains(key))
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.locate(key).is_some()
    }

    /// Decrement the key in the newest link that answers for it. Returns
    /// false when no link reports the key present.
    pub fn remove(&mut self, key: &[u8]) -> bool {
        match self.locate(key) {
            Some(i) => {
                self.links[i].filter.remove(key).expect("checked present");
                true
            }
            None => false,
        }
    }

    /// Live inserts summed over all links.
    pub fn live_inserts(&self) -> u64 {
        self.links.iter().map(|l| l.filter.live_inserts()).sum()
    }

    /// Bytes held by all links.
    pub fn memory_bytes(&self) -> u64 {
        self.links.len() as u64 * memory_bytes(self.shape.m, self.shape.bucket_bits)
    }
}
