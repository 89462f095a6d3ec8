//! Leveled SIMD homomorphic vector abstraction and its exact simulator.
//!
//! A [`CipherVec`] is a fixed-length vector of complex slots together with
//! a remaining multiplicative level and the multiset of keys it is
//! encrypted under. The simulator keeps the slot values in the clear and
//! models confidentiality through the key layers: slots can only be read
//! once every layer has been removed.
//!
//! Cost conventions:
//! - `mul`, `mul_plain` and `mul_const` consume one level each.
//! - additions, rotations and conjugations are free in levels.
//! - a binary operation on operands at different levels runs at the lower one.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeParams {
    pub slot_count: usize,
    pub max_level: u32,
    pub post_bootstrap_level: u32,
    /// Levels a centralized bootstrap burns internally; reported, never
    /// subtracted from a ciphertext.
    pub bootstrap_depth_cost: u32,
}

impl HeParams {
    pub fn new(
        slot_count: usize,
        max_level: u32,
        post_bootstrap_level: u32,
        bootstrap_depth_cost: u32,
    ) -> Result<Self> {
        let p = Self {
            slot_count,
            max_level,
            post_bootstrap_level,
            bootstrap_depth_cost,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters whose centralized bootstrap restores the full level budget.
    pub fn with_full_refresh(slot_count: usize, max_level: u32) -> Result<Self> {
        Self::new(slot_count, max_level, max_level, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_count == 0 || !self.slot_count.is_power_of_two() {
            return Err(Error::Config(format!(
                "slot_count must be a power of two, got {}",
                self.slot_count
            )));
        }
        if self.post_bootstrap_level < 1 || self.post_bootstrap_level > self.max_level {
            return Err(Error::Config(format!(
                "post_bootstrap_level must lie in [1, {}], got {}",
                self.max_level, self.post_bootstrap_level
            )));
        }
        Ok(())
    }
}

/// Names a secret key. Ordering only exists so key multisets can be kept sorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KeyId {
    Client,
    Provider,
    Collective(u32),
    Ephemeral(u64),
}

/// Per-pipeline operation totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpCounters {
    pub ct_mults: u64,
    pub pt_mults: u64,
    pub adds: u64,
    pub rotations: u64,
    pub conjugations: u64,
    pub bootstraps: u64,
    /// Levels consumed inside centralized bootstraps (`bootstraps * bootstrap_depth_cost`).
    pub bootstrap_levels: u64,
    pub protocol_rounds: u64,
    pub protocol_messages: u64,
}

impl OpCounters {
    pub fn total_mults(&self) -> u64 {
        self.ct_mults + self.pt_mults
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            ct_mults: self.ct_mults * k,
            pt_mults: self.pt_mults * k,
            adds: self.adds * k,
            rotations: self.rotations * k,
            conjugations: self.conjugations * k,
            bootstraps: self.bootstraps * k,
            bootstrap_levels: self.bootstrap_levels * k,
            protocol_rounds: self.protocol_rounds * k,
            protocol_messages: self.protocol_messages * k,
        }
    }

    pub fn saturating_sub(&self, o: &Self) -> Self {
        Self {
            ct_mults: self.ct_mults.saturating_sub(o.ct_mults),
            pt_mults: self.pt_mults.saturating_sub(o.pt_mults),
            adds: self.adds.saturating_sub(o.adds),
            rotations: self.rotations.saturating_sub(o.rotations),
            conjugations: self.conjugations.saturating_sub(o.conjugations),
            bootstraps: self.bootstraps.saturating_sub(o.bootstraps),
            bootstrap_levels: self.bootstrap_levels.saturating_sub(o.bootstrap_levels),
            protocol_rounds: self.protocol_rounds.saturating_sub(o.protocol_rounds),
            protocol_messages: self.protocol_messages.saturating_sub(o.protocol_messages),
        }
    }
}

impl std::ops::Add for OpCounters {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            ct_mults: self.ct_mults + o.ct_mults,
            pt_mults: self.pt_mults + o.pt_mults,
            adds: self.adds + o.adds,
            rotations: self.rotations + o.rotations,
            conjugations: self.conjugations + o.conjugations,
            bootstraps: self.bootstraps + o.bootstraps,
            bootstrap_levels: self.bootstrap_levels + o.bootstrap_levels,
            protocol_rounds: self.protocol_rounds + o.protocol_rounds,
            protocol_messages: self.protocol_messages + o.protocol_messages,
        }
    }
}

impl std::ops::AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Thread-safe sink behind a backend; cloned handles share totals.
#[derive(Debug, Default)]
pub struct CounterSink {
    ct_mults: AtomicU64,
    pt_mults: AtomicU64,
    adds: AtomicU64,
    rotations: AtomicU64,
    conjugations: AtomicU64,
    bootstraps: AtomicU64,
    bootstrap_levels: AtomicU64,
    protocol_rounds: AtomicU64,
    protocol_messages: AtomicU64,
}

impl CounterSink {
    pub fn snapshot(&self) -> OpCounters {
        let r = |a: &AtomicU64| a.load(Ordering::Relaxed);
        OpCounters {
            ct_mults: r(&self.ct_mults),
            pt_mults: r(&self.pt_mults),
            adds: r(&self.adds),
            rotations: r(&self.rotations),
            conjugations: r(&self.conjugations),
            bootstraps: r(&self.bootstraps),
            bootstrap_levels: r(&self.bootstrap_levels),
            protocol_rounds: r(&self.protocol_rounds),
            protocol_messages: r(&self.protocol_messages),
        }
    }

    fn bump(a: &AtomicU64, by: u64) {
        a.fetch_add(by, Ordering::Relaxed);
    }
}

/// Operations in a ciphertext's expression tree. Shared subexpressions are
/// counted once per use, so deep circuits saturate at `u64::MAX`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpLog {
    pub ct_mults: u64,
    pub pt_mults: u64,
    pub adds: u64,
    pub rotations: u64,
    pub conjugations: u64,
    pub bootstraps: u64,
}

impl OpLog {
    fn merge(&self, o: &OpLog) -> OpLog {
        OpLog {
            ct_mults: self.ct_mults.saturating_add(o.ct_mults),
            pt_mults: self.pt_mults.saturating_add(o.pt_mults),
            adds: self.adds.saturating_add(o.adds),
            rotations: self.rotations.saturating_add(o.rotations),
            conjugations: self.conjugations.saturating_add(o.conjugations),
            bootstraps: self.bootstraps.saturating_add(o.bootstraps),
        }
    }
}

/// Simulated ciphertext. Immutable: every operation returns a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherVec {
    slots: Vec<C64>,
    level: u32,
    key_layers: Vec<KeyId>,
    history: OpLog,
}

impl CipherVec {
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Sorted multiset of keys; empty means plaintext-equivalent.
    pub fn key_layers(&self) -> &[KeyId] {
        &self.key_layers
    }

    pub fn is_encrypted(&self) -> bool {
        !self.key_layers.is_empty()
    }

    pub fn history(&self) -> &OpLog {
        &self.history
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Slot values, available only once all key layers are removed.
    pub fn decode(&self) -> Result<&[C64]> {
        if self.is_encrypted() {
            return Err(Error::AccessViolation(format!(
                "slots are still encrypted under {:?}",
                self.key_layers
            )));
        }
        Ok(&self.slots)
    }

    #[cfg(test)]
    pub(crate) fn raw_slots(&self) -> &[C64] {
        &self.slots
    }

    /// Toy wire size: two ring elements of `2 * slot_count` words per level.
    pub fn bytes_estimate(&self) -> u64 {
        2 * (2 * self.slots.len() as u64) * (u64::from(self.level) + 1) * 8
    }
}

/// Leveled SIMD vector backend. Algorithms in this crate are written
/// against this trait; [`Simulator`] is the exact reference backend.
pub trait SimdBackend: Sync {
    type Ct: Clone + Send + Sync + std::fmt::Debug;

    fn params(&self) -> &HeParams;

    fn encode(&self, values: &[C64]) -> Result<Self::Ct>;

    /// Reads the slots of an unencrypted value.
    fn decode(&self, ct: &Self::Ct) -> Result<Vec<C64>>;

    fn level(&self, ct: &Self::Ct) -> u32;

    fn add(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct>;

    fn sub(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct>;

    fn add_plain(&self, a: &Self::Ct, p: &[C64]) -> Result<Self::Ct>;

    fn mul(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct>;

    fn mul_plain(&self, a: &Self::Ct, p: &[C64]) -> Result<Self::Ct>;

    fn mul_const(&self, a: &Self::Ct, c: C64) -> Result<Self::Ct>;

    /// Cyclic left rotation by `k` (negative rotates right).
    fn rotate(&self, a: &Self::Ct, k: i64) -> Self::Ct;

    fn conjugate(&self, a: &Self::Ct) -> Self::Ct;

    /// Centralized bootstrap.
    fn bootstrap(&self, a: &Self::Ct) -> Result<Self::Ct>;

    fn counters(&self) -> OpCounters;
}

/// Exact simulator backend.
#[derive(Debug, Clone)]
pub struct Simulator {
    params: HeParams,
    sink: Arc<CounterSink>,
}

impl Simulator {
    pub fn new(params: HeParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            sink: Arc::new(CounterSink::default()),
        })
    }

    pub fn sink(&self) -> &Arc<CounterSink> {
        &self.sink
    }

    pub fn encrypt(&self, ct: &CipherVec, key: KeyId) -> CipherVec {
        let mut out = ct.clone();
        let pos = out.key_layers.partition_point(|k| *k <= key);
        out.key_layers.insert(pos, key);
        out
    }

    pub fn decrypt(&self, ct: &CipherVec, key: KeyId) -> Result<CipherVec> {
        let pos = ct
            .key_layers
            .iter()
            .position(|k| *k == key)
            .ok_or(Error::WrongKey(key))?;
        let mut out = ct.clone();
        out.key_layers.remove(pos);
        Ok(out)
    }

    /// Encodes then encrypts under `key`.
    pub fn encrypt_values(&self, values: &[C64], key: KeyId) -> Result<CipherVec> {
        Ok(self.encrypt(&self.encode(values)?, key))
    }

    /// Refresh performed by an interactive protocol: restores the full level
    /// budget without consuming any internally.
    pub(crate) fn refresh_collective(&self, ct: &CipherVec) -> CipherVec {
        CounterSink::bump(&self.sink.bootstraps, 1);
        let mut out = ct.clone();
        out.level = self.params.max_level;
        out.history.bootstraps = out.history.bootstraps.saturating_add(1);
        out
    }

    /// Replaces the key layers of `ct` by `layers` (collective key switching).
    pub(crate) fn rekey(&self, ct: &CipherVec, layers: Vec<KeyId>) -> CipherVec {
        let mut out = ct.clone();
        let mut layers = layers;
        layers.sort();
        out.key_layers = layers;
        out
    }

    pub(crate) fn record_protocol(&self, rounds: u64, messages: u64) {
        CounterSink::bump(&self.sink.protocol_rounds, rounds);
        CounterSink::bump(&self.sink.protocol_messages, messages);
    }

    fn padded(&self, p: &[C64]) -> Result<Vec<C64>> {
        let s = self.params.slot_count;
        if p.len() > s {
            return Err(Error::CapacityExceeded {
                needed: p.len(),
                capacity: s,
            });
        }
        let mut v = p.to_vec();
        v.resize(s, C64::new(0.0, 0.0));
        Ok(v)
    }

    fn joint_layers(a: &CipherVec, b: &CipherVec) -> Result<Vec<KeyId>> {
        if a.key_layers == b.key_layers || b.key_layers.is_empty() {
            Ok(a.key_layers.clone())
        } else if a.key_layers.is_empty() {
            Ok(b.key_layers.clone())
        } else {
            Err(Error::KeyMismatch {
                left: a.key_layers.clone(),
                right: b.key_layers.clone(),
            })
        }
    }

    fn need_level(level: u32) -> Result<()> {
        if level == 0 {
            Err(Error::LevelExhausted { level, needed: 1 })
        } else {
            Ok(())
        }
    }

    fn zip_with(
        &self,
        a: &CipherVec,
        b: &CipherVec,
        level: u32,
        history: OpLog,
        f: impl Fn(C64, C64) -> C64,
    ) -> Result<CipherVec> {
        let key_layers = Self::joint_layers(a, b)?;
        let slots = a
            .slots
            .iter()
            .zip(&b.slots)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(CipherVec {
            slots,
            level,
            key_layers,
            history,
        })
    }
}

impl SimdBackend for Simulator {
    type Ct = CipherVec;

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn encode(&self, values: &[C64]) -> Result<CipherVec> {
        Ok(CipherVec {
            slots: self.padded(values)?,
            level: self.params.max_level,
            key_layers: Vec::new(),
            history: OpLog::default(),
        })
    }

    fn decode(&self, ct: &CipherVec) -> Result<Vec<C64>> {
        ct.decode().map(<[C64]>::to_vec)
    }

    fn level(&self, ct: &CipherVec) -> u32 {
        ct.level
    }

    fn add(&self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        let mut h = a.history.merge(&b.history);
        h.adds = h.adds.saturating_add(1);
        let out = self.zip_with(a, b, a.level.min(b.level), h, |x, y| x + y)?;
        CounterSink::bump(&self.sink.adds, 1);
        Ok(out)
    }

    fn sub(&self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        let mut h = a.history.merge(&b.history);
        h.adds = h.adds.saturating_add(1);
        let out = self.zip_with(a, b, a.level.min(b.level), h, |x, y| x - y)?;
        CounterSink::bump(&self.sink.adds, 1);
        Ok(out)
    }

    fn add_plain(&self, a: &CipherVec, p: &[C64]) -> Result<CipherVec> {
        let p = self.padded(p)?;
        let mut out = a.clone();
        for (x, y) in out.slots.iter_mut().zip(p) {
            *x += y;
        }
        out.history.adds = out.history.adds.saturating_add(1);
        CounterSink::bump(&self.sink.adds, 1);
        Ok(out)
    }

    fn mul(&self, a: &CipherVec, b: &CipherVec) -> Result<CipherVec> {
        let level = a.level.min(b.level);
        Self::need_level(level)?;
        let mut h = a.history.merge(&b.history);
        h.ct_mults = h.ct_mults.saturating_add(1);
        let out = self.zip_with(a, b, level - 1, h, |x, y| x * y)?;
        CounterSink::bump(&self.sink.ct_mults, 1);
        Ok(out)
    }

    fn mul_plain(&self, a: &CipherVec, p: &[C64]) -> Result<CipherVec> {
        Self::need_level(a.level)?;
        let p = self.padded(p)?;
        let mut out = a.clone();
        for (x, y) in out.slots.iter_mut().zip(p) {
            *x *= y;
        }
        out.level -= 1;
        out.history.pt_mults = out.history.pt_mults.saturating_add(1);
        CounterSink::bump(&self.sink.pt_mults, 1);
        Ok(out)
    }

    fn mul_const(&self, a: &CipherVec, c: C64) -> Result<CipherVec> {
        Self::need_level(a.level)?;
        let mut out = a.clone();
        for x in out.slots.iter_mut() {
            *x *= c;
        }
        out.level -= 1;
        out.history.pt_mults = out.history.pt_mults.saturating_add(1);
        CounterSink::bump(&self.sink.pt_mults, 1);
        Ok(out)
    }

    fn rotate(&self, a: &CipherVec, k: i64) -> CipherVec {
        let s = a.slots.len() as i64;
        let shift = k.rem_euclid(s) as usize;
        let mut out = a.clone();
        out.slots.rotate_left(shift);
        out.history.rotations = out.history.rotations.saturating_add(1);
        CounterSink::bump(&self.sink.rotations, 1);
        out
    }

    fn conjugate(&self, a: &CipherVec) -> CipherVec {
        let mut out = a.clone();
        for x in out.slots.iter_mut() {
            *x = x.conj();
        }
        out.history.conjugations = out.history.conjugations.saturating_add(1);
        CounterSink::bump(&self.sink.conjugations, 1);
        out
    }

    fn bootstrap(&self, a: &CipherVec) -> Result<CipherVec> {
        if !a.is_encrypted() {
            return Err(Error::NotEncrypted);
        }
        let mut out = a.clone();
        out.level = self.params.post_bootstrap_level;
        out.history.bootstraps = out.history.bootstraps.saturating_add(1);
        CounterSink::bump(&self.sink.bootstraps, 1);
        CounterSink::bump(
            &self.sink.bootstrap_levels,
            u64::from(self.params.bootstrap_depth_cost),
        );
        Ok(out)
    }

    fn counters(&self) -> OpCounters {
        self.sink.snapshot()
    }
}

/// Promotes a real slice to complex slots.
pub fn real_slots(values: &[f64]) -> Vec<C64> {
    values.iter().map(|&x| C64::new(x, 0.0)).collect()
}
