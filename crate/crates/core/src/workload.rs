//! Synthetic application threads.
//!
//! Each thread carries a small vector of 64-bit words that evolves through a
//! deterministic per-cycle mixing function. The four application callbacks
//! (initialization, checksum, synchronization, update) are plain functions
//! over these value types, so replicas on different tiles stay identical
//! unless something corrupts them, and any corruption stays visible.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{label_hash, SimTime};
use crate::error::SimError;
use crate::ids::{ThreadId, TileId};

/// Per-thread callback costs, in simulated microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThreadCosts {
    pub checksum: u64,
    pub sync_base: u64,
    pub sync_per_word: u64,
    pub update_base: u64,
    pub update_per_word: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadSpec {
    pub thread_id: ThreadId,
    /// Higher is more critical.
    pub criticality: u32,
    pub desired_checkpoint_period: SimTime,
    pub state_words: usize,
    /// Ticks of execution per mixing cycle.
    pub work_per_tick: u64,
    pub emits_output: bool,
    pub costs: ThreadCosts,
    /// Interrupt-deferral delay before the thread reaches a checkpointable state.
    pub checkpoint_delay: SimTime,
    /// Capacity demand in permille of one tile.
    pub load: u64,
    /// State already lives in validation memory, so the sync callback is omitted.
    pub state_in_vmem: bool,
}

impl ThreadSpec {
    pub fn new(thread_id: impl Into<ThreadId>, state_words: usize) -> Self {
        Self {
            thread_id: thread_id.into(),
            criticality: 1,
            desired_checkpoint_period: SimTime(1000),
            state_words,
            work_per_tick: 10,
            emits_output: false,
            costs: ThreadCosts::default(),
            checkpoint_delay: SimTime::ZERO,
            load: 100,
            state_in_vmem: false,
        }
    }

    pub fn checksum_cost(&self) -> SimTime {
        SimTime(self.costs.checksum)
    }

    pub fn sync_cost(&self) -> SimTime {
        if self.state_in_vmem {
            return SimTime::ZERO;
        }
        SimTime(self.costs.sync_base + self.costs.sync_per_word * self.state_words as u64)
    }

    pub fn update_cost(&self) -> SimTime {
        SimTime(self.costs.update_base + self.costs.update_per_word * self.state_words as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadState {
    spec: Arc<ThreadSpec>,
    pub state: Vec<u64>,
    pub cycle_counter: u64,
    // Oracle bookkeeping only; see `oracle_corrupted`.
    corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot {
    pub thread_id: ThreadId,
    pub cycle_counter: u64,
    pub state: Vec<u64>,
    corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub thread_id: ThreadId,
    pub cycle_counter: u64,
    pub digest: u64,
}

const CHECKSUM_SEED: u64 = 0x243f_6a88_85a3_08d3;
const DIGEST_SEED: u64 = 0x1319_8a2e_0370_7344;
const FOLD_PRIME: u64 = 0x0000_0100_0000_01b3;
const MIX_MUL: u64 = 0xff51_afd7_ed55_8ccd;
const CYCLE_MUL: u64 = 0x9e37_79b9_7f4a_7c15;
const LANE_MUL: u64 = 0xc2b2_ae3d_27d4_eb4f;

fn splitmix(z: &mut u64) -> u64 {
    *z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut x = *z;
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fold_step(h: u64, w: u64) -> u64 {
    let h = (h ^ w).wrapping_mul(FOLD_PRIME);
    // the shift carries high-bit differences back down before the next multiply
    h ^ (h >> 29)
}

fn fold(seed: u64, words: &[u64], cycle: u64) -> u64 {
    let h = words.iter().fold(seed, |h, w| fold_step(h, *w));
    let h = fold_step(h, cycle);
    h ^ (h >> 32)
}

/// One mixing cycle. Bijective on the state vector, so two states that differ
/// never become equal again; the carry chain starts from the last word so a
/// change anywhere reaches every word within two cycles.
fn mix_cycle(state: &mut [u64], cycle: u64) {
    let c = cycle.wrapping_mul(CYCLE_MUL);
    // a single word must not feed itself, or the xor cancels it
    let mut carry = match state {
        [_, .., last] => *last ^ c,
        _ => c,
    };
    for (i, w) in state.iter_mut().enumerate() {
        let lane = (i as u64).wrapping_mul(LANE_MUL);
        *w = ((*w ^ carry ^ lane).wrapping_mul(MIX_MUL)).rotate_left(29);
        carry = *w ^ c;
    }
}

/// Initialization callback: the state depends on the thread id only, so every
/// tile derives the same initial state.
pub fn init_thread(spec: Arc<ThreadSpec>, _tile: &TileId) -> ThreadState {
    let mut z = label_hash(spec.thread_id.as_str());
    let state = (0..spec.state_words.max(1)).map(|_| splitmix(&mut z)).collect();
    ThreadState {
        spec,
        state,
        cycle_counter: 0,
        corrupted: false,
    }
}

/// Run the thread for `ticks`: `floor(ticks / work_per_tick)` mixing cycles.
pub fn execute_slice(mut ts: ThreadState, ticks: SimTime) -> ThreadState {
    ts.advance(ticks);
    ts
}

pub fn checksum_callback(ts: &ThreadState) -> u64 {
    fold(CHECKSUM_SEED, &ts.state, ts.cycle_counter)
}

/// Checksum of a raw snapshot, matching `checksum_callback` on the restored state.
pub fn snapshot_checksum(snap: &StateSnapshot) -> u64 {
    fold(CHECKSUM_SEED, &snap.state, snap.cycle_counter)
}

pub fn sync_callback(ts: &ThreadState) -> StateSnapshot {
    StateSnapshot {
        thread_id: ts.spec.thread_id.clone(),
        cycle_counter: ts.cycle_counter,
        state: ts.state.clone(),
        corrupted: ts.corrupted,
    }
}

pub fn update_callback(
    mut target: ThreadState,
    snap: &StateSnapshot,
) -> Result<ThreadState, SimError> {
    target.apply_snapshot(snap)?;
    Ok(target)
}

pub fn emit_output(ts: &ThreadState) -> Option<OutputRecord> {
    if !ts.spec.emits_output {
        return None;
    }
    Some(OutputRecord {
        thread_id: ts.spec.thread_id.clone(),
        cycle_counter: ts.cycle_counter,
        digest: fold(DIGEST_SEED, &ts.state, ts.cycle_counter),
    })
}

impl ThreadState {
    pub fn spec(&self) -> &ThreadSpec {
        &self.spec
    }

    pub fn spec_arc(&self) -> &Arc<ThreadSpec> {
        &self.spec
    }

    pub fn thread_id(&self) -> &ThreadId {
        &self.spec.thread_id
    }

    pub fn advance(&mut self, ticks: SimTime) {
        let cycles = ticks.ticks() / self.spec.work_per_tick.max(1);
        for _ in 0..cycles {
            self.cycle_counter += 1;
            mix_cycle(&mut self.state, self.cycle_counter);
        }
    }

    pub fn apply_snapshot(&mut self, snap: &StateSnapshot) -> Result<(), SimError> {
        if snap.thread_id != self.spec.thread_id {
            return Err(SimError::ThreadMismatch {
                target: self.spec.thread_id.clone(),
                snapshot: snap.thread_id.clone(),
            });
        }
        self.state.clone_from(&snap.state);
        self.cycle_counter = snap.cycle_counter;
        self.corrupted = snap.corrupted;
        Ok(())
    }

    /// XOR `mask` into `word` (wrapping the index). Used by the fault injector.
    pub fn corrupt_word(&mut self, word: usize, mask: u64) {
        let len = self.state.len();
        self.state[word % len] ^= mask;
        if mask != 0 {
            self.corrupted = true;
        }
    }

    /// Ground truth for test oracles and metrics. Protocol code never reads it.
    pub fn oracle_corrupted(&self) -> bool {
        self.corrupted
    }

    pub fn clear_oracle_corruption(&mut self) {
        self.corrupted = false;
    }
}

impl StateSnapshot {
    pub fn oracle_corrupted(&self) -> bool {
        self.corrupted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: &str, words: usize) -> Arc<ThreadSpec> {
        Arc::new(ThreadSpec::new(id, words))
    }

    fn tile(i: u32) -> TileId {
        TileId(format!("C{i}"))
    }

    #[test]
    fn init_is_tile_independent() {
        let s = spec("Ta", 4);
        assert_eq!(init_thread(s.clone(), &tile(0)), init_thread(s, &tile(1)));
    }

    #[test]
    fn init_has_requested_width() {
        assert_eq!(init_thread(spec("Ta", 4), &tile(0)).state.len(), 4);
    }

    #[test]
    fn distinct_ids_distinct_states() {
        let a = init_thread(spec("Ta", 4), &tile(0));
        let b = init_thread(spec("Tb", 4), &tile(0));
        assert_ne!(a.state, b.state);
        assert_ne!(checksum_callback(&a), checksum_callback(&b));
    }

    #[test]
    fn zero_ticks_is_identity() {
        let a = init_thread(spec("Ta", 4), &tile(0));
        assert_eq!(execute_slice(a.clone(), SimTime::ZERO), a);
        // fewer ticks than one work unit also runs zero cycles
        assert_eq!(execute_slice(a.clone(), SimTime(9)), a);
    }

    #[test]
    fn replicas_stay_equal() {
        let s = spec("Ta", 6);
        let a = execute_slice(init_thread(s.clone(), &tile(0)), SimTime(1234));
        let b = execute_slice(init_thread(s, &tile(1)), SimTime(1234));
        assert_eq!(a, b);
        assert_eq!(a.cycle_counter, 123);
    }

    #[test]
    fn flipped_bit_stays_diverged() {
        let s = spec("Ta", 4);
        let healthy = init_thread(s.clone(), &tile(0));
        let mut bad = init_thread(s, &tile(1));
        bad.corrupt_word(3, 1 << 17);
        let mut h = healthy;
        let mut b = bad;
        for _ in 0..50 {
            h = execute_slice(h, SimTime(70));
            b = execute_slice(b, SimTime(70));
            assert_ne!(h.state, b.state);
            assert_ne!(checksum_callback(&h), checksum_callback(&b));
        }
        // after two cycles every word differs
        let mut h2 = init_thread(spec("Tz", 4), &tile(0));
        let mut b2 = h2.clone();
        b2.corrupt_word(2, 1);
        h2.advance(SimTime(20));
        b2.advance(SimTime(20));
        for (x, y) in h2.state.iter().zip(&b2.state) {
            assert_ne!(x, y);
        }
    }

    #[test]
    fn empty_state_checksum_golden() {
        // Frozen from an independent evaluation of the fold:
        // step(h, w) = ((h ^ w) * p) ^ (((h ^ w) * p) >> 29), applied for the
        // word and the cycle counter, then h ^= h >> 32  (mod 2^64)
        let mut ts = init_thread(spec("T0", 1), &tile(0));
        ts.state[0] = 0;
        assert_eq!(checksum_callback(&ts), 0x37e8_0319_b8ac_7f7b);
    }

    #[test]
    fn single_bit_flips_never_collide() {
        let base = init_thread(spec("Tq", 4), &tile(0));
        let reference = checksum_callback(&base);
        let mut seen = std::collections::BTreeSet::new();
        for word in 0..4 {
            for bit in 0..64 {
                let mut t = base.clone();
                t.corrupt_word(word, 1u64 << bit);
                let c = checksum_callback(&t);
                assert_ne!(c, reference);
                seen.insert(c);
            }
        }
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn snapshot_round_trip() {
        let s = spec("Ta", 5);
        let src = execute_slice(init_thread(s.clone(), &tile(0)), SimTime(500));
        let snap = sync_callback(&src);
        assert_eq!(snap.cycle_counter, src.cycle_counter);
        assert_eq!(snapshot_checksum(&snap), checksum_callback(&src));
        let dst = update_callback(init_thread(s, &tile(1)), &snap).unwrap();
        assert_eq!(checksum_callback(&dst), checksum_callback(&src));
    }

    #[test]
    fn self_update_is_identity() {
        let a = execute_slice(init_thread(spec("Ta", 3), &tile(0)), SimTime(300));
        let snap = sync_callback(&a);
        assert_eq!(update_callback(a.clone(), &snap).unwrap(), a);
    }

    #[test]
    fn snapshots_are_honest() {
        let mut a = init_thread(spec("Ta", 3), &tile(0));
        a.corrupt_word(1, 0xff);
        let snap = sync_callback(&a);
        assert_eq!(snap.state, a.state);
        assert!(snap.oracle_corrupted());
    }

    #[test]
    fn mismatched_update_rejected() {
        let a = init_thread(spec("Ta", 3), &tile(0));
        let b = init_thread(spec("Tb", 3), &tile(0));
        let err = update_callback(a, &sync_callback(&b)).unwrap_err();
        assert!(matches!(err, SimError::ThreadMismatch { .. }));
    }

    #[test]
    fn outputs() {
        let quiet = init_thread(spec("Ta", 2), &tile(0));
        assert!(emit_output(&quiet).is_none());

        let mut loud_spec = ThreadSpec::new("Tb", 2);
        loud_spec.emits_output = true;
        let s = Arc::new(loud_spec);
        let a = execute_slice(init_thread(s.clone(), &tile(0)), SimTime(100));
        let b = execute_slice(init_thread(s.clone(), &tile(1)), SimTime(100));
        let mut c = execute_slice(init_thread(s, &tile(2)), SimTime(50));
        c.corrupt_word(0, 4);
        let c = execute_slice(c, SimTime(50));
        let (ra, rb, rc) = (
            emit_output(&a).unwrap(),
            emit_output(&b).unwrap(),
            emit_output(&c).unwrap(),
        );
        assert_eq!(ra, rb);
        assert_eq!(ra.cycle_counter, rc.cycle_counter);
        assert_ne!(ra.digest, rc.digest);
    }
}
