//! Discrete-event kernel: virtual clock, ordered event queue and seeded
//! random streams.
//!
//! Everything in a simulation run is driven from a single [`EventQueue`].
//! Events that share a firing time are dispatched in insertion order, which
//! gives a total order and makes replays bit-exact.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::RngCore;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Simulated time in microseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Handle returned by [`EventQueue::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Entry<P>(Event<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.fire_at == other.0.fire_at && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.fire_at, other.0.seq).cmp(&(self.0.fire_at, self.0.seq))
    }
}

/// Ordered event queue with a monotone virtual clock.
pub struct EventQueue<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<P>>,
    cancelled: BTreeSet<u64>,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Enqueue `payload` to fire at `fire_at`. Scheduling in the past is an error.
    pub fn schedule(&mut self, fire_at: SimTime, payload: P) -> Result<EventHandle, SimError> {
        if fire_at < self.now {
            return Err(SimError::PastTime {
                now: self.now,
                requested: fire_at,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Event {
            fire_at,
            seq,
            payload,
        }));
        Ok(EventHandle(seq))
    }

    /// Schedule relative to the current clock; never fails.
    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative schedule is never in the past")
    }

    /// Cancelled events stay in the heap and are skipped by [`advance`](Self::advance).
    pub fn cancel(&mut self, handle: EventHandle) {
        if handle.0 < self.next_seq {
            self.cancelled.insert(handle.0);
        }
    }

    /// Pop the earliest live event and move the clock to its firing time.
    /// Returns `None` (end of simulation) when nothing is left.
    pub fn advance(&mut self) -> Option<Event<P>> {
        while let Some(Entry(ev)) = self.heap.pop() {
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            return Some(ev);
        }
        None
    }

    /// Firing time of the next live event without dispatching it.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Entry(ev)) = self.heap.peek() {
            if self.cancelled.contains(&ev.seq) {
                let seq = ev.seq;
                self.heap.pop();
                self.cancelled.remove(&seq);
                continue;
            }
            return Some(ev.fire_at);
        }
        None
    }

    pub fn is_empty(&mut self) -> bool {
        self.peek_time().is_none()
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a label; used to derive per-stream seeds and per-thread seeds.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based splitmix stream keyed by `(seed, stream_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomStream {
    stream_id: String,
    state: u64,
}

/// What to draw from a [`RandomStream`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Draw {
    Uniform64,
    /// Inter-arrival time in ticks for a process with `rate` events per tick.
    Exponential(f64),
    /// Inclusive integer range.
    UniformRange(u64, u64),
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        Self {
            stream_id: stream_id.to_string(),
            state: mix64(seed ^ mix64(label_hash(stream_id))),
        }
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn draw(&mut self, kind: Draw) -> Result<f64, SimError> {
        match kind {
            Draw::Uniform64 => Ok(self.next_u64() as f64),
            Draw::Exponential(rate) => Ok(self.exponential(rate)?),
            Draw::UniformRange(lo, hi) => Ok(self.range(lo, hi) as f64),
        }
    }

    pub fn exponential(&mut self, rate: f64) -> Result<f64, SimError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(SimError::Parameter(format!(
                "exponential rate must be positive, got {rate}"
            )));
        }
        let exp = Exp::new(rate).map_err(|e| SimError::Parameter(e.to_string()))?;
        Ok(exp.sample(self))
    }

    /// Uniform integer in `[lo, hi]`; a degenerate range returns `lo`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            return lo;
        }
        let span = hi - lo;
        if span == u64::MAX {
            return self.next_u64();
        }
        let n = span + 1;
        // Rejection sampling keeps the draw unbiased.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return lo + v % n;
            }
        }
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.unit() < p
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> Option<&'a T> {
        if items.is_empty() {
            None
        } else {
            let i = self.range(0, items.len() as u64 - 1) as usize;
            items.get(i)
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_event_sets_clock() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), "timer").unwrap();
        let ev = q.advance().unwrap();
        assert_eq!(ev.payload, "timer");
        assert_eq!(q.now(), SimTime(5));
    }

    #[test]
    fn ties_dispatch_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(7), 'a').unwrap();
        q.schedule(SimTime(7), 'b').unwrap();
        q.schedule(SimTime(3), 'z').unwrap();
        let order: Vec<char> = std::iter::from_fn(|| q.advance().map(|e| e.payload)).collect();
        assert_eq!(order, vec!['z', 'a', 'b']);
    }

    #[test]
    fn past_schedule_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(3), ()).unwrap();
        q.advance();
        assert!(matches!(
            q.schedule(SimTime(2), ()),
            Err(SimError::PastTime { .. })
        ));
    }

    #[test]
    fn empty_queue_ends_without_moving_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert!(q.advance().is_none());
        assert_eq!(q.now(), SimTime::ZERO);
    }

    #[test]
    fn earliest_first_and_cancellation_skipped() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(9), 9).unwrap();
        let h = q.schedule(SimTime(4), 4).unwrap();
        let mut q2 = EventQueue::new();
        q2.schedule(SimTime(9), 9).unwrap();
        q2.schedule(SimTime(4), 4).unwrap();
        assert_eq!(q2.advance().unwrap().payload, 4);
        assert_eq!(q2.now(), SimTime(4));

        q.cancel(h);
        let ev = q.advance().unwrap();
        assert_eq!(ev.payload, 9);
        assert_eq!(q.now(), SimTime(9));
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = RandomStream::new(1, "faults");
        let mut b = RandomStream::new(1, "faults");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn degenerate_range() {
        let mut s = RandomStream::new(3, "x");
        assert_eq!(s.draw(Draw::UniformRange(5, 5)).unwrap(), 5.0);
    }

    #[test]
    fn bad_rate_rejected() {
        let mut s = RandomStream::new(3, "x");
        assert!(s.draw(Draw::Exponential(0.0)).is_err());
        assert!(s.draw(Draw::Exponential(-1.0)).is_err());
    }

    #[test]
    fn exponential_mean_matches_rate() {
        // Law of large numbers: mean of 1e5 Exp(rate) draws within 2% of 1/rate.
        let rate = 0.25;
        let mut s = RandomStream::new(42, "faults");
        let n = 100_000;
        let sum: f64 = (0..n).map(|_| s.exponential(rate).unwrap()).sum();
        let mean = sum / n as f64;
        assert!((mean - 1.0 / rate).abs() / (1.0 / rate) < 0.02, "mean {mean}");
    }

    #[test]
    fn streams_do_not_interfere() {
        let mut b_alone = RandomStream::new(7, "B");
        let expected: Vec<u64> = (0..10).map(|_| b_alone.next_u64()).collect();

        let mut a = RandomStream::new(7, "A");
        let mut b = RandomStream::new(7, "B");
        let mut got = Vec::new();
        for _ in 0..10 {
            a.next_u64();
            a.next_u64();
            got.push(b.next_u64());
        }
        assert_eq!(got, expected);
    }
}
