//! Deterministic discrete-event kernel: quantized simulation time and a stable event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time in whole microseconds.
///
/// Seconds given as `f64` are rounded to the nearest microsecond when converted, so two
/// events scheduled at "the same" floating-point instant compare equal and fall back to
/// insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    /// Negative and NaN inputs clamp to zero.
    pub fn from_secs(s: f64) -> Self {
        if !(s > 0.0) {
            return SimTime(0);
        }
        SimTime((s * 1e6).round() as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Self::from_secs(ms / 1e3)
    }

    pub const fn as_micros(&self) -> u64 {
        self.0
    }

    pub fn as_secs(&self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(&self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_sub(&self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KernelError {
    #[error("event at {at} is before current time {now}")]
    TimeInPast { at: SimTime, now: SimTime },
}

#[derive(Debug, Clone)]
pub struct Scheduled<E> {
    pub time: SimTime,
    pub sequence: u64,
    pub payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.sequence == other.sequence
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

/// Priority queue ordered by `(time, sequence)` with a monotone clock.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Number of events popped so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(&mut self, time: SimTime, payload: E) -> Result<u64, KernelError> {
        if time < self.now {
            return Err(KernelError::TimeInPast { at: time, now: self.now });
        }
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time, sequence, payload });
        Ok(sequence)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> u64 {
        let at = self.now + delay;
        // cannot be in the past
        self.schedule(at, payload).expect("relative schedule")
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|s| s.time)
    }

    /// Pop the next event if its time is `<= limit`, advancing the clock to it.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Scheduled<E>> {
        if self.heap.peek()?.time > limit {
            return None;
        }
        let ev = self.heap.pop()?;
        self.now = ev.time;
        self.processed += 1;
        Some(ev)
    }

    pub fn pop(&mut self) -> Option<Scheduled<E>> {
        self.pop_until(SimTime(u64::MAX))
    }

    /// Move the clock forward without processing anything. Never moves it backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Drive `queue` until `t_end`, handing each event to `handler`. The clock ends at `t_end`.
pub fn run_until<E, F>(queue: &mut EventQueue<E>, t_end: SimTime, mut handler: F)
where
    F: FnMut(&mut EventQueue<E>, Scheduled<E>),
{
    while let Some(ev) = queue.pop_until(t_end) {
        handler(queue, ev);
    }
    queue.advance_to(t_end);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_time_runs_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(5.0), "a").unwrap();
        q.schedule(SimTime::from_secs(5.0), "b").unwrap();
        q.schedule(SimTime::from_secs(1.0), "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|e| e.payload).collect();
        assert_eq!(order, vec!["c", "a", "b"]);
    }

    #[test]
    fn schedule_at_now_runs_before_later() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(2.0), 1).unwrap();
        q.schedule(SimTime::from_secs(1.0), 0).unwrap();
        let first = q.pop().unwrap();
        assert_eq!(first.payload, 0);
        q.schedule(q.now(), 9).unwrap();
        assert_eq!(q.pop().unwrap().payload, 9);
        assert_eq!(q.pop().unwrap().payload, 1);
    }

    #[test]
    fn past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_secs(3.0), ()).unwrap();
        q.pop();
        let err = q.schedule(SimTime::from_secs(2.0), ()).unwrap_err();
        assert!(matches!(err, KernelError::TimeInPast { .. }));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        let mut seen = 0;
        run_until(&mut q, SimTime::from_secs(10.0), |_, _| seen += 1);
        assert_eq!(seen, 0);
        assert_eq!(q.now(), SimTime::from_secs(10.0));
    }

    #[test]
    fn quantization_merges_nearby_instants() {
        assert_eq!(SimTime::from_secs(0.1 + 0.2), SimTime::from_secs(0.3));
        assert_eq!(SimTime::from_secs(-1.0), SimTime::ZERO);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dequeues_sorted(times in proptest::collection::vec(0u64..5_000, 1..20_000)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.schedule(SimTime::from_micros(*t), i).unwrap();
            }
            let mut last: Option<(SimTime, u64)> = None;
            while let Some(ev) = q.pop() {
                let key = (ev.time, ev.sequence);
                if let Some(prev) = last {
                    prop_assert!(prev < key);
                }
                prop_assert_eq!(ev.sequence as usize, ev.payload);
                last = Some(key);
            }
        }
    }
}
