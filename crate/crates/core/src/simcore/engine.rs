use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{EntityId, VirtualTime};
use crate::error::SimError;

/// Insertion sequence number of a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug)]
pub struct Event<A> {
    pub id: EventId,
    pub time: VirtualTime,
    pub entity: EntityId,
    pub action: A,
}

struct Queued<A>(Event<A>);

// Min-heap on (time, seq).
impl<A> Ord for Queued<A> {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.time, other.0.id).cmp(&(self.0.time, self.0.id))
    }
}

impl<A> PartialOrd for Queued<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> PartialEq for Queued<A> {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}

impl<A> Eq for Queued<A> {}

/// Event queue ordered by time, ties broken by insertion order.
pub struct Scheduler<A> {
    now: VirtualTime,
    next_seq: u64,
    heap: BinaryHeap<Queued<A>>,
}

impl<A> Default for Scheduler<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> Scheduler<A> {
    pub fn new() -> Self {
        Scheduler {
            now: VirtualTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    /// Time of the event being dispatched, or of the last one popped.
    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn schedule(
        &mut self,
        at: VirtualTime,
        entity: EntityId,
        action: A,
    ) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::ScheduledInPast {
                at: at.ns(),
                now: self.now.ns(),
                entity: entity.to_string(),
            });
        }
        let id = EventId(self.next_seq);
        self.next_seq += 1;
        self.heap.push(Queued(Event {
            id,
            time: at,
            entity,
            action,
        }));
        Ok(id)
    }

    /// Pops the next event and advances `now` to its time.
    pub fn pop(&mut self) -> Option<Event<A>> {
        let Queued(ev) = self.heap.pop()?;
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        Some(ev)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(s: &mut Scheduler<&'static str>) -> Vec<&'static str> {
        std::iter::from_fn(|| s.pop().map(|e| e.action)).collect()
    }

    #[test]
    fn earlier_time_dispatches_first() {
        let mut s = Scheduler::new();
        s.schedule(VirtualTime(10), EntityId::Sim, "x").unwrap();
        s.schedule(VirtualTime(5), EntityId::Sim, "y").unwrap();
        assert_eq!(drain(&mut s), vec!["y", "x"]);
    }

    #[test]
    fn equal_time_dispatches_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(VirtualTime(10), EntityId::Host(3), "x").unwrap();
        s.schedule(VirtualTime(10), EntityId::Host(0), "y").unwrap();
        assert_eq!(drain(&mut s), vec!["x", "y"]);
    }

    #[test]
    fn scheduling_in_the_past_is_fatal() {
        let mut s = Scheduler::new();
        s.schedule(VirtualTime(42), EntityId::Sim, "a").unwrap();
        let ev = s.pop().unwrap();
        assert_eq!(s.now(), VirtualTime(42));
        assert_eq!(ev.time, VirtualTime(42));
        let err = s.schedule(VirtualTime(41), EntityId::Sim, "b").unwrap_err();
        assert!(matches!(err, SimError::ScheduledInPast { at: 41, now: 42, .. }));
        // scheduling at `now` is fine
        s.schedule(VirtualTime(42), EntityId::Sim, "c").unwrap();
    }

    #[test]
    fn now_is_zero_before_first_dispatch() {
        let s: Scheduler<()> = Scheduler::new();
        assert_eq!(s.now(), VirtualTime::ZERO);
        assert!(s.is_empty());
    }

    #[test]
    fn seq_is_strictly_increasing() {
        let mut s = Scheduler::new();
        let a = s.schedule(VirtualTime(3), EntityId::Sim, ()).unwrap();
        let b = s.schedule(VirtualTime(1), EntityId::Sim, ()).unwrap();
        assert!(b > a);
        assert_eq!(s.len(), 2);
    }
}
