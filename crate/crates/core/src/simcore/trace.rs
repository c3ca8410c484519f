use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;

use super::{EntityId, VirtualTime};

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: VirtualTime,
    pub seq: u64,
    pub entity: EntityId,
    pub action: &'static str,
    /// Comma-joined `key=value` list.
    pub detail: String,
}

impl TraceRecord {
    /// Looks up `key` in the detail list.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.detail.split(',').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then_some(v)
        })
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.time, self.seq, self.entity, self.action, self.detail
        )
    }
}

/// Ordered trace with a running FNV-1a digest over the `\n`-joined lines.
pub struct Trace {
    records: Vec<TraceRecord>,
    keep: bool,
    hasher: FnvHasher,
    len: u64,
    line: String,
}

impl Trace {
    pub fn new(keep_records: bool) -> Self {
        Trace {
            records: Vec::new(),
            keep: keep_records,
            hasher: FnvHasher::default(),
            len: 0,
            line: String::new(),
        }
    }

    pub fn push(&mut self, time: VirtualTime, entity: EntityId, action: &'static str, detail: String) {
        use fmt::Write as _;
        let rec = TraceRecord {
            time,
            seq: self.len,
            entity,
            action,
            detail,
        };
        self.line.clear();
        let _ = write!(self.line, "{rec}");
        if self.len > 0 {
            self.hasher.write(b"\n");
        }
        self.hasher.write(self.line.as_bytes());
        self.len += 1;
        if self.keep {
            self.records.push(rec);
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hash(&self) -> u64 {
        self.hasher.finish()
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }
}

/// Digest of a list of records, identical to what [`Trace`] computes online.
pub fn trace_hash(records: &[TraceRecord]) -> u64 {
    let mut h = FnvHasher::default();
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            h.write(b"\n");
        }
        h.write(r.to_string().as_bytes());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_is_space_separated() {
        let mut t = Trace::new(true);
        t.push(VirtualTime(7), EntityId::Host(2), "epoch_post", crate::kv!("win" => 1, "n" => 3));
        let recs = t.into_records();
        assert_eq!(recs[0].to_string(), "7 0 host2 epoch_post win=1,n=3");
        assert_eq!(recs[0].get("n"), Some("3"));
        assert_eq!(recs[0].get("missing"), None);
    }

    #[test]
    fn online_hash_matches_offline_hash() {
        let mut t = Trace::new(true);
        for i in 0..5 {
            t.push(VirtualTime(i), EntityId::Sim, "tick", crate::kv!("i" => i));
        }
        let online = t.hash();
        assert_eq!(online, trace_hash(&t.into_records()));
    }

    #[test]
    fn hash_depends_on_content() {
        let mut a = Trace::new(false);
        let mut b = Trace::new(false);
        a.push(VirtualTime(1), EntityId::Sim, "x", String::new());
        b.push(VirtualTime(2), EntityId::Sim, "x", String::new());
        assert_ne!(a.hash(), b.hash());
    }
}
