//! Per-node interaction history answering "the `h` most recent neighbors
//! strictly before `t`".

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::events::{EdgeKey, NodeId, TemporalEvent};

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborRecord {
    pub neighbor: NodeId,
    pub t: f64,
    pub features: Arc<[f64]>,
    pub edge_key: EdgeKey,
}

/// Append-only, time-ordered adjacency lists. Both endpoints of an event are
/// indexed.
#[derive(Debug, Default)]
pub struct NeighborStore {
    lists: Vec<Vec<NeighborRecord>>,
    last_t: f64,
    /// Records examined by queries, for cost audits.
    touched: AtomicU64,
}

impl Clone for NeighborStore {
    fn clone(&self) -> Self {
        NeighborStore {
            lists: self.lists.clone(),
            last_t: self.last_t,
            touched: AtomicU64::new(self.records_touched()),
        }
    }
}

impl NeighborStore {
    pub fn new(num_nodes: usize) -> Self {
        NeighborStore {
            lists: vec![Vec::new(); num_nodes],
            last_t: f64::NEG_INFINITY,
            touched: AtomicU64::new(0),
        }
    }

    pub fn insert(&mut self, ev: &TemporalEvent) -> Result<()> {
        if ev.t < self.last_t {
            return Err(Error::Order {
                t: ev.t,
                last: self.last_t,
            });
        }
        let need = ev.src.max(ev.dst) + 1;
        if self.lists.len() < need {
            self.lists.resize(need, Vec::new());
        }
        self.last_t = ev.t;
        let features: Arc<[f64]> = Arc::from(ev.features.as_slice());
        let key = ev.key();
        self.lists[ev.src].push(NeighborRecord {
            neighbor: ev.dst,
            t: ev.t,
            features: Arc::clone(&features),
            edge_key: key,
        });
        if ev.dst != ev.src {
            self.lists[ev.dst].push(NeighborRecord {
                neighbor: ev.src,
                t: ev.t,
                features,
                edge_key: key,
            });
        }
        Ok(())
    }

    /// Up to `h` records with `t' < t`, most recent first.
    pub fn most_recent(&self, node: NodeId, t: f64, h: usize) -> Vec<NeighborRecord> {
        let Some(list) = self.lists.get(node) else {
            return Vec::new();
        };
        let end = list.partition_point(|r| r.t < t);
        let start = end.saturating_sub(h);
        self.touched
            .fetch_add((end - start) as u64, Ordering::Relaxed);
        list[start..end].iter().rev().cloned().collect()
    }

    pub fn history_len(&self, node: NodeId) -> usize {
        self.lists.get(node).map_or(0, Vec::len)
    }

    pub fn records_touched(&self) -> u64 {
        self.touched.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: NodeId, dst: NodeId, t: f64) -> TemporalEvent {
        TemporalEvent {
            src,
            dst,
            t,
            features: vec![t],
            label: None,
        }
    }

    #[test]
    fn query_sees_strictly_earlier_events_only() {
        let mut s = NeighborStore::new(4);
        s.insert(&ev(1, 2, 5.0)).unwrap();
        assert_eq!(s.most_recent(1, 6.0, 10)[0].neighbor, 2);
        assert_eq!(s.most_recent(2, 6.0, 10)[0].neighbor, 1);
        assert!(s.most_recent(1, 5.0, 10).is_empty());
    }

    #[test]
    fn repeated_pair_gives_distinct_records() {
        let mut s = NeighborStore::new(4);
        s.insert(&ev(1, 2, 5.0)).unwrap();
        s.insert(&ev(1, 2, 7.0)).unwrap();
        let got = s.most_recent(1, 10.0, 10);
        assert_eq!(got.len(), 2);
        assert_ne!(got[0].edge_key, got[1].edge_key);
    }

    #[test]
    fn truncates_to_latest_h() {
        let mut s = NeighborStore::new(4);
        assert!(s.most_recent(0, 1.0, 3).is_empty());
        for (k, t) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            s.insert(&ev(0, k + 1, t)).unwrap();
        }
        let got: Vec<f64> = s.most_recent(0, 10.0, 2).iter().map(|r| r.t).collect();
        assert_eq!(got, vec![3.0, 2.0]);
    }

    #[test]
    fn out_of_order_insert_fails() {
        let mut s = NeighborStore::new(3);
        s.insert(&ev(0, 1, 2.0)).unwrap();
        assert!(matches!(s.insert(&ev(1, 2, 1.0)), Err(Error::Order { .. })));
    }

    #[test]
    fn query_cost_is_bounded_by_h() {
        let mut s = NeighborStore::new(2);
        for k in 0..10_000 {
            s.insert(&ev(0, 1, k as f64)).unwrap();
        }
        let before = s.records_touched();
        for q in 0..100 {
            s.most_recent(0, 5_000.0 + q as f64, 10);
        }
        assert_eq!(s.records_touched() - before, 100 * 10);
    }
}
