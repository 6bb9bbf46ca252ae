//! Shared wireless channel: one processor-sharing link per direction.
//!
//! Every active transfer on a link gets an equal share of its capacity, so a
//! message's delay is half the base round trip plus its size over the
//! capacity it was actually granted while other transfers came and went.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModel {
    /// Bytes per second.
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    pub base_rtt_us: f64,
    /// Fixed server compute time per request.
    pub server_processing_us: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self { uplink_bps: 3.5e6, downlink_bps: 3.98e6, base_rtt_us: 10_000.0, server_processing_us: 20_000.0 }
    }
}

impl ChannelModel {
    pub fn one_way_us(&self) -> f64 {
        self.base_rtt_us / 2.0
    }
}

/// Processor-sharing link. Times are microseconds.
#[derive(Debug, Clone)]
pub struct PsLink {
    capacity_bps: f64,
    active: BTreeMap<u64, f64>,
    clock_us: f64,
    bytes_total: u64,
}

impl PsLink {
    pub fn new(capacity_bps: f64) -> Self {
        Self { capacity_bps, active: BTreeMap::new(), clock_us: 0.0, bytes_total: 0 }
    }

    fn rate_per_us(&self) -> f64 {
        self.capacity_bps / 1e6 / self.active.len().max(1) as f64
    }

    /// Serves active transfers up to time `t`.
    pub fn advance(&mut self, t: f64) {
        if t > self.clock_us && !self.active.is_empty() {
            let served = (t - self.clock_us) * self.rate_per_us();
            for r in self.active.values_mut() {
                *r = (*r - served).max(0.0);
            }
        }
        self.clock_us = self.clock_us.max(t);
    }

    pub fn start(&mut self, id: u64, bytes: usize, t: f64) {
        self.advance(t);
        self.bytes_total += bytes as u64;
        self.active.insert(id, bytes as f64);
    }

    /// Earliest finishing transfer, ties by id.
    pub fn next_completion(&self) -> Option<(f64, u64)> {
        let (id, rem) = self.active.iter().min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))?;
        Some((self.clock_us + rem / self.rate_per_us(), *id))
    }

    pub fn finish(&mut self, id: u64, t: f64) {
        self.advance(t);
        self.active.remove(&id);
    }

    pub fn active(&self) -> usize {
        self.active.len()
    }

    /// Bytes ever submitted.
    pub fn bytes_total(&self) -> u64 {
        self.bytes_total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lone_transfer_uses_full_capacity() {
        let mut link = PsLink::new(1e6);
        link.start(1, 1000, 0.0);
        let (t, id) = link.next_completion().unwrap();
        assert_eq!(id, 1);
        assert!((t - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn two_transfers_share() {
        let mut link = PsLink::new(1e6);
        link.start(1, 1000, 0.0);
        link.start(2, 1000, 0.0);
        let (t, _) = link.next_completion().unwrap();
        assert!((t - 2000.0).abs() < 1e-9);
        // A late arrival slows the first transfer down from then on.
        let mut link = PsLink::new(1e6);
        link.start(1, 1000, 0.0);
        link.start(2, 1000, 500.0);
        let (t, id) = link.next_completion().unwrap();
        assert_eq!(id, 1);
        assert!((t - 1500.0).abs() < 1e-9);
        link.finish(1, t);
        let (t2, _) = link.next_completion().unwrap();
        assert!((t2 - 2000.0).abs() < 1e-9);
        assert_eq!(link.bytes_total(), 2000);
    }
}
