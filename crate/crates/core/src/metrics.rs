//! Counters, operator timing spans, and the per-epoch run record.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Engine-wide counters. All increments are relaxed; totals are read after
/// the relevant workers have quiesced.
#[derive(Debug, Default)]
pub struct Counters {
    pub submitted: AtomicU64,
    pub completed: AtomicU64,
    pub scattered: AtomicU64,
    pub bytes_read: AtomicU64,
    pub sq_full_retries: AtomicU64,
    /// Submitter stalls waiting for in-flight budget or buffer slots.
    pub flow_control_waits: AtomicU64,
    /// Times a submitter polled a completion queue itself (sync mode only).
    pub coupled_polls: AtomicU64,
    pub fast_hits: AtomicU64,
    pub slow_hits: AtomicU64,
    pub misses: AtomicU64,
    pub inflight: AtomicU64,
    pub inflight_high_water: AtomicU64,
}

impl Counters {
    pub fn record_inflight_up(&self) {
        let now = self.inflight.fetch_add(1, Ordering::Relaxed) + 1;
        self.inflight_high_water.fetch_max(now, Ordering::Relaxed);
    }

    pub fn record_inflight_down(&self) {
        self.inflight.fetch_sub(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            submitted: self.submitted.load(Ordering::Relaxed),
            completed: self.completed.load(Ordering::Relaxed),
            scattered: self.scattered.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
            sq_full_retries: self.sq_full_retries.load(Ordering::Relaxed),
            flow_control_waits: self.flow_control_waits.load(Ordering::Relaxed),
            coupled_polls: self.coupled_polls.load(Ordering::Relaxed),
            fast_hits: self.fast_hits.load(Ordering::Relaxed),
            slow_hits: self.slow_hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            inflight_high_water: self.inflight_high_water.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub submitted: u64,
    pub completed: u64,
    pub scattered: u64,
    pub bytes_read: u64,
    pub sq_full_retries: u64,
    pub flow_control_waits: u64,
    pub coupled_polls: u64,
    pub fast_hits: u64,
    pub slow_hits: u64,
    pub misses: u64,
    pub inflight_high_water: u64,
}

impl CounterSnapshot {
    /// Difference since an earlier snapshot (high-water mark is kept as-is).
    pub fn delta_since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            submitted: self.submitted - earlier.submitted,
            completed: self.completed - earlier.completed,
            scattered: self.scattered - earlier.scattered,
            bytes_read: self.bytes_read - earlier.bytes_read,
            sq_full_retries: self.sq_full_retries - earlier.sq_full_retries,
            flow_control_waits: self.flow_control_waits - earlier.flow_control_waits,
            coupled_polls: self.coupled_polls - earlier.coupled_polls,
            fast_hits: self.fast_hits - earlier.fast_hits,
            slow_hits: self.slow_hits - earlier.slow_hits,
            misses: self.misses - earlier.misses,
            inflight_high_water: self.inflight_high_water,
        }
    }
}

/// One executed operator, in microseconds relative to the epoch start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub kind: OpKindTag,
    pub hop: u32,
    pub batch: u64,
    pub start_us: u64,
    pub end_us: u64,
}

/// Operator kinds as recorded in spans and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKindTag {
    Sample,
    Lookup,
    Submit,
    Complete,
    BatchGen,
    Train,
}

impl OpKindTag {
    pub const ALL: [OpKindTag; 6] = [
        OpKindTag::Sample,
        OpKindTag::Lookup,
        OpKindTag::Submit,
        OpKindTag::Complete,
        OpKindTag::BatchGen,
        OpKindTag::Train,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKindTag::Sample => "sample",
            OpKindTag::Lookup => "lookup",
            OpKindTag::Submit => "submit",
            OpKindTag::Complete => "complete",
            OpKindTag::BatchGen => "batch_gen",
            OpKindTag::Train => "train",
        }
    }
}

/// Collects operator spans for one epoch.
pub struct SpanSink {
    epoch_start: Instant,
    spans: Mutex<Vec<Span>>,
}

impl SpanSink {
    pub fn new() -> Self {
        SpanSink {
            epoch_start: Instant::now(),
            spans: Mutex::new(Vec::new()),
        }
    }

    pub fn now_us(&self) -> u64 {
        self.epoch_start.elapsed().as_micros() as u64
    }

    pub fn record(&self, kind: OpKindTag, hop: u32, batch: u64, start_us: u64, end_us: u64) {
        self.spans.lock().push(Span {
            kind,
            hop,
            batch,
            start_us,
            end_us,
        });
    }

    pub fn take(&self) -> Vec<Span> {
        std::mem::take(&mut self.spans.lock())
    }
}

impl Default for SpanSink {
    fn default() -> Self {
        Self::new()
    }
}

/// Aggregate per-kind busy time out of a span list.
pub fn stage_totals_us(spans: &[Span]) -> Vec<(OpKindTag, u64)> {
    OpKindTag::ALL
        .iter()
        .map(|&kind| {
            let total = spans
                .iter()
                .filter(|s| s.kind == kind)
                .map(|s| s.end_us - s.start_us)
                .sum();
            (kind, total)
        })
        .collect()
}

/// Everything one epoch run reports. Embeds the full config and dataset seed
/// so any number in the record can be reproduced from the record alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: crate::config::EngineConfig,
    pub dataset: crate::gen::DatasetMeta,
    pub epoch: usize,
    pub num_batches: usize,
    pub epoch_time_s: f64,
    /// Aggregate busy time per operator kind, microseconds.
    pub stage_us: Vec<(OpKindTag, u64)>,
    pub counters: CounterSnapshot,
    pub commands_per_sec: f64,
    pub bytes_per_sec: f64,
    pub per_batch_loss: Vec<f32>,
    /// Combined checksum over the per-batch feature matrices.
    pub feature_checksum: u64,
    pub spans: Vec<Span>,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("run record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// FNV-1a over raw bytes; the engine's checksum for feature matrices.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1_0000_01b3);
    }
    h
}

/// Order-dependent combination of per-batch checksums.
pub fn combine_checksums(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &p in parts {
        h = crate::rng::mix64(h ^ p);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_detects_single_bit_flip() {
        let a = vec![0u8; 64];
        let mut b = a.clone();
        b[33] ^= 1;
        assert_ne!(fnv1a(&a), fnv1a(&b));
    }

    #[test]
    fn stage_totals_sum_per_kind() {
        let sink = SpanSink::new();
        sink.record(OpKindTag::Sample, 1, 0, 0, 10);
        sink.record(OpKindTag::Sample, 2, 0, 10, 30);
        sink.record(OpKindTag::Train, 0, 0, 30, 100);
        let spans = sink.take();
        let totals = stage_totals_us(&spans);
        let get = |k: OpKindTag| totals.iter().find(|(kk, _)| *kk == k).unwrap().1;
        assert_eq!(get(OpKindTag::Sample), 30);
        assert_eq!(get(OpKindTag::Train), 70);
        assert_eq!(get(OpKindTag::Lookup), 0);
    }

    #[test]
    fn inflight_high_water_tracks_max() {
        let c = Counters::default();
        c.record_inflight_up();
        c.record_inflight_up();
        c.record_inflight_down();
        c.record_inflight_up();
        assert_eq!(c.snapshot().inflight_high_water, 2);
    }
}
