//! Round-trip-time records and their per-payload summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Time from sending FORWARD_FEATURES to receiving the matching BACKWARD_GRADS.
/// Timestamps are microseconds since the session started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttRecord {
    pub batch_index: u64,
    /// Raw tensor payload of the feature frame.
    pub payload_bytes: usize,
    pub send_timestamp: u64,
    pub ack_timestamp: u64,
    pub rtt_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttSummary {
    pub payload_bytes: usize,
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Percentile with linear interpolation between closest ranks; `sorted` is non-empty.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Groups records by payload size, ascending.
pub fn measure_rtt(records: &[RttRecord]) -> Vec<RttSummary> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(r.payload_bytes).or_default().push(r.rtt_ms);
    }
    groups
        .into_iter()
        .map(|(payload_bytes, mut v)| {
            v.sort_by(f64::total_cmp);
            RttSummary {
                payload_bytes,
                count: v.len(),
                mean_ms: v.iter().sum::<f64>() / v.len() as f64,
                p50_ms: percentile(&v, 50.0),
                p95_ms: percentile(&v, 95.0),
            }
        })
        .collect()
}

/// Payload size against round-trip time, one row per payload.
pub fn rtt_table(summaries: &[RttSummary]) -> String {
    let mut out = String::from("payload (KB) | batches | mean RTT (ms) | p50 (ms) | p95 (ms)\n");
    out.push_str("-------------|---------|---------------|----------|---------\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{:>12.2} | {:>7} | {:>13.4} | {:>8.4} | {:>8.4}",
            s.payload_bytes as f64 / 1024.0,
            s.count,
            s.mean_ms,
            s.p50_ms,
            s.p95_ms
        );
    }
    out
}
