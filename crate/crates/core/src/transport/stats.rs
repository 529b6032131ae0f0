use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::Serialize;

/// Counters for one collective-phase label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseCounters {
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    /// Largest single payload sent under this label.
    pub max_frame_payload: u64,
    /// Smallest single payload sent under this label (0 when no frames).
    pub min_frame_payload: u64,
}

/// Per-rank payload accounting, grouped by label. Only payload bytes are
/// counted; frame headers are not.
#[derive(Debug, Default)]
pub struct TrafficStats {
    phases: Mutex<BTreeMap<String, PhaseCounters>>,
}

impl TrafficStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record_send(&self, label: &str, bytes: usize) {
        let bytes = bytes as u64;
        let mut phases = self.phases.lock().unwrap();
        let c = phases.entry(label.to_string()).or_default();
        c.min_frame_payload = if c.frames_sent == 0 {
            bytes
        } else {
            c.min_frame_payload.min(bytes)
        };
        c.payload_bytes_sent += bytes;
        c.frames_sent += 1;
        c.max_frame_payload = c.max_frame_payload.max(bytes);
    }

    pub(crate) fn record_recv(&self, label: &str, bytes: usize) {
        let mut phases = self.phases.lock().unwrap();
        let c = phases.entry(label.to_string()).or_default();
        c.payload_bytes_received += bytes as u64;
        c.frames_received += 1;
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            phases: self.phases.lock().unwrap().clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub phases: BTreeMap<String, PhaseCounters>,
}

impl StatsSnapshot {
    pub fn phase(&self, label: &str) -> PhaseCounters {
        self.phases.get(label).copied().unwrap_or_default()
    }

    pub fn total(&self) -> PhaseCounters {
        self.sum_where(|_| true)
    }

    /// Sums every label that starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> PhaseCounters {
        self.sum_where(|label| label.starts_with(prefix))
    }

    fn sum_where(&self, pred: impl Fn(&str) -> bool) -> PhaseCounters {
        let mut out = PhaseCounters::default();
        let mut any = false;
        for (label, c) in &self.phases {
            if !pred(label) {
                continue;
            }
            out.payload_bytes_sent += c.payload_bytes_sent;
            out.payload_bytes_received += c.payload_bytes_received;
            out.frames_sent += c.frames_sent;
            out.frames_received += c.frames_received;
            out.max_frame_payload = out.max_frame_payload.max(c.max_frame_payload);
            if c.frames_sent > 0 {
                out.min_frame_payload = if any {
                    out.min_frame_payload.min(c.min_frame_payload)
                } else {
                    c.min_frame_payload
                };
                any = true;
            }
        }
        out
    }

    /// Counter deltas since `earlier`. Max/min frame fields are taken from `self`.
    pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        let phases = self
            .phases
            .iter()
            .map(|(label, c)| {
                let e = earlier.phase(label);
                (
                    label.clone(),
                    PhaseCounters {
                        payload_bytes_sent: c.payload_bytes_sent - e.payload_bytes_sent,
                        payload_bytes_received: c.payload_bytes_received
                            - e.payload_bytes_received,
                        frames_sent: c.frames_sent - e.frames_sent,
                        frames_received: c.frames_received - e.frames_received,
                        ..*c
                    },
                )
            })
            .collect();
        StatsSnapshot { phases }
    }
}
