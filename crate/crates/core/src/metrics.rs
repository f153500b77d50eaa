//! Run metrics, computed by the simulator and independently from a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::Color;
use crate::rm::RecoveryKind;
use crate::time::{Duration, Timestamp};
use crate::trace::{TraceEvent, TraceRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recoveries {
    pub mode_switch: u64,
    pub reallocation: u64,
    pub escalation: u64,
    pub degradation: u64,
    pub safe_stop: u64,
    pub restoration: u64,
}

impl Recoveries {
    pub fn bump(&mut self, kind: RecoveryKind) {
        match kind {
            RecoveryKind::ModeSwitch => self.mode_switch += 1,
            RecoveryKind::Reallocation => self.reallocation += 1,
            RecoveryKind::Escalation => self.escalation += 1,
            RecoveryKind::Degradation => self.degradation += 1,
            RecoveryKind::SafeStop => self.safe_stop += 1,
            RecoveryKind::Restoration => self.restoration += 1,
        }
    }

    /// Recoveries proper; restorations are not counted.
    pub fn total(&self) -> u64 {
        self.mode_switch + self.reallocation + self.escalation + self.degradation + self.safe_stop
    }
}

/// Ejected tokens per simulated second, as the exact ratio
/// `ejected * 1e6 / span_us` over the span from the first admission to the
/// last ejection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Throughput {
    pub ejected: u64,
    pub span: Duration,
}

impl Throughput {
    pub fn new(ejected: u64, first_entry: Option<Timestamp>, last_eject: Option<Timestamp>) -> Self {
        let span = match (first_entry, last_eject) {
            (Some(a), Some(b)) => b.since(a).unwrap_or(Duration::ZERO),
            _ => Duration::ZERO,
        };
        Throughput { ejected, span }
    }

    pub fn per_second(&self) -> f64 {
        if self.span == Duration::ZERO {
            return 0.0;
        }
        self.ejected as f64 * 1e6 / self.span.as_micros() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens_arrived: u64,
    /// Tokens admitted onto the belt.
    pub tokens_in: u64,
    pub sorted_correct: u64,
    pub missorted: u64,
    pub missed: u64,
    pub in_flight: u64,
    /// Arrived but never admitted (feeder backlog or safe stop).
    pub not_admitted: u64,
    pub violations_by_contract: BTreeMap<String, u64>,
    pub recoveries: Recoveries,
    pub time_degraded: Duration,
    pub final_speed_level: usize,
    pub safe_stopped: bool,
    pub throughput: Throughput,
}

impl Metrics {
    pub fn total_violations(&self) -> u64 {
        self.violations_by_contract.values().sum()
    }

    /// Rebuilds the metrics from a trace alone.
    pub fn from_trace(records: &[TraceRecord]) -> Metrics {
        let mut m = Metrics::default();
        let mut colors: BTreeMap<u64, Color> = BTreeMap::new();
        let mut first_entry = None;
        let mut last_eject = None;
        let mut level = 0usize;
        let mut degraded_since: Option<Timestamp> = None;
        let mut end = Timestamp::ZERO;
        for r in records {
            match &r.event {
                TraceEvent::TokenArrive { token, color } => {
                    m.tokens_arrived += 1;
                    colors.insert(*token, *color);
                }
                TraceEvent::TokenEnter { .. } => {
                    m.tokens_in += 1;
                    first_entry.get_or_insert(r.t);
                }
                TraceEvent::Eject { token, bin, .. } => {
                    if colors.get(token).map(|c| c.bin()) == Some(*bin) {
                        m.sorted_correct += 1;
                    } else {
                        m.missorted += 1;
                    }
                    last_eject = Some(r.t);
                }
                TraceEvent::Missed { .. } => m.missed += 1,
                TraceEvent::Violation { contract, .. } => {
                    *m.violations_by_contract.entry(contract.to_string()).or_default() += 1;
                }
                TraceEvent::Recovery { action, .. } => m.recoveries.bump(*action),
                TraceEvent::SpeedChange { to, .. } => {
                    if level == 0 && *to > 0 {
                        degraded_since = Some(r.t);
                    } else if level > 0 && *to == 0 {
                        let since = degraded_since.take().expect("degraded before");
                        m.time_degraded += r.t.since(since).unwrap_or_default();
                    }
                    level = *to;
                }
                TraceEvent::BeltStop { .. } => m.safe_stopped = true,
                TraceEvent::RunEnd {} => end = r.t,
                _ => {}
            }
        }
        if let Some(since) = degraded_since {
            m.time_degraded += end.since(since).unwrap_or_default();
        }
        m.final_speed_level = level;
        let done = m.sorted_correct + m.missorted + m.missed;
        m.in_flight = m.tokens_in - done;
        m.not_admitted = m.tokens_arrived - m.tokens_in;
        m.throughput = Throughput::new(m.sorted_correct + m.missorted, first_entry, last_eject);
        m
    }
}
