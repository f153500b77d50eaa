//! Run traces: one JSON object per line, `{"t":..,"seq":..,"kind":..,"payload":{..}}`.
//!
//! Key order is fixed by the struct layouts below, so equal runs produce
//! byte-equal traces. `seq` is dense from 0 in emission order.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::fault::FaultKind;
use crate::ids::{Color, Component, ContractId, RmId};
use crate::message::RmMessage;
use crate::observer::ViolationKind;
use crate::rm::RecoveryKind;
use crate::time::{Duration, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub contract: ContractId,
    pub budget: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart {
        seed: u64,
        rm_enabled: bool,
        duration: Duration,
        pulse_period: Duration,
    },
    RunEnd {},
    TokenArrive {
        token: u64,
        color: Color,
    },
    TokenEnter {
        token: u64,
        pulse: u64,
    },
    ColorRead {
        token: u64,
        captured: Color,
        misread: bool,
    },
    /// A CP, BS or EC job finished. PC jobs run every pulse and are not traced.
    JobDone {
        component: Component,
        job: u64,
        token: u64,
        start: Timestamp,
        end: Timestamp,
    },
    Eject {
        token: u64,
        bin: usize,
        t_align: Timestamp,
    },
    EjectFail {
        token: u64,
        bin: usize,
        t_align: Timestamp,
    },
    Missed {
        token: u64,
        pulse: u64,
    },
    FaultOn {
        fault: usize,
        target: Component,
        effect: FaultKind,
    },
    FaultOff {
        fault: usize,
        target: Component,
    },
    Violation {
        contract: ContractId,
        job: u64,
        observed: Duration,
        budget: Duration,
        demand: Duration,
        violation: ViolationKind,
    },
    /// Recorded once, at delivery.
    Message(RmMessage),
    Coalesced {
        rm: RmId,
        contract: ContractId,
        message: u64,
    },
    Recovery {
        rm: RmId,
        action: RecoveryKind,
        correlation: u64,
        contract: ContractId,
    },
    RmNote {
        rm: RmId,
        note: String,
    },
    ModeChange {
        component: Component,
        mode: String,
        latency: Duration,
        coarse_counting: bool,
    },
    SpeedChange {
        from: usize,
        to: usize,
        pulse_period: Duration,
        budgets: Vec<BudgetEntry>,
    },
    BatchCommit {
        correlation: u64,
        budgets: Vec<BudgetEntry>,
        refinement_ok: bool,
    },
    BeltStop {
        on_belt: u64,
        queued: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Timestamp,
    pub seq: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

/// Append-only trace with dense sequence numbers.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, t: Timestamp, event: TraceEvent) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { t, seq, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TraceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", r.to_json_line())?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

/// Parses a JSONL trace back into records.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord =
            serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(rec);
    }
    Ok(out)
}
