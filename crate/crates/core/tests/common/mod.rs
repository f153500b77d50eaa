#![allow(dead_code)]

pub mod cases;

use std::path::PathBuf;

use sortline_resilience::scenario::Scenario;
use sortline_resilience::sim::{self, RunOutcome};
use sortline_resilience::trace::{TraceEvent, TraceRecord};
use sortline_resilience::Timestamp;

pub const SCENARIOS: [&str; 5] = [
    "a1_baseline",
    "a2_pc_mode_switch",
    "a3_slack_reallocation",
    "a4_degradation",
    "a5_safe_stop",
];

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("bundled scenario loads")
}

pub fn run(s: &Scenario) -> RunOutcome {
    sim::run(s.resolve().expect("scenario resolves")).expect("plant builds")
}

pub fn run_named(name: &str, rm: bool) -> RunOutcome {
    let mut s = load(name);
    s.rm_enabled = rm;
    run(&s)
}

/// Scenario with one token and optional faults, RMs off unless asked.
pub fn single_token(arrival: u64, color: &str, faults: &str, extra_config: &str) -> Scenario {
    let text = format!(
        r#"{{
            "schema_version": 1,
            "duration": 3000000,
            "rm_enabled": false,
            "arrivals": {{ "explicit": [ {{ "t": {arrival}, "color": "{color}" }} ] }},
            "faults": [{faults}],
            "config": {{ {extra_config} }}
        }}"#
    );
    Scenario::from_json(&text, "inline").expect("test scenario parses")
}

pub fn first_time(records: &[TraceRecord], pred: impl Fn(&TraceEvent) -> bool) -> Option<Timestamp> {
    records.iter().find(|r| pred(&r.event)).map(|r| r.t)
}

pub fn count(records: &[TraceRecord], pred: impl Fn(&TraceEvent) -> bool) -> usize {
    records.iter().filter(|r| pred(&r.event)).count()
}

/// Closed-form timeline of one token on an idle line at constant speed.
///
/// `p`: pulse period, `s`: sensor pulse, `target`: ejector pulse of the bin,
/// `miss`: miss pulse, `pc`: pulse-counter latency, `chain`: CP+BS+EC
/// latencies, `w`: ejection window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeline {
    pub enter: u64,
    pub read: u64,
    pub cp_done: u64,
    pub bs_done: u64,
    pub ec_done: u64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Eject { at: u64, bin: usize },
    FailThenMiss { fail_at: u64, miss_at: u64 },
    Miss { at: u64 },
}

pub struct Line {
    pub p: u64,
    pub s: u64,
    pub ejectors: [u64; 3],
    pub w: u64,
    pub pc: u64,
    pub cp: u64,
    pub bs: u64,
    pub ec: u64,
}

impl Default for Line {
    fn default() -> Self {
        Line {
            p: 25_000,
            s: 20,
            ejectors: [24, 28, 32],
            w: 10_000,
            pc: 8_000,
            cp: 25_000,
            bs: 10_000,
            ec: 10_000,
        }
    }
}

impl Line {
    pub fn timeline(&self, arrival: u64, bin: usize) -> Timeline {
        let e = arrival.div_ceil(self.p);
        let read = (e + self.s) * self.p;
        let cp_done = read + self.cp;
        let bs_done = cp_done + self.bs;
        let ec_done = bs_done + self.ec;
        let k = e + self.ejectors[bin];
        let t_align = k * self.p;
        let miss_at = (e + self.ejectors[2] + 1) * self.p;
        // The ejector fires on the first PC report for the target pulse that
        // finds the token decided, or on EC completion if that report came first.
        let fire = if ec_done <= t_align + self.pc {
            Some(t_align + self.pc)
        } else if ec_done <= (k + 1) * self.p + self.pc {
            Some(ec_done)
        } else {
            None
        };
        let outcome = match fire {
            Some(at) if at <= t_align + self.w => Outcome::Eject { at, bin },
            Some(fail_at) => Outcome::FailThenMiss { fail_at, miss_at },
            None => Outcome::Miss { at: miss_at },
        };
        Timeline {
            enter: e * self.p,
            read,
            cp_done,
            bs_done,
            ec_done,
            outcome,
        }
    }
}

/// The same timeline read off a simulated trace.
pub fn observed_timeline(records: &[TraceRecord]) -> Timeline {
    use sortline_resilience::Component;
    let job = |c: Component| {
        first_time(records, |e| matches!(e, TraceEvent::JobDone { component, .. } if *component == c))
            .map_or(0, |t| t.as_micros())
    };
    let at = |pred: &dyn Fn(&TraceEvent) -> bool| first_time(records, pred).map(|t| t.as_micros());
    let eject = records.iter().find_map(|r| match r.event {
        TraceEvent::Eject { bin, .. } => Some((r.t.as_micros(), bin)),
        _ => None,
    });
    let fail = at(&|e| matches!(e, TraceEvent::EjectFail { .. }));
    let miss = at(&|e| matches!(e, TraceEvent::Missed { .. }));
    let outcome = match (eject, fail, miss) {
        (Some((at, bin)), None, None) => Outcome::Eject { at, bin },
        (None, Some(fail_at), Some(miss_at)) => Outcome::FailThenMiss { fail_at, miss_at },
        (None, None, Some(at)) => Outcome::Miss { at },
        other => panic!("inconsistent single-token trace: {other:?}"),
    };
    Timeline {
        enter: at(&|e| matches!(e, TraceEvent::TokenEnter { .. })).expect("token entered"),
        read: at(&|e| matches!(e, TraceEvent::ColorRead { .. })).expect("color read"),
        cp_done: job(Component::CP),
        bs_done: job(Component::BS),
        ec_done: job(Component::EC),
        outcome,
    }
}
