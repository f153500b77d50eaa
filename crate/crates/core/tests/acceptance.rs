//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `UPDATE_GOLDEN=1` rewrites the golden
//! traces before comparing.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use common::cases::cases;
use common::{golden_path, load, observed_timeline, run, single_token, SCENARIOS};
use sortline_resilience::contract::{reallocate, Demand};
use sortline_resilience::fault::{FaultKind, FaultSpec, Pattern, SplitMix64};
use sortline_resilience::message::MessageBody;
use sortline_resilience::scenario::{Arrivals, Scenario};
use sortline_resilience::sim::RunOutcome;
use sortline_resilience::trace::{TraceEvent, TraceRecord};
use sortline_resilience::{Color, Component, ContractId, Duration, Timestamp};

/// Relative tolerance on the A4 throughput ratio.
const THROUGHPUT_REL_TOL: f64 = 0.05;
/// Resource limits for every acceptance run.
const MAX_SIM_SECONDS: u64 = 60;
const MAX_TOKENS: usize = 200;
const MAX_WALL_SECONDS: f64 = 5.0;
const RANDOM_SCENARIOS: u64 = 50;

const ONSET: Timestamp = Timestamp(2_000_000);
const PULSE: u64 = 25_000;
const MSG_LATENCY: u64 = 1_000;

struct Verdict {
    failures: Vec<String>,
    facts: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict { failures: Vec::new(), facts: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    fn eq<T: PartialEq + std::fmt::Debug>(&mut self, got: T, want: T, what: &str) {
        if got != want {
            self.failures.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    }

    fn fact(&mut self, f: impl Into<String>) {
        self.facts.push(f.into());
    }
}

#[derive(Debug, Default, Clone)]
struct TokenLife {
    color: Option<Color>,
    arrival: Option<Timestamp>,
    entry: Option<Timestamp>,
    ejected: Option<(Timestamp, usize)>,
    missed: Option<Timestamp>,
}

impl TokenLife {
    fn sorted_correctly(&self) -> bool {
        matches!((self.color, self.ejected), (Some(c), Some((_, bin))) if c.bin() == bin)
    }
}

fn lives(records: &[TraceRecord]) -> BTreeMap<u64, TokenLife> {
    let mut m: BTreeMap<u64, TokenLife> = BTreeMap::new();
    for r in records {
        match &r.event {
            TraceEvent::TokenArrive { token, color } => {
                let l = m.entry(*token).or_default();
                l.color = Some(*color);
                l.arrival = Some(r.t);
            }
            TraceEvent::TokenEnter { token, .. } => m.entry(*token).or_default().entry = Some(r.t),
            TraceEvent::Eject { token, bin, .. } => m.entry(*token).or_default().ejected = Some((r.t, *bin)),
            TraceEvent::Missed { token, .. } => m.entry(*token).or_default().missed = Some(r.t),
            _ => {}
        }
    }
    m
}

fn messages(records: &[TraceRecord]) -> impl Iterator<Item = (Timestamp, &MessageBody)> {
    records.iter().filter_map(|r| match &r.event {
        TraceEvent::Message(m) => Some((r.t, &m.body)),
        _ => None,
    })
}

fn first(records: &[TraceRecord], pred: impl Fn(&TraceEvent) -> bool) -> Option<Timestamp> {
    records.iter().find(|r| pred(&r.event)).map(|r| r.t)
}

/// Runs a scenario under the resource limits.
fn timed(s: &Scenario, v: &mut Verdict) -> RunOutcome {
    let started = Instant::now();
    let out = run(s);
    let wall = started.elapsed().as_secs_f64();
    let label = s.name.clone().unwrap_or_default();
    v.check(s.duration.as_micros() <= MAX_SIM_SECONDS * 1_000_000, format!("{label}: longer than {MAX_SIM_SECONDS}s"));
    v.check(out.metrics.tokens_arrived as usize <= MAX_TOKENS, format!("{label}: more than {MAX_TOKENS} tokens"));
    v.check(wall < MAX_WALL_SECONDS, format!("{label}: took {wall:.2}s of wall clock"));
    out
}

fn with_rm(name: &str, rm: bool) -> Scenario {
    let mut s = load(name);
    s.rm_enabled = rm;
    s
}

fn a1() -> Verdict {
    let mut v = Verdict::new();
    let out = timed(&with_rm("a1_baseline", true), &mut v);
    let m = &out.metrics;
    v.eq(m.tokens_arrived, 100, "tokens");
    v.eq(m.sorted_correct, 100, "sorted_correct");
    v.eq((m.missorted, m.missed), (0, 0), "missorted, missed");
    v.eq(m.total_violations(), 0, "violations");
    v.eq(m.recoveries.total(), 0, "recoveries");
    v.fact(format!("sorted {}/100", m.sorted_correct));
    v
}

fn a2() -> Verdict {
    let mut v = Verdict::new();
    let off = timed(&with_rm("a2_pc_mode_switch", false), &mut v);
    let late: Vec<TokenLife> = lives(off.trace.records())
        .into_values()
        .filter(|l| l.arrival.is_some_and(|t| t >= ONSET))
        .collect();
    v.check(!late.is_empty(), "RM-off: no tokens after onset");
    v.check(late.iter().all(|l| l.missed.is_some()), "RM-off: a post-onset token was not Missed");

    let on = timed(&with_rm("a2_pc_mode_switch", true), &mut v);
    let rec = on.trace.records();
    let m = &on.metrics;
    v.eq(m.recoveries.mode_switch, 1, "mode switches");
    v.eq(m.recoveries.total(), 1, "recoveries");
    let switch = rec.iter().find_map(|r| match &r.event {
        TraceEvent::ModeChange { component: Component::PC, mode, latency, .. } => Some((r.t, mode.clone(), *latency)),
        _ => None,
    });
    let Some((switched_at, mode, latency)) = switch else {
        v.check(false, "no PC mode change in trace");
        return v;
    };
    v.eq(mode.as_str(), "fast", "PC mode");
    let effective = latency + Duration(7_000);
    v.check(effective <= Duration(10_000), format!("effective PC latency {effective:?} > 10 000"));
    let violation = first(rec, |e| matches!(e, TraceEvent::Violation { .. })).expect("a violation happened");
    let deadline = violation + Duration(2 * PULSE + 2 * MSG_LATENCY);
    v.check(switched_at <= deadline, format!("switch at {switched_at:?} after {deadline:?}"));
    let after: Vec<TokenLife> = lives(rec)
        .into_values()
        .filter(|l| l.entry.is_some_and(|t| t >= deadline))
        .collect();
    v.check(after.iter().all(TokenLife::sorted_correctly), "a post-recovery token was not sorted correctly");
    v.check(off.metrics.sorted_correct < m.sorted_correct, "RM-on not better than RM-off");
    v.fact(format!(
        "switch at {}us, effective PC {}us, {} post-recovery tokens sorted, RM-off {} vs RM-on {}",
        switched_at.as_micros(),
        effective.as_micros(),
        after.len(),
        off.metrics.sorted_correct,
        m.sorted_correct
    ));
    v
}

fn a3() -> Verdict {
    let mut v = Verdict::new();
    let out = timed(&with_rm("a3_slack_reallocation", true), &mut v);
    let rec = out.trace.records();
    let m = &out.metrics;
    v.eq(m.recoveries.reallocation, 1, "reallocations");
    v.eq(m.recoveries.total(), 1, "recoveries");
    let degrades = messages(rec).filter(|(_, b)| matches!(b, MessageBody::DegradeCmd { .. })).count();
    v.eq(degrades, 0, "DegradeCmds");
    let budget = |id: &str| out.final_budgets[&ContractId::from(id)].as_micros();
    v.eq([budget("CP"), budget("BS"), budget("EC")], [50_000, 15_000, 15_000], "final budgets");
    v.check(!rec.iter().any(|r| matches!(r.event, TraceEvent::SpeedChange { .. })), "speed changed");
    v.eq(m.final_speed_level, 0, "final speed level");
    let committed = first(rec, |e| matches!(e, TraceEvent::BatchCommit { .. }));
    v.check(committed.is_some(), "no budget batch committed");
    let after: Vec<TokenLife> = lives(rec)
        .into_values()
        .filter(|l| committed.is_some_and(|c| l.entry.is_some_and(|t| t >= c)))
        .collect();
    v.check(after.iter().all(TokenLife::sorted_correctly), "a post-recovery token was not sorted correctly");
    v.fact(format!("budgets CP/BS/EC = {}/{}/{}", budget("CP"), budget("BS"), budget("EC")));
    v
}

fn a4(a1_throughput: f64) -> Verdict {
    let mut v = Verdict::new();
    let out = timed(&with_rm("a4_degradation", true), &mut v);
    let rec = out.trace.records();
    let m = &out.metrics;
    let escalations: Vec<Duration> = messages(rec)
        .filter_map(|(_, b)| match b {
            MessageBody::Escalation { required_budget, .. } => Some(*required_budget),
            _ => None,
        })
        .collect();
    v.eq(escalations.len(), 1, "escalations");
    v.eq(m.recoveries.escalation, 1, "escalation recoveries");
    let levels: Vec<usize> = messages(rec)
        .filter_map(|(_, b)| match b {
            MessageBody::DegradeCmd { level } => Some(*level),
            _ => None,
        })
        .collect();
    v.eq(levels, vec![1], "DegradeCmd levels");
    // Minimality: level 0 (D = 80 000) cannot hold the demand, level 1 (D = 130 000) can.
    if let Some(&required) = escalations.first() {
        v.eq(required, Duration(105_000), "escalated demand");
        v.check(Duration(80_000) < required && required <= Duration(130_000), "level 1 is not the minimal level");
    }
    let slowed = first(rec, |e| matches!(e, TraceEvent::SpeedChange { .. }));
    let after: Vec<TokenLife> = lives(rec)
        .into_values()
        .filter(|l| slowed.is_some_and(|c| l.entry.is_some_and(|t| t >= c)))
        .collect();
    v.check(!after.is_empty(), "no tokens after the slowdown");
    v.check(after.iter().all(TokenLife::sorted_correctly), "a post-recovery token was not sorted correctly");
    let tp = m.throughput.per_second();
    let ratio = tp / a1_throughput;
    let expected = 1.0 / 1.5;
    v.check(tp < a1_throughput, "throughput did not drop");
    v.check(
        (ratio - expected).abs() <= THROUGHPUT_REL_TOL * expected,
        format!("throughput ratio {ratio:.4} outside {expected:.4} +/- {:.0}%", THROUGHPUT_REL_TOL * 100.0),
    );
    v.fact(format!("level 1, throughput {tp:.4}/s vs {a1_throughput:.4}/s, ratio {ratio:.4} (target {expected:.4})"));
    v
}

fn a5() -> Verdict {
    let mut v = Verdict::new();
    let on = timed(&with_rm("a5_safe_stop", true), &mut v);
    let rec = on.trace.records();
    let stops = messages(rec).filter(|(_, b)| matches!(b, MessageBody::StopCmd)).count();
    v.eq(stops, 1, "StopCmds");
    let halted = first(rec, |e| matches!(e, TraceEvent::BeltStop { .. }));
    v.check(halted.is_some(), "belt never halted");
    v.check(on.metrics.safe_stopped, "metrics do not report the safe stop");
    v.eq(on.metrics.recoveries.safe_stop, 1, "safe_stop count");
    if let Some(h) = halted {
        let missed_after = lives(rec).values().filter(|l| l.missed.is_some_and(|t| t > h)).count();
        v.eq(missed_after, 0, "tokens Missed after the stop");
    }
    v.check(on.metrics.not_admitted > 0, "no tokens were held back");

    let off = timed(&with_rm("a5_safe_stop", false), &mut v);
    let late: Vec<TokenLife> = lives(off.trace.records())
        .into_values()
        .filter(|l| l.arrival.is_some_and(|t| t >= ONSET))
        .collect();
    v.check(!late.is_empty() && late.iter().all(|l| l.missed.is_some()), "RM-off: a post-onset token was not Missed");
    v.fact(format!(
        "halted at {}us, {} held back; RM-off missed {}",
        halted.map_or(0, |t| t.as_micros()),
        on.metrics.not_admitted,
        off.metrics.missed
    ));
    v
}

fn random_scenarios() -> Vec<Scenario> {
    let mut rng = SplitMix64::new(0xa6a6);
    (0..RANDOM_SCENARIOS)
        .map(|i| {
            let mut s = load("a1_baseline");
            s.name = Some(format!("random_{i}"));
            s.seed = rng.next_u64();
            s.duration = Duration(20_000_000);
            s.arrivals = Arrivals::Rate { mean_interarrival: Duration(150_000 + rng.below(200_000)) };
            let faults = 1 + rng.below(2);
            s.faults = (0..faults)
                .map(|_| {
                    let target = Component::ALL[rng.below(4) as usize];
                    let kind = if target == Component::CP && rng.below(5) == 0 {
                        FaultKind::ColorMisread { wrong_color: Color::from_index(rng.below(3) as usize) }
                    } else {
                        let scale = if target == Component::PC { 12_000 } else { 250_000 };
                        FaultKind::AddedLatency { magnitude: Duration(rng.below(scale)) }
                    };
                    FaultSpec {
                        target,
                        kind,
                        onset: Timestamp(rng.below(10_000_000)),
                        duration: (rng.below(2) == 0).then(|| Duration(500_000 + rng.below(5_000_000))),
                        pattern: if rng.below(3) == 0 {
                            Pattern::Intermittent {
                                period: Duration(200_000 + rng.below(2_000_000)),
                                duty_num: 1 + rng.below(3),
                                duty_den: 4,
                            }
                        } else {
                            Pattern::Continuous
                        },
                    }
                })
                .collect();
            s
        })
        .collect()
}

fn all_scenarios() -> Vec<Scenario> {
    let mut list = Vec::new();
    for name in SCENARIOS {
        list.push(with_rm(name, true));
        list.push(with_rm(name, false));
    }
    list.extend(random_scenarios());
    list
}

fn a6() -> Verdict {
    let mut v = Verdict::new();
    let mut checks = 0;
    let mut batches = 0;
    for s in all_scenarios() {
        let out = timed(&s, &mut v);
        checks += out.refinement_checks.len();
        for c in &out.refinement_checks {
            v.check(
                c.failures.is_empty(),
                format!("{}: refinement broken at {:?} after correlation {}: {:?}", s.name.as_deref().unwrap_or("?"), c.t, c.correlation, c.failures),
            );
        }
        for r in out.trace.records() {
            if let TraceEvent::BatchCommit { refinement_ok, .. } = r.event {
                batches += 1;
                v.check(refinement_ok, "trace reports a batch that broke refinement");
            }
        }
    }
    v.check(batches > 0, "no batches were exercised");
    v.fact(format!("{checks} checks over {} scenarios, {batches} batches", 10 + RANDOM_SCENARIOS));
    v
}

fn a7() -> Verdict {
    let mut v = Verdict::new();
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut compared = 0;
    for s in all_scenarios() {
        let a = run(&s).trace.to_jsonl();
        let b = run(&s).trace.to_jsonl();
        v.check(a == b, format!("{} differs between runs", s.name.as_deref().unwrap_or("?")));
    }
    for name in &SCENARIOS[1..] {
        for rm in [true, false] {
            let text = run(&with_rm(name, rm)).trace.to_jsonl();
            let path = golden_path(&format!("{name}{}.jsonl", if rm { "" } else { "_no_rm" }));
            if update {
                fs::write(&path, &text).expect("golden directory writable");
            }
            match fs::read_to_string(&path) {
                Ok(want) => {
                    compared += 1;
                    v.check(want == text, format!("{} differs from the golden trace", path.display()));
                }
                Err(e) => v.check(false, format!("{}: {e}", path.display())),
            }
        }
    }
    v.fact(format!("{} scenarios byte-identical twice, {compared} golden traces", 10 + RANDOM_SCENARIOS));
    v
}

/// Unit-granularity search for any assignment within bounds that fits.
fn brute_feasible(parent: u64, kids: &[(u64, u64, u64)]) -> bool {
    match kids.split_first() {
        None => true,
        Some((&(d, lo, hi), rest)) => (d.max(lo)..=hi.min(parent)).any(|b| brute_feasible(parent - b, rest)),
    }
}

fn a8() -> Verdict {
    let mut v = Verdict::new();
    let mut compared = 0u64;
    let mut check = |parent: u64, kids: &[(u64, u64, u64)], v: &mut Verdict| {
        let demands: Vec<Demand> = kids
            .iter()
            .enumerate()
            .map(|(i, &(d, lo, hi))| Demand {
                contract: ContractId::new(format!("c{i}")),
                demand: Duration(d),
                min: Duration(lo),
                max: Duration(hi),
            })
            .collect();
        let got = reallocate(Duration(parent), &demands).expect("non-empty").is_feasible();
        compared += 1;
        if got != brute_feasible(parent, kids) {
            v.check(false, format!("feasibility differs for parent {parent}, children {kids:?}"));
        }
    };
    // Exhaustive over demands with open bounds.
    for parent in 0..=20 {
        for a in 0..=20 {
            check(parent, &[(a, 0, parent)], &mut v);
            for b in 0..=20 {
                check(parent, &[(a, 0, parent), (b, 0, parent)], &mut v);
                for c in 0..=20 {
                    check(parent, &[(a, 0, parent), (b, 0, parent), (c, 0, parent)], &mut v);
                }
            }
        }
    }
    // Seeded sweep with arbitrary min and max.
    let mut rng = SplitMix64::new(0xa8);
    for _ in 0..100_000 {
        let parent = rng.below(21);
        let n = 1 + rng.below(3) as usize;
        let kids: Vec<(u64, u64, u64)> = (0..n).map(|_| (rng.below(21), rng.below(21), rng.below(21))).collect();
        check(parent, &kids, &mut v);
    }

    let table = cases();
    v.check(table.len() >= 10, "fewer than 10 timeline cases");
    for c in &table {
        let out = run(&single_token(c.arrival, c.color, &c.faults, c.config));
        let got = observed_timeline(out.trace.records());
        if got != c.expected {
            v.check(false, format!("timeline `{}`: got {got:?}, want {:?}", c.name, c.expected));
        }
    }
    v.fact(format!("{compared} allocation cases, {} timelines", table.len()));
    v
}

fn main() {
    let started = Instant::now();
    let a1_out = run(&with_rm("a1_baseline", true));
    type Criterion = (&'static str, &'static str, Box<dyn Fn() -> Verdict>);
    let criteria: Vec<Criterion> = vec![
        ("A1", "no-fault baseline", Box::new(a1)),
        ("A2", "PC mode switch", Box::new(a2)),
        ("A3", "slack reallocation", Box::new(a3)),
        ("A4", "degradation", Box::new(move || a4(a1_out.metrics.throughput.per_second()))),
        ("A5", "safe stop", Box::new(a5)),
        ("A6", "refinement safety", Box::new(a6)),
        ("A7", "determinism and golden traces", Box::new(a7)),
        ("A8", "oracle equivalence", Box::new(a8)),
    ];
    let mut failed = 0;
    for (id, title, f) in criteria {
        let v = f();
        let status = if v.failures.is_empty() { "PASS" } else { "FAIL" };
        println!("{id} {status} {title}: {}", v.facts.join("; "));
        for why in &v.failures {
            println!("    {why}");
        }
        failed += usize::from(!v.failures.is_empty());
    }
    println!("acceptance: {} of 8 passed in {:.2}s", 8 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
