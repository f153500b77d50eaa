mod common;

use common::{load, run, run_named, SCENARIOS};
use proptest::prelude::*;
use sortline_resilience::fault::{FaultKind, FaultSpec, Pattern};
use sortline_resilience::metrics::Metrics;
use sortline_resilience::scenario::{Arrivals, Scenario};
use sortline_resilience::trace::{read_jsonl, TraceRecord};
use sortline_resilience::{Component, Duration, Timestamp};

fn check_ordering(records: &[TraceRecord]) {
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.seq, i as u64, "seq is dense from 0");
    }
    for w in records.windows(2) {
        assert!(w[0].t <= w[1].t, "time never goes back: {:?} then {:?}", w[0], w[1]);
    }
}

fn check_conservation(m: &Metrics) {
    assert_eq!(m.tokens_in, m.sorted_correct + m.missorted + m.missed + m.in_flight);
    assert_eq!(m.tokens_arrived, m.tokens_in + m.not_admitted);
}

#[test]
fn reducer_agrees_with_simulator_on_bundled_scenarios() {
    for name in SCENARIOS {
        for rm in [false, true] {
            let out = run_named(name, rm);
            check_ordering(out.trace.records());
            check_conservation(&out.metrics);
            assert_eq!(Metrics::from_trace(out.trace.records()), out.metrics, "{name} rm={rm}");
        }
    }
}

#[test]
fn jsonl_round_trips_and_keys_are_ordered() {
    let out = run_named("a4_degradation", true);
    let text = out.trace.to_jsonl();
    for line in text.lines() {
        assert!(line.starts_with("{\"t\":"), "{line}");
        let seq = line.find(",\"seq\":").unwrap();
        let kind = line.find(",\"kind\":").unwrap();
        let payload = line.find(",\"payload\":").unwrap();
        assert!(seq < kind && kind < payload, "{line}");
    }
    let back = read_jsonl(text.as_bytes()).unwrap();
    assert_eq!(back, out.trace.records());
    assert_eq!(Metrics::from_trace(&back), out.metrics);
}

#[test]
fn same_input_same_bytes() {
    for name in SCENARIOS {
        let a = run_named(name, true).trace.to_jsonl();
        let b = run_named(name, true).trace.to_jsonl();
        assert!(a == b, "{name} is not deterministic");
    }
}

#[test]
fn no_fault_runs_ignore_the_rm_switch() {
    let on = run_named("a1_baseline", true);
    let off = run_named("a1_baseline", false);
    assert_eq!(on.metrics, off.metrics);
}

#[test]
fn empty_run_has_only_bookends() {
    let mut s = load("a1_baseline");
    s.duration = Duration::ZERO;
    let out = run(&s);
    let kinds: Vec<String> = out
        .trace
        .to_jsonl()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds, ["run_start", "run_end"]);
    assert_eq!(out.metrics.tokens_in, 0);
}

fn random_scenario(seed: u64, target: usize, magnitude: u64, onset: u64, intermittent: bool) -> Scenario {
    let mut s = load("a1_baseline");
    s.seed = seed;
    s.duration = Duration(20_000_000);
    s.arrivals = Arrivals::Rate { mean_interarrival: Duration(250_000) };
    s.faults = vec![FaultSpec {
        target: Component::ALL[target],
        kind: FaultKind::AddedLatency { magnitude: Duration(magnitude) },
        onset: Timestamp(onset),
        duration: None,
        pattern: if intermittent {
            Pattern::Intermittent { period: Duration(1_000_000), duty_num: 1, duty_den: 2 }
        } else {
            Pattern::Continuous
        },
    }];
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reducer_agrees_on_random_faults(
        seed in any::<u64>(),
        target in 0usize..4,
        magnitude in 0u64..150_000,
        onset in 0u64..5_000_000,
        intermittent in any::<bool>(),
        rm in any::<bool>(),
    ) {
        let mut s = random_scenario(seed, target, magnitude, onset, intermittent);
        s.rm_enabled = rm;
        let out = run(&s);
        check_ordering(out.trace.records());
        check_conservation(&out.metrics);
        prop_assert_eq!(Metrics::from_trace(out.trace.records()), out.metrics.clone());
        prop_assert_eq!(out.refinement_failures(), 0);
    }
}
