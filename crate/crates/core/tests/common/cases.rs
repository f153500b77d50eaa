use super::{Outcome, Timeline};

pub fn cp_fault(extra: u64) -> String {
    format!(r#"{{ "target": "CP", "kind": {{ "added_latency": {{ "magnitude": {extra} }} }}, "onset": 0 }}"#)
}

pub struct Case {
    pub name: &'static str,
    pub arrival: u64,
    pub color: &'static str,
    pub faults: String,
    pub config: &'static str,
    pub expected: Timeline,
}

fn tl(enter: u64, read: u64, cp: u64, bs: u64, ec: u64, outcome: Outcome) -> Timeline {
    Timeline {
        enter,
        read,
        cp_done: cp,
        bs_done: bs,
        ec_done: ec,
        outcome,
    }
}

/// Worked by hand from the default line: 25 ms pulses, sensor at pulse 20,
/// ejectors at 24/28/32, PC 8 ms, CP 25 ms, BS and EC 10 ms, 10 ms window.
pub fn cases() -> Vec<Case> {
    use Outcome::*;
    let none = String::new;
    vec![
        Case { name: "white at t=0", arrival: 0, color: "white", faults: none(), config: "",
            expected: tl(0, 500_000, 525_000, 535_000, 545_000, Eject { at: 608_000, bin: 0 }) },
        Case { name: "red at t=0", arrival: 0, color: "red", faults: none(), config: "",
            expected: tl(0, 500_000, 525_000, 535_000, 545_000, Eject { at: 708_000, bin: 1 }) },
        Case { name: "blue at t=0", arrival: 0, color: "blue", faults: none(), config: "",
            expected: tl(0, 500_000, 525_000, 535_000, 545_000, Eject { at: 808_000, bin: 2 }) },
        Case { name: "arrival between ticks waits for the next one", arrival: 10_000, color: "white", faults: none(), config: "",
            expected: tl(25_000, 525_000, 550_000, 560_000, 570_000, Eject { at: 633_000, bin: 0 }) },
        Case { name: "arrival on a tick enters on it", arrival: 25_000, color: "red", faults: none(), config: "",
            expected: tl(25_000, 525_000, 550_000, 560_000, 570_000, Eject { at: 733_000, bin: 1 }) },
        Case { name: "one microsecond before a tick", arrival: 24_999, color: "blue", faults: none(), config: "",
            expected: tl(25_000, 525_000, 550_000, 560_000, 570_000, Eject { at: 833_000, bin: 2 }) },
        Case { name: "slow CP still inside the budget of the chain", arrival: 0, color: "white", faults: cp_fault(40_000), config: "",
            expected: tl(0, 500_000, 565_000, 575_000, 585_000, Eject { at: 608_000, bin: 0 }) },
        Case { name: "EC done just before the aligning report", arrival: 0, color: "white", faults: cp_fault(60_000), config: "",
            expected: tl(0, 500_000, 585_000, 595_000, 605_000, Eject { at: 608_000, bin: 0 }) },
        Case { name: "EC done after the report, inside the window", arrival: 0, color: "white", faults: cp_fault(64_000), config: "",
            expected: tl(0, 500_000, 589_000, 599_000, 609_000, Eject { at: 609_000, bin: 0 }) },
        Case { name: "EC done after the window closes", arrival: 0, color: "white", faults: cp_fault(66_000), config: "",
            expected: tl(0, 500_000, 591_000, 601_000, 611_000, FailThenMiss { fail_at: 611_000, miss_at: 825_000 }) },
        Case { name: "EC done after the next pulse report", arrival: 0, color: "white", faults: cp_fault(90_000), config: "",
            expected: tl(0, 500_000, 615_000, 625_000, 635_000, Miss { at: 825_000 }) },
        Case { name: "far bin absorbs a large CP delay", arrival: 0, color: "blue", faults: cp_fault(200_000), config: "",
            expected: tl(0, 500_000, 725_000, 735_000, 745_000, Eject { at: 808_000, bin: 2 }) },
        Case {
            name: "slow pulse counter fires outside the window",
            arrival: 0,
            color: "white",
            faults: r#"{ "target": "PC", "kind": { "added_latency": { "magnitude": 7000 } }, "onset": 0 }"#.into(),
            config: "",
            expected: tl(0, 500_000, 525_000, 535_000, 545_000, FailThenMiss { fail_at: 615_000, miss_at: 825_000 }),
        },
        Case {
            name: "misread sends white to the red bin",
            arrival: 0,
            color: "white",
            faults: r#"{ "target": "CP", "kind": { "color_misread": { "wrong_color": "red" } }, "onset": 0 }"#.into(),
            config: "",
            expected: tl(0, 500_000, 525_000, 535_000, 545_000, Eject { at: 708_000, bin: 1 }),
        },
        Case { name: "half-speed belt", arrival: 0, color: "white", faults: none(), config: r#""geometry": { "base_period": 50000 }"#,
            expected: tl(0, 1_000_000, 1_025_000, 1_035_000, 1_045_000, Eject { at: 1_208_000, bin: 0 }) },
    ]
}
