//! Declarative fault injection and seeded arrival generation.
//!
//! Faults are applied to plant components at simulated times. Latency faults
//! targeting the same component add up while simultaneously active.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Color, Component};
use crate::plant::Plant;
use crate::time::{Duration, Timestamp};
use crate::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("fault {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("mean inter-arrival time must be positive")]
    ZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultKind {
    AddedLatency { magnitude: Duration },
    ColorMisread { wrong_color: Color },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    #[default]
    Continuous,
    /// Active for the first `period * duty` of every period, counted from onset.
    Intermittent {
        period: Duration,
        duty_num: u64,
        duty_den: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub target: Component,
    pub kind: FaultKind,
    pub onset: Timestamp,
    /// Absent means permanent.
    #[serde(default)]
    pub duration: Option<Duration>,
    #[serde(default)]
    pub pattern: Pattern,
}

impl FaultSpec {
    pub fn validate(&self, index: usize) -> Result<(), FaultError> {
        let bad = |reason: &str| FaultError::Invalid {
            index,
            reason: reason.to_owned(),
        };
        if let FaultKind::ColorMisread { .. } = self.kind {
            if self.target != Component::CP {
                return Err(bad("color_misread can only target CP"));
            }
        }
        if self.duration == Some(Duration::ZERO) {
            return Err(bad("duration must be positive when present"));
        }
        if let Pattern::Intermittent {
            period,
            duty_num,
            duty_den,
        } = self.pattern
        {
            if period == Duration::ZERO {
                return Err(bad("intermittent period must be positive"));
            }
            if duty_num == 0 || duty_den == 0 || duty_num > duty_den {
                return Err(bad("duty must lie in (0, 1]"));
            }
            if period.mul_ratio(duty_num, duty_den) == Duration::ZERO {
                return Err(bad("active part of the duty cycle rounds to zero"));
            }
        }
        Ok(())
    }

    fn end(&self) -> Option<Timestamp> {
        self.duration.map(|d| self.onset + d)
    }

    pub fn is_active(&self, now: Timestamp) -> bool {
        if now < self.onset || self.end().is_some_and(|end| now >= end) {
            return false;
        }
        match self.pattern {
            Pattern::Continuous => true,
            Pattern::Intermittent {
                period,
                duty_num,
                duty_den,
            } => {
                let phase = (now.as_micros() - self.onset.as_micros()) % period.as_micros();
                phase < period.mul_ratio(duty_num, duty_den).as_micros()
            }
        }
    }

    /// Instants in `[0, horizon)` at which this fault may switch state.
    pub fn transitions(&self, horizon: Timestamp) -> Vec<Timestamp> {
        let mut out = Vec::new();
        let stop = self.end().map_or(horizon, |e| e.min(horizon));
        match self.pattern {
            Pattern::Continuous => out.push(self.onset),
            Pattern::Intermittent {
                period,
                duty_num,
                duty_den,
            } => {
                let on = period.mul_ratio(duty_num, duty_den);
                let mut start = self.onset;
                while start < stop {
                    out.push(start);
                    out.push(start + on);
                    start += period;
                }
            }
        }
        if let Some(end) = self.end() {
            out.push(end);
        }
        out.retain(|t| *t < horizon);
        out
    }
}

/// Tracks which faults are active and pushes their combined effect into the plant.
#[derive(Debug, Clone)]
pub struct FaultInjector {
    specs: Vec<FaultSpec>,
    active: Vec<bool>,
}

impl FaultInjector {
    pub fn new(specs: Vec<FaultSpec>) -> Self {
        let active = vec![false; specs.len()];
        FaultInjector { specs, active }
    }

    pub fn specs(&self) -> &[FaultSpec] {
        &self.specs
    }

    /// Every instant at which some fault may change state, sorted and deduplicated.
    pub fn transition_times(&self, horizon: Timestamp) -> Vec<Timestamp> {
        let mut all: Vec<Timestamp> = self.specs.iter().flat_map(|s| s.transitions(horizon)).collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// Brings the plant in line with the faults active at `now`. Emits
    /// `fault_on`/`fault_off` only for faults that changed state.
    pub fn apply_faults(&mut self, plant: &mut Plant, now: Timestamp) -> Vec<TraceEvent> {
        let mut events = Vec::new();
        for (i, spec) in self.specs.iter().enumerate() {
            let on = spec.is_active(now);
            if on != self.active[i] {
                self.active[i] = on;
                events.push(if on {
                    TraceEvent::FaultOn {
                        fault: i,
                        target: spec.target,
                        effect: spec.kind,
                    }
                } else {
                    TraceEvent::FaultOff {
                        fault: i,
                        target: spec.target,
                    }
                });
            }
        }
        for component in Component::ALL {
            let delay = self
                .active_specs()
                .filter(|s| s.target == component)
                .filter_map(|s| match s.kind {
                    FaultKind::AddedLatency { magnitude } => Some(magnitude),
                    FaultKind::ColorMisread { .. } => None,
                })
                .sum();
            plant.set_fault_delay(component, delay);
        }
        let misread = self.active_specs().find_map(|s| match s.kind {
            FaultKind::ColorMisread { wrong_color } => Some(wrong_color),
            FaultKind::AddedLatency { .. } => None,
        });
        plant.set_misread(misread);
        events
    }

    fn active_specs(&self) -> impl Iterator<Item = &FaultSpec> {
        self.specs
            .iter()
            .zip(&self.active)
            .filter_map(|(s, on)| on.then_some(s))
    }
}

/// SplitMix64 (Steele, Lea and Flood), the stream behind all seeded draws.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, n)` by modulo reduction.
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

/// `ln 2` in Q32.32, rounded to nearest.
const LN2_Q32: u128 = 2_977_044_472;

/// `log2(r)` for `r >= 1` in Q32.32, by normalise-and-square. Integer only.
fn log2_q32(r: u64) -> u64 {
    debug_assert!(r >= 1);
    let k = 63 - r.leading_zeros() as u64;
    let one = 1u128 << 32;
    let mut m = ((r as u128) << 32) >> k;
    let mut frac = 0u64;
    for i in 1..=32 {
        m = (m * m) >> 32;
        if m >= 2 * one {
            m >>= 1;
            frac |= 1 << (32 - i);
        }
    }
    (k << 32) | frac
}

/// Exponential inter-arrival with the given mean, from one 64-bit draw.
///
/// `u = (x >> 32 + 1) / 2^32` lies in `(0, 1]`; the gap is `mean * -ln(u)`
/// computed in Q32.32 fixed point and floored, with a floor of 1us so that
/// arrival times strictly increase.
pub fn exponential_gap(x: u64, mean: Duration) -> Duration {
    let r = (x >> 32) + 1;
    let neg_log2 = (32u128 << 32) - log2_q32(r) as u128;
    let neg_ln = (neg_log2 * LN2_Q32) >> 32;
    let gap = (mean.as_micros() as u128 * neg_ln) >> 32;
    Duration((gap as u64).max(1))
}

/// Seeded Poisson arrivals over `[0, duration)` with uniform colors.
///
/// Per arrival: one draw for the gap ([`exponential_gap`]), then one draw for
/// the color (`x % 3` indexing white, red, blue).
pub fn generate_arrivals(
    seed: u64,
    mean_interarrival: Duration,
    duration: Duration,
) -> Result<Vec<(Timestamp, Color)>, FaultError> {
    if mean_interarrival == Duration::ZERO {
        return Err(FaultError::ZeroMean);
    }
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    let mut t = Timestamp::ZERO;
    loop {
        t += exponential_gap(rng.next_u64(), mean_interarrival);
        if t.as_micros() >= duration.as_micros() {
            break;
        }
        let color = Color::from_index(rng.below(3) as usize);
        out.push((t, color));
    }
    Ok(out)
}
