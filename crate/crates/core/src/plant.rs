//! The sorting line: belt kinematics in pulses, token lifecycle and the four
//! timed components.
//!
//! Token flow: arrival at the feeder, admission at LS1 on a pulse tick, color
//! read `S` pulses later, then CP, BS and EC jobs in sequence. Every tick also
//! releases a PC job that reports the pulse count to EC after PC's latency.
//! EC fires when the reported count equals the token's target pulse, so a slow
//! PC pushes the fire time past the ejection window.
//!
//! Each component is a FIFO single server; queueing delay counts toward the
//! response time its observer measures.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Color, Component};
use crate::time::{Duration, Timestamp};
use crate::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlantError {
    #[error("geometry infeasible: (E[1] - S) * period {span} is below the actuation margin {margin}")]
    NegativeBudget { span: Duration, margin: Duration },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid speed table: {0}")]
    SpeedTable(String),
    #[error("component {0} has no modes")]
    NoModes(Component),
    #[error("component {component} has no mode `{mode}`")]
    UnknownMode { component: Component, mode: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineGeometry {
    /// Pulses from LS1 to the color sensor.
    pub sensor_pulse: u64,
    /// Pulses from LS1 to each ejector, bins white/red/blue.
    pub ejector_pulses: [u64; 3],
    pub eject_window: Duration,
    pub actuation_margin: Duration,
    pub base_period: Duration,
    /// Minimum pulses between two admissions at LS1.
    pub admit_gap_pulses: u64,
}

impl Default for LineGeometry {
    fn default() -> Self {
        LineGeometry {
            sensor_pulse: 20,
            ejector_pulses: [24, 28, 32],
            eject_window: Duration(10_000),
            actuation_margin: Duration(20_000),
            base_period: Duration(25_000),
            admit_gap_pulses: 8,
        }
    }
}

impl LineGeometry {
    pub fn validate(&self) -> Result<(), PlantError> {
        let e = self.ejector_pulses;
        if self.sensor_pulse == 0 {
            return Err(PlantError::Geometry("sensor_pulse must be positive".into()));
        }
        if !(e[0] < e[1] && e[1] < e[2]) {
            return Err(PlantError::Geometry("ejector pulses must strictly increase".into()));
        }
        if self.base_period == Duration::ZERO {
            return Err(PlantError::Geometry("base_period must be positive".into()));
        }
        if self.admit_gap_pulses == 0 {
            return Err(PlantError::Geometry("admit_gap_pulses must be positive".into()));
        }
        Ok(())
    }

    /// The pulse at which a token is declared missed.
    pub fn miss_pulse(&self) -> u64 {
        self.ejector_pulses[2] + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedLevel {
    pub index: usize,
    pub period_multiplier_num: u64,
    pub period_multiplier_den: u64,
}

/// ×1, ×3/2, ×2 pulse period.
pub fn default_speed_levels() -> Vec<SpeedLevel> {
    [(1, 1), (3, 2), (2, 1)]
        .into_iter()
        .enumerate()
        .map(|(index, (num, den))| SpeedLevel {
            index,
            period_multiplier_num: num,
            period_multiplier_den: den,
        })
        .collect()
}

pub fn validate_speed_levels(levels: &[SpeedLevel]) -> Result<(), PlantError> {
    if levels.is_empty() {
        return Err(PlantError::SpeedTable("at least one level required".into()));
    }
    for (i, l) in levels.iter().enumerate() {
        if l.index != i {
            return Err(PlantError::SpeedTable(format!("level {i} has index {}", l.index)));
        }
        if l.period_multiplier_den == 0 || l.period_multiplier_num == 0 {
            return Err(PlantError::SpeedTable(format!("level {i} has a zero term")));
        }
    }
    for w in levels.windows(2) {
        // a/b < c/d  <=>  a*d < c*b
        let lhs = w[0].period_multiplier_num as u128 * w[1].period_multiplier_den as u128;
        let rhs = w[1].period_multiplier_num as u128 * w[0].period_multiplier_den as u128;
        if lhs >= rhs {
            return Err(PlantError::SpeedTable("multipliers must strictly increase".into()));
        }
    }
    Ok(())
}

pub fn pulse_period(geometry: &LineGeometry, level: &SpeedLevel) -> Duration {
    geometry
        .base_period
        .mul_ratio(level.period_multiplier_num, level.period_multiplier_den)
}

/// Time the CP→BS→EC chain has between the color read and the first ejector,
/// less the actuation margin.
pub fn end_to_end_budget(geometry: &LineGeometry, level: &SpeedLevel) -> Result<Duration, PlantError> {
    let pulses = geometry.ejector_pulses[0].saturating_sub(geometry.sensor_pulse);
    let span = pulse_period(geometry, level).times(pulses);
    span.checked_sub(geometry.actuation_margin)
        .filter(|_| pulses > 0)
        .ok_or(PlantError::NegativeBudget {
            span,
            margin: geometry.actuation_margin,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub name: String,
    pub latency: Duration,
    /// Mode trades accuracy for speed (recorded in the trace, not modeled).
    #[serde(default)]
    pub coarse: bool,
}

/// Default behavior modes; the first mode of each list is the initial one.
pub fn default_modes() -> BTreeMap<Component, Vec<Mode>> {
    let mode = |name: &str, us: u64, coarse: bool| Mode {
        name: name.into(),
        latency: Duration(us),
        coarse,
    };
    BTreeMap::from([
        (Component::PC, vec![mode("accurate", 8_000, false), mode("fast", 3_000, true)]),
        (Component::CP, vec![mode("normal", 25_000, false)]),
        (Component::BS, vec![mode("normal", 10_000, false)]),
        (Component::EC, vec![mode("normal", 10_000, false)]),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Job {
    id: u64,
    token: Option<usize>,
    pulse: Option<u64>,
    release: Timestamp,
}

#[derive(Debug, Clone)]
pub struct ComponentProc {
    pub name: Component,
    modes: Vec<Mode>,
    active_mode: usize,
    fault_delay: Duration,
    queue: VecDeque<Job>,
    busy: Option<Job>,
}

impl ComponentProc {
    fn new(name: Component, modes: Vec<Mode>) -> Result<Self, PlantError> {
        if modes.is_empty() {
            return Err(PlantError::NoModes(name));
        }
        Ok(ComponentProc {
            name,
            modes,
            active_mode: 0,
            fault_delay: Duration::ZERO,
            queue: VecDeque::new(),
            busy: None,
        })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn active_mode(&self) -> &Mode {
        &self.modes[self.active_mode]
    }

    pub fn fault_delay(&self) -> Duration {
        self.fault_delay
    }

    pub fn effective_latency(&self) -> Duration {
        self.active_mode().latency + self.fault_delay
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len() + usize::from(self.busy.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenState {
    /// Arrived, waiting at the feeder.
    Waiting,
    OnBelt,
    Ejected { bin: usize },
    Missed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u64,
    pub color: Color,
    pub arrival: Timestamp,
    pub entry_pulse: Option<u64>,
    pub entry_time: Option<Timestamp>,
    pub captured: Option<Color>,
    pub misread: bool,
    pub bin: Option<usize>,
    pub decided: bool,
    pub state: TokenState,
    pub finished_at: Option<Timestamp>,
}

impl Token {
    fn target_pulse(&self, geometry: &LineGeometry) -> Option<u64> {
        Some(self.entry_pulse? + geometry.ejector_pulses[self.bin?])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BeltState {
    pub pulse_period: Duration,
    pub pulse_count: u64,
    pub running: bool,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantEvent {
    Tick(u64),
    Arrival(usize),
    JobDone(Component),
}

pub trait Scheduler {
    fn schedule(&mut self, at: Timestamp, event: PlantEvent);
}

/// A finished job, handed to the component's observer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobReport {
    pub component: Component,
    pub job_id: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub assumption_held: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EjectOutcome {
    Ejected(usize),
    /// Fired outside the window; the token keeps moving.
    Missed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeedChange {
    pub from: usize,
    pub to: usize,
    pub pulse_period: Duration,
}

#[derive(Debug, Clone)]
pub struct Plant {
    geometry: LineGeometry,
    speeds: Vec<SpeedLevel>,
    belt: BeltState,
    tokens: Vec<Token>,
    on_belt: Vec<usize>,
    feeder: VecDeque<usize>,
    last_admit: Option<u64>,
    admitting: bool,
    tick_times: Vec<Timestamp>,
    components: BTreeMap<Component, ComponentProc>,
    ec_latest: Option<u64>,
    misread: Option<Color>,
    next_job: u64,
}

impl Plant {
    pub fn new(
        geometry: LineGeometry,
        speeds: Vec<SpeedLevel>,
        modes: BTreeMap<Component, Vec<Mode>>,
        arrivals: &[(Timestamp, Color)],
    ) -> Result<Self, PlantError> {
        geometry.validate()?;
        validate_speed_levels(&speeds)?;
        for level in &speeds {
            end_to_end_budget(&geometry, level)?;
        }
        let mut components = BTreeMap::new();
        for c in Component::ALL {
            let m = modes.get(&c).cloned().unwrap_or_default();
            components.insert(c, ComponentProc::new(c, m)?);
        }
        let tokens = arrivals
            .iter()
            .enumerate()
            .map(|(i, &(arrival, color))| Token {
                id: i as u64,
                color,
                arrival,
                entry_pulse: None,
                entry_time: None,
                captured: None,
                misread: false,
                bin: None,
                decided: false,
                state: TokenState::Waiting,
                finished_at: None,
            })
            .collect();
        let belt = BeltState {
            pulse_period: pulse_period(&geometry, &speeds[0]),
            pulse_count: 0,
            running: true,
            level: 0,
        };
        Ok(Plant {
            geometry,
            speeds,
            belt,
            tokens,
            on_belt: Vec::new(),
            feeder: VecDeque::new(),
            last_admit: None,
            admitting: true,
            tick_times: Vec::new(),
            components,
            ec_latest: None,
            misread: None,
            next_job: 0,
        })
    }

    /// Schedules all arrivals, then the first pulse tick at t=0. Arrivals at
    /// a tick instant are therefore seen by that tick.
    pub fn start(&mut self, sched: &mut impl Scheduler) {
        for (i, t) in self.tokens.iter().enumerate() {
            sched.schedule(t.arrival, PlantEvent::Arrival(i));
        }
        sched.schedule(Timestamp::ZERO, PlantEvent::Tick(0));
    }

    pub fn geometry(&self) -> &LineGeometry {
        &self.geometry
    }

    pub fn speed_levels(&self) -> &[SpeedLevel] {
        &self.speeds
    }

    pub fn belt(&self) -> &BeltState {
        &self.belt
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn component(&self, c: Component) -> &ComponentProc {
        &self.components[&c]
    }

    pub fn components(&self) -> &BTreeMap<Component, ComponentProc> {
        &self.components
    }

    pub fn tick_time(&self, pulse: u64) -> Option<Timestamp> {
        self.tick_times.get(pulse as usize).copied()
    }

    pub fn queued(&self) -> usize {
        self.feeder.len()
    }

    pub fn end_to_end_budget(&self) -> Duration {
        end_to_end_budget(&self.geometry, &self.speeds[self.belt.level]).expect("validated at construction")
    }

    pub fn set_fault_delay(&mut self, c: Component, delay: Duration) {
        self.components.get_mut(&c).expect("all components exist").fault_delay = delay;
    }

    pub fn set_misread(&mut self, wrong: Option<Color>) {
        self.misread = wrong;
    }

    pub fn handle(
        &mut self,
        now: Timestamp,
        event: PlantEvent,
        sched: &mut impl Scheduler,
        out: &mut Vec<TraceEvent>,
    ) -> Option<JobReport> {
        match event {
            PlantEvent::Tick(pulse) => {
                self.on_tick(now, pulse, sched, out);
                None
            }
            PlantEvent::Arrival(i) => {
                let t = &self.tokens[i];
                out.push(TraceEvent::TokenArrive {
                    token: t.id,
                    color: t.color,
                });
                self.feeder.push_back(i);
                None
            }
            PlantEvent::JobDone(c) => Some(self.on_job_done(now, c, sched, out)),
        }
    }

    fn on_tick(&mut self, now: Timestamp, pulse: u64, sched: &mut impl Scheduler, out: &mut Vec<TraceEvent>) {
        if !self.belt.running {
            return;
        }
        self.belt.pulse_count = pulse;
        debug_assert_eq!(self.tick_times.len() as u64, pulse);
        self.tick_times.push(now);

        self.release(now, Component::PC, None, Some(pulse), sched);

        let miss_at = self.geometry.miss_pulse();
        let sensor = self.geometry.sensor_pulse;
        let mut still = Vec::with_capacity(self.on_belt.len());
        for i in std::mem::take(&mut self.on_belt) {
            let entry = self.tokens[i].entry_pulse.expect("on-belt tokens have entered");
            let rel = pulse - entry;
            if rel == miss_at {
                let tok = &mut self.tokens[i];
                tok.state = TokenState::Missed;
                tok.finished_at = Some(now);
                out.push(TraceEvent::Missed { token: tok.id, pulse });
                continue;
            }
            if rel == sensor {
                let tok = &mut self.tokens[i];
                tok.captured = Some(self.misread.unwrap_or(tok.color));
                tok.misread = self.misread.is_some();
                out.push(TraceEvent::ColorRead {
                    token: tok.id,
                    captured: tok.captured.unwrap(),
                    misread: tok.misread,
                });
                self.release(now, Component::CP, Some(i), None, sched);
            }
            still.push(i);
        }
        self.on_belt = still;

        let gap_ok = self
            .last_admit
            .is_none_or(|last| pulse - last >= self.geometry.admit_gap_pulses);
        if self.admitting && gap_ok {
            if let Some(i) = self.feeder.pop_front() {
                let tok = &mut self.tokens[i];
                tok.entry_pulse = Some(pulse);
                tok.entry_time = Some(now);
                tok.state = TokenState::OnBelt;
                self.last_admit = Some(pulse);
                self.on_belt.push(i);
                out.push(TraceEvent::TokenEnter { token: tok.id, pulse });
            }
        }

        sched.schedule(now + self.belt.pulse_period, PlantEvent::Tick(pulse + 1));
    }

    fn release(
        &mut self,
        now: Timestamp,
        c: Component,
        token: Option<usize>,
        pulse: Option<u64>,
        sched: &mut impl Scheduler,
    ) {
        let id = self.next_job;
        self.next_job += 1;
        let proc = self.components.get_mut(&c).expect("all components exist");
        proc.queue.push_back(Job {
            id,
            token,
            pulse,
            release: now,
        });
        Self::start_next(proc, now, sched);
    }

    fn start_next(proc: &mut ComponentProc, now: Timestamp, sched: &mut impl Scheduler) {
        if proc.busy.is_some() {
            return;
        }
        if let Some(job) = proc.queue.pop_front() {
            sched.schedule(now + proc.effective_latency(), PlantEvent::JobDone(proc.name));
            proc.busy = Some(job);
        }
    }

    fn on_job_done(
        &mut self,
        now: Timestamp,
        c: Component,
        sched: &mut impl Scheduler,
        out: &mut Vec<TraceEvent>,
    ) -> JobReport {
        let proc = self.components.get_mut(&c).expect("all components exist");
        let job = proc.busy.take().expect("job completion without a running job");
        Self::start_next(proc, now, sched);

        let mut assumption_held = true;
        match (c, job.token, job.pulse) {
            (Component::PC, _, Some(count)) => {
                self.ec_latest = Some(count);
                let ready: Vec<usize> = self
                    .on_belt
                    .iter()
                    .copied()
                    .filter(|&i| {
                        let t = &self.tokens[i];
                        t.decided && t.target_pulse(&self.geometry) == Some(count)
                    })
                    .collect();
                for i in ready {
                    let bin = self.tokens[i].bin.expect("decided tokens have a bin");
                    self.attempt_eject(i, bin, now, out);
                }
            }
            (_, Some(i), _) => {
                let tok = &mut self.tokens[i];
                match c {
                    Component::BS => {
                        assumption_held = !tok.misread;
                        tok.bin = tok.captured.map(Color::bin);
                    }
                    Component::EC => tok.decided = true,
                    _ => {}
                }
                out.push(TraceEvent::JobDone {
                    component: c,
                    job: job.id,
                    token: tok.id,
                    start: job.release,
                    end: now,
                });
                match c {
                    Component::CP => self.release(now, Component::BS, Some(i), None, sched),
                    Component::BS => self.release(now, Component::EC, Some(i), None, sched),
                    Component::EC => {
                        let tok = &self.tokens[i];
                        if tok.state == TokenState::OnBelt
                            && self.ec_latest.is_some()
                            && tok.target_pulse(&self.geometry) == self.ec_latest
                        {
                            let bin = tok.bin.expect("decided tokens have a bin");
                            self.attempt_eject(i, bin, now, out);
                        }
                    }
                    Component::PC => unreachable!("PC jobs carry a pulse"),
                }
            }
            _ => unreachable!("job without token or pulse"),
        }
        JobReport {
            component: c,
            job_id: job.id,
            start: job.release,
            end: now,
            assumption_held,
        }
    }

    /// Fires the ejector of `bin` at `fire_time` for token `i`.
    ///
    /// Succeeds iff the token reached the ejector no later than `fire_time`
    /// and at most `eject_window` earlier.
    pub fn attempt_eject(
        &mut self,
        i: usize,
        bin: usize,
        fire_time: Timestamp,
        out: &mut Vec<TraceEvent>,
    ) -> EjectOutcome {
        let tok = &self.tokens[i];
        debug_assert_eq!(tok.state, TokenState::OnBelt);
        let target = tok.entry_pulse.expect("on belt") + self.geometry.ejector_pulses[bin];
        let t_align = self.tick_time(target).expect("alignment pulse has been reached");
        let in_window = t_align <= fire_time && fire_time <= t_align + self.geometry.eject_window;
        let id = tok.id;
        if in_window {
            let tok = &mut self.tokens[i];
            tok.state = TokenState::Ejected { bin };
            tok.finished_at = Some(fire_time);
            self.on_belt.retain(|&j| j != i);
            out.push(TraceEvent::Eject { token: id, bin, t_align });
            EjectOutcome::Ejected(bin)
        } else {
            out.push(TraceEvent::EjectFail { token: id, bin, t_align });
            EjectOutcome::Missed
        }
    }

    /// Changes the pulse period from the next tick onward. Setting the current
    /// level is a no-op that still reports the change.
    pub fn set_speed(&mut self, level: usize) -> Result<SpeedChange, PlantError> {
        let spec = self
            .speeds
            .get(level)
            .ok_or_else(|| PlantError::SpeedTable(format!("no level {level}")))?;
        let from = self.belt.level;
        self.belt.level = level;
        self.belt.pulse_period = pulse_period(&self.geometry, spec);
        Ok(SpeedChange {
            from,
            to: level,
            pulse_period: self.belt.pulse_period,
        })
    }

    /// Safe stop: the belt halts and the feeder stops admitting.
    pub fn halt(&mut self) -> TraceEvent {
        self.belt.running = false;
        self.admitting = false;
        TraceEvent::BeltStop {
            on_belt: self.on_belt.len() as u64,
            queued: self.feeder.len() as u64,
        }
    }

    pub fn switch_mode(&mut self, c: Component, mode: &str) -> Result<TraceEvent, PlantError> {
        let proc = self.components.get_mut(&c).expect("all components exist");
        let idx = proc
            .modes
            .iter()
            .position(|m| m.name == mode)
            .ok_or_else(|| PlantError::UnknownMode {
                component: c,
                mode: mode.to_owned(),
            })?;
        proc.active_mode = idx;
        let m = &proc.modes[idx];
        Ok(TraceEvent::ModeChange {
            component: c,
            mode: m.name.clone(),
            latency: m.latency,
            coarse_counting: m.coarse,
        })
    }
}
