//! The event loop.
//!
//! Events are totally ordered by `(timestamp, insertion sequence)`. The plant,
//! the observers and the RMs never call each other directly: job completions
//! go to observers, reports and commands travel through the message layer,
//! and every delivery is acknowledged by its receiver.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::contract::ContractTree;
use crate::fault::FaultInjector;
use crate::ids::{Component, ContractId, RmId};
use crate::message::{Endpoint, MessageBody, MessageLayer, RmMessage};
use crate::metrics::{Metrics, Throughput};
use crate::observer::Observer;
use crate::plant::{Plant, PlantError, PlantEvent, Scheduler, TokenState};
use crate::rm::{Decision, Escalation, ResilienceManager, SystemView};
use crate::scenario::SimConfig;
use crate::time::{Duration, Timestamp};
use crate::trace::{BudgetEntry, Trace, TraceEvent};

#[derive(Debug, Clone)]
enum Event {
    Fault,
    Plant(PlantEvent),
    Deliver(Box<RmMessage>),
}

#[derive(Debug)]
struct Entry {
    at: Timestamp,
    seq: u64,
    event: Event,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest entry.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Entry>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, at: Timestamp, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, event });
    }

    fn peek_time(&self) -> Option<Timestamp> {
        self.heap.peek().map(|e| e.at)
    }

    fn pop(&mut self) -> Option<Entry> {
        self.heap.pop()
    }
}

impl Scheduler for EventQueue {
    fn schedule(&mut self, at: Timestamp, event: PlantEvent) {
        self.push(at, Event::Plant(event));
    }
}

/// One refinement check, taken after a budget batch or speed change lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementCheck {
    pub t: Timestamp,
    pub correlation: u64,
    pub failures: Vec<ContractId>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub metrics: Metrics,
    pub refinement_checks: Vec<RefinementCheck>,
    pub final_budgets: BTreeMap<ContractId, Duration>,
}

impl RunOutcome {
    pub fn refinement_failures(&self) -> usize {
        self.refinement_checks.iter().filter(|c| !c.failures.is_empty()).count()
    }
}

pub struct Simulation {
    seed: u64,
    duration: Duration,
    rm_enabled: bool,
    now: Timestamp,
    queue: EventQueue,
    plant: Plant,
    contracts: ContractTree,
    observers: BTreeMap<ContractId, Observer>,
    rms: BTreeMap<RmId, ResilienceManager>,
    layer: MessageLayer,
    faults: FaultInjector,
    trace: Trace,
    next_correlation: u64,
    staged: BTreeMap<u64, Vec<(ContractId, Duration)>>,
    violations: BTreeMap<String, u64>,
    recoveries: crate::metrics::Recoveries,
    degraded_since: Option<Timestamp>,
    time_degraded: Duration,
    checks: Vec<RefinementCheck>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, PlantError> {
        let plant = Plant::new(cfg.geometry, cfg.speed_levels, cfg.modes, &cfg.arrivals)?;
        let observers = cfg
            .contracts
            .nodes()
            .into_iter()
            .filter(|n| n.contract.component.is_some())
            .map(|n| (n.contract.id.clone(), Observer::new(n.contract.id.clone(), cfg.observer)))
            .collect();
        let rms = cfg
            .rms
            .into_iter()
            .map(|n| (n.id.clone(), ResilienceManager::new(n)))
            .collect();
        let mut sim = Simulation {
            seed: cfg.seed,
            duration: cfg.duration,
            rm_enabled: cfg.rm_enabled,
            now: Timestamp::ZERO,
            queue: EventQueue::default(),
            plant,
            contracts: cfg.contracts,
            observers,
            rms,
            layer: MessageLayer::new(cfg.msg_latency),
            faults: FaultInjector::new(cfg.faults),
            trace: Trace::new(),
            next_correlation: 0,
            staged: BTreeMap::new(),
            violations: BTreeMap::new(),
            recoveries: Default::default(),
            degraded_since: None,
            time_degraded: Duration::ZERO,
            checks: Vec::new(),
        };
        sim.trace.push(
            Timestamp::ZERO,
            TraceEvent::RunStart {
                seed: sim.seed,
                rm_enabled: sim.rm_enabled,
                duration: sim.duration,
                pulse_period: sim.plant.belt().pulse_period,
            },
        );
        // Fault transitions go first so a fault starting on a tick affects that tick.
        for t in sim.faults.transition_times(Timestamp(sim.duration.as_micros())) {
            sim.queue.push(t, Event::Fault);
        }
        sim.plant.start(&mut sim.queue);
        Ok(sim)
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn contracts(&self) -> &ContractTree {
        &self.contracts
    }

    pub fn observers(&self) -> &BTreeMap<ContractId, Observer> {
        &self.observers
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Processes every event with timestamp `<= until`.
    pub fn advance(&mut self, until: Timestamp) -> &[crate::trace::TraceRecord] {
        let from = self.trace.len();
        while self.queue.peek_time().is_some_and(|t| t <= until) {
            self.step();
        }
        self.now = self.now.max(until);
        &self.trace.records()[from..]
    }

    /// Runs `[0, duration)` and closes the trace at `duration`.
    pub fn run(mut self) -> RunOutcome {
        let end = Timestamp(self.duration.as_micros());
        while self.queue.peek_time().is_some_and(|t| t < end) {
            self.step();
        }
        self.now = end;
        self.trace.push(end, TraceEvent::RunEnd {});
        let metrics = self.metrics();
        let final_budgets = self
            .contracts
            .nodes()
            .into_iter()
            .map(|n| (n.contract.id.clone(), n.contract.budget))
            .collect();
        RunOutcome {
            trace: self.trace,
            metrics,
            refinement_checks: self.checks,
            final_budgets,
        }
    }

    fn step(&mut self) {
        let Some(entry) = self.queue.pop() else { return };
        debug_assert!(entry.at >= self.now);
        self.now = entry.at;
        match entry.event {
            Event::Fault => {
                for ev in self.faults.apply_faults(&mut self.plant, self.now) {
                    self.trace.push(self.now, ev);
                }
            }
            Event::Plant(ev) => {
                let mut out = Vec::new();
                let report = self.plant.handle(self.now, ev, &mut self.queue, &mut out);
                for ev in out {
                    self.trace.push(self.now, ev);
                }
                if let Some(job) = report {
                    self.observe(job.component, job.job_id, job.start, job.end, job.assumption_held);
                }
            }
            Event::Deliver(msg) => self.on_deliver(*msg),
        }
    }

    fn observe(&mut self, component: Component, job: u64, start: Timestamp, end: Timestamp, held: bool) {
        let Some(node) = self.contracts.contract_for(component) else {
            return;
        };
        let contract = node.contract.clone();
        let owner = node.owner_rm.clone();
        let observer = self.observers.get_mut(&contract.id).expect("one observer per leaf");
        let report = observer
            .record(&contract, job, start, end, held)
            .expect("plant measurements are well formed");
        let recovered = observer.take_recovered();
        let engaged = self.rm_enabled && self.plant.belt().running;
        if let (Some(latest), true) = (recovered, engaged) {
            if let Some(parent) = self.contracts.parent_of(&contract.id) {
                let body = MessageBody::Recovered {
                    contract: contract.id.clone(),
                    node: parent.contract.id.clone(),
                    latest,
                };
                let corr = self.correlation();
                self.send(Endpoint::Observer(contract.id.clone()), Endpoint::Rm(owner.clone()), corr, body);
            }
        }
        let Some(report) = report else { return };
        *self.violations.entry(contract.id.to_string()).or_default() += 1;
        self.trace.push(
            self.now,
            TraceEvent::Violation {
                contract: contract.id.clone(),
                job,
                observed: report.observed,
                budget: contract.budget,
                demand: report.demand,
                violation: report.kind,
            },
        );
        // After a safe stop the RMs are disengaged; violations are only traced.
        if engaged {
            let corr = self.correlation();
            self.send(Endpoint::Observer(contract.id), Endpoint::Rm(owner), corr, MessageBody::Violation(report));
        }
    }

    fn correlation(&mut self) -> u64 {
        let c = self.next_correlation;
        self.next_correlation += 1;
        c
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, correlation: u64, body: MessageBody) -> u64 {
        let msg = self.layer.compose(from, to, correlation, body, self.now);
        let id = msg.id;
        let d = self.layer.deliver(msg, self.now);
        self.queue.push(d.at, Event::Deliver(Box::new(d.msg)));
        id
    }

    fn on_deliver(&mut self, msg: RmMessage) {
        self.trace.push(self.now, TraceEvent::Message(msg.clone()));
        match (&msg.to, &msg.body) {
            (Endpoint::Rm(rm), MessageBody::Ack { acked }) => {
                if let Some(r) = self.rms.get_mut(rm) {
                    r.on_ack(*acked);
                }
            }
            (_, MessageBody::Ack { .. }) => {}
            (Endpoint::Rm(rm), MessageBody::Violation(report)) => {
                let rm = rm.clone();
                let view = view(&self.contracts, &self.observers, &self.plant);
                let result = match self.rms.get_mut(&rm) {
                    Some(r) => r.handle_violation(report, &view),
                    None => Ok(Decision::default()),
                };
                self.apply_decision(&rm, result, &msg, Some(&report.contract_id));
            }
            (
                Endpoint::Rm(rm),
                MessageBody::Escalation {
                    from_rm,
                    node,
                    required_budget,
                    demands,
                },
            ) => {
                let rm = rm.clone();
                let esc = Escalation {
                    from_rm: from_rm.clone(),
                    node: node.clone(),
                    required_budget: *required_budget,
                    demands: demands.clone(),
                };
                let view = view(&self.contracts, &self.observers, &self.plant);
                let result = match self.rms.get_mut(&rm) {
                    Some(r) => r.handle_escalation(&esc, &view),
                    None => Ok(Decision::default()),
                };
                self.apply_decision(&rm, result, &msg, Some(node));
            }
            (Endpoint::Rm(rm), MessageBody::Recovered { contract, node, latest }) => {
                let rm = rm.clone();
                let view = view(&self.contracts, &self.observers, &self.plant);
                let result = match self.rms.get_mut(&rm) {
                    Some(r) => r.handle_recovered(contract, node, *latest, &view),
                    None => Ok(Decision::default()),
                };
                self.apply_decision(&rm, result, &msg, Some(contract));
            }
            (
                _,
                MessageBody::ParamUpdate {
                    contract,
                    new_budget,
                    batch_len,
                    ..
                },
            ) => {
                let batch = self.staged.entry(msg.correlation).or_default();
                batch.push((contract.clone(), *new_budget));
                if batch.len() == *batch_len as usize {
                    let batch = self.staged.remove(&msg.correlation).expect("just inserted");
                    self.commit_batch(msg.correlation, batch);
                }
            }
            (Endpoint::Component(c), MessageBody::ModeCmd { mode, .. }) => match self.plant.switch_mode(*c, mode) {
                Ok(ev) => self.trace.push(self.now, ev),
                Err(e) => self.note("plant", e.to_string()),
            },
            (Endpoint::Belt, MessageBody::DegradeCmd { level }) => self.change_speed(*level, msg.correlation),
            (Endpoint::Belt, MessageBody::StopCmd) => {
                if self.plant.belt().running {
                    let ev = self.plant.halt();
                    self.trace.push(self.now, ev);
                }
            }
            (to, body) => self.note("protocol", format!("{to} cannot handle {body:?}")),
        }
        if !msg.body.is_ack() {
            self.send(msg.to, msg.from, msg.correlation, MessageBody::Ack { acked: msg.id });
        }
    }

    fn note(&mut self, who: &str, text: String) {
        self.trace.push(
            self.now,
            TraceEvent::RmNote {
                rm: RmId::new(who),
                note: text,
            },
        );
    }

    fn apply_decision(
        &mut self,
        rm: &RmId,
        result: Result<Decision, crate::rm::ProtocolError>,
        trigger: &RmMessage,
        about: Option<&ContractId>,
    ) {
        let d = match result {
            Ok(d) => d,
            Err(e) => {
                self.note(rm.as_str(), format!("dropped: {e}"));
                return;
            }
        };
        if d.coalesced {
            self.trace.push(
                self.now,
                TraceEvent::Coalesced {
                    rm: rm.clone(),
                    contract: about.cloned().unwrap_or_else(|| ContractId::new("?")),
                    message: trigger.id,
                },
            );
        }
        if let Some(note) = d.note.clone() {
            self.note(rm.as_str(), note);
        }
        if d.messages.is_empty() {
            return;
        }
        let corr = self.correlation();
        if let Some(kind) = d.recovery {
            self.recoveries.bump(kind);
            self.trace.push(
                self.now,
                TraceEvent::Recovery {
                    rm: rm.clone(),
                    action: kind,
                    correlation: corr,
                    contract: d.subject.clone().or_else(|| about.cloned()).expect("recoveries have a subject"),
                },
            );
        }
        let ids: Vec<u64> = d
            .messages
            .into_iter()
            .map(|(to, body)| self.send(Endpoint::Rm(rm.clone()), to, corr, body))
            .collect();
        if let Some(r) = self.rms.get_mut(rm) {
            r.track(corr, &d.locks, ids);
        }
    }

    fn commit_batch(&mut self, correlation: u64, batch: Vec<(ContractId, Duration)>) {
        for (id, budget) in &batch {
            self.contracts.set_budget(id, *budget).expect("RMs only name existing contracts");
        }
        let failures = self.contracts.refinement_failures();
        let ok = failures.is_empty();
        self.checks.push(RefinementCheck {
            t: self.now,
            correlation,
            failures,
        });
        self.trace.push(
            self.now,
            TraceEvent::BatchCommit {
                correlation,
                budgets: batch
                    .into_iter()
                    .map(|(contract, budget)| BudgetEntry { contract, budget })
                    .collect(),
                refinement_ok: ok,
            },
        );
    }

    fn change_speed(&mut self, level: usize, correlation: u64) {
        let change = match self.plant.set_speed(level) {
            Ok(c) => c,
            Err(e) => return self.note("plant", e.to_string()),
        };
        if change.from == 0 && change.to > 0 {
            self.degraded_since = Some(self.now);
        } else if change.from > 0 && change.to == 0 {
            let since = self.degraded_since.take().expect("was degraded");
            self.time_degraded += self.now.since(since).unwrap_or_default();
        }
        let touched = self.contracts.apply_end_to_end(self.plant.end_to_end_budget());
        let failures = self.contracts.refinement_failures();
        self.checks.push(RefinementCheck {
            t: self.now,
            correlation,
            failures,
        });
        self.trace.push(
            self.now,
            TraceEvent::SpeedChange {
                from: change.from,
                to: change.to,
                pulse_period: change.pulse_period,
                budgets: touched
                    .into_iter()
                    .map(|(contract, budget)| BudgetEntry { contract, budget })
                    .collect(),
            },
        );
    }

    fn metrics(&self) -> Metrics {
        let mut m = Metrics {
            tokens_arrived: self.plant.tokens().iter().filter(|t| t.arrival < self.now).count() as u64,
            ..Metrics::default()
        };
        let mut first_entry: Option<Timestamp> = None;
        let mut last_eject: Option<Timestamp> = None;
        for t in self.plant.tokens() {
            if let Some(e) = t.entry_time {
                m.tokens_in += 1;
                first_entry = Some(first_entry.map_or(e, |f| f.min(e)));
            }
            match t.state {
                TokenState::Ejected { bin } => {
                    if bin == t.color.bin() {
                        m.sorted_correct += 1;
                    } else {
                        m.missorted += 1;
                    }
                    last_eject = last_eject.max(t.finished_at);
                }
                TokenState::Missed => m.missed += 1,
                TokenState::OnBelt => m.in_flight += 1,
                TokenState::Waiting => {}
            }
        }
        m.not_admitted = m.tokens_arrived - m.tokens_in;
        m.violations_by_contract = self.violations.clone();
        m.recoveries = self.recoveries;
        m.time_degraded = self.time_degraded
            + self
                .degraded_since
                .and_then(|s| self.now.since(s))
                .unwrap_or_default();
        m.final_speed_level = self.plant.belt().level;
        m.safe_stopped = !self.plant.belt().running;
        m.throughput = Throughput::new(m.sorted_correct + m.missorted, first_entry, last_eject);
        m
    }
}

fn view<'a>(
    contracts: &'a ContractTree,
    observers: &'a BTreeMap<ContractId, Observer>,
    plant: &'a Plant,
) -> SystemView<'a> {
    SystemView {
        contracts,
        observers,
        components: plant.components(),
        geometry: plant.geometry(),
        speeds: plant.speed_levels(),
        current_level: plant.belt().level,
    }
}

/// Resolves and runs a scenario configuration to completion.
pub fn run(cfg: SimConfig) -> Result<RunOutcome, PlantError> {
    Ok(Simulation::new(cfg)?.run())
}
