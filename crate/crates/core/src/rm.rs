//! Resilience managers and their coordination protocol.
//!
//! Each RM owns a set of contract nodes and reacts to violation reports by
//! walking its action list in order and stopping at the first action that
//! applies:
//!
//! 1. **mode switch**: move the violating component to an alternative mode
//!    whose nominal latency plus the estimated fault delay fits the budget;
//! 2. **reallocate**: redistribute the shared parent's budget among the
//!    violator and its siblings;
//! 3. **escalate**: hand the aggregate demand to the parent RM.
//!
//! The root additionally owns the belt: it may slow the line to a speed level
//! whose end-to-end budget covers the escalated demand, or stop it.
//!
//! An RM decides from a read-only [`SystemView`] and returns a [`Decision`];
//! the caller sends the messages and reports back the ids via
//! [`ResilienceManager::track`]. Reports for contracts with an unacknowledged
//! recovery in flight are coalesced.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{reallocate, Allocation, BudgetRule, ContractNode, ContractTree, Demand};
use crate::ids::{Component, ContractId, RmId};
use crate::message::{DemandEntry, Endpoint, MessageBody};
use crate::observer::{Observer, ViolationKind, ViolationReport};
use crate::plant::{end_to_end_budget, ComponentProc, LineGeometry, SpeedLevel};
use crate::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("report for unknown contract `{0}`")]
    UnknownContract(ContractId),
    #[error("RM `{rm}` does not own contract `{contract}`")]
    NotOwner { rm: RmId, contract: ContractId },
    #[error("RM `{0}` received an escalation but has no parent and no root actions")]
    NoParent(RmId),
}

/// Entries of an RM's action list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ModeSwitch,
    Reallocate,
    Escalate,
    /// Root only.
    Degrade,
    /// Root only.
    SafeStop,
}

/// A concrete recovery step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryAction {
    ModeSwitch { component: Component, mode: String },
    Reallocate { contract_node: ContractId },
    Escalate { parent_rm: RmId },
    Degrade { speed_level: usize },
    SafeStop,
}

/// Recovery categories counted in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    ModeSwitch,
    Reallocation,
    Escalation,
    Degradation,
    SafeStop,
    /// Experimental: undoing an earlier recovery once the fault has cleared.
    Restoration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmNode {
    pub id: RmId,
    pub parent: Option<RmId>,
    pub children: Vec<RmId>,
    pub owned: Vec<ContractId>,
    pub actions: Vec<ActionKind>,
}

/// What an RM may read when deciding.
#[derive(Clone, Copy)]
pub struct SystemView<'a> {
    pub contracts: &'a ContractTree,
    pub observers: &'a BTreeMap<ContractId, Observer>,
    pub components: &'a BTreeMap<Component, ComponentProc>,
    pub geometry: &'a LineGeometry,
    pub speeds: &'a [SpeedLevel],
    pub current_level: usize,
}

impl SystemView<'_> {
    fn level_budget(&self, level: usize, plus: Duration) -> Duration {
        end_to_end_budget(self.geometry, &self.speeds[level]).expect("levels validated at load") + plus
    }
}

/// Outcome of one RM decision.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decision {
    pub messages: Vec<(Endpoint, MessageBody)>,
    pub action: Option<RecoveryAction>,
    pub recovery: Option<RecoveryKind>,
    /// Contract (or node) the recovery is about.
    pub subject: Option<ContractId>,
    /// Contracts locked until every message of this decision is acknowledged.
    pub locks: Vec<ContractId>,
    pub coalesced: bool,
    pub note: Option<String>,
}

impl Decision {
    fn note(text: impl Into<String>) -> Self {
        Decision {
            note: Some(text.into()),
            ..Decision::default()
        }
    }

    fn coalesced() -> Self {
        Decision {
            coalesced: true,
            ..Decision::default()
        }
    }
}

/// Fields of an escalation request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Escalation {
    pub from_rm: RmId,
    pub node: ContractId,
    pub required_budget: Duration,
    pub demands: Vec<DemandEntry>,
}

/// What an RM needs to undo its first recovery of an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Episode {
    Mode { component: Component, mode: String },
    Budgets { children: Vec<(ContractId, Duration)> },
    Escalated,
    Degraded { children: Vec<(ContractId, Duration)>, level: usize },
}

#[derive(Debug, Clone)]
pub struct ResilienceManager {
    node: RmNode,
    locked: BTreeMap<ContractId, u64>,
    outstanding: BTreeMap<u64, BTreeSet<u64>>,
    stopped: bool,
    /// Keyed by violating leaf for local recoveries, by node at the root.
    episodes: BTreeMap<ContractId, Episode>,
}

impl ResilienceManager {
    pub fn new(node: RmNode) -> Self {
        ResilienceManager {
            node,
            locked: BTreeMap::new(),
            outstanding: BTreeMap::new(),
            stopped: false,
            episodes: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &RmId {
        &self.node.id
    }

    pub fn node(&self) -> &RmNode {
        &self.node
    }

    pub fn is_root(&self) -> bool {
        self.node.parent.is_none()
    }

    pub fn has_pending(&self) -> bool {
        !self.outstanding.is_empty()
    }

    fn can(&self, a: ActionKind) -> bool {
        self.node.actions.contains(&a)
    }

    /// Records the ids of the messages sent for decision `correlation` and
    /// locks its contracts until all of them are acknowledged.
    pub fn track(&mut self, correlation: u64, locks: &[ContractId], sent: impl IntoIterator<Item = u64>) {
        let ids: BTreeSet<u64> = sent.into_iter().collect();
        if ids.is_empty() {
            return;
        }
        for c in locks {
            self.locked.insert(c.clone(), correlation);
        }
        self.outstanding.insert(correlation, ids);
    }

    pub fn on_ack(&mut self, acked: u64) {
        let done: Vec<u64> = self
            .outstanding
            .iter_mut()
            .filter_map(|(corr, ids)| (ids.remove(&acked) && ids.is_empty()).then_some(*corr))
            .collect();
        for corr in done {
            self.outstanding.remove(&corr);
            self.locked.retain(|_, c| *c != corr);
        }
    }

    pub fn handle_violation(
        &mut self,
        report: &ViolationReport,
        view: &SystemView<'_>,
    ) -> Result<Decision, ProtocolError> {
        let id = &report.contract_id;
        let leaf = view
            .contracts
            .find(id)
            .ok_or_else(|| ProtocolError::UnknownContract(id.clone()))?;
        if leaf.owner_rm != self.node.id {
            return Err(ProtocolError::NotOwner {
                rm: self.node.id.clone(),
                contract: id.clone(),
            });
        }
        if report.kind == ViolationKind::Assumption {
            return Ok(Decision::note(format!("{id}: assumption failed, component excused")));
        }
        if self.locked.contains_key(id) {
            return Ok(Decision::coalesced());
        }
        let parent = view.contracts.parent_of(id);
        let demands = parent.map(|p| sibling_demands(p, report, view));
        let mut required: Option<Duration> = None;

        for action in self.node.actions.clone() {
            match action {
                ActionKind::ModeSwitch => {
                    if let Some((component, mode)) = pick_mode(leaf, report, view) {
                        let active = view.components[&component].active_mode().name.clone();
                        self.episodes
                            .entry(id.clone())
                            .or_insert(Episode::Mode { component, mode: active });
                        return Ok(Decision {
                            messages: vec![(
                                Endpoint::Component(component),
                                MessageBody::ModeCmd {
                                    component,
                                    mode: mode.clone(),
                                },
                            )],
                            action: Some(RecoveryAction::ModeSwitch { component, mode }),
                            recovery: Some(RecoveryKind::ModeSwitch),
                            subject: Some(id.clone()),
                            locks: vec![id.clone()],
                            ..Decision::default()
                        });
                    }
                }
                ActionKind::Reallocate => {
                    let (Some(parent), Some(demands)) = (parent, demands.as_ref()) else {
                        continue;
                    };
                    if parent.owner_rm != self.node.id {
                        continue;
                    }
                    match allocate(parent.contract.budget, demands) {
                        Allocation::Feasible(budgets) => {
                            let messages = param_updates(view.contracts, &budgets);
                            if messages.is_empty() {
                                continue;
                            }
                            self.episodes.entry(id.clone()).or_insert(Episode::Budgets {
                                children: child_budgets(parent),
                            });
                            return Ok(Decision {
                                messages,
                                action: Some(RecoveryAction::Reallocate {
                                    contract_node: parent.contract.id.clone(),
                                }),
                                recovery: Some(RecoveryKind::Reallocation),
                                subject: Some(id.clone()),
                                locks: child_ids(parent),
                                ..Decision::default()
                            });
                        }
                        Allocation::Infeasible { required: r } => required = Some(r),
                    }
                }
                ActionKind::Escalate => {
                    let (Some(parent_rm), Some(parent), Some(demands)) =
                        (self.node.parent.clone(), parent, demands.as_ref())
                    else {
                        continue;
                    };
                    let required_budget = required.unwrap_or_else(|| effective_sum(demands));
                    self.episodes.entry(id.clone()).or_insert(Episode::Escalated);
                    return Ok(Decision {
                        messages: vec![(
                            Endpoint::Rm(parent_rm.clone()),
                            MessageBody::Escalation {
                                from_rm: self.node.id.clone(),
                                node: parent.contract.id.clone(),
                                required_budget,
                                demands: demands.clone(),
                            },
                        )],
                        action: Some(RecoveryAction::Escalate { parent_rm }),
                        recovery: Some(RecoveryKind::Escalation),
                        subject: Some(id.clone()),
                        locks: child_ids(parent),
                        ..Decision::default()
                    });
                }
                ActionKind::Degrade | ActionKind::SafeStop => {
                    // A root handling its own leaf treats it like an escalation of the parent node.
                    let (Some(parent), Some(demands)) = (parent, demands.as_ref()) else {
                        continue;
                    };
                    let esc = Escalation {
                        from_rm: self.node.id.clone(),
                        node: parent.contract.id.clone(),
                        required_budget: required.unwrap_or_else(|| effective_sum(demands)),
                        demands: demands.clone(),
                    };
                    let mut d = self.root_recovery(&esc, view, action == ActionKind::SafeStop)?;
                    if d.recovery.is_some() {
                        d.subject = Some(id.clone());
                        d.locks.push(id.clone());
                        return Ok(d);
                    }
                }
            }
        }
        Ok(Decision::note(format!("{id}: no applicable recovery action")))
    }

    /// Handles an escalation from a child RM. Non-root RMs forward it upward.
    pub fn handle_escalation(
        &mut self,
        esc: &Escalation,
        view: &SystemView<'_>,
    ) -> Result<Decision, ProtocolError> {
        if let Some(parent_rm) = self.node.parent.clone() {
            if self.locked.contains_key(&esc.node) {
                return Ok(Decision::coalesced());
            }
            self.episodes.entry(esc.node.clone()).or_insert(Episode::Escalated);
            return Ok(Decision {
                messages: vec![(
                    Endpoint::Rm(parent_rm.clone()),
                    MessageBody::Escalation {
                        from_rm: self.node.id.clone(),
                        node: esc.node.clone(),
                        required_budget: esc.required_budget,
                        demands: esc.demands.clone(),
                    },
                )],
                action: Some(RecoveryAction::Escalate { parent_rm }),
                recovery: Some(RecoveryKind::Escalation),
                subject: Some(esc.node.clone()),
                locks: vec![esc.node.clone()],
                ..Decision::default()
            });
        }
        if !(self.can(ActionKind::Degrade) || self.can(ActionKind::SafeStop)) {
            return Err(ProtocolError::NoParent(self.node.id.clone()));
        }
        if self.locked.contains_key(&esc.node) {
            return Ok(Decision::coalesced());
        }
        let mut d = Decision::default();
        for action in self.node.actions.clone() {
            d = match action {
                ActionKind::Reallocate | ActionKind::Degrade => self.root_recovery(esc, view, false)?,
                ActionKind::SafeStop => self.root_recovery(esc, view, true)?,
                _ => continue,
            };
            if d.recovery.is_some() || d.note.is_some() {
                break;
            }
        }
        if d.recovery.is_none() && d.note.is_none() {
            d.note = Some(format!("{}: escalation could not be satisfied", esc.node));
        }
        Ok(d)
    }

    /// Experimental restoration. A local RM undoes its own recovery for
    /// `contract`, or passes the notice up if it had escalated; the root
    /// restores the node's budgets and then the speed level. A mode is only
    /// restored if `latest`, shifted to the original mode's nominal latency,
    /// still fits the budget.
    pub fn handle_recovered(
        &mut self,
        contract: &ContractId,
        node: &ContractId,
        latest: Duration,
        view: &SystemView<'_>,
    ) -> Result<Decision, ProtocolError> {
        if self.stopped {
            return Ok(Decision::note("line already stopped"));
        }
        let key = if self.episodes.contains_key(contract) { contract } else { node };
        let Some(episode) = self.episodes.get(key).cloned() else {
            return Ok(Decision::note(format!("{contract}: nothing to restore")));
        };
        let node_ref = view
            .contracts
            .find(node)
            .ok_or_else(|| ProtocolError::UnknownContract(node.clone()))?;
        let busy = match &episode {
            Episode::Mode { .. } => self.locked.contains_key(contract),
            _ => child_ids(node_ref).iter().any(|c| self.locked.contains_key(c)) || self.locked.contains_key(node),
        };
        if busy {
            return Ok(Decision::note(format!("{contract}: restoration deferred, recovery in flight")));
        }
        if let Episode::Mode { component, mode } = &episode {
            let proc = &view.components[component];
            let original = proc.modes().iter().find(|m| &m.name == mode).map_or(Duration::ZERO, |m| m.latency);
            let predicted = (latest + original).saturating_sub(proc.active_mode().latency);
            let budget = view.contracts.budget(contract).unwrap_or(Duration::ZERO);
            if predicted > budget {
                return Ok(Decision::note(format!("{contract}: {mode} mode would still miss its budget")));
            }
        }
        self.episodes.remove(key);
        let restored = |messages: Vec<(Endpoint, MessageBody)>, locks: Vec<ContractId>| Decision {
            messages,
            recovery: Some(RecoveryKind::Restoration),
            subject: Some(contract.clone()),
            locks,
            ..Decision::default()
        };
        Ok(match episode {
            Episode::Mode { component, mode } => restored(
                vec![(Endpoint::Component(component), MessageBody::ModeCmd { component, mode })],
                vec![contract.clone()],
            ),
            Episode::Budgets { children } => restored(param_updates(view.contracts, &children), child_ids(node_ref)),
            Episode::Degraded { children, level } => {
                let mut messages = param_updates(view.contracts, &children);
                if level != view.current_level {
                    messages.push((Endpoint::Belt, MessageBody::DegradeCmd { level }));
                }
                restored(messages, vec![node.clone()])
            }
            Episode::Escalated => match self.node.parent.clone() {
                Some(parent_rm) => Decision {
                    messages: vec![(
                        Endpoint::Rm(parent_rm),
                        MessageBody::Recovered {
                            contract: contract.clone(),
                            node: node.clone(),
                            latest,
                        },
                    )],
                    ..Decision::default()
                },
                None => Decision::note(format!("{contract}: nothing to restore")),
            },
        })
    }

    /// Root-level recovery for `esc.node`: reallocate at the current speed,
    /// else the slowest-necessary speed level, else (if `allow_stop`) stop.
    fn root_recovery(
        &mut self,
        esc: &Escalation,
        view: &SystemView<'_>,
        allow_stop: bool,
    ) -> Result<Decision, ProtocolError> {
        if self.stopped {
            return Ok(Decision::note("line already stopped"));
        }
        let node = view
            .contracts
            .find(&esc.node)
            .ok_or_else(|| ProtocolError::UnknownContract(esc.node.clone()))?;

        let first = view.current_level;
        let last = if self.can(ActionKind::Degrade) {
            view.speeds.len() - 1
        } else {
            first
        };
        for level in first..=last {
            let budget = match node.rule {
                BudgetRule::EndToEnd { plus } => view.level_budget(level, plus),
                BudgetRule::Fixed if level == first => node.contract.budget,
                BudgetRule::Fixed => break,
            };
            if budget < esc.required_budget {
                continue;
            }
            let Allocation::Feasible(budgets) = allocate(budget, &esc.demands) else {
                continue;
            };
            let mut messages = Vec::new();
            let degrade = level != view.current_level;
            if degrade {
                messages.push((Endpoint::Belt, MessageBody::DegradeCmd { level }));
            }
            messages.extend(param_updates(view.contracts, &budgets));
            if messages.is_empty() {
                return Ok(Decision::note(format!("{}: budgets already sufficient", esc.node)));
            }
            self.episodes.entry(esc.node.clone()).or_insert(Episode::Degraded {
                children: child_budgets(node),
                level: view.current_level,
            });
            return Ok(Decision {
                messages,
                action: Some(if degrade {
                    RecoveryAction::Degrade { speed_level: level }
                } else {
                    RecoveryAction::Reallocate {
                        contract_node: esc.node.clone(),
                    }
                }),
                recovery: Some(if degrade {
                    RecoveryKind::Degradation
                } else {
                    RecoveryKind::Reallocation
                }),
                subject: Some(esc.node.clone()),
                locks: vec![esc.node.clone()],
                ..Decision::default()
            });
        }
        if allow_stop && self.can(ActionKind::SafeStop) {
            self.stopped = true;
            return Ok(Decision {
                messages: vec![(Endpoint::Belt, MessageBody::StopCmd)],
                action: Some(RecoveryAction::SafeStop),
                recovery: Some(RecoveryKind::SafeStop),
                subject: Some(esc.node.clone()),
                locks: vec![esc.node.clone()],
                ..Decision::default()
            });
        }
        Ok(Decision::default())
    }
}

/// Demands for every child of `parent`: the report's estimate for the
/// violator, `max(observed worst, nominal)` for component siblings and the
/// current budget for composite siblings.
fn sibling_demands(parent: &ContractNode, report: &ViolationReport, view: &SystemView<'_>) -> Vec<DemandEntry> {
    parent
        .children
        .iter()
        .map(|child| {
            let c = &child.contract;
            let demand = if c.id == report.contract_id {
                report.demand
            } else if let Some(component) = c.component {
                let nominal = view.components[&component].active_mode().latency;
                let worst = view
                    .observers
                    .get(&c.id)
                    .and_then(Observer::observed_worst)
                    .unwrap_or(Duration::ZERO);
                worst.max(nominal)
            } else {
                c.budget
            };
            DemandEntry {
                contract: c.id.clone(),
                demand,
                min: c.budget_min,
                max: c.budget_max,
            }
        })
        .collect()
}

fn effective_sum(demands: &[DemandEntry]) -> Duration {
    demands.iter().map(|d| d.demand.max(d.min)).sum()
}

fn allocate(parent_budget: Duration, demands: &[DemandEntry]) -> Allocation {
    let resolved: Vec<Demand> = demands
        .iter()
        .map(|d| Demand {
            contract: d.contract.clone(),
            demand: d.demand,
            min: d.min,
            max: d.max.unwrap_or(parent_budget),
        })
        .collect();
    reallocate(parent_budget, &resolved).expect("demand lists are never empty")
}

fn child_budgets(node: &ContractNode) -> Vec<(ContractId, Duration)> {
    node.children
        .iter()
        .map(|c| (c.contract.id.clone(), c.contract.budget))
        .collect()
}

fn child_ids(node: &ContractNode) -> Vec<ContractId> {
    node.children.iter().map(|c| c.contract.id.clone()).collect()
}

/// A batch of updates for the budgets that change, decreases first.
fn param_updates(tree: &ContractTree, budgets: &[(ContractId, Duration)]) -> Vec<(Endpoint, MessageBody)> {
    let mut changed: Vec<(&ContractId, Duration, Duration)> = budgets
        .iter()
        .filter_map(|(id, b)| {
            let current = tree.budget(id)?;
            (current != *b).then_some((id, current, *b))
        })
        .collect();
    changed.sort_by_key(|(_, cur, new)| new > cur);
    let len = changed.len() as u32;
    changed
        .into_iter()
        .enumerate()
        .map(|(i, (id, _, new))| {
            let node = tree.find(id).expect("budget() found it");
            let to = if node.children.is_empty() {
                Endpoint::Observer(id.clone())
            } else {
                Endpoint::Rm(node.owner_rm.clone())
            };
            (
                to,
                MessageBody::ParamUpdate {
                    contract: id.clone(),
                    new_budget: new,
                    batch_index: i as u32,
                    batch_len: len,
                },
            )
        })
        .collect()
}

/// First alternative mode predicted to meet the current budget, assuming the
/// fault adds `demand - nominal(active)` whatever the mode.
fn pick_mode(leaf: &ContractNode, report: &ViolationReport, view: &SystemView<'_>) -> Option<(Component, String)> {
    let component = leaf.contract.component?;
    let proc = view.components.get(&component)?;
    let active = proc.active_mode();
    let fault_estimate = report.demand.saturating_sub(active.latency);
    proc.modes()
        .iter()
        .filter(|m| m.name != active.name)
        .find(|m| m.latency + fault_estimate <= leaf.contract.budget)
        .map(|m| (component, m.name.clone()))
}
