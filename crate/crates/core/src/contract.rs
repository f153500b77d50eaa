//! Parametric latency contracts and their hierarchy.
//!
//! A [`LatencyContract`] pairs an assumption (a named input-validity predicate
//! evaluated by the plant) with a guarantee: the component's response time is
//! at most `budget`. The budget is the contract's only runtime parameter.
//!
//! Contracts form a tree of [`ContractNode`]s. Latency composes additively
//! along the pipeline, so a node is a sound decomposition of its parent when
//! the children's budgets sum to no more than the parent's budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Component, ContractId, RmId};
use crate::time::{Duration, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContractError {
    #[error("measurement for `{measurement}` evaluated against contract `{contract}`")]
    MismatchedContract {
        contract: ContractId,
        measurement: ContractId,
    },
    #[error("measurement ends before it starts ({start} > {end})")]
    NegativeResponse { start: Timestamp, end: Timestamp },
    #[error("reallocation needs at least one demand")]
    EmptyDemands,
    #[error("unknown contract `{0}`")]
    UnknownContract(ContractId),
    #[error("budget {budget} of `{contract}` is outside [{min}, {max}]")]
    OutOfBounds {
        contract: ContractId,
        budget: Duration,
        min: Duration,
        max: Duration,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyContract {
    pub id: ContractId,
    /// Component whose jobs this contract bounds; `None` for composite contracts.
    pub component: Option<Component>,
    /// Name of the assumption predicate the plant evaluates per job.
    pub assumption: String,
    pub budget: Duration,
    pub budget_min: Duration,
    /// Upper bound for the budget. `None` means "the parent's current budget".
    pub budget_max: Option<Duration>,
}

/// How a node's budget is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    /// Set only by explicit parameter updates.
    #[default]
    Fixed,
    /// Tracks the belt: end-to-end processing budget at the current speed
    /// level, plus a constant.
    EndToEnd { plus: Duration },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractNode {
    pub contract: LatencyContract,
    pub children: Vec<ContractNode>,
    pub owner_rm: RmId,
    #[serde(default)]
    pub rule: BudgetRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub contract_id: ContractId,
    pub job_id: u64,
    pub start: Timestamp,
    pub end: Timestamp,
    pub assumption_held: bool,
}

impl Measurement {
    pub fn response_time(&self) -> Option<Duration> {
        self.end.since(self.start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalResult {
    Satisfied,
    GuaranteeViolated { excess: Duration },
    AssumptionViolated,
}

impl EvalResult {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, EvalResult::Satisfied)
    }
}

/// Checks one measurement against a contract.
///
/// A failed assumption excuses the component regardless of its response time.
/// The guarantee boundary is inclusive.
pub fn evaluate(contract: &LatencyContract, m: &Measurement) -> Result<EvalResult, ContractError> {
    if m.contract_id != contract.id {
        return Err(ContractError::MismatchedContract {
            contract: contract.id.clone(),
            measurement: m.contract_id.clone(),
        });
    }
    let response = m.response_time().ok_or(ContractError::NegativeResponse {
        start: m.start,
        end: m.end,
    })?;
    if !m.assumption_held {
        return Ok(EvalResult::AssumptionViolated);
    }
    Ok(match response.checked_sub(contract.budget) {
        Some(excess) if excess > Duration::ZERO => EvalResult::GuaranteeViolated { excess },
        _ => EvalResult::Satisfied,
    })
}

/// `budget - observed_worst`; negative slack is the demand excess.
pub fn slack(contract: &LatencyContract, observed_worst: Duration) -> i64 {
    contract.budget.signed_sub(observed_worst)
}

/// Decomposition soundness: the children's budgets sum to at most the
/// parent's. A leaf is trivially sound.
pub fn check_refinement(node: &ContractNode) -> bool {
    if node.children.is_empty() {
        return true;
    }
    let sum: Duration = node.children.iter().map(|c| c.contract.budget).sum();
    sum <= node.contract.budget
}

/// One child's input to [`reallocate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demand {
    pub contract: ContractId,
    pub demand: Duration,
    pub min: Duration,
    pub max: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Allocation {
    /// New budgets, in the same order as the demands.
    Feasible(Vec<(ContractId, Duration)>),
    /// No assignment fits. `required` is the sum of the effective demands.
    Infeasible { required: Duration },
}

impl Allocation {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Allocation::Feasible(_))
    }
}

/// Splits `parent_budget` among children so each gets at least its demand.
///
/// Each child starts from `max(demand, min)`. The remaining slack is split
/// equally; leftover microseconds from the integer division go one each to
/// the children in ascending contract-id order. Results are then capped at
/// each child's `max`. Infeasible when the starting points already exceed
/// the parent or some child's demand exceeds its own `max`.
pub fn reallocate(parent_budget: Duration, demands: &[Demand]) -> Result<Allocation, ContractError> {
    if demands.is_empty() {
        return Err(ContractError::EmptyDemands);
    }
    let base: Vec<Duration> = demands.iter().map(|d| d.demand.max(d.min)).collect();
    let required: Duration = base.iter().copied().sum();
    if required > parent_budget || demands.iter().zip(&base).any(|(d, b)| *b > d.max) {
        return Ok(Allocation::Infeasible { required });
    }

    let n = demands.len() as u64;
    let residual = parent_budget.as_micros() - required.as_micros();
    let share = residual / n;
    let remainder = residual % n;

    let mut by_id: Vec<usize> = (0..demands.len()).collect();
    by_id.sort_by(|&a, &b| demands[a].contract.cmp(&demands[b].contract));
    let mut extra = vec![0u64; demands.len()];
    for &i in by_id.iter().take(remainder as usize) {
        extra[i] = 1;
    }

    let budgets = demands
        .iter()
        .zip(base)
        .zip(extra)
        .map(|((d, b), e)| {
            let raised = Duration(b.as_micros() + share + e);
            (d.contract.clone(), raised.min(d.max))
        })
        .collect();
    Ok(Allocation::Feasible(budgets))
}

/// The contract hierarchy with lookup helpers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractTree {
    root: ContractNode,
}

impl ContractTree {
    pub fn new(root: ContractNode) -> Self {
        ContractTree { root }
    }

    pub fn root(&self) -> &ContractNode {
        &self.root
    }

    pub fn find(&self, id: &ContractId) -> Option<&ContractNode> {
        fn go<'a>(n: &'a ContractNode, id: &ContractId) -> Option<&'a ContractNode> {
            if &n.contract.id == id {
                return Some(n);
            }
            n.children.iter().find_map(|c| go(c, id))
        }
        go(&self.root, id)
    }

    pub fn find_mut(&mut self, id: &ContractId) -> Option<&mut ContractNode> {
        fn go<'a>(n: &'a mut ContractNode, id: &ContractId) -> Option<&'a mut ContractNode> {
            if &n.contract.id == id {
                return Some(n);
            }
            n.children.iter_mut().find_map(|c| go(c, id))
        }
        go(&mut self.root, id)
    }

    pub fn parent_of(&self, id: &ContractId) -> Option<&ContractNode> {
        fn go<'a>(n: &'a ContractNode, id: &ContractId) -> Option<&'a ContractNode> {
            if n.children.iter().any(|c| &c.contract.id == id) {
                return Some(n);
            }
            n.children.iter().find_map(|c| go(c, id))
        }
        go(&self.root, id)
    }

    /// Pre-order walk over every node.
    pub fn nodes(&self) -> Vec<&ContractNode> {
        fn go<'a>(n: &'a ContractNode, out: &mut Vec<&'a ContractNode>) {
            out.push(n);
            for c in &n.children {
                go(c, out);
            }
        }
        let mut out = Vec::new();
        go(&self.root, &mut out);
        out
    }

    pub fn budget(&self, id: &ContractId) -> Option<Duration> {
        self.find(id).map(|n| n.contract.budget)
    }

    /// Upper bound on a child's budget: its own `budget_max`, or else the
    /// parent's current budget.
    pub fn effective_max(&self, id: &ContractId) -> Option<Duration> {
        let node = self.find(id)?;
        Some(match node.contract.budget_max {
            Some(max) => max,
            None => self
                .parent_of(id)
                .map(|p| p.contract.budget)
                .unwrap_or(node.contract.budget),
        })
    }

    pub fn set_budget(&mut self, id: &ContractId, budget: Duration) -> Result<(), ContractError> {
        let node = self
            .find_mut(id)
            .ok_or_else(|| ContractError::UnknownContract(id.clone()))?;
        node.contract.budget = budget;
        Ok(())
    }

    /// Ids of internal nodes whose refinement does not hold.
    pub fn refinement_failures(&self) -> Vec<ContractId> {
        self.nodes()
            .into_iter()
            .filter(|n| !check_refinement(n))
            .map(|n| n.contract.id.clone())
            .collect()
    }

    /// Nodes whose budgets violate their own `[min, max]` bounds.
    pub fn bound_failures(&self) -> Vec<ContractError> {
        self.nodes()
            .into_iter()
            .filter_map(|n| {
                let max = self.effective_max(&n.contract.id)?;
                let c = &n.contract;
                (c.budget < c.budget_min || c.budget > max).then(|| ContractError::OutOfBounds {
                    contract: c.id.clone(),
                    budget: c.budget,
                    min: c.budget_min,
                    max,
                })
            })
            .collect()
    }

    /// Recomputes the budget of every node with an [`BudgetRule::EndToEnd`]
    /// rule. Returns the `(id, budget)` pairs that were touched.
    pub fn apply_end_to_end(&mut self, end_to_end: Duration) -> Vec<(ContractId, Duration)> {
        fn go(n: &mut ContractNode, d: Duration, out: &mut Vec<(ContractId, Duration)>) {
            if let BudgetRule::EndToEnd { plus } = n.rule {
                n.contract.budget = d + plus;
                out.push((n.contract.id.clone(), n.contract.budget));
            }
            for c in &mut n.children {
                go(c, d, out);
            }
        }
        let mut out = Vec::new();
        go(&mut self.root, end_to_end, &mut out);
        out
    }

    /// Leaf contract bound to `component`, if any.
    pub fn contract_for(&self, component: Component) -> Option<&ContractNode> {
        self.nodes()
            .into_iter()
            .find(|n| n.contract.component == Some(component))
    }
}
