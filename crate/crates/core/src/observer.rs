//! Runtime observers.
//!
//! One observer watches one leaf contract. It keeps the last `W` response
//! times of its component, evaluates each job against the contract, and turns
//! every non-satisfied job into a [`ViolationReport`] for the owning RM.
//! Observers only read contracts; they never change budgets or plant state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{evaluate, ContractError, EvalResult, LatencyContract, Measurement};
use crate::ids::ContractId;
use crate::time::{Duration, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObserverError {
    #[error("demand estimate requested from an empty window")]
    EmptyWindow,
    #[error("invalid observer config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    /// Number of recent samples kept.
    pub window: usize,
    pub safety_factor_num: u64,
    pub safety_factor_den: u64,
    /// Experimental: after a violation, report recovery once this many
    /// consecutive jobs fit the budget in force at the first violation.
    pub restore_after: Option<u32>,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            window: 5,
            safety_factor_num: 1,
            safety_factor_den: 1,
            restore_after: None,
        }
    }
}

impl ObserverConfig {
    pub fn validate(&self) -> Result<(), ObserverError> {
        if self.window == 0 {
            return Err(ObserverError::InvalidConfig("window must be at least 1"));
        }
        if self.safety_factor_den == 0 || self.safety_factor_num < self.safety_factor_den {
            return Err(ObserverError::InvalidConfig("safety factor must be a ratio >= 1"));
        }
        if self.restore_after == Some(0) {
            return Err(ObserverError::InvalidConfig("restore_after must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Guarantee,
    Assumption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub contract_id: ContractId,
    pub job_id: u64,
    pub timestamp: Timestamp,
    /// The offending response time.
    pub observed: Duration,
    /// Budget the component is estimated to need now.
    pub demand: Duration,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone)]
pub struct Observer {
    contract_id: ContractId,
    config: ObserverConfig,
    window: VecDeque<Duration>,
    /// Budget in force when the current violation episode began.
    episode_budget: Option<Duration>,
    clean_streak: u32,
    recovered: Option<Duration>,
}

impl Observer {
    pub fn new(contract_id: ContractId, config: ObserverConfig) -> Self {
        Observer {
            contract_id,
            config,
            window: VecDeque::with_capacity(config.window),
            episode_budget: None,
            clean_streak: 0,
            recovered: None,
        }
    }

    pub fn contract_id(&self) -> &ContractId {
        &self.contract_id
    }

    pub fn window(&self) -> impl Iterator<Item = Duration> + '_ {
        self.window.iter().copied()
    }

    /// Worst response time currently in the window.
    pub fn observed_worst(&self) -> Option<Duration> {
        self.window.iter().copied().max()
    }

    /// Max over the window scaled by the safety factor, floored.
    pub fn demand_estimate(&self) -> Result<Duration, ObserverError> {
        let worst = self.observed_worst().ok_or(ObserverError::EmptyWindow)?;
        Ok(worst.mul_ratio(self.config.safety_factor_num, self.config.safety_factor_den))
    }

    /// Records one finished job and returns a report if it broke the contract.
    pub fn record(
        &mut self,
        contract: &LatencyContract,
        job_id: u64,
        job_start: Timestamp,
        job_end: Timestamp,
        assumption_held: bool,
    ) -> Result<Option<ViolationReport>, ObserverError> {
        let m = Measurement {
            contract_id: self.contract_id.clone(),
            job_id,
            start: job_start,
            end: job_end,
            assumption_held,
        };
        let verdict = evaluate(contract, &m)?;
        let observed = m.response_time().expect("checked by evaluate");

        if self.window.len() == self.config.window {
            self.window.pop_front();
        }
        self.window.push_back(observed);

        self.track_episode(contract.budget, observed, verdict);

        let (kind, demand) = match verdict {
            EvalResult::Satisfied => return Ok(None),
            EvalResult::GuaranteeViolated { .. } => (ViolationKind::Guarantee, self.demand_estimate()?),
            EvalResult::AssumptionViolated => (ViolationKind::Assumption, contract.budget),
        };
        Ok(Some(ViolationReport {
            contract_id: self.contract_id.clone(),
            job_id,
            timestamp: job_end,
            observed,
            demand,
            kind,
        }))
    }

    fn track_episode(&mut self, budget: Duration, observed: Duration, verdict: EvalResult) {
        let Some(needed) = self.config.restore_after else {
            return;
        };
        match (verdict, self.episode_budget) {
            (EvalResult::GuaranteeViolated { .. }, None) => {
                self.episode_budget = Some(budget);
                self.clean_streak = 0;
            }
            (EvalResult::GuaranteeViolated { .. }, Some(_)) => self.clean_streak = 0,
            (EvalResult::Satisfied, Some(original)) if observed <= original => {
                self.clean_streak += 1;
                if self.clean_streak >= needed {
                    self.recovered = Some(observed);
                    self.episode_budget = None;
                    self.clean_streak = 0;
                }
            }
            (EvalResult::Satisfied, Some(_)) => self.clean_streak = 0,
            _ => {}
        }
    }

    /// Once per episode, after `restore_after` clean jobs: the response time
    /// of the last of them.
    pub fn take_recovered(&mut self) -> Option<Duration> {
        self.recovered.take()
    }
}
