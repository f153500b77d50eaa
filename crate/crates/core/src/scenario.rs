//! Scenario files: the single JSON document that configures a run.
//!
//! Everything under `config` is optional and falls back to the default
//! sorting-line setup. Validation happens once at load; a scenario that
//! resolves into a [`SimConfig`] never fails at run time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contract::{BudgetRule, ContractNode, ContractTree, LatencyContract};
use crate::fault::{generate_arrivals, FaultSpec};
use crate::ids::{Color, Component, ContractId, RmId};
use crate::observer::ObserverConfig;
use crate::plant::{
    default_modes, default_speed_levels, end_to_end_budget, validate_speed_levels, LineGeometry, Mode,
    SpeedLevel,
};
use crate::rm::{ActionKind, RmNode};
use crate::time::{Duration, Timestamp};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrival {
    pub t: Timestamp,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrivals {
    Explicit(Vec<Arrival>),
    /// Seeded Poisson stream; see [`generate_arrivals`].
    Rate { mean_interarrival: Duration },
    /// `count` tokens every `interval` from `start`, colors cycling white, red, blue.
    Periodic {
        #[serde(default)]
        start: Timestamp,
        interval: Duration,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub id: ContractId,
    #[serde(default)]
    pub parent: Option<ContractId>,
    pub owner: RmId,
    #[serde(default)]
    pub component: Option<Component>,
    /// Required for fixed-rule contracts; derived for end-to-end ones.
    #[serde(default)]
    pub budget: Option<Duration>,
    #[serde(default)]
    pub budget_min: Duration,
    #[serde(default)]
    pub budget_max: Option<Duration>,
    #[serde(default)]
    pub rule: BudgetRule,
    #[serde(default = "default_assumption")]
    pub assumption: String,
}

fn default_assumption() -> String {
    "input_valid".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmSpec {
    pub id: RmId,
    #[serde(default)]
    pub parent: Option<RmId>,
    pub actions: Vec<ActionKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub geometry: LineGeometry,
    pub modes: BTreeMap<Component, Vec<Mode>>,
    pub contracts: Vec<ContractSpec>,
    pub rms: Vec<RmSpec>,
    pub msg_latency: Duration,
    pub speed_levels: Vec<SpeedLevel>,
    pub observer: ObserverConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            geometry: LineGeometry::default(),
            modes: default_modes(),
            contracts: default_contracts(),
            rms: default_rms(),
            msg_latency: Duration(1_000),
            speed_levels: default_speed_levels(),
            observer: ObserverConfig::default(),
        }
    }
}

/// Contract tree of the sorting line.
///
/// `end_to_end` (RM_top) splits into `processing` (RM_proc: CP, BS, EC) and
/// `tracking` (RM_track: PC). Processing tracks the belt-dependent end-to-end
/// budget; tracking is bounded by the ejection window.
pub fn default_contracts() -> Vec<ContractSpec> {
    let spec = |id: &str, parent: Option<&str>, owner: &str, component, budget: Option<u64>, rule| ContractSpec {
        id: id.into(),
        parent: parent.map(ContractId::from),
        owner: owner.into(),
        component,
        budget: budget.map(Duration),
        budget_min: Duration::ZERO,
        budget_max: None,
        rule,
        assumption: default_assumption(),
    };
    let window = LineGeometry::default().eject_window;
    vec![
        spec("end_to_end", None, "RM_top", None, None, BudgetRule::EndToEnd { plus: window }),
        spec("processing", Some("end_to_end"), "RM_proc", None, None, BudgetRule::EndToEnd { plus: Duration::ZERO }),
        spec("CP", Some("processing"), "RM_proc", Some(Component::CP), Some(40_000), BudgetRule::Fixed),
        spec("BS", Some("processing"), "RM_proc", Some(Component::BS), Some(20_000), BudgetRule::Fixed),
        spec("EC", Some("processing"), "RM_proc", Some(Component::EC), Some(20_000), BudgetRule::Fixed),
        spec("tracking", Some("end_to_end"), "RM_track", None, Some(window.as_micros()), BudgetRule::Fixed),
        spec("PC", Some("tracking"), "RM_track", Some(Component::PC), Some(10_000), BudgetRule::Fixed),
    ]
}

pub fn default_rms() -> Vec<RmSpec> {
    use ActionKind::*;
    vec![
        RmSpec {
            id: "RM_top".into(),
            parent: None,
            actions: vec![Reallocate, Degrade, SafeStop],
        },
        RmSpec {
            id: "RM_proc".into(),
            parent: Some("RM_top".into()),
            actions: vec![ModeSwitch, Reallocate, Escalate],
        },
        RmSpec {
            id: "RM_track".into(),
            parent: Some("RM_top".into()),
            actions: vec![ModeSwitch, Reallocate, Escalate],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub duration: Duration,
    pub arrivals: Arrivals,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default = "yes")]
    pub rm_enabled: bool,
    #[serde(default)]
    pub config: Config,
}

fn yes() -> bool {
    true
}

/// A validated, fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: Duration,
    pub rm_enabled: bool,
    pub arrivals: Vec<(Timestamp, Color)>,
    pub faults: Vec<FaultSpec>,
    pub geometry: LineGeometry,
    pub speed_levels: Vec<SpeedLevel>,
    pub modes: BTreeMap<Component, Vec<Mode>>,
    pub contracts: ContractTree,
    pub rms: Vec<RmNode>,
    pub msg_latency: Duration,
    pub observer: ObserverConfig,
}

impl Scenario {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            path: path.to_owned(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: shown.clone(),
            source,
        })?;
        Scenario::from_json(&text, &shown)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios always serialize")
    }

    /// Validates everything and builds the run configuration.
    pub fn resolve(&self) -> Result<SimConfig, ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let cfg = &self.config;
        cfg.geometry.validate().map_err(|e| invalid("config.geometry", e.to_string()))?;
        validate_speed_levels(&cfg.speed_levels).map_err(|e| invalid("config.speed_levels", e.to_string()))?;
        for (i, level) in cfg.speed_levels.iter().enumerate() {
            end_to_end_budget(&cfg.geometry, level)
                .map_err(|e| invalid(format!("config.speed_levels[{i}]"), e.to_string()))?;
        }
        cfg.observer.validate().map_err(|e| invalid("config.observer", e.to_string()))?;
        validate_modes(&cfg.modes)?;

        let arrivals = self.resolve_arrivals()?;
        for (i, f) in self.faults.iter().enumerate() {
            f.validate(i).map_err(|e| invalid(format!("faults[{i}]"), e.to_string()))?;
        }

        let mut rms = build_rms(&cfg.rms)?;
        let level0 = end_to_end_budget(&cfg.geometry, &cfg.speed_levels[0]).expect("checked above");
        let contracts = build_contracts(&cfg.contracts, &mut rms, level0)?;

        Ok(SimConfig {
            seed: self.seed,
            duration: self.duration,
            rm_enabled: self.rm_enabled,
            arrivals,
            faults: self.faults.clone(),
            geometry: cfg.geometry.clone(),
            speed_levels: cfg.speed_levels.clone(),
            modes: cfg.modes.clone(),
            contracts,
            rms,
            msg_latency: cfg.msg_latency,
            observer: cfg.observer,
        })
    }

    fn resolve_arrivals(&self) -> Result<Vec<(Timestamp, Color)>, ScenarioError> {
        let list: Vec<(Timestamp, Color)> = match &self.arrivals {
            Arrivals::Explicit(list) => list.iter().map(|a| (a.t, a.color)).collect(),
            Arrivals::Rate { mean_interarrival } => generate_arrivals(self.seed, *mean_interarrival, self.duration)
                .map_err(|e| invalid("arrivals.rate", e.to_string()))?,
            Arrivals::Periodic { start, interval, count } => {
                if *interval == Duration::ZERO && *count > 1 {
                    return Err(invalid("arrivals.periodic.interval", "must be positive"));
                }
                (0..*count)
                    .map(|k| (*start + interval.times(k), Color::from_index(k as usize)))
                    .collect()
            }
        };
        if let Some(i) = list.windows(2).position(|w| w[0].0 >= w[1].0) {
            return Err(invalid(format!("arrivals[{}]", i + 1), "arrival times must strictly increase"));
        }
        Ok(list)
    }
}

fn validate_modes(modes: &BTreeMap<Component, Vec<Mode>>) -> Result<(), ScenarioError> {
    for c in Component::ALL {
        let list = modes
            .get(&c)
            .ok_or_else(|| invalid(format!("config.modes.{c}"), "component needs at least one mode"))?;
        if list.is_empty() {
            return Err(invalid(format!("config.modes.{c}"), "component needs at least one mode"));
        }
        let names: BTreeSet<&str> = list.iter().map(|m| m.name.as_str()).collect();
        if names.len() != list.len() {
            return Err(invalid(format!("config.modes.{c}"), "duplicate mode name"));
        }
    }
    Ok(())
}

fn build_rms(specs: &[RmSpec]) -> Result<Vec<RmNode>, ScenarioError> {
    let mut ids = BTreeSet::new();
    for (i, r) in specs.iter().enumerate() {
        if !ids.insert(&r.id) {
            return Err(invalid(format!("config.rms[{i}].id"), format!("duplicate RM `{}`", r.id)));
        }
    }
    let roots: Vec<&RmSpec> = specs.iter().filter(|r| r.parent.is_none()).collect();
    if roots.len() != 1 {
        return Err(invalid("config.rms", format!("expected exactly one root RM, found {}", roots.len())));
    }
    for (i, r) in specs.iter().enumerate() {
        if let Some(p) = &r.parent {
            if !ids.contains(p) {
                return Err(invalid(format!("config.rms[{i}].parent"), format!("unknown RM `{p}`")));
            }
            if r.actions.iter().any(|a| matches!(a, ActionKind::Degrade | ActionKind::SafeStop)) {
                return Err(invalid(
                    format!("config.rms[{i}].actions"),
                    "degrade and safe_stop are reserved for the root RM",
                ));
            }
        }
    }
    // Every RM must reach the root without revisiting a node.
    let parent: BTreeMap<&RmId, Option<&RmId>> = specs.iter().map(|r| (&r.id, r.parent.as_ref())).collect();
    for r in specs {
        let mut seen = BTreeSet::new();
        let mut cur = Some(&r.id);
        while let Some(id) = cur {
            if !seen.insert(id) {
                return Err(invalid("config.rms", format!("RM hierarchy has a cycle through `{id}`")));
            }
            cur = parent[id];
        }
    }
    Ok(specs
        .iter()
        .map(|r| RmNode {
            id: r.id.clone(),
            parent: r.parent.clone(),
            children: specs
                .iter()
                .filter(|c| c.parent.as_ref() == Some(&r.id))
                .map(|c| c.id.clone())
                .collect(),
            owned: Vec::new(),
            actions: r.actions.clone(),
        })
        .collect())
}

fn is_rm_ancestor_or_self(rms: &[RmNode], ancestor: &RmId, of: &RmId) -> bool {
    let mut cur = Some(of);
    while let Some(id) = cur {
        if id == ancestor {
            return true;
        }
        cur = rms.iter().find(|r| &r.id == id).and_then(|r| r.parent.as_ref());
    }
    false
}

fn build_contracts(
    specs: &[ContractSpec],
    rms: &mut [RmNode],
    end_to_end: Duration,
) -> Result<ContractTree, ScenarioError> {
    let field = |i: usize, f: &str| format!("config.contracts[{i}].{f}");
    let mut ids = BTreeSet::new();
    let mut components = BTreeSet::new();
    for (i, c) in specs.iter().enumerate() {
        if !ids.insert(&c.id) {
            return Err(invalid(field(i, "id"), format!("duplicate contract `{}`", c.id)));
        }
        if !rms.iter().any(|r| r.id == c.owner) {
            return Err(invalid(field(i, "owner"), format!("unknown RM `{}`", c.owner)));
        }
        if let Some(comp) = c.component {
            if !components.insert(comp) {
                return Err(invalid(field(i, "component"), format!("{comp} has more than one contract")));
            }
        }
    }
    for (i, c) in specs.iter().enumerate() {
        if let Some(p) = &c.parent {
            if !ids.contains(p) {
                return Err(invalid(field(i, "parent"), format!("unknown contract `{p}`")));
            }
            let parent_owner = &specs.iter().find(|s| &s.id == p).expect("checked").owner;
            if !is_rm_ancestor_or_self(rms, parent_owner, &c.owner) {
                return Err(invalid(
                    field(i, "owner"),
                    format!("owner `{}` is not below `{parent_owner}`, the owner of `{p}`", c.owner),
                ));
            }
        }
    }
    let roots: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].parent.is_none()).collect();
    if roots.len() != 1 {
        return Err(invalid("config.contracts", format!("expected exactly one root contract, found {}", roots.len())));
    }

    fn build(
        i: usize,
        specs: &[ContractSpec],
        end_to_end: Duration,
        visited: &mut BTreeSet<usize>,
    ) -> Result<ContractNode, ScenarioError> {
        let s = &specs[i];
        visited.insert(i);
        let budget = match s.rule {
            BudgetRule::EndToEnd { plus } => end_to_end + plus,
            BudgetRule::Fixed => s
                .budget
                .ok_or_else(|| invalid(format!("config.contracts[{i}].budget"), "fixed contracts need a budget"))?,
        };
        let children = (0..specs.len())
            .filter(|&j| specs[j].parent.as_ref() == Some(&s.id))
            .map(|j| build(j, specs, end_to_end, visited))
            .collect::<Result<Vec<_>, _>>()?;
        if s.component.is_some() && !children.is_empty() {
            return Err(invalid(
                format!("config.contracts[{i}].component"),
                "only leaf contracts can be bound to a component",
            ));
        }
        Ok(ContractNode {
            contract: LatencyContract {
                id: s.id.clone(),
                component: s.component,
                assumption: s.assumption.clone(),
                budget,
                budget_min: s.budget_min,
                budget_max: s.budget_max,
            },
            children,
            owner_rm: s.owner.clone(),
            rule: s.rule,
        })
    }

    let mut visited = BTreeSet::new();
    let root = build(roots[0], specs, end_to_end, &mut visited)?;
    if visited.len() != specs.len() {
        return Err(invalid("config.contracts", "contract hierarchy has a cycle or detached nodes"));
    }
    let tree = ContractTree::new(root);
    if let Some(e) = tree.bound_failures().into_iter().next() {
        return Err(invalid("config.contracts", e.to_string()));
    }
    if let Some(id) = tree.refinement_failures().into_iter().next() {
        return Err(invalid("config.contracts", format!("children of `{id}` exceed its budget")));
    }
    for rm in rms.iter_mut() {
        rm.owned = tree
            .nodes()
            .into_iter()
            .filter(|n| n.owner_rm == rm.id)
            .map(|n| n.contract.id.clone())
            .collect();
    }
    Ok(tree)
}
