//! Coordination-protocol payloads and the in-simulation message layer.
//!
//! Every message is delivered `latency` after it is sent. Because latency is
//! constant and the event queue breaks timestamp ties by insertion order,
//! delivery is FIFO per sender/receiver pair (indeed globally FIFO).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ids::{Component, ContractId, RmId};
use crate::observer::ViolationReport;
use crate::time::{Duration, Timestamp};

/// A party on the message layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Observer(ContractId),
    Rm(RmId),
    Component(Component),
    /// The motor controller: receives speed and stop commands.
    Belt,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Observer(c) => write!(f, "observer:{c}"),
            Endpoint::Rm(r) => write!(f, "rm:{r}"),
            Endpoint::Component(c) => write!(f, "component:{c}"),
            Endpoint::Belt => f.write_str("belt"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "belt" {
            return Ok(Endpoint::Belt);
        }
        match s.split_once(':') {
            Some(("observer", c)) => Ok(Endpoint::Observer(ContractId::new(c))),
            Some(("rm", r)) => Ok(Endpoint::Rm(RmId::new(r))),
            Some(("component", c)) => c.parse().map(Endpoint::Component),
            _ => Err(format!("bad endpoint `{s}`")),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A child's demand as carried in an escalation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub contract: ContractId,
    pub demand: Duration,
    pub min: Duration,
    /// `None`: bounded by whatever the parent budget becomes.
    pub max: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessageBody {
    Violation(ViolationReport),
    Escalation {
        from_rm: RmId,
        /// The contract node whose children could not be satisfied.
        node: ContractId,
        required_budget: Duration,
        demands: Vec<DemandEntry>,
    },
    /// One member of an atomic batch; the batch commits when its last member lands.
    ParamUpdate {
        contract: ContractId,
        new_budget: Duration,
        batch_index: u32,
        batch_len: u32,
    },
    ModeCmd {
        component: Component,
        mode: String,
    },
    DegradeCmd {
        level: usize,
    },
    StopCmd,
    /// Experimental restoration: `contract` has run clean since its last
    /// violation, the last clean job took `latest`. `node` is its parent.
    Recovered {
        contract: ContractId,
        node: ContractId,
        latest: Duration,
    },
    Ack {
        acked: u64,
    },
}

impl MessageBody {
    pub fn is_ack(&self) -> bool {
        matches!(self, MessageBody::Ack { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmMessage {
    pub id: u64,
    pub correlation: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub sent_at: Timestamp,
    pub body: MessageBody,
}

/// A message and the instant it will be received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledDelivery {
    pub at: Timestamp,
    pub msg: RmMessage,
}

#[derive(Debug, Clone)]
pub struct MessageLayer {
    latency: Duration,
    next_id: u64,
}

impl MessageLayer {
    pub fn new(latency: Duration) -> Self {
        MessageLayer { latency, next_id: 0 }
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    /// Stamps a fresh message id.
    pub fn compose(
        &mut self,
        from: Endpoint,
        to: Endpoint,
        correlation: u64,
        body: MessageBody,
        now: Timestamp,
    ) -> RmMessage {
        let id = self.next_id;
        self.next_id += 1;
        RmMessage {
            id,
            correlation,
            from,
            to,
            sent_at: now,
            body,
        }
    }

    /// Receipt is scheduled `latency` after `now`.
    pub fn deliver(&self, msg: RmMessage, now: Timestamp) -> ScheduledDelivery {
        ScheduledDelivery {
            at: now + self.latency,
            msg,
        }
    }
}
