//! Identifiers shared across the contract, observer, RM and plant layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Identifier of a latency contract (a node of the contract tree).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContractId(pub String);

/// Identifier of a resilience manager.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RmId(pub String);

impl ContractId {
    pub fn new(s: impl Into<String>) -> Self {
        ContractId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl RmId {
    pub fn new(s: impl Into<String>) -> Self {
        RmId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContractId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for RmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ContractId {
    fn from(s: &str) -> Self {
        ContractId(s.to_owned())
    }
}

impl From<&str> for RmId {
    fn from(s: &str) -> Self {
        RmId(s.to_owned())
    }
}

/// The computational components of the sorting line that carry latency contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    /// Pulse counter: reports belt steps to the ejector controller.
    PC,
    /// Color processor: turns a color-sensor sample into a color.
    CP,
    /// Bin selector: maps the color to a bin.
    BS,
    /// Ejector controller: fires the ejector when the token is aligned.
    EC,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::PC, Component::CP, Component::BS, Component::EC];

    pub fn name(self) -> &'static str {
        match self {
            Component::PC => "PC",
            Component::CP => "CP",
            Component::BS => "BS",
            Component::EC => "EC",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown component `{s}`"))
    }
}

/// Token colors; each maps to exactly one bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    White,
    Red,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::White, Color::Red, Color::Blue];

    /// Bin index (0-based) this color is sorted into.
    pub fn bin(self) -> usize {
        match self {
            Color::White => 0,
            Color::Red => 1,
            Color::Blue => 2,
        }
    }

    pub fn from_index(i: usize) -> Color {
        Color::ALL[i % 3]
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::White => "white",
            Color::Red => "red",
            Color::Blue => "blue",
        })
    }
}
