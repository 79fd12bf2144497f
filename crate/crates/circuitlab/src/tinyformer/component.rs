//! Component identifiers and their coarse classes.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Coarse functional class of a component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentClass {
    Attn,
    Mlp,
    Other,
}

/// One independent parameter matrix of the model.
///
/// Attention matrices are per head, MLP matrices per layer. Embedding and
/// unembedding are components too but are excluded from localization budgets,
/// freezing and pruning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentId {
    Embed,
    Wq { layer: u32, head: u32 },
    Wk { layer: u32, head: u32 },
    Wv { layer: u32, head: u32 },
    Wo { layer: u32, head: u32 },
    Wup { layer: u32 },
    Wdown { layer: u32 },
    Unembed,
}

impl ComponentId {
    pub fn class(&self) -> ComponentClass {
        match self {
            ComponentId::Wq { .. }
            | ComponentId::Wk { .. }
            | ComponentId::Wv { .. }
            | ComponentId::Wo { .. } => ComponentClass::Attn,
            ComponentId::Wup { .. } | ComponentId::Wdown { .. } => ComponentClass::Mlp,
            ComponentId::Embed | ComponentId::Unembed => ComponentClass::Other,
        }
    }

    pub fn layer(&self) -> Option<u32> {
        match self {
            ComponentId::Wq { layer, .. }
            | ComponentId::Wk { layer, .. }
            | ComponentId::Wv { layer, .. }
            | ComponentId::Wo { layer, .. }
            | ComponentId::Wup { layer }
            | ComponentId::Wdown { layer } => Some(*layer),
            _ => None,
        }
    }

    pub fn head(&self) -> Option<u32> {
        match self {
            ComponentId::Wq { head, .. }
            | ComponentId::Wk { head, .. }
            | ComponentId::Wv { head, .. }
            | ComponentId::Wo { head, .. } => Some(*head),
            _ => None,
        }
    }

    /// Whether the component may be localized, frozen or pruned.
    pub fn is_eligible(&self) -> bool {
        !matches!(self, ComponentId::Embed | ComponentId::Unembed)
    }

    /// Sort key for the canonical enumeration: embedding first, then each
    /// layer's attention heads (kind-major), then its MLP, unembedding last.
    fn sort_key(&self) -> (u32, u8, u32) {
        match self {
            ComponentId::Embed => (0, 0, 0),
            ComponentId::Wq { layer, head } => (layer + 1, 0, *head),
            ComponentId::Wk { layer, head } => (layer + 1, 1, *head),
            ComponentId::Wv { layer, head } => (layer + 1, 2, *head),
            ComponentId::Wo { layer, head } => (layer + 1, 3, *head),
            ComponentId::Wup { layer } => (layer + 1, 4, 0),
            ComponentId::Wdown { layer } => (layer + 1, 5, 0),
            ComponentId::Unembed => (u32::MAX, 0, 0),
        }
    }
}

impl Ord for ComponentId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ComponentId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embed => write!(f, "embed"),
            ComponentId::Unembed => write!(f, "unembed"),
            ComponentId::Wq { layer, head } => write!(f, "wq.{layer}.{head}"),
            ComponentId::Wk { layer, head } => write!(f, "wk.{layer}.{head}"),
            ComponentId::Wv { layer, head } => write!(f, "wv.{layer}.{head}"),
            ComponentId::Wo { layer, head } => write!(f, "wo.{layer}.{head}"),
            ComponentId::Wup { layer } => write!(f, "wup.{layer}"),
            ComponentId::Wdown { layer } => write!(f, "wdown.{layer}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::InvalidArgument(format!("unparseable component id {s:?}"));
        let num = |p: &str| p.parse::<u32>().map_err(|_| bad());
        match parts.as_slice() {
            ["embed"] => Ok(ComponentId::Embed),
            ["unembed"] => Ok(ComponentId::Unembed),
            ["wq", l, h] => Ok(ComponentId::Wq { layer: num(l)?, head: num(h)? }),
            ["wk", l, h] => Ok(ComponentId::Wk { layer: num(l)?, head: num(h)? }),
            ["wv", l, h] => Ok(ComponentId::Wv { layer: num(l)?, head: num(h)? }),
            ["wo", l, h] => Ok(ComponentId::Wo { layer: num(l)?, head: num(h)? }),
            ["wup", l] => Ok(ComponentId::Wup { layer: num(l)? }),
            ["wdown", l] => Ok(ComponentId::Wdown { layer: num(l)? }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ComponentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComponentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e| D::Error::custom(format!("{e}")))
    }
}
