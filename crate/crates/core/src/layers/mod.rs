//! Layer vocabulary of the backbone and heads.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{conv2d, conv_output_size, Conv2d};
pub use linear::{linear, Linear};
pub use norm::{
    batch_norm_train, batch_norm_with_stats, channel_stats, instance_norm, BatchNorm2d, BatchStats,
    BatchNormState, BnMode, InstanceNorm2d, InstanceNormState, StatsSelection,
};
pub use pool::{avg_pool_global, avg_pool_striped};

/// Named parameter groups. Every tensor of a model belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Conv,
    BnGamma,
    BnBeta,
    BnMu,
    BnSigma2,
    In,
    FcHeads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Conv,
        ParamGroup::BnGamma,
        ParamGroup::BnBeta,
        ParamGroup::BnMu,
        ParamGroup::BnSigma2,
        ParamGroup::In,
        ParamGroup::FcHeads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::BnGamma => "bn_gamma",
            ParamGroup::BnBeta => "bn_beta",
            ParamGroup::BnMu => "bn_mu",
            ParamGroup::BnSigma2 => "bn_sigma2",
            ParamGroup::In => "in",
            ParamGroup::FcHeads => "fc_heads",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|g| g.name()).collect();
                Error::Config(format!(
                    "unknown parameter group `{s}`; valid groups: {}",
                    valid.join(", ")
                ))
            })
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of [`ParamGroup`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<ParamGroup>", into = "Vec<ParamGroup>")]
pub struct GroupSet(u8);

impl From<Vec<ParamGroup>> for GroupSet {
    fn from(groups: Vec<ParamGroup>) -> Self {
        GroupSet::from_groups(&groups)
    }
}

impl From<GroupSet> for Vec<ParamGroup> {
    fn from(set: GroupSet) -> Self {
        set.iter().collect()
    }
}

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        Self::from_groups(&ParamGroup::ALL)
    }

    pub fn from_groups(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    /// The four batch-norm kinds.
    pub fn all_bn() -> Self {
        Self::from_groups(&[
            ParamGroup::BnGamma,
            ParamGroup::BnBeta,
            ParamGroup::BnMu,
            ParamGroup::BnSigma2,
        ])
    }

    /// Parse a comma separated list. `none`/empty gives the empty set,
    /// `all-bn` the four batch-norm kinds and `all` every group.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = GroupSet::EMPTY;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "none" => {}
                "all" => set = set.union(Self::all()),
                "all-bn" | "bn" => set = set.union(Self::all_bn()),
                other => set.insert(ParamGroup::parse(other)?),
            }
        }
        Ok(set)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn insert(&mut self, g: ParamGroup) {
        self.0 |= g.bit();
    }

    pub fn remove(&mut self, g: ParamGroup) {
        self.0 &= !g.bit();
    }

    pub fn union(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    /// Canonical comma separated form (`none` when empty).
    pub fn to_list(self) -> String {
        if self.is_empty() {
            return "none".into();
        }
        self.iter().map(ParamGroup::name).collect::<Vec<_>>().join(",")
    }
}

/// A named tensor owned by a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor) -> Self {
        Param {
            name: name.into(),
            group,
            value,
        }
    }
}

/// Records which parameters were put on the tape as gradient-tracked leaves
/// during one forward pass.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: GroupSet,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn new(trainable: GroupSet) -> Self {
        Binder {
            trainable,
            bound: Vec::new(),
        }
    }

    /// Nothing is trainable; the forward pass is a pure evaluation.
    pub fn frozen() -> Self {
        Self::new(GroupSet::EMPTY)
    }

    pub fn trainable(&self) -> GroupSet {
        self.trainable
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Param) -> Var {
        if self.trainable.contains(p.group) {
            let v = tape.param(&p.value);
            self.bound.push((p.name.clone(), v));
            v
        } else {
            tape.constant(p.value.clone())
        }
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_parsing() {
        let s = GroupSet::parse("bn_gamma, bn_beta").unwrap();
        assert!(s.contains(ParamGroup::BnGamma) && s.contains(ParamGroup::BnBeta));
        assert!(!s.contains(ParamGroup::BnMu));
        assert_eq!(s.to_list(), "bn_gamma,bn_beta");
        assert!(GroupSet::parse("none").unwrap().is_empty());
        assert_eq!(GroupSet::parse("all-bn").unwrap(), GroupSet::all_bn());
        match GroupSet::parse("bn_gama") {
            Err(Error::Config(msg)) => assert!(msg.contains("bn_gamma") && msg.contains("fc_heads")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
