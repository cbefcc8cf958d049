//! Narrative orientations and the feature constant space shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// Number of survey features per orientation.
pub const FEATURES_PER_NARRATIVE: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Narrative {
    #[serde(alias = "ind")]
    Individualistic,
    #[serde(alias = "col")]
    Collectivistic,
}

impl Narrative {
    pub const ALL: [Narrative; 2] = [Narrative::Individualistic, Narrative::Collectivistic];

    /// Short constant used inside logic atoms.
    pub fn short(self) -> &'static str {
        match self {
            Narrative::Individualistic => "ind",
            Narrative::Collectivistic => "col",
        }
    }

    pub fn adjective(self) -> &'static str {
        match self {
            Narrative::Individualistic => "individualistic",
            Narrative::Collectivistic => "collectivistic",
        }
    }

    pub fn opposite(self) -> Narrative {
        match self {
            Narrative::Individualistic => Narrative::Collectivistic,
            Narrative::Collectivistic => Narrative::Individualistic,
        }
    }

    /// The 20 features associated with this orientation, in id order.
    pub fn features(self) -> impl Iterator<Item = FeatureId> {
        let base = match self {
            Narrative::Individualistic => 0,
            Narrative::Collectivistic => FEATURES_PER_NARRATIVE,
        };
        (1..=FEATURES_PER_NARRATIVE).map(move |i| FeatureId(base + i))
    }
}

impl fmt::Display for Narrative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Narrative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "individualistic" | "i" => Ok(Narrative::Individualistic),
            "col" | "collectivistic" | "c" => Ok(Narrative::Collectivistic),
            other => Err(Error::Config(format!("unknown narrative `{other}`"))),
        }
    }
}

/// Transformation direction, named by source and target orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    CollectivisticToIndividualistic,
    IndividualisticToCollectivistic,
}

impl Direction {
    pub fn target(self) -> Narrative {
        match self {
            Direction::CollectivisticToIndividualistic => Narrative::Individualistic,
            Direction::IndividualisticToCollectivistic => Narrative::Collectivistic,
        }
    }

    pub fn source(self) -> Narrative {
        self.target().opposite()
    }

    pub fn toward(target: Narrative) -> Self {
        match target {
            Narrative::Individualistic => Direction::CollectivisticToIndividualistic,
            Narrative::Collectivistic => Direction::IndividualisticToCollectivistic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::CollectivisticToIndividualistic => "C->I",
            Direction::IndividualisticToCollectivistic => "I->C",
        }
    }

    /// Default feature budget: 2 for C->I, 3 for I->C.
    pub fn default_budget(self) -> usize {
        match self {
            Direction::CollectivisticToIndividualistic => 2,
            Direction::IndividualisticToCollectivistic => 3,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('→', "->").as_str() {
            "C->I" | "C2I" | "CI" => Ok(Direction::CollectivisticToIndividualistic),
            "I->C" | "I2C" | "IC" => Ok(Direction::IndividualisticToCollectivistic),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

impl Serialize for Direction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Survey feature `f1`..`f40`. `f1..f20` are individualistic, `f21..f40` their collectivistic duals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(u8);

impl FeatureId {
    pub const MAX: u8 = 2 * FEATURES_PER_NARRATIVE;

    pub fn new(id: u8) -> Option<Self> {
        (1..=Self::MAX).contains(&id).then_some(FeatureId(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn narrative(self) -> Narrative {
        if self.0 <= FEATURES_PER_NARRATIVE {
            Narrative::Individualistic
        } else {
            Narrative::Collectivistic
        }
    }

    /// The paired feature in the other orientation (`f_i <-> f_{i+20}`).
    pub fn dual(self) -> FeatureId {
        if self.0 <= FEATURES_PER_NARRATIVE {
            FeatureId(self.0 + FEATURES_PER_NARRATIVE)
        } else {
            FeatureId(self.0 - FEATURES_PER_NARRATIVE)
        }
    }

    pub fn all() -> impl Iterator<Item = FeatureId> {
        (1..=Self::MAX).map(FeatureId)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('f')
            .and_then(|n| n.parse::<u8>().ok())
            .and_then(FeatureId::new)
            .ok_or_else(|| Error::Config(format!("invalid feature id `{s}`")))
    }
}

impl Serialize for FeatureId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
