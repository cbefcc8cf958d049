//! Learning corpus-similarity rules from a labeled training corpus.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::diagnosis::{observations, Diagnoser};
use crate::error::{Error, Result};
use crate::logic::{
    aggregate_s_feat, assoc_facts, check_version, corpus_sim_rule, story_feature_rule, Agg,
    Annotation, LogicProgram, Rule, EPS, GRID,
};
use crate::narrative::Narrative;

/// Survival confidences: `conf(mu)` is the fraction of training stories whose story-level
/// feature annotation is at least `mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    pub orientation: Narrative,
    /// Grid level index (0..=5, i.e. mu = level / 5) to confidence.
    pub rows: BTreeMap<u8, f64>,
    pub corpus_size: usize,
    pub agg: Agg,
}

impl ConfidenceTable {
    pub fn from_story_features(orientation: Narrative, agg: Agg, s_feats: &[f64]) -> Result<Self> {
        if s_feats.is_empty() {
            return Err(Error::Learn("training corpus is empty".into()));
        }
        let n = s_feats.len();
        let rows = GRID
            .iter()
            .enumerate()
            .map(|(level, &mu)| {
                let reached = s_feats.iter().filter(|&&s| s + EPS >= mu).count();
                (level as u8, reached as f64 / n as f64)
            })
            .collect();
        Ok(ConfidenceTable {
            orientation,
            rows,
            corpus_size: n,
            agg,
        })
    }

    /// Confidence at grid level `level` (0..=5); absent levels count as 0.
    pub fn conf(&self, level: u8) -> f64 {
        self.rows.get(&level).copied().unwrap_or(0.0)
    }

    /// One rule per grid level with positive confidence:
    /// `corpus_sim(X, n)_{mu * conf(mu)} <- s_feat(X, n) >= mu`.
    ///
    /// Scaling the head by its level keeps higher story annotations strictly more
    /// similar to the corpus; a bare `conf(mu)` head would let the lowest level,
    /// whose confidence is largest, dominate every story under max-join.
    pub fn rules(&self) -> Vec<Rule> {
        self.rows
            .iter()
            .filter(|(_, &conf)| conf > 0.0)
            .map(|(&level, &conf)| {
                let mu = Annotation::level(level);
                let head = Annotation::new(mu.value() * conf).expect("product of unit values");
                corpus_sim_rule(self.orientation, mu, head)
            })
            .collect()
    }

    /// corpus_sim implied by a story annotation, without running deduction.
    pub fn corpus_sim(&self, s_feat: f64) -> f64 {
        self.rows
            .iter()
            .filter(|(&level, &conf)| conf > 0.0 && s_feat + EPS >= GRID[level as usize])
            .map(|(&level, &conf)| GRID[level as usize] * conf)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: String,
    pub provider: String,
    pub model: String,
    pub agg: Agg,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedRules {
    pub table: ConfidenceTable,
    pub provenance: Provenance,
    /// Story-level feature annotation of every training story.
    pub story_features: BTreeMap<String, f64>,
}

pub const RULES_VERSION: u32 = 1;

fn level_key(level: u8) -> String {
    format!("{:.1}", GRID[level as usize])
}

#[derive(Serialize, Deserialize)]
struct RulesFile {
    version: u32,
    orientation: Narrative,
    conf: BTreeMap<String, f64>,
    agg: Agg,
    corpus_size: usize,
    provenance: Provenance,
    story_features: BTreeMap<String, f64>,
    rules: serde_json::Value,
}

impl LearnedRules {
    pub fn orientation(&self) -> Narrative {
        self.table.orientation
    }

    pub fn agg(&self) -> Agg {
        self.table.agg
    }

    /// The full program: association facts, the chunk-to-story template and the learned rules.
    pub fn program(&self) -> LogicProgram {
        let mut p = LogicProgram::new();
        p.extend_facts(assoc_facts());
        p.rules.push(story_feature_rule(self.table.agg));
        p.rules.extend(self.table.rules());
        p
    }

    pub fn to_json(&self) -> Result<String> {
        let mut rules_only = LogicProgram::new();
        rules_only.rules = self.table.rules();
        let file = RulesFile {
            version: RULES_VERSION,
            orientation: self.table.orientation,
            conf: self
                .table
                .rows
                .iter()
                .map(|(&l, &c)| (level_key(l), c))
                .collect(),
            agg: self.table.agg,
            corpus_size: self.table.corpus_size,
            provenance: self.provenance.clone(),
            story_features: self.story_features.clone(),
            rules: serde_json::from_str(&rules_only.to_json()?)?,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(json)?;
        check_version(&value, RULES_VERSION)?;
        let file: RulesFile = serde_json::from_value(value)?;
        let mut rows = BTreeMap::new();
        for (key, conf) in file.conf {
            let level = key
                .parse::<f64>()
                .ok()
                .and_then(|mu| Annotation::new(mu).ok())
                .and_then(Annotation::grid_level)
                .ok_or_else(|| {
                    Error::Config(format!("confidence key `{key}` is not a grid level"))
                })?;
            if !(0.0..=1.0).contains(&conf) {
                return Err(Error::Config(format!(
                    "confidence {conf} at {key} is outside [0,1]"
                )));
            }
            rows.insert(level, conf);
        }
        let table = ConfidenceTable {
            orientation: file.orientation,
            rows,
            corpus_size: file.corpus_size,
            agg: file.agg,
        };
        let stored = LogicProgram::from_json(&file.rules.to_string())?;
        if stored.rules != table.rules() {
            return Err(Error::Config(
                "stored rules disagree with the confidence table".into(),
            ));
        }
        Ok(LearnedRules {
            table,
            provenance: file.provenance,
            story_features: file.story_features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}

/// Diagnoses every training story's chunks, aggregates each to a story-level
/// annotation, and turns the survival fractions into rules.
pub fn learn_rules(
    corpus: &Corpus,
    diagnoser: &Diagnoser<'_>,
    agg: Agg,
    timestamp: &str,
) -> Result<LearnedRules> {
    if corpus.stories.is_empty() {
        return Err(Error::Learn("training corpus is empty".into()));
    }
    let orientation = corpus.orientation;
    let s_feats: Vec<(String, f64)> = corpus
        .stories
        .par_iter()
        .map(|story| {
            let diag = diagnoser.diagnose_chunks(story, orientation)?;
            let obs = observations(story, &diag)?;
            let s = aggregate_s_feat(&obs.atoms, story, orientation, agg)?;
            Ok((story.id.clone(), s.value()))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = s_feats.iter().map(|(_, s)| *s).collect();
    let table = ConfidenceTable::from_story_features(orientation, agg, &values)?;
    Ok(LearnedRules {
        table,
        provenance: Provenance {
            corpus_hash: corpus.hash(),
            provider: diagnoser.gateway.provider_name().to_string(),
            model: diagnoser.gateway.model().to_string(),
            agg,
            timestamp: timestamp.to_string(),
        },
        story_features: s_feats.into_iter().collect(),
    })
}
