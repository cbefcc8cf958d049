//! Annotated logic over the five narrative predicates, with least-fixpoint deduction.
//!
//! Annotations are scalar lower bounds in `[0, 1]` ordered by value; the join of two
//! annotations is their maximum. A rule fires for a grounding when every body atom is
//! present with an annotation at or above the literal's threshold. Heads either take a
//! constant annotation or propagate the minimum of the matched body annotations, and an
//! optional aggregation collapses many groundings into one head value.

mod deduce;
pub mod templates;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::narrative::{FeatureId, Narrative};

pub use deduce::deduce;
pub use templates::{aggregate_s_feat, assoc_facts, corpus_sim_rule, story_feature_rule};

/// Float tolerance for annotation comparisons on the 0.2 grid.
pub const EPS: f64 = 1e-9;

/// Rating grid `{0, 0.2, 0.4, 0.6, 0.8, 1.0}`.
pub const GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Annotation(f64);

impl Annotation {
    pub const BOTTOM: Annotation = Annotation(0.0);
    pub const TOP: Annotation = Annotation(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (-EPS..=1.0 + EPS).contains(&value) {
            Ok(Annotation(value.clamp(0.0, 1.0)))
        } else {
            Err(Error::Program(format!("annotation {value} outside [0, 1]")))
        }
    }

    /// Annotation for grid level `0..=5`.
    pub fn level(level: u8) -> Self {
        Annotation(GRID[level.min(5) as usize])
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn join(self, other: Annotation) -> Annotation {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }

    /// `self >= other` up to [`EPS`].
    pub fn satisfies(self, threshold: Annotation) -> bool {
        self.0 + EPS >= threshold.0
    }

    /// Grid level `0..=5` if the annotation sits on the grid.
    pub fn grid_level(self) -> Option<u8> {
        GRID.iter()
            .position(|g| (g - self.0).abs() <= EPS)
            .map(|p| p as u8)
    }
}

impl TryFrom<f64> for Annotation {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Annotation::new(v)
    }
}

impl From<Annotation> for f64 {
    fn from(a: Annotation) -> f64 {
        a.0
    }
}

impl fmt::Display for Annotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    SFeat,
    CFeat,
    CorpusSim,
    Contains,
    Associated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConstKind {
    Story,
    Chunk,
    Narrative,
    Feature,
}

impl Predicate {
    pub fn signature(self) -> [ConstKind; 2] {
        use ConstKind::*;
        match self {
            Predicate::SFeat | Predicate::CorpusSim => [Story, Narrative],
            Predicate::CFeat => [Chunk, Feature],
            Predicate::Contains => [Story, Chunk],
            Predicate::Associated => [Narrative, Feature],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::SFeat => "s_feat",
            Predicate::CFeat => "c_feat",
            Predicate::CorpusSim => "corpus_sim",
            Predicate::Contains => "contains",
            Predicate::Associated => "associated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Const {
    Story(String),
    Chunk(String),
    Narrative(Narrative),
    Feature(FeatureId),
}

impl Const {
    pub fn kind(&self) -> ConstKind {
        match self {
            Const::Story(_) => ConstKind::Story,
            Const::Chunk(_) => ConstKind::Chunk,
            Const::Narrative(_) => ConstKind::Narrative,
            Const::Feature(_) => ConstKind::Feature,
        }
    }
}

impl fmt::Display for Const {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Const::Story(s) | Const::Chunk(s) => f.write_str(s),
            Const::Narrative(n) => write!(f, "{n}"),
            Const::Feature(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroundAtom {
    pub predicate: Predicate,
    pub args: [Const; 2],
}

impl GroundAtom {
    pub fn new(predicate: Predicate, a: Const, b: Const) -> Result<Self> {
        let atom = GroundAtom {
            predicate,
            args: [a, b],
        };
        atom.validate()?;
        Ok(atom)
    }

    pub fn s_feat(story: &str, n: Narrative) -> Self {
        GroundAtom {
            predicate: Predicate::SFeat,
            args: [Const::Story(story.into()), Const::Narrative(n)],
        }
    }

    pub fn corpus_sim(story: &str, n: Narrative) -> Self {
        GroundAtom {
            predicate: Predicate::CorpusSim,
            args: [Const::Story(story.into()), Const::Narrative(n)],
        }
    }

    pub fn c_feat(chunk: &str, f: FeatureId) -> Self {
        GroundAtom {
            predicate: Predicate::CFeat,
            args: [Const::Chunk(chunk.into()), Const::Feature(f)],
        }
    }

    pub fn contains(story: &str, chunk: &str) -> Self {
        GroundAtom {
            predicate: Predicate::Contains,
            args: [Const::Story(story.into()), Const::Chunk(chunk.into())],
        }
    }

    pub fn associated(n: Narrative, f: FeatureId) -> Self {
        GroundAtom {
            predicate: Predicate::Associated,
            args: [Const::Narrative(n), Const::Feature(f)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (arg, kind) in self.args.iter().zip(self.predicate.signature()) {
            if arg.kind() != kind {
                return Err(Error::Program(format!(
                    "{self}: argument `{arg}` is not a {kind:?} constant"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}, {})",
            self.predicate.name(),
            self.args[0],
            self.args[1]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Var(String),
    Const(Const),
}

impl Term {
    pub fn var(name: &str) -> Term {
        Term::Var(name.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomPattern {
    pub predicate: Predicate,
    pub args: [Term; 2],
}

impl AtomPattern {
    pub fn new(predicate: Predicate, a: Term, b: Term) -> Self {
        AtomPattern {
            predicate,
            args: [a, b],
        }
    }

    fn vars(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|t| match t {
            Term::Var(v) => Some(v.as_str()),
            Term::Const(_) => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadAnnotation {
    /// Minimum of the matched body annotations.
    CopyBody,
    Constant(Annotation),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyLiteral {
    pub atom: AtomPattern,
    pub threshold: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    #[default]
    Mean,
    Max,
    Median,
}

impl Agg {
    /// Aggregates `values`; an empty slice yields bottom. Median is the lower median.
    pub fn apply(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return 0.0;
        }
        match self {
            Agg::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Agg::Max => values.iter().copied().fold(0.0, f64::max),
            Agg::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                v[(v.len() - 1) / 2]
            }
        }
    }
}

impl fmt::Display for Agg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agg::Mean => "mean",
            Agg::Max => "max",
            Agg::Median => "median",
        })
    }
}

impl std::str::FromStr for Agg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Agg::Mean),
            "max" => Ok(Agg::Max),
            "median" => Ok(Agg::Median),
            other => Err(Error::Config(format!("unknown aggregator `{other}`"))),
        }
    }
}

/// Collapses all groundings of a copy-body rule that share a head grounding.
///
/// Per value of `key`, the propagated body annotations are joined (max). The per-key
/// values are then combined with `agg` over every key value admitted by the body
/// literal at index `domain`; keys with no matching grounding contribute bottom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    pub key: String,
    pub domain: usize,
    pub agg: Agg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub head: AtomPattern,
    pub head_annotation: HeadAnnotation,
    pub body: Vec<BodyLiteral>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregation>,
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        let body_vars: Vec<&str> = self.body.iter().flat_map(|l| l.atom.vars()).collect();
        for v in self.head.vars() {
            if !body_vars.contains(&v) {
                return Err(Error::Program(format!(
                    "head variable `{v}` does not occur in the body"
                )));
            }
        }
        for pat in std::iter::once(&self.head).chain(self.body.iter().map(|l| &l.atom)) {
            for (term, kind) in pat.args.iter().zip(pat.predicate.signature()) {
                if let Term::Const(c) = term {
                    if c.kind() != kind {
                        return Err(Error::Program(format!(
                            "constant `{c}` in {} pattern is not a {kind:?}",
                            pat.predicate.name()
                        )));
                    }
                }
            }
        }
        if let Some(agg) = &self.aggregate {
            if self.head_annotation != HeadAnnotation::CopyBody {
                return Err(Error::Program(
                    "aggregating rules must use copy-body heads".into(),
                ));
            }
            let domain = self.body.get(agg.domain).ok_or_else(|| {
                Error::Program(format!("aggregation domain literal {} missing", agg.domain))
            })?;
            let head_vars: Vec<&str> = self.head.vars().collect();
            if head_vars.contains(&agg.key.as_str()) {
                return Err(Error::Program(
                    "aggregation key must not occur in the head".into(),
                ));
            }
            if !domain.atom.vars().any(|v| v == agg.key) {
                return Err(Error::Program(
                    "aggregation key must occur in the domain literal".into(),
                ));
            }
            if let Some(v) = domain
                .atom
                .vars()
                .find(|v| *v != agg.key && !head_vars.contains(v))
            {
                return Err(Error::Program(format!(
                    "domain literal variable `{v}` is neither the key nor a head variable"
                )));
            }
        }
        Ok(())
    }
}

/// Annotated atoms, one entry per atom; inserting joins with the stored value.
pub type Interpretation = BTreeMap<GroundAtom, Annotation>;

/// Joins `value` into `store`; returns whether the stored annotation rose.
pub fn join_into(store: &mut Interpretation, atom: GroundAtom, value: Annotation) -> bool {
    match store.get_mut(&atom) {
        Some(cur) if value.value() > cur.value() + EPS => {
            *cur = value;
            true
        }
        Some(_) => false,
        None => {
            store.insert(atom, value);
            true
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogicProgram {
    pub facts: Interpretation,
    pub rules: Vec<Rule>,
}

pub const PROGRAM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FactEntry {
    atom: GroundAtom,
    annotation: Annotation,
}

#[derive(Serialize, Deserialize)]
struct ProgramFile {
    version: u32,
    facts: Vec<FactEntry>,
    rules: Vec<Rule>,
}

impl LogicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_fact(&mut self, atom: GroundAtom, annotation: Annotation) {
        join_into(&mut self.facts, atom, annotation);
    }

    pub fn extend_facts(&mut self, facts: impl IntoIterator<Item = (GroundAtom, Annotation)>) {
        for (a, v) in facts {
            self.add_fact(a, v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (atom, ann) in &self.facts {
            atom.validate()?;
            if atom.predicate == Predicate::CFeat && ann.grid_level().is_none() {
                return Err(Error::Program(format!(
                    "{atom} annotation {ann} is off the rating grid"
                )));
            }
        }
        self.rules.iter().try_for_each(Rule::validate)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProgramFile {
            version: PROGRAM_VERSION,
            facts: self
                .facts
                .iter()
                .map(|(atom, &annotation)| FactEntry {
                    atom: atom.clone(),
                    annotation,
                })
                .collect(),
            rules: self.rules.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(json)?;
        check_version(&value, PROGRAM_VERSION)?;
        let file: ProgramFile = serde_json::from_value(value)?;
        let mut program = LogicProgram::new();
        program.extend_facts(file.facts.into_iter().map(|f| (f.atom, f.annotation)));
        program.rules = file.rules;
        program.validate()?;
        Ok(program)
    }
}

/// Rejects documents whose `version` field differs from `expected`.
pub(crate) fn check_version(value: &serde_json::Value, expected: u32) -> Result<()> {
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config("missing `version` field".into()))? as u32;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}
