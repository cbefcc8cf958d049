//! Choosing which chunk-feature annotations to raise: hypothesis space, parsimony and
//! the budgeted argmax.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Story;
use crate::diagnosis::{FeatureCatalog, Observations};
use crate::error::{Error, Result};
use crate::logic::{
    deduce, Agg, Annotation, Const, GroundAtom, HeadAnnotation, Interpretation, LogicProgram,
    Predicate, EPS, GRID,
};
use crate::narrative::{FeatureId, Narrative};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateLevels {
    /// Only the top annotation 1.0.
    #[default]
    Top,
    /// Every grid level above the observed one.
    Grid,
}

impl std::str::FromStr for CandidateLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(CandidateLevels::Top),
            "grid" => Ok(CandidateLevels::Grid),
            other => Err(Error::Config(format!("unknown candidate levels `{other}`"))),
        }
    }
}

/// A raised chunk-feature annotation the solver may assert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chunk_index: usize,
    pub feature: FeatureId,
    /// Grid level (1..=5) of the raised annotation.
    pub level: u8,
    pub chunk_id: String,
    pub observed: Annotation,
}

impl Candidate {
    pub fn target(&self) -> Annotation {
        Annotation::level(self.level)
    }

    pub fn atom(&self) -> GroundAtom {
        GroundAtom::c_feat(&self.chunk_id, self.feature)
    }

    pub fn key(&self) -> (usize, u8, u8) {
        (self.chunk_index, self.feature.get(), self.level)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub target: Narrative,
    /// Sorted by (chunk index, feature, level).
    pub candidates: Vec<Candidate>,
}

impl Hypothesis {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn feature_count(&self) -> usize {
        let mut fs: Vec<FeatureId> = self.candidates.iter().map(|c| c.feature).collect();
        fs.sort_unstable();
        fs.dedup();
        fs.len()
    }
}

/// Candidates for every observed target-feature rating below 1.0.
pub fn build_hypothesis(
    story: &Story,
    obs: &Observations,
    target: Narrative,
    levels: CandidateLevels,
) -> Hypothesis {
    let mut candidates = Vec::new();
    for chunk in &story.chunks {
        for f in target.features() {
            let Some(observed) = obs.c_feat(&chunk.id, f) else {
                continue;
            };
            let from = observed.grid_level().unwrap_or(0) + 1;
            let range = match levels {
                CandidateLevels::Top => 5..=5,
                CandidateLevels::Grid => from..=5,
            };
            for level in range.filter(|&l| Annotation::level(l).value() > observed.value() + EPS) {
                candidates.push(Candidate {
                    chunk_index: chunk.index,
                    feature: f,
                    level,
                    chunk_id: chunk.id.clone(),
                    observed,
                });
            }
        }
    }
    candidates.sort_by_key(Candidate::key);
    Hypothesis { target, candidates }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbducedAtom {
    #[serde(flatten)]
    pub candidate: Candidate,
    /// sigma(E) - sigma(E without this atom).
    pub marginal_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub atoms: Vec<AbducedAtom>,
    pub sigma: f64,
    pub feature_count: usize,
    pub s_feat_before: f64,
    pub s_feat_after: f64,
}

impl Explanation {
    /// Distinct chunk indices in ascending order.
    pub fn chunks(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.atoms.iter().map(|a| a.candidate.chunk_index).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// The parts of a program the solver evaluates directly.
struct Evaluator {
    agg: Agg,
    /// (threshold, head) of each learned rule for the target.
    sim_rules: Vec<(f64, f64)>,
}

impl Evaluator {
    fn from_program(program: &LogicProgram, target: Narrative) -> Result<Self> {
        let agg = program
            .rules
            .iter()
            .find(|r| r.head.predicate == Predicate::SFeat)
            .and_then(|r| r.aggregate.as_ref())
            .map(|a| a.agg)
            .ok_or_else(|| Error::Config("program lacks the chunk-to-story template".into()))?;
        let sim_rules: Vec<(f64, f64)> = program
            .rules
            .iter()
            .filter(|r| {
                r.head.predicate == Predicate::CorpusSim
                    && r.head.args[1] == crate::logic::Term::Const(Const::Narrative(target))
            })
            .filter_map(|r| match (&r.head_annotation, r.body.as_slice()) {
                (HeadAnnotation::Constant(h), [lit]) if lit.atom.predicate == Predicate::SFeat => {
                    Some((lit.threshold.value(), h.value()))
                }
                _ => None,
            })
            .collect();
        if sim_rules.is_empty() {
            return Err(Error::Config(format!("no learned rules for {target}")));
        }
        Ok(Evaluator { agg, sim_rules })
    }

    fn s_feat(&self, levels: &[u8]) -> f64 {
        let values: Vec<f64> = levels.iter().map(|&l| GRID[l as usize]).collect();
        self.agg.apply(&values)
    }

    fn corpus_sim(&self, s_feat: f64) -> f64 {
        self.sim_rules
            .iter()
            .filter(|(t, _)| s_feat + EPS >= *t)
            .map(|(_, h)| *h)
            .fold(0.0, f64::max)
    }
}

fn with_observations(program: &LogicProgram, obs: &Observations) -> LogicProgram {
    let mut p = program.clone();
    p.extend_facts(obs.atoms.iter().map(|(a, v)| (a.clone(), *v)));
    p
}

fn corpus_sim_of(model: &Interpretation, story_id: &str, target: Narrative) -> f64 {
    model
        .get(&GroundAtom::corpus_sim(story_id, target))
        .map_or(0.0, |a| a.value())
}

fn s_feat_of(model: &Interpretation, story_id: &str, target: Narrative) -> f64 {
    model
        .get(&GroundAtom::s_feat(story_id, target))
        .map_or(0.0, |a| a.value())
}

/// Deduced models of Pi + O and Pi + O + E.
fn models(
    program: &LogicProgram,
    obs: &Observations,
    atoms: &[Candidate],
) -> Result<(Interpretation, Interpretation)> {
    let base = with_observations(program, obs);
    let mut raised = base.clone();
    raised.extend_facts(atoms.iter().map(|c| (c.atom(), c.target())));
    Ok((deduce(&base)?, deduce(&raised)?))
}

/// Gain in `corpus_sim(story, target)` from asserting `atoms`.
pub fn parsimony(
    program: &LogicProgram,
    obs: &Observations,
    atoms: &[Candidate],
    target: Narrative,
) -> Result<f64> {
    Evaluator::from_program(program, target)?;
    let (before, after) = models(program, obs, atoms)?;
    let sigma = corpus_sim_of(&after, &obs.story_id, target)
        - corpus_sim_of(&before, &obs.story_id, target);
    Ok(sigma.max(0.0))
}

/// Fails if asserting `atoms` leaves any observed atom below its observed annotation.
pub fn check_consistency(
    program: &LogicProgram,
    obs: &Observations,
    atoms: &[Candidate],
) -> Result<()> {
    let (_, after) = models(program, obs, atoms)?;
    for (atom, observed) in &obs.atoms {
        let got = after.get(atom).map_or(0.0, |a| a.value());
        if got + EPS < observed.value() {
            return Err(Error::Program(format!(
                "{atom} fell from {observed} to {got}"
            )));
        }
    }
    Ok(())
}

/// Selects the explanation with `k` distinct features (fewer when fewer can improve)
/// maximizing parsimony. Ties prefer fewer atoms, then the higher resulting story
/// annotation, then the lexicographically smallest sorted (chunk, feature, level) list.
pub fn solve(
    program: &LogicProgram,
    obs: &Observations,
    hyp: &Hypothesis,
    k: usize,
) -> Result<Explanation> {
    if k == 0 {
        return Err(Error::Config("feature budget k must be at least 1".into()));
    }
    let target = hyp.target;
    let eval = Evaluator::from_program(program, target)?;
    let features: Vec<FeatureId> = target.features().collect();

    // Story-level level per feature: max over chunks.
    let mut base: BTreeMap<FeatureId, u8> = features.iter().map(|&f| (f, 0)).collect();
    for (atom, ann) in &obs.atoms {
        if let [Const::Chunk(_), Const::Feature(f)] = &atom.args {
            if let Some(cur) = base.get_mut(f) {
                *cur = (*cur).max(ann.grid_level().unwrap_or(0));
            }
        }
    }

    // Best option per feature: largest gain, then smallest key.
    let mut best: BTreeMap<FeatureId, (u8, &Candidate)> = BTreeMap::new();
    for c in &hyp.candidates {
        let gain = c.level.saturating_sub(base[&c.feature]);
        if gain == 0 {
            continue;
        }
        match best.get(&c.feature) {
            Some((g, cur)) if *g > gain || (*g == gain && cur.key() <= c.key()) => {}
            _ => {
                best.insert(c.feature, (gain, c));
            }
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyExplanation);
    }
    let kk = k.min(best.len());

    let chosen: Vec<&Candidate> = match eval.agg {
        Agg::Mean => pick_top_gains(&best, kk),
        Agg::Max | Agg::Median => {
            let base_levels: Vec<u8> = features.iter().map(|f| base[f]).collect();
            pick_exhaustive(&eval, &features, &base_levels, &best, kk)
        }
    };

    let mut atoms: Vec<Candidate> = chosen.into_iter().cloned().collect();
    atoms.sort_by_key(Candidate::key);
    let base_program = with_observations(program, obs);
    let raised_model = |atoms: &[Candidate]| {
        let mut p = base_program.clone();
        p.extend_facts(atoms.iter().map(|c| (c.atom(), c.target())));
        deduce(&p)
    };
    let before = deduce(&base_program)?;
    let after = raised_model(&atoms)?;
    let sigma_of = |m: &Interpretation| corpus_sim_of(m, &obs.story_id, target);
    let sigma = (sigma_of(&after) - sigma_of(&before)).max(0.0);
    let mut abduced = Vec::with_capacity(atoms.len());
    for (i, c) in atoms.iter().enumerate() {
        let mut rest = atoms.clone();
        rest.remove(i);
        let without = (sigma_of(&raised_model(&rest)?) - sigma_of(&before)).max(0.0);
        abduced.push(AbducedAtom {
            candidate: c.clone(),
            marginal_sigma: sigma - without,
        });
    }
    Ok(Explanation {
        feature_count: atoms.len(),
        atoms: abduced,
        sigma,
        s_feat_before: s_feat_of(&before, &obs.story_id, target),
        s_feat_after: s_feat_of(&after, &obs.story_id, target),
    })
}

/// Under the mean aggregator every gain adds independently: keep all features whose gain
/// beats the k-th largest, then fill from the tied pool by smallest key.
fn pick_top_gains<'c>(
    best: &BTreeMap<FeatureId, (u8, &'c Candidate)>,
    k: usize,
) -> Vec<&'c Candidate> {
    let mut gains: Vec<u8> = best.values().map(|(g, _)| *g).collect();
    gains.sort_unstable_by(|a, b| b.cmp(a));
    let cut = gains[k - 1];
    let mut chosen: Vec<&Candidate> = best
        .values()
        .filter(|(g, _)| *g > cut)
        .map(|(_, c)| *c)
        .collect();
    let mut pool: Vec<&Candidate> = best
        .values()
        .filter(|(g, _)| *g == cut)
        .map(|(_, c)| *c)
        .collect();
    pool.sort_by_key(|c| c.key());
    let missing = k - chosen.len();
    chosen.extend(pool.into_iter().take(missing));
    chosen
}

/// Best combination so far: corpus similarity, story feature score, tie-break key, option indices.
type Winner = (f64, f64, Vec<(usize, u8, u8)>, Vec<usize>);

fn pick_exhaustive<'c>(
    eval: &Evaluator,
    features: &[FeatureId],
    base_levels: &[u8],
    best: &BTreeMap<FeatureId, (u8, &'c Candidate)>,
    k: usize,
) -> Vec<&'c Candidate> {
    let options: Vec<&Candidate> = best.values().map(|(_, c)| *c).collect();
    let position: BTreeMap<FeatureId, usize> =
        features.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut winner: Option<Winner> = None;
    for combo in combinations(options.len(), k) {
        let mut levels = base_levels.to_vec();
        for &i in &combo {
            let c = options[i];
            let p = position[&c.feature];
            levels[p] = levels[p].max(c.level);
        }
        let s = eval.s_feat(&levels);
        let sim = eval.corpus_sim(s);
        let mut keys: Vec<(usize, u8, u8)> = combo.iter().map(|&i| options[i].key()).collect();
        keys.sort_unstable();
        let better = match &winner {
            None => true,
            Some((wsim, ws, wkeys, _)) => {
                if (sim - wsim).abs() > EPS {
                    sim > *wsim
                } else if (s - ws).abs() > EPS {
                    s > *ws
                } else {
                    keys < *wkeys
                }
            }
        };
        if better {
            winner = Some((sim, s, keys, combo));
        }
    }
    let (_, _, _, combo) = winner.expect("at least one combination");
    combo.into_iter().map(|i| options[i]).collect()
}

/// All k-subsets of 0..n in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            if n - i < k - current.len() {
                break;
            }
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// The feature and raised annotation to rewrite `chunk_id` toward. With several features
/// on one chunk, the highest marginal parsimony wins, then the lowest feature id.
pub fn extract_feature(
    explanation: &Explanation,
    chunk_id: &str,
) -> Result<(FeatureId, Annotation)> {
    explanation
        .atoms
        .iter()
        .filter(|a| a.candidate.chunk_id == chunk_id)
        .max_by(|a, b| {
            a.marginal_sigma
                .total_cmp(&b.marginal_sigma)
                .then(b.candidate.feature.cmp(&a.candidate.feature))
        })
        .map(|a| (a.candidate.feature, a.candidate.target()))
        .ok_or_else(|| Error::Lookup(format!("chunk {chunk_id} is not in the explanation")))
}

/// Audit record for one abduced atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub chunk_id: String,
    pub excerpt: String,
    pub feature: FeatureId,
    pub feature_name: String,
    pub observed: Annotation,
    pub target: Annotation,
    pub marginal_sigma: f64,
}

const EXCERPT_CHARS: usize = 80;

pub fn explanation_dump(
    explanation: &Explanation,
    story: &Story,
    catalog: &FeatureCatalog,
) -> Vec<ExplanationEntry> {
    explanation
        .atoms
        .iter()
        .map(|a| {
            let c = &a.candidate;
            let text = story.chunk(&c.chunk_id).map_or("", |ch| ch.text.as_str());
            let mut excerpt: String = text.chars().take(EXCERPT_CHARS).collect();
            if text.chars().count() > EXCERPT_CHARS {
                excerpt.push('…');
            }
            ExplanationEntry {
                chunk_id: c.chunk_id.clone(),
                excerpt,
                feature: c.feature,
                feature_name: catalog.get(c.feature).name.clone(),
                observed: c.observed,
                target: c.target(),
                marginal_sigma: a.marginal_sigma,
            }
        })
        .collect()
}
