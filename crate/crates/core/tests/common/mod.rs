//! Independent oracles and random instance generators shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use narrashift::abduction::Candidate;
use narrashift::corpus::{ChunkConfig, Story};
use narrashift::diagnosis::Observations;
use narrashift::logic::{
    story_feature_rule, Agg, Aggregation, Annotation, AtomPattern, BodyLiteral, Const, ConstKind,
    GroundAtom, HeadAnnotation, Interpretation, LogicProgram, Predicate, Rule, Term,
};
use narrashift::narrative::{FeatureId, Narrative};
use narrashift::rules::{ConfidenceTable, LearnedRules, Provenance};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn f(id: u8) -> FeatureId {
    FeatureId::new(id).unwrap()
}

pub fn grid(rng: &mut impl Rng) -> Annotation {
    Annotation::level(rng.random_range(0..=5))
}

// ---------------------------------------------------------------------------
// Brute-force saturation
// ---------------------------------------------------------------------------

fn kind_domain(
    store: &Interpretation,
    program: &LogicProgram,
) -> BTreeMap<ConstKind, BTreeSet<Const>> {
    let mut out: BTreeMap<ConstKind, BTreeSet<Const>> = BTreeMap::new();
    let mut add = |c: &Const| {
        out.entry(c.kind()).or_default().insert(c.clone());
    };
    for atom in store.keys() {
        atom.args.iter().for_each(&mut add);
    }
    for rule in &program.rules {
        for pat in std::iter::once(&rule.head).chain(rule.body.iter().map(|l| &l.atom)) {
            for t in &pat.args {
                if let Term::Const(c) = t {
                    add(c);
                }
            }
        }
    }
    out
}

/// Kind of every variable in a rule, read off the predicate signatures.
fn var_kinds(rule: &Rule) -> BTreeMap<String, ConstKind> {
    let mut out = BTreeMap::new();
    for pat in std::iter::once(&rule.head).chain(rule.body.iter().map(|l| &l.atom)) {
        for (t, k) in pat.args.iter().zip(pat.predicate.signature()) {
            if let Term::Var(v) = t {
                out.insert(v.clone(), k);
            }
        }
    }
    out
}

fn assignments(
    vars: &[(String, ConstKind)],
    domain: &BTreeMap<ConstKind, BTreeSet<Const>>,
) -> Vec<BTreeMap<String, Const>> {
    let mut out = vec![BTreeMap::new()];
    for (v, k) in vars {
        let values: Vec<Const> = domain
            .get(k)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        let mut next = Vec::new();
        for partial in &out {
            for c in &values {
                let mut p = partial.clone();
                p.insert(v.clone(), c.clone());
                next.push(p);
            }
        }
        out = next;
    }
    out
}

fn ground(pat: &AtomPattern, a: &BTreeMap<String, Const>) -> GroundAtom {
    let g = |t: &Term| match t {
        Term::Var(v) => a[v].clone(),
        Term::Const(c) => c.clone(),
    };
    GroundAtom {
        predicate: pat.predicate,
        args: [g(&pat.args[0]), g(&pat.args[1])],
    }
}

/// Minimum body annotation under `a`, if every literal holds.
fn body_value(
    body: &[BodyLiteral],
    a: &BTreeMap<String, Const>,
    store: &Interpretation,
) -> Option<f64> {
    let mut min = 1.0f64;
    for lit in body {
        let v = store.get(&ground(&lit.atom, a))?.value();
        if v + 1e-9 < lit.threshold.value() {
            return None;
        }
        min = min.min(v);
    }
    Some(min)
}

fn apply_agg(agg: Agg, values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    match agg {
        Agg::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Agg::Max => values.iter().cloned().fold(0.0, f64::max),
        Agg::Median => {
            let mut v = values.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[(v.len() - 1) / 2]
        }
    }
}

/// Least fixpoint by exhaustive enumeration of every typed variable assignment.
pub fn brute_force_deduce(program: &LogicProgram) -> Interpretation {
    let mut store = program.facts.clone();
    loop {
        let domain = kind_domain(&store, program);
        let mut derived: Vec<(GroundAtom, f64)> = Vec::new();
        for rule in &program.rules {
            let kinds = var_kinds(rule);
            match &rule.aggregate {
                None => {
                    let vars: Vec<(String, ConstKind)> = kinds.into_iter().collect();
                    for a in assignments(&vars, &domain) {
                        if let Some(min) = body_value(&rule.body, &a, &store) {
                            let v = match rule.head_annotation {
                                HeadAnnotation::CopyBody => min,
                                HeadAnnotation::Constant(c) => c.value(),
                            };
                            derived.push((ground(&rule.head, &a), v));
                        }
                    }
                }
                Some(Aggregation {
                    key,
                    domain: dom_idx,
                    agg,
                }) => {
                    let head_vars: Vec<(String, ConstKind)> = rule
                        .head
                        .args
                        .iter()
                        .filter_map(|t| match t {
                            Term::Var(v) => Some((v.clone(), kinds[v])),
                            Term::Const(_) => None,
                        })
                        .collect();
                    let other_vars: Vec<(String, ConstKind)> = kinds
                        .iter()
                        .filter(|(v, _)| !head_vars.iter().any(|(h, _)| h == *v) && *v != key)
                        .map(|(v, k)| (v.clone(), *k))
                        .collect();
                    let keys: Vec<Const> = domain
                        .get(&kinds[key])
                        .map(|s| s.iter().cloned().collect())
                        .unwrap_or_default();
                    for h in assignments(&head_vars, &domain) {
                        let mut any = false;
                        let mut per_key: BTreeMap<Const, f64> = BTreeMap::new();
                        let mut admitted: Vec<Const> = Vec::new();
                        for k in &keys {
                            let mut hk = h.clone();
                            hk.insert(key.clone(), k.clone());
                            if body_value(std::slice::from_ref(&rule.body[*dom_idx]), &hk, &store)
                                .is_some()
                            {
                                admitted.push(k.clone());
                            }
                            for rest in assignments(&other_vars, &domain) {
                                let mut full = hk.clone();
                                full.extend(rest);
                                if let Some(min) = body_value(&rule.body, &full, &store) {
                                    any = true;
                                    let slot = per_key.entry(k.clone()).or_insert(0.0);
                                    *slot = slot.max(min);
                                }
                            }
                        }
                        if any {
                            let values: Vec<f64> = admitted
                                .iter()
                                .map(|k| per_key.get(k).copied().unwrap_or(0.0))
                                .collect();
                            derived.push((
                                ground(&rule.head, &h),
                                apply_agg(*agg, &values).clamp(0.0, 1.0),
                            ));
                        }
                    }
                }
            }
        }
        let mut changed = false;
        for (atom, v) in derived {
            let cur = store.get(&atom).map(|a| a.value());
            if cur.is_none_or(|c| v > c + 1e-9) {
                store.insert(atom, Annotation::new(v).unwrap());
                changed = true;
            }
        }
        if !changed {
            return store;
        }
    }
}

// ---------------------------------------------------------------------------
// Random programs
// ---------------------------------------------------------------------------

fn random_const(rng: &mut impl Rng, kind: ConstKind) -> Const {
    match kind {
        ConstKind::Story => Const::Story(["s1", "s2"].choose(rng).unwrap().to_string()),
        ConstKind::Chunk => Const::Chunk(["c1", "c2", "c3"].choose(rng).unwrap().to_string()),
        ConstKind::Narrative => Const::Narrative(*Narrative::ALL.choose(rng).unwrap()),
        ConstKind::Feature => Const::Feature(f(*[1u8, 2, 21, 22].choose(rng).unwrap())),
    }
}

fn random_term(rng: &mut impl Rng, kind: ConstKind) -> Term {
    if rng.random_bool(0.2) {
        return Term::Const(random_const(rng, kind));
    }
    let name = match kind {
        ConstKind::Story => ["S", "T"].choose(rng).unwrap(),
        ConstKind::Chunk => ["C", "D"].choose(rng).unwrap(),
        ConstKind::Narrative => ["N"].choose(rng).unwrap(),
        ConstKind::Feature => ["F", "G"].choose(rng).unwrap(),
    };
    Term::var(name)
}

const PREDICATES: [Predicate; 5] = [
    Predicate::SFeat,
    Predicate::CorpusSim,
    Predicate::CFeat,
    Predicate::Contains,
    Predicate::Associated,
];

fn random_pattern(rng: &mut impl Rng) -> AtomPattern {
    let p = *PREDICATES.choose(rng).unwrap();
    let [a, b] = p.signature();
    AtomPattern::new(p, random_term(rng, a), random_term(rng, b))
}

fn random_rule(rng: &mut impl Rng, fact_predicates: &[Predicate]) -> Rule {
    if rng.random_bool(0.2) {
        return story_feature_rule(*[Agg::Mean, Agg::Max, Agg::Median].choose(rng).unwrap());
    }
    loop {
        let body: Vec<BodyLiteral> = (0..rng.random_range(1..=2))
            .map(|_| BodyLiteral {
                atom: if rng.random_bool(0.5) {
                    let p = *fact_predicates.choose(rng).unwrap();
                    let [a, b] = p.signature();
                    AtomPattern::new(p, random_term(rng, a), random_term(rng, b))
                } else {
                    random_pattern(rng)
                },
                threshold: Annotation::level(rng.random_range(0..=3)),
            })
            .collect();
        let rule = Rule {
            head: random_pattern(rng),
            head_annotation: if rng.random_bool(0.5) {
                HeadAnnotation::CopyBody
            } else {
                HeadAnnotation::Constant(grid(rng))
            },
            body,
            aggregate: None,
        };
        if rule.validate().is_ok() {
            return rule;
        }
    }
}

/// At most 6 grid-annotated facts and at most 4 rules.
pub fn random_program(rng: &mut impl Rng) -> LogicProgram {
    let mut p = LogicProgram::new();
    for _ in 0..rng.random_range(1..=6) {
        let pred = *PREDICATES.choose(rng).unwrap();
        let [a, b] = pred.signature();
        let atom = GroundAtom::new(pred, random_const(rng, a), random_const(rng, b)).unwrap();
        p.add_fact(atom, grid(rng));
    }
    for _ in 0..rng.random_range(0..=4) {
        let fact_predicates: Vec<Predicate> = p.facts.keys().map(|a| a.predicate).collect();
        p.rules.push(random_rule(rng, &fact_predicates));
    }
    p
}

// ---------------------------------------------------------------------------
// Abduction instances and the exhaustive oracle
// ---------------------------------------------------------------------------

pub struct Instance {
    pub story: Story,
    pub obs: Observations,
    pub rules: LearnedRules,
    pub target: Narrative,
}

/// Up to 4 chunks rated on up to 6 target features at levels 2..=4 (so every rating
/// has at most three raised levels), with a random learned table.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let target = *Narrative::ALL.choose(rng).unwrap();
    let n_chunks = rng.random_range(1..=4);
    let text = (0..n_chunks)
        .map(|i| format!("Sentence {i} walks down the long and winding road."))
        .collect::<Vec<_>>()
        .join(" ");
    let story = Story::new(Some("s".into()), text, None, &ChunkConfig::default()).unwrap();
    assert_eq!(story.chunks.len(), n_chunks);
    let mut feats: Vec<FeatureId> = target.features().collect();
    let n_feats = rng.random_range(1..=6);
    let background = feats.split_off(n_feats);
    let mut atoms = Interpretation::new();
    // Half the instances rate the remaining target features at 1.0 on the first chunk.
    // Saturated ratings add no candidates but lift the aggregate near the grid thresholds.
    if rng.random_bool(0.5) {
        for &fid in &background {
            atoms.insert(
                GroundAtom::c_feat(&story.chunks[0].id, fid),
                Annotation::TOP,
            );
        }
    }
    for c in &story.chunks {
        atoms.insert(GroundAtom::contains(&story.id, &c.id), Annotation::TOP);
        for &fid in &feats {
            atoms.insert(
                GroundAtom::c_feat(&c.id, fid),
                Annotation::level(rng.random_range(2..=4)),
            );
        }
    }
    let obs = Observations {
        story_id: story.id.clone(),
        atoms,
    };
    let agg = *[Agg::Mean, Agg::Max, Agg::Median].choose(rng).unwrap();
    // A random share of saturated training stories, so corpus_sim rises with s_feat.
    let p_top = rng.random_range(0.0..=1.0);
    let s_feats: Vec<f64> = (0..rng.random_range(1..=8))
        .map(|_| {
            if rng.random_bool(p_top) {
                1.0
            } else {
                rng.random_range(0.0..=1.0)
            }
        })
        .collect();
    let table = ConfidenceTable::from_story_features(target, agg, &s_feats).unwrap();
    let rules = LearnedRules {
        table,
        provenance: Provenance {
            corpus_hash: String::new(),
            provider: "test".into(),
            model: "test".into(),
            agg,
            timestamp: "0".into(),
        },
        story_features: BTreeMap::new(),
    };
    Instance {
        story,
        obs,
        rules,
        target,
    }
}

/// Closed-form corpus_sim for a story whose chunk ratings are `levels`
/// (chunk id, feature) -> annotation.
pub fn closed_form_sigma_base(inst: &Instance, raised: &[Candidate]) -> (f64, f64) {
    let agg = inst.rules.agg();
    let mut per_feature: BTreeMap<FeatureId, f64> =
        inst.target.features().map(|f| (f, 0.0)).collect();
    for (atom, ann) in &inst.obs.atoms {
        if let [Const::Chunk(_), Const::Feature(fid)] = &atom.args {
            if let Some(v) = per_feature.get_mut(fid) {
                *v = v.max(ann.value());
            }
        }
    }
    for c in raised {
        let v = per_feature.get_mut(&c.feature).unwrap();
        *v = v.max(c.target().value());
    }
    let values: Vec<f64> = per_feature.values().copied().collect();
    let s = apply_agg(agg, &values);
    let sim = inst.rules.table.corpus_sim(s);
    (s, sim)
}

pub struct OracleBest {
    pub sigma: f64,
    pub s_feat: f64,
    /// Sorted (chunk index, feature, level) keys of the best explanation.
    pub keys: Vec<(usize, u8, u8)>,
    pub feature_count: usize,
}

/// Exhaustive search over explanations with exactly min(k, |features in H|) distinct
/// features, one candidate per feature, ranked by sigma, then fewer atoms, then higher
/// story annotation, then lexicographic keys.
pub fn exhaustive_best(inst: &Instance, hyp: &[Candidate], k: usize) -> Option<OracleBest> {
    let features: Vec<FeatureId> = hyp
        .iter()
        .map(|c| c.feature)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if features.is_empty() {
        return None;
    }
    let kk = k.min(features.len());
    let (_, base_sim) = closed_form_sigma_base(inst, &[]);
    let mut best: Option<OracleBest> = None;
    let mut chosen: Vec<&Candidate> = Vec::new();
    fn subsets<'a>(
        idx: usize,
        features: &[FeatureId],
        kk: usize,
        hyp: &'a [Candidate],
        chosen: &mut Vec<&'a Candidate>,
        visit: &mut dyn FnMut(&[&'a Candidate]),
    ) {
        if chosen.len() == kk {
            visit(chosen);
            return;
        }
        if idx == features.len() || features.len() - idx < kk - chosen.len() {
            return;
        }
        subsets(idx + 1, features, kk, hyp, chosen, visit);
        for c in hyp.iter().filter(|c| c.feature == features[idx]) {
            chosen.push(c);
            subsets(idx + 1, features, kk, hyp, chosen, visit);
            chosen.pop();
        }
    }
    let mut visit = |sel: &[&Candidate]| {
        let raised: Vec<Candidate> = sel.iter().map(|c| (*c).clone()).collect();
        let (s, sim) = closed_form_sigma_base(inst, &raised);
        let sigma = (sim - base_sim).max(0.0);
        let mut keys: Vec<(usize, u8, u8)> = sel.iter().map(|c| c.key()).collect();
        keys.sort_unstable();
        let better = match &best {
            None => true,
            Some(b) => {
                if (sigma - b.sigma).abs() > 1e-9 {
                    sigma > b.sigma
                } else if (s - b.s_feat).abs() > 1e-9 {
                    s > b.s_feat
                } else {
                    keys < b.keys
                }
            }
        };
        if better {
            best = Some(OracleBest {
                sigma,
                s_feat: s,
                keys,
                feature_count: sel.len(),
            });
        }
    };
    subsets(0, &features, kk, hyp, &mut chosen, &mut visit);
    best
}

// ---------------------------------------------------------------------------
// KL
// ---------------------------------------------------------------------------

/// Two-token closed form for "a a b" against "a b b".
pub fn kl_aab_abb(alpha: f64) -> f64 {
    let p_a = (2.0 + alpha) / (3.0 + 2.0 * alpha);
    let p_b = (1.0 + alpha) / (3.0 + 2.0 * alpha);
    // The reference distribution swaps the two probabilities.
    p_a * (p_a / p_b).ln() + p_b * (p_b / p_a).ln()
}

/// Random word soup over a small vocabulary.
pub fn random_text(rng: &mut impl Rng) -> String {
    const WORDS: [&str; 8] = [
        "river", "stone", "light", "home", "road", "song", "bread", "wind",
    ];
    (0..rng.random_range(1..=30))
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Fixture pipeline
// ---------------------------------------------------------------------------

use std::path::PathBuf;

use narrashift::corpus::{load_corpus, load_stories};
use narrashift::diagnosis::{Diagnoser, DiagnosisConfig, FeatureCatalog};
use narrashift::gateway::{Gateway, MockMode, MockProvider, RuleTable};
use narrashift::rules::learn_rules;
use narrashift::transform::{TransformRun, Transformer};
use narrashift::Direction;

/// Works from any crate of the workspace.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures")).join(name)
}

pub fn mock_gateway(seed: u64, mode: MockMode) -> Gateway {
    Gateway::mock(MockProvider::new(RuleTable::default(), seed).with_mode(mode))
}

pub fn learn_fixture(name: &str, gateway: &Gateway, runs: u32) -> LearnedRules {
    let corpus = load_corpus(&fixture(name), &ChunkConfig::default()).unwrap();
    let catalog = FeatureCatalog::bundled();
    let cfg = DiagnosisConfig {
        runs,
        ..DiagnosisConfig::default()
    };
    learn_rules(
        &corpus,
        &Diagnoser::new(gateway, &catalog, cfg),
        Agg::Mean,
        "0",
    )
    .unwrap()
}

/// Abduction and baseline runs over a marker fixture suite.
pub fn run_suite(
    stories: &str,
    direction: Direction,
    rules: &LearnedRules,
    gateway: &Gateway,
    baseline_gateway: &Gateway,
) -> (Vec<TransformRun>, Vec<TransformRun>) {
    let catalog = FeatureCatalog::bundled();
    let stories = load_stories(&fixture(stories), &ChunkConfig::default()).unwrap();
    let tr = Transformer::new(gateway, &catalog);
    let base = Transformer::new(baseline_gateway, &catalog);
    let abduction = stories
        .iter()
        .map(|s| tr.run_iterative(s, direction, rules).unwrap())
        .collect();
    let baseline = stories
        .iter()
        .map(|s| base.baseline_transform(s, direction).unwrap())
        .collect();
    (abduction, baseline)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
