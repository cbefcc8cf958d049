//! The fixed program skeleton: association facts and the two rule templates.

use super::{
    Agg, Aggregation, Annotation, AtomPattern, BodyLiteral, Const, GroundAtom, HeadAnnotation,
    Interpretation, Predicate, Rule, Term,
};
use crate::corpus::Story;
use crate::error::{Error, Result};
use crate::narrative::Narrative;

/// `associated(ind, f1..f20)` and `associated(col, f21..f40)`, all at annotation 1.
pub fn assoc_facts() -> Vec<(GroundAtom, Annotation)> {
    Narrative::ALL
        .into_iter()
        .flat_map(|n| {
            n.features()
                .map(move |f| (GroundAtom::associated(n, f), Annotation::TOP))
        })
        .collect()
}

/// Chunk-to-story template:
/// `s_feat(S, N) <- c_feat(C, F) & contains(S, C)_1 & associated(N, F)_1`,
/// taking the max over chunks per feature and `agg` across the associated features.
pub fn story_feature_rule(agg: Agg) -> Rule {
    Rule {
        head: AtomPattern::new(Predicate::SFeat, Term::var("S"), Term::var("N")),
        head_annotation: HeadAnnotation::CopyBody,
        body: vec![
            BodyLiteral {
                atom: AtomPattern::new(Predicate::CFeat, Term::var("C"), Term::var("F")),
                threshold: Annotation::BOTTOM,
            },
            BodyLiteral {
                atom: AtomPattern::new(Predicate::Contains, Term::var("S"), Term::var("C")),
                threshold: Annotation::TOP,
            },
            BodyLiteral {
                atom: AtomPattern::new(Predicate::Associated, Term::var("N"), Term::var("F")),
                threshold: Annotation::TOP,
            },
        ],
        aggregate: Some(Aggregation {
            key: "F".into(),
            domain: 2,
            agg,
        }),
    }
}

/// Story-to-corpus template: `corpus_sim(X, n)_head <- s_feat(X, n) >= level`.
pub fn corpus_sim_rule(narrative: Narrative, level: Annotation, head: Annotation) -> Rule {
    Rule {
        head: AtomPattern::new(
            Predicate::CorpusSim,
            Term::var("X"),
            Term::Const(Const::Narrative(narrative)),
        ),
        head_annotation: HeadAnnotation::Constant(head),
        body: vec![BodyLiteral {
            atom: AtomPattern::new(
                Predicate::SFeat,
                Term::var("X"),
                Term::Const(Const::Narrative(narrative)),
            ),
            threshold: level,
        }],
        aggregate: None,
    }
}

/// Direct evaluation of the chunk-to-story template for one story, without deduction:
/// per associated feature the max over the story's chunks, then `agg` over the 20 features.
pub fn aggregate_s_feat(
    facts: &Interpretation,
    story: &Story,
    narrative: Narrative,
    agg: Agg,
) -> Result<Annotation> {
    if story.chunks.is_empty() {
        return Err(Error::DegenerateStory(story.id.clone()));
    }
    let ratings: Vec<f64> = narrative
        .features()
        .map(|f| {
            story
                .chunks
                .iter()
                .filter_map(|c| facts.get(&GroundAtom::c_feat(&c.id, f)))
                .fold(0.0_f64, |m, a| m.max(a.value()))
        })
        .collect();
    Annotation::new(agg.apply(&ratings))
}
