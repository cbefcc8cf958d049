use std::collections::BTreeMap;

use super::{
    join_into, AtomPattern, BodyLiteral, Const, GroundAtom, HeadAnnotation, Interpretation,
    LogicProgram, Predicate, Rule, Term,
};
use crate::error::{Error, Result};
use crate::logic::Annotation;

const MAX_ROUNDS: usize = 10_000;

type Bindings = BTreeMap<String, Const>;

/// Least fixpoint of `program`: facts joined with every rule consequence until no
/// annotation rises. The result never lowers an input fact.
pub fn deduce(program: &LogicProgram) -> Result<Interpretation> {
    program.validate()?;
    let mut store = program.facts.clone();
    for _ in 0..MAX_ROUNDS {
        let index = Index::build(&store);
        let mut derived = Vec::new();
        for rule in &program.rules {
            fire(rule, &index, &mut derived);
        }
        let mut changed = false;
        for (atom, value) in derived {
            changed |= join_into(&mut store, atom, value);
        }
        if !changed {
            return Ok(store);
        }
    }
    Err(Error::Program(format!(
        "no fixpoint after {MAX_ROUNDS} rounds"
    )))
}

/// Atoms grouped by predicate for body matching.
struct Index<'a> {
    by_pred: BTreeMap<Predicate, Vec<(&'a GroundAtom, Annotation)>>,
}

impl<'a> Index<'a> {
    fn build(store: &'a Interpretation) -> Self {
        let mut by_pred: BTreeMap<Predicate, Vec<_>> = BTreeMap::new();
        for (atom, &ann) in store {
            by_pred.entry(atom.predicate).or_default().push((atom, ann));
        }
        Index { by_pred }
    }

    fn atoms(&self, p: Predicate) -> &[(&'a GroundAtom, Annotation)] {
        self.by_pred.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn unify(pattern: &AtomPattern, atom: &GroundAtom, bindings: &Bindings) -> Option<Bindings> {
    if pattern.predicate != atom.predicate {
        return None;
    }
    let [(t0, v0), (t1, v1)] = [
        (&pattern.args[0], &atom.args[0]),
        (&pattern.args[1], &atom.args[1]),
    ];
    // Check before cloning: most candidate atoms fail to match.
    let matches = |t: &Term, v: &Const| match t {
        Term::Const(c) => c == v,
        Term::Var(name) => bindings.get(name).is_none_or(|b| b == v),
    };
    if !matches(t0, v0) || !matches(t1, v1) {
        return None;
    }
    if let (Term::Var(a), Term::Var(b)) = (t0, t1) {
        if a == b && v0 != v1 {
            return None;
        }
    }
    let mut out = bindings.clone();
    for (term, value) in [(t0, v0), (t1, v1)] {
        if let Term::Var(v) = term {
            if !out.contains_key(v) {
                out.insert(v.clone(), value.clone());
            }
        }
    }
    Some(out)
}

fn instantiate(pattern: &AtomPattern, bindings: &Bindings) -> GroundAtom {
    let arg = |t: &Term| match t {
        Term::Const(c) => c.clone(),
        Term::Var(v) => bindings[v].clone(),
    };
    GroundAtom {
        predicate: pattern.predicate,
        args: [arg(&pattern.args[0]), arg(&pattern.args[1])],
    }
}

/// All groundings of `body` against the index, each with the minimum matched annotation.
fn ground_body(
    body: &[BodyLiteral],
    index: &Index<'_>,
    seed: Bindings,
) -> Vec<(Bindings, Annotation)> {
    let mut partial = vec![(seed, Annotation::TOP)];
    for lit in body {
        let mut next = Vec::new();
        for (b, min) in &partial {
            for &(atom, ann) in index.atoms(lit.atom.predicate) {
                if !ann.satisfies(lit.threshold) {
                    continue;
                }
                if let Some(nb) = unify(&lit.atom, atom, b) {
                    let m = if ann.value() < min.value() { ann } else { *min };
                    next.push((nb, m));
                }
            }
        }
        partial = next;
        if partial.is_empty() {
            break;
        }
    }
    partial
}

fn head_key(rule: &Rule, b: &Bindings) -> GroundAtom {
    instantiate(&rule.head, b)
}

fn fire(rule: &Rule, index: &Index<'_>, out: &mut Vec<(GroundAtom, Annotation)>) {
    let groundings = ground_body(&rule.body, index, Bindings::new());
    let Some(agg) = &rule.aggregate else {
        for (b, min) in groundings {
            let value = match rule.head_annotation {
                HeadAnnotation::Constant(c) => c,
                HeadAnnotation::CopyBody => min,
            };
            out.push((head_key(rule, &b), value));
        }
        return;
    };

    // head grounding -> (bindings restricted to head vars, key -> joined value)
    let mut groups: BTreeMap<GroundAtom, (Bindings, BTreeMap<Const, Annotation>)> = BTreeMap::new();
    for (b, min) in groundings {
        let head = head_key(rule, &b);
        let key = b[&agg.key].clone();
        let head_bindings: Bindings = rule
            .head
            .args
            .iter()
            .filter_map(|t| match t {
                Term::Var(v) => Some((v.clone(), b[v].clone())),
                Term::Const(_) => None,
            })
            .collect();
        let entry = groups
            .entry(head)
            .or_insert_with(|| (head_bindings, BTreeMap::new()));
        let slot = entry.1.entry(key).or_insert(Annotation::BOTTOM);
        *slot = slot.join(min);
    }
    let domain_lit = &rule.body[agg.domain];
    for (head, (head_bindings, per_key)) in groups {
        let domain: Vec<Const> =
            ground_body(std::slice::from_ref(domain_lit), index, head_bindings)
                .into_iter()
                .map(|(b, _)| b[&agg.key].clone())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
        let values: Vec<f64> = domain
            .iter()
            .map(|k| {
                per_key
                    .get(k)
                    .copied()
                    .unwrap_or(Annotation::BOTTOM)
                    .value()
            })
            .collect();
        let value = agg.agg.apply(&values).clamp(0.0, 1.0);
        out.push((
            head,
            Annotation::new(value).expect("aggregate stays in [0, 1]"),
        ));
    }
}
