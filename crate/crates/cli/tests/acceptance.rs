//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use narrashift::abduction::{
    build_hypothesis, check_consistency, solve, CandidateLevels, Explanation,
};
use narrashift::corpus::{load_stories, ChunkConfig};
use narrashift::diagnosis::{normalize_rating, Diagnoser, DiagnosisConfig, FeatureCatalog};
use narrashift::evaluation::{kl_divergence, prop1_bound, prop1_check, DEFAULT_ALPHA};
use narrashift::gateway::MockMode;
use narrashift::logic::{
    assoc_facts, corpus_sim_rule, deduce, story_feature_rule, Agg, Annotation, GroundAtom,
    LogicProgram,
};
use narrashift::transform::TransformRun;
use narrashift::{Direction, Error, Narrative};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, Box<dyn FnOnce() -> Outcome>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn solved(inst: &common::Instance, k: usize) -> Result<Option<Explanation>, String> {
    let hyp = build_hypothesis(&inst.story, &inst.obs, inst.target, CandidateLevels::Grid);
    match solve(&inst.rules.program(), &inst.obs, &hyp, k) {
        Ok(e) => Ok(Some(e)),
        Err(Error::EmptyExplanation) => Ok(None),
        Err(e) => Err(format!("solver failed: {e}")),
    }
}

fn consistent(inst: &common::Instance, e: &Explanation) -> bool {
    let atoms: Vec<_> = e.atoms.iter().map(|a| a.candidate.clone()).collect();
    check_consistency(&inst.rules.program(), &inst.obs, &atoms).is_ok()
}

fn logic_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for case in 0..200 {
        let program = common::random_program(&mut rng);
        let got = deduce(&program).map_err(|e| format!("case {case}: {e}"))?;
        ensure(got == common::brute_force_deduce(&program), || {
            format!("case {case} differs from brute force")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "200 programs match brute-force saturation in {secs:.2}s"
    ))
}

fn worked_chain() -> Outcome {
    let mut p = LogicProgram::new();
    p.extend_facts(assoc_facts());
    p.add_fact(GroundAtom::c_feat("c1", common::f(3)), Annotation::level(4));
    p.add_fact(GroundAtom::contains("s", "c1"), Annotation::TOP);
    p.rules.push(story_feature_rule(Agg::Max));
    let head = Annotation::new(0.8 * 0.7).map_err(|e| e.to_string())?;
    p.rules.push(corpus_sim_rule(
        Narrative::Individualistic,
        Annotation::level(4),
        head,
    ));
    let out = deduce(&p).map_err(|e| e.to_string())?;
    let s = out[&GroundAtom::s_feat("s", Narrative::Individualistic)].value();
    let sim = out[&GroundAtom::corpus_sim("s", Narrative::Individualistic)].value();
    ensure((s - 0.8).abs() < 1e-9 && (sim - 0.56).abs() < 1e-9, || {
        format!("s_feat={s}, corpus_sim={sim}")
    })?;
    Ok(format!("s_feat={s:.2}, corpus_sim={sim:.2}"))
}

fn abduction_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut positive = 0;
    for case in 0..100 {
        let inst = common::random_instance(&mut rng);
        let k = rng.random_range(1..=3);
        let hyp = build_hypothesis(&inst.story, &inst.obs, inst.target, CandidateLevels::Grid);
        let oracle = common::exhaustive_best(&inst, &hyp.candidates, k).map_or(0.0, |b| b.sigma);
        let first = solved(&inst, k)?;
        let sigma = first.as_ref().map_or(0.0, |e| e.sigma);
        ensure(sigma == oracle, || {
            format!("case {case}: solver {sigma} vs exhaustive {oracle}")
        })?;
        let a = serde_json::to_string(&first).map_err(|e| e.to_string())?;
        let b = serde_json::to_string(&solved(&inst, k)?).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("case {case}: repeated solve differs"))?;
        positive += usize::from(sigma > 0.0);
    }
    Ok(format!("100 instances equal exhaustive sigma ({positive} with positive gain), repeat runs identical"))
}

fn consistency() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    for seed in [2, 3, 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let inst = common::random_instance(&mut rng);
            for k in 1..=3 {
                if let Some(e) = solved(&inst, k)? {
                    checked += 1;
                    violations += usize::from(!consistent(&inst, &e));
                }
            }
        }
    }
    ensure(violations == 0, || {
        format!("{violations} violations in {checked} explanations")
    })?;
    Ok(format!("0 violations across {checked} explanations"))
}

fn confidences_and_monotonicity() -> Outcome {
    let gw = common::mock_gateway(7, MockMode::Rewrite);
    let learned = common::learn_fixture("corpus_ind.jsonl", &gw, 1);
    // Story annotations 1, .92, .84, .84, .76, .60 survive the grid levels as below.
    let want = [1.0, 1.0, 1.0, 1.0, 4.0 / 6.0, 1.0 / 6.0];
    for (level, w) in want.iter().enumerate() {
        let got = learned.table.conf(level as u8);
        ensure(got == *w, || format!("conf at level {level}: {got} != {w}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let inst = common::random_instance(&mut rng);
        let mut prev = 0.0;
        for k in 1..=4 {
            let sigma = solved(&inst, k)?.map_or(0.0, |e| e.sigma);
            ensure(sigma + 1e-12 >= prev, || {
                format!("case {case}: sigma({k})={sigma} < {prev}")
            })?;
            prev = sigma;
        }
    }
    Ok("conf table equals survival fractions; sigma non-decreasing in k on 50 instances".into())
}

struct Suite {
    direction: Direction,
    runs: Vec<TransformRun>,
    echo: Vec<TransformRun>,
    rewrite_baseline: Vec<TransformRun>,
}

fn suites() -> (Vec<Suite>, f64) {
    let gw = common::mock_gateway(7, MockMode::Rewrite);
    let echo = common::mock_gateway(7, MockMode::Echo);
    let mut out = Vec::new();
    let mut secs = 0.0;
    for (corpus, stories, direction) in [
        (
            "corpus_ind.jsonl",
            "markers_c2i.jsonl",
            Direction::CollectivisticToIndividualistic,
        ),
        (
            "corpus_col.jsonl",
            "markers_i2c.jsonl",
            Direction::IndividualisticToCollectivistic,
        ),
    ] {
        let start = Instant::now();
        let rules = common::learn_fixture(corpus, &gw, DiagnosisConfig::default().runs);
        let (runs, echo_runs) = common::run_suite(stories, direction, &rules, &gw, &echo);
        secs += start.elapsed().as_secs_f64();
        // Comparison only, outside the timed pipeline.
        let (_, rewrite_baseline) = common::run_suite(stories, direction, &rules, &gw, &gw);
        out.push(Suite {
            direction,
            runs,
            echo: echo_runs,
            rewrite_baseline,
        });
    }
    (out, secs)
}

fn end_to_end(suites: &[Suite], secs: f64) -> Outcome {
    let mut notes = Vec::new();
    for s in suites {
        ensure(s.runs.len() == 10, || {
            format!("{}: {} runs", s.direction, s.runs.len())
        })?;
        let orig: Vec<f64> = s.runs.iter().map(|r| r.evaluation.original).collect();
        let fin: Vec<f64> = s.runs.iter().map(|r| r.evaluation.final_score).collect();
        let lift = common::median(&fin) - common::median(&orig);
        ensure(lift >= 1.0, || {
            format!("{}: median lift {lift}", s.direction)
        })?;
        for r in &s.runs {
            ensure(r.evaluation.final_score >= r.evaluation.original, || {
                format!("{} scored below original", r.story_id)
            })?;
            ensure(r.token_share() < 1.0, || {
                format!("{} rewrote every token", r.story_id)
            })?;
        }
        for b in &s.echo {
            ensure(b.evaluation.final_score == b.evaluation.original, || {
                format!("echo baseline moved {}", b.story_id)
            })?;
        }
        let share = s.runs.iter().map(|r| r.token_share()).sum::<f64>() / s.runs.len() as f64;
        let imp = |runs: &[TransformRun]| {
            runs.iter()
                .map(|r| r.evaluation.final_score - r.evaluation.original)
                .sum::<f64>()
                / runs.len() as f64
        };
        ensure(imp(&s.runs) >= imp(&s.rewrite_baseline), || {
            format!("{}: baseline beats abduction", s.direction)
        })?;
        notes.push(format!(
            "{} median +{lift:.1}, token share {:.1}%",
            s.direction,
            share * 100.0
        ));
    }
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} in {secs:.1}s", notes.join("; ")))
}

fn proposition_bound(suites: &[Suite]) -> Outcome {
    let mut n = 0;
    for r in suites
        .iter()
        .flat_map(|s| s.runs.iter().chain(&s.echo).chain(&s.rewrite_baseline))
    {
        let p = prop1_check(r);
        ensure(p.pass, || {
            format!(
                "{} {}: {} calls > N_c {}",
                r.story_id, r.method, p.calls, p.n_c
            )
        })?;
        n += 1;
    }
    ensure(!prop1_bound([30, 50], 81).pass, || {
        "violating ledger not flagged".into()
    })?;
    ensure(prop1_bound([30, 50], 2).pass, || {
        "two calls over 80 tokens flagged".into()
    })?;
    ensure(prop1_bound([], 0).pass, || "vacuous bound flagged".into())?;
    Ok(format!(
        "{n} mock runs within bound; synthetic violation flagged"
    ))
}

fn kl_metric(suites: &[Suite]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let (a, b) = (common::random_text(&mut rng), common::random_text(&mut rng));
        let kl = kl_divergence(&a, &b, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("negative KL {kl}"))?;
        let same = kl_divergence(&a, &a, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
        ensure(same.abs() < 1e-12, || format!("KL(t,t)={same}"))?;
    }
    let pair = kl_divergence("a a b", "a b b", 1e-5).map_err(|e| e.to_string())?;
    let oracle = common::kl_aab_abb(1e-5);
    ensure((pair - oracle).abs() < 1e-9, || {
        format!("a a b / a b b: {pair} vs {oracle}")
    })?;
    // Smoothing continuity on every (original, transformed) fixture pair.
    let mut worst = 0.0f64;
    let mut worst_id = String::new();
    for r in suites
        .iter()
        .flat_map(|s| s.runs.iter().chain(&s.rewrite_baseline))
    {
        let at = |alpha| {
            kl_divergence(&r.final_story.text, &r.original.text, alpha).map_err(|e| e.to_string())
        };
        let diff = (at(DEFAULT_ALPHA)? - at(2.0 * DEFAULT_ALPHA)?).abs();
        if diff > worst {
            worst = diff;
            worst_id = format!("{} {}", r.story_id, r.method);
        }
    }
    ensure(worst < 1e-2, || {
        format!("alpha vs 2*alpha differs by {worst:.4} on {worst_id} (bound 1e-2); other KL checks pass")
    })?;
    Ok(format!(
        "identity, non-negativity, closed form and alpha continuity (max {worst:.2e}) hold"
    ))
}

fn diagnosis_stability() -> Outcome {
    let gw = common::mock_gateway(7, MockMode::Rewrite);
    let catalog = FeatureCatalog::bundled();
    let stories = load_stories(
        &common::fixture("markers_c2i.jsonl"),
        &ChunkConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let diagnoser = |runs| {
        Diagnoser::new(
            &gw,
            &catalog,
            DiagnosisConfig {
                runs,
                ..DiagnosisConfig::default()
            },
        )
    };
    let (ten, one) = (diagnoser(10), diagnoser(1));
    for story in &stories {
        for n in Narrative::ALL {
            let a = ten.diagnose_chunks(story, n).map_err(|e| e.to_string())?;
            let b = one.diagnose_chunks(story, n).map_err(|e| e.to_string())?;
            for (x, y) in a.iter().zip(&b) {
                ensure(x.per_feature == y.per_feature, || {
                    format!("{} medians differ", x.subject)
                })?;
                ensure(x.stability().values().all(|s| s.min == s.max), || {
                    format!("{} varies across runs", x.subject)
                })?;
            }
            let sa = ten.diagnose_story(story, n).map_err(|e| e.to_string())?;
            let sb = one.diagnose_story(story, n).map_err(|e| e.to_string())?;
            ensure(sa.per_feature == sb.per_feature, || {
                format!("{} story medians differ", story.id)
            })?;
        }
    }
    let mut seen = BTreeMap::new();
    for raw in 1..=5i64 {
        let ann = normalize_rating(raw).map_err(|e| e.to_string())?;
        ensure(ann.grid_level() == Some(raw as u8), || {
            format!("{raw} maps to {ann}")
        })?;
        seen.insert(ann.grid_level(), raw);
    }
    ensure(seen.len() == 5, || "normalization is not injective".into())?;
    ensure(
        normalize_rating(0).is_err() && normalize_rating(6).is_err(),
        || "out-of-range rating accepted".into(),
    )?;
    Ok("10-run medians equal 1-run values with zero spread; 1..5 <-> 0.2..1.0".into())
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_narrashift"));
    c.env_remove("SOURCE_DATE_EPOCH");
    c
}

fn invoke(args: &[&str]) -> Result<(), String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = common::fixture("corpus_ind.jsonl");
    let stories = common::fixture("markers_c2i.jsonl");
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let out = out.to_str().unwrap();
        let base = ["--provider", "mock", "--seed", "7", "--out", out];
        invoke(&[&base[..], &["learn", "--corpus", corpus.to_str().unwrap()]].concat())?;
        for method in ["abduction", "baseline"] {
            invoke(
                &[
                    &base[..],
                    &[
                        "transform",
                        "--stories",
                        stories.to_str().unwrap(),
                        "--direction",
                        "C->I",
                        "--method",
                        method,
                    ],
                ]
                .concat(),
            )?;
        }
        invoke(&[&base[..], &["evaluate"]].concat())?;
        trees.push(dir_bytes(Path::new(out))?);
    }
    ensure(trees[0].len() >= 23, || {
        format!("only {} artifacts written", trees[0].len())
    })?;
    ensure(trees[0] == trees[1], || {
        let diff: Vec<_> = trees[0]
            .keys()
            .filter(|k| trees[1].get(*k) != trees[0].get(*k))
            .collect();
        format!("artifacts differ: {diff:?}")
    })?;
    // Regenerating reports from the stored runs reproduces them byte for byte.
    let a = tmp.path().join("a");
    let before = (
        fs::read(a.join("report.csv")).unwrap(),
        fs::read(a.join("summary.json")).unwrap(),
    );
    invoke(&["--out", a.to_str().unwrap(), "evaluate"])?;
    let after = (
        fs::read(a.join("report.csv")).unwrap(),
        fs::read(a.join("summary.json")).unwrap(),
    );
    ensure(before == after, || "regenerated reports differ".into())?;
    Ok(format!(
        "{} artifacts byte-identical across two runs; reports regenerate identically",
        trees[0].len()
    ))
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = {
        let (suites, secs) = suites();
        let suites = std::rc::Rc::new(suites);
        let (s6, s7, s8) = (suites.clone(), suites.clone(), suites);
        vec![
            (
                1,
                "logic engine matches brute-force saturation",
                Box::new(logic_oracle),
            ),
            (2, "worked s_feat/corpus_sim chain", Box::new(worked_chain)),
            (
                3,
                "abduction optimality and determinism",
                Box::new(abduction_optimality),
            ),
            (4, "consistency invariant", Box::new(consistency)),
            (
                5,
                "learned confidences and budget monotonicity",
                Box::new(confidences_and_monotonicity),
            ),
            (
                6,
                "mock end-to-end shift",
                Box::new(move || end_to_end(&s6, secs)),
            ),
            (
                7,
                "transform-call bound",
                Box::new(move || proposition_bound(&s7)),
            ),
            (8, "KL metric", Box::new(move || kl_metric(&s8))),
            (9, "diagnosis stability", Box::new(diagnosis_stability)),
            (10, "reproducible artifacts", Box::new(reproducibility)),
        ]
    };
    let mut failed = 0;
    for (n, name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n:>2}: {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {n:>2}: {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
