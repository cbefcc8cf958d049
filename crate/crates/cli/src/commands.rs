use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use narrashift::corpus::{load_corpus, load_stories, Story};
use narrashift::diagnosis::{Diagnoser, DiagnosisCache, FeatureCatalog, ScoreMode};
use narrashift::evaluation::{emit_report, EvalReport};
use narrashift::logic::{Agg, GRID};
use narrashift::rules::{learn_rules, LearnedRules};
use narrashift::transform::{Method, TransformConfig, TransformRun, Transformer};
use narrashift::{Direction, FeatureId, Narrative};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Common;

fn open_cache(common: &Common) -> anyhow::Result<Option<DiagnosisCache>> {
    common
        .cache
        .as_deref()
        .map(DiagnosisCache::open)
        .transpose()
        .map_err(Into::into)
}

fn save_cache(cache: Option<&DiagnosisCache>) -> anyhow::Result<()> {
    if let Some(c) = cache {
        c.save()?;
    }
    Ok(())
}

fn create_out(common: &Common) -> anyhow::Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))
}

pub fn default_rules_path(out: &Path, orientation: Narrative) -> PathBuf {
    out.join(format!("rules.{}.json", orientation.short()))
}

pub fn learn(
    common: &Common,
    corpus: &Path,
    agg: Agg,
    output: Option<PathBuf>,
) -> anyhow::Result<PathBuf> {
    let corpus = load_corpus(corpus, &common.chunking)?;
    let gateway = common.gateway()?;
    let catalog = FeatureCatalog::bundled();
    let cache = open_cache(common)?;
    let mut diagnoser = Diagnoser::new(&gateway, &catalog, common.diagnosis());
    if let Some(c) = &cache {
        diagnoser = diagnoser.with_cache(c);
    }
    let learned = common
        .pool()?
        .install(|| learn_rules(&corpus, &diagnoser, agg, &common.timestamp()))?;
    save_cache(cache.as_ref())?;
    gateway.save_cache()?;

    let path = output.unwrap_or_else(|| default_rules_path(&common.out, learned.orientation()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    learned.save(&path)?;

    println!(
        "learned {} rules from {} stories (agg={})",
        learned.orientation(),
        learned.table.corpus_size,
        learned.agg()
    );
    println!("{:>5}  {:>8}  {:>8}", "mu", "conf", "head");
    for (level, mu) in GRID.iter().enumerate() {
        let conf = learned.table.conf(level as u8);
        println!("{mu:>5.1}  {conf:>8.4}  {:>8.4}", mu * conf);
    }
    println!("wrote {}", path.display());
    Ok(path)
}

#[derive(Serialize)]
struct FeatureReport {
    name: String,
    median: u8,
    annotation: f64,
    min: u8,
    max: u8,
}

#[derive(Serialize)]
struct DiagnosisReport {
    story_id: String,
    narrative: Narrative,
    mode: ScoreMode,
    runs: u32,
    story_score: f64,
    features: BTreeMap<FeatureId, FeatureReport>,
}

pub fn diagnose(
    common: &Common,
    stories: &Path,
    narrative: Option<Narrative>,
) -> anyhow::Result<PathBuf> {
    let stories = load_stories(stories, &common.chunking)?;
    if stories.is_empty() {
        bail!("no stories to diagnose");
    }
    let gateway = common.gateway()?;
    let catalog = FeatureCatalog::bundled();
    let cache = open_cache(common)?;
    let mut diagnoser = Diagnoser::new(&gateway, &catalog, common.diagnosis());
    if let Some(c) = &cache {
        diagnoser = diagnoser.with_cache(c);
    }
    let narratives: Vec<Narrative> = narrative.map_or(Narrative::ALL.to_vec(), |n| vec![n]);
    let jobs: Vec<(&Story, Narrative)> = stories
        .iter()
        .flat_map(|s| narratives.iter().map(move |&n| (s, n)))
        .collect();
    let reports: Vec<DiagnosisReport> = common.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(story, n)| -> anyhow::Result<DiagnosisReport> {
                let (diag, score) = diagnoser.score(story, n, common.survey_mode, None)?;
                let stability = diag.stability();
                let features = diag
                    .per_feature
                    .iter()
                    .map(|(&f, r)| {
                        let spread = stability.get(&f);
                        let report = FeatureReport {
                            name: catalog.get(f).name.clone(),
                            median: r.raw,
                            annotation: r.annotation.value(),
                            min: spread.map_or(r.raw, |s| s.min),
                            max: spread.map_or(r.raw, |s| s.max),
                        };
                        (f, report)
                    })
                    .collect();
                Ok(DiagnosisReport {
                    story_id: story.id.clone(),
                    narrative: n,
                    mode: common.survey_mode,
                    runs: common.runs,
                    story_score: score,
                    features,
                })
            })
            .collect::<anyhow::Result<_>>()
    })?;
    save_cache(cache.as_ref())?;
    gateway.save_cache()?;

    for r in &reports {
        let unstable = r.features.values().filter(|f| f.min != f.max).count();
        println!(
            "{}\t{}\tscore={:.1}\tunstable_features={unstable}",
            r.story_id, r.narrative, r.story_score
        );
    }
    create_out(common)?;
    let path = common.out.join("diagnosis.json");
    fs::write(&path, serde_json::to_string_pretty(&reports)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub struct TransformArgs {
    pub stories: PathBuf,
    pub direction: Direction,
    pub method: Method,
    pub rules: Option<PathBuf>,
    pub cfg: TransformConfig,
}

fn load_rules(common: &Common, args: &TransformArgs) -> anyhow::Result<LearnedRules> {
    let target = args.direction.target();
    let path = args
        .rules
        .clone()
        .unwrap_or_else(|| default_rules_path(&common.out, target));
    if !path.exists() {
        bail!(narrashift::Error::Config(format!(
            "abduction needs a rules file for {target}; {} does not exist (run `learn` or pass --rules)",
            path.display()
        )));
    }
    let rules = LearnedRules::load(&path)?;
    if rules.orientation() != target {
        bail!(narrashift::Error::Config(format!(
            "{} holds {} rules but {} targets {target}",
            path.display(),
            rules.orientation(),
            args.direction
        )));
    }
    Ok(rules)
}

pub fn transform(common: &Common, args: &TransformArgs) -> anyhow::Result<Vec<PathBuf>> {
    let rules = match args.method {
        Method::Abduction => Some(load_rules(common, args)?),
        Method::Baseline => None,
    };
    let stories = load_stories(&args.stories, &common.chunking)?;
    if stories.is_empty() {
        bail!("no stories to transform");
    }
    let gateway = common.gateway()?;
    let catalog = FeatureCatalog::bundled();
    let cache = open_cache(common)?;
    let transformer = Transformer {
        gateway: &gateway,
        catalog: &catalog,
        diagnosis: common.diagnosis(),
        cache: cache.as_ref(),
        cfg: args.cfg,
    };
    let results: Vec<(String, narrashift::Result<TransformRun>)> = common.pool()?.install(|| {
        stories
            .par_iter()
            .map(|story| {
                info!("transforming {}", story.id);
                let run = match &rules {
                    Some(r) => transformer.run_iterative(story, args.direction, r),
                    None => transformer.baseline_transform(story, args.direction),
                };
                (story.id.clone(), run)
            })
            .collect()
    });
    save_cache(cache.as_ref())?;
    gateway.save_cache()?;

    let dir = common.out.join("runs");
    let mut written = Vec::new();
    let mut failed = Vec::new();
    for (id, result) in results {
        match result {
            Ok(run) => {
                let path = run.save(&dir)?;
                let sel = &run.iterations[run.selected_iteration];
                println!(
                    "{}\t{}\t{:.1} -> {:.1}\tt*={}\ttransform_calls={}{}",
                    run.story_id,
                    run.method,
                    run.evaluation.original,
                    run.evaluation.final_score,
                    sel.t,
                    run.ledger.transform_calls,
                    run.abort
                        .as_deref()
                        .map(|a| format!("\taborted: {a}"))
                        .unwrap_or_default()
                );
                written.push(path);
            }
            Err(e) => {
                eprintln!("{id}: {e}");
                failed.push(id);
            }
        }
    }
    println!(
        "wrote {} run artifacts under {}",
        written.len(),
        dir.display()
    );
    if !failed.is_empty() {
        bail!(
            "{} of {} stories failed: {}",
            failed.len(),
            stories.len(),
            failed.join(", ")
        );
    }
    Ok(written)
}

pub fn evaluate(
    common: &Common,
    runs_dir: Option<PathBuf>,
    alpha: f64,
) -> anyhow::Result<(PathBuf, PathBuf)> {
    let dir = runs_dir.unwrap_or_else(|| common.out.join("runs"));
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading run artifacts in {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!("no run artifacts in {}", dir.display());
    }
    let reports: Vec<EvalReport> = paths
        .iter()
        .map(|p| -> anyhow::Result<EvalReport> {
            let run = TransformRun::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(EvalReport::from_run(&run, alpha)?)
        })
        .collect::<anyhow::Result<_>>()?;
    let (csv, json) = emit_report(&reports, alpha, &common.out)?;
    for r in &reports {
        println!(
            "{}\t{}\t{}\timprovement={:.1}%\tkl={:.4}\ttoken_share={:.1}%\tprop1={}",
            r.story_id,
            r.method,
            r.direction,
            r.improvement_pct,
            r.kl,
            r.token_share_pct,
            if r.prop1_pass { "pass" } else { "FAIL" }
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok((csv, json))
}
