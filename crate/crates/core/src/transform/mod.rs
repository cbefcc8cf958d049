//! Iterative abduction-guided rewriting, the single-prompt baseline, and run artifacts.

pub mod prompt;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abduction::{
    build_hypothesis, explanation_dump, extract_feature, solve, CandidateLevels, Explanation,
    ExplanationEntry,
};
use crate::corpus::{chunk_story, ChunkConfig, Story};
use crate::diagnosis::{
    observations, Diagnoser, DiagnosisCache, DiagnosisConfig, FeatureCatalog, ScoreMode,
};
use crate::error::{Error, Result};
use crate::evaluation::tokenize;
use crate::gateway::{CallRecord, Gateway, LedgerSummary, Purpose};
use crate::logic::{Agg, Annotation};
use crate::narrative::{Direction, FeatureId, Narrative};
use crate::rules::LearnedRules;
use prompt::{baseline_prompt, rewrite_prompt, PromptStyle, Steering};

pub const RUN_VERSION: u32 = 1;

/// Replies shorter than this fraction of the story's tokens are rejected.
const MIN_REPLY_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Abduction,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Abduction => "abduction",
            Method::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abduction" => Ok(Method::Abduction),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Feature budget per iteration; `None` uses the direction's default.
    pub k: Option<usize>,
    pub t_max: usize,
    pub prompt: PromptStyle,
    pub candidate_levels: CandidateLevels,
    /// Score used to pick the best iteration.
    pub iteration_score: ScoreMode,
    /// Score reported for the original and final story.
    pub eval_score: ScoreMode,
    pub chunking: ChunkConfig,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            k: None,
            t_max: 3,
            prompt: PromptStyle::Steered,
            candidate_levels: CandidateLevels::Top,
            iteration_score: ScoreMode::Survey,
            eval_score: ScoreMode::Survey,
            chunking: ChunkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum RewriteStatus {
    Accepted,
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRewrite {
    pub chunk_id: String,
    pub chunk_index: usize,
    pub chunk_tokens: usize,
    pub feature: FeatureId,
    pub feature_name: String,
    pub observed: Annotation,
    pub tau: Annotation,
    #[serde(flatten)]
    pub status: RewriteStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub text: String,
    pub score: f64,
    /// Chunk ratings (1..=5) observed on this story.
    pub observations: BTreeMap<String, BTreeMap<FeatureId, u8>>,
    pub sigma: Option<f64>,
    pub explanation: Vec<ExplanationEntry>,
    pub rewrites: Vec<ChunkRewrite>,
    /// Calls spent diagnosing this story and rewriting it into the next.
    pub calls: LedgerSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub mode: ScoreMode,
    pub original: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub k: usize,
    pub t_max: usize,
    pub agg: Option<Agg>,
    pub prompt: PromptStyle,
    pub candidate_levels: CandidateLevels,
    pub iteration_score: ScoreMode,
    pub runs: u32,
    pub chunking: ChunkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRun {
    pub version: u32,
    pub story_id: String,
    pub method: Method,
    pub direction: Direction,
    pub provider: String,
    pub model: String,
    pub params: RunParams,
    pub original: Story,
    pub iterations: Vec<IterationRecord>,
    pub selected_iteration: usize,
    #[serde(rename = "final")]
    pub final_story: Story,
    pub evaluation: EvalScores,
    pub ledger: LedgerSummary,
    pub transform_calls: Vec<CallRecord>,
    /// Set when a gateway or transform error cut the run short.
    pub abort: Option<String>,
}

impl TransformRun {
    /// Token sizes of every chunk handed to the rewriter, one entry per rewrite call.
    /// The baseline hands over the whole story.
    pub fn transformed_chunk_tokens(&self) -> Vec<usize> {
        match self.method {
            Method::Baseline => vec![self.original.token_count()],
            Method::Abduction => self
                .iterations
                .iter()
                .flat_map(|it| it.rewrites.iter().map(|r| r.chunk_tokens))
                .collect(),
        }
    }

    /// Share of the original story's tokens that were ever handed to the rewriter,
    /// counting each chunk position once at its size when first rewritten.
    pub fn token_share(&self) -> f64 {
        let total = self.original.token_count();
        if total == 0 {
            return 0.0;
        }
        let touched = match self.method {
            Method::Baseline => total,
            Method::Abduction => {
                let mut seen = BTreeSet::new();
                self.iterations
                    .iter()
                    .flat_map(|it| &it.rewrites)
                    .filter(|r| seen.insert(r.chunk_index))
                    .map(|r| r.chunk_tokens)
                    .sum()
            }
        };
        (touched as f64 / total as f64).min(1.0)
    }

    /// argmax of the recorded scores, earliest iteration on ties.
    pub fn reselect(&self) -> usize {
        select_best(self.iterations.iter().map(|it| it.score))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(json)?;
        crate::logic::check_version(&value, RUN_VERSION)?;
        Ok(serde_json::from_value(value)?)
    }

    /// `runs/<story-id>.json`, or `runs/<story-id>.baseline.json` for baseline runs.
    pub fn file_name(&self) -> String {
        match self.method {
            Method::Abduction => format!("{}.json", self.story_id),
            Method::Baseline => format!("{}.baseline.json", self.story_id),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}

fn select_best(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (t, s) in scores.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((t, s));
        }
    }
    best.map_or(0, |(t, _)| t)
}

/// Recovers the rewritten span from `reply`. When the reply keeps everything outside
/// `span` intact, the span is the middle; otherwise the reply is re-chunked and the
/// chunk positions that correspond to the span are taken.
fn extract_segment<'r>(
    original: &str,
    span: Range<usize>,
    reply: &'r str,
    chunking: &ChunkConfig,
) -> Result<&'r str> {
    let (prefix, suffix) = (&original[..span.start], &original[span.end..]);
    if reply.len() >= prefix.len() + suffix.len()
        && reply.starts_with(prefix)
        && reply.ends_with(suffix)
    {
        return Ok(&reply[prefix.len()..reply.len() - suffix.len()]);
    }
    let before = chunk_story(original, chunking)?;
    let lead = before.iter().filter(|c| c.end <= span.start).count();
    let trail = before.iter().filter(|c| c.start >= span.end).count();
    let after = chunk_story(reply, chunking)?;
    let m = after.len();
    let (first, last) = if m > lead + trail {
        (lead, m - trail - 1)
    } else {
        let i = lead.min(m - 1);
        (i, i)
    };
    Ok(&reply[after[first].start..after[last].end])
}

/// Rewrites `original[span]` and splices the result back, leaving everything outside
/// the span byte-identical.
#[allow(clippy::too_many_arguments)]
fn rewrite_span(
    gateway: &Gateway,
    subject: &str,
    original: &str,
    span: Range<usize>,
    direction: Direction,
    steering: Option<Steering<'_>>,
    chunking: &ChunkConfig,
) -> Result<String> {
    let segment = &original[span.clone()];
    let prompt = rewrite_prompt(
        original,
        segment,
        direction.source(),
        direction.target(),
        steering,
    );
    let reply = match gateway.complete(&prompt, Purpose::Transform, subject) {
        Ok(r) => r,
        Err(Error::Gateway { cause, .. }) => return Err(Error::Transform(cause)),
        Err(e) => return Err(e),
    };
    let reply = reply.trim();
    let story_tokens = tokenize(original).len();
    let reply_tokens = tokenize(reply).len();
    if reply_tokens == 0 || (reply_tokens as f64) < MIN_REPLY_SHARE * story_tokens as f64 {
        return Err(Error::RejectedRewrite(format!(
            "reply keeps {reply_tokens} of {story_tokens} tokens"
        )));
    }
    let new_segment = extract_segment(original, span.clone(), reply, chunking)?;
    if tokenize(new_segment).is_empty() {
        return Err(Error::RejectedRewrite("rewritten segment is empty".into()));
    }
    Ok(format!(
        "{}{}{}",
        &original[..span.start],
        new_segment,
        &original[span.end..]
    ))
}

pub struct Transformer<'a> {
    pub gateway: &'a Gateway,
    pub catalog: &'a FeatureCatalog,
    pub diagnosis: DiagnosisConfig,
    pub cache: Option<&'a DiagnosisCache>,
    pub cfg: TransformConfig,
}

struct Snapshot {
    story: Story,
    score: f64,
    observations: BTreeMap<String, BTreeMap<FeatureId, u8>>,
    explanation: Option<Explanation>,
    rewrites: Vec<ChunkRewrite>,
    calls: LedgerSummary,
}

impl<'a> Transformer<'a> {
    pub fn new(gateway: &'a Gateway, catalog: &'a FeatureCatalog) -> Self {
        Transformer {
            gateway,
            catalog,
            diagnosis: DiagnosisConfig::default(),
            cache: None,
            cfg: TransformConfig::default(),
        }
    }

    fn diagnoser<'g>(&'g self, gateway: &'g Gateway) -> Diagnoser<'g> {
        let d = Diagnoser::new(gateway, self.catalog, self.diagnosis);
        match self.cache {
            Some(c) => d.with_cache(c),
            None => d,
        }
    }

    fn steering(&self, feature: FeatureId) -> Option<Steering<'_>> {
        (self.cfg.prompt == PromptStyle::Steered).then(|| {
            let e = self.catalog.get(feature);
            Steering {
                name: &e.name,
                question: &e.question,
            }
        })
    }

    /// Rewrites one chunk of `story` toward `feature` at annotation `tau`.
    #[allow(clippy::too_many_arguments)]
    pub fn llm_transform(
        &self,
        story: &Story,
        chunk_id: &str,
        feature: FeatureId,
        observed: Annotation,
        tau: Annotation,
        direction: Direction,
    ) -> Result<Story> {
        if tau.value() <= observed.value() + crate::logic::EPS {
            return Err(Error::Precondition(format!(
                "target annotation {tau} does not exceed observed {observed}"
            )));
        }
        let chunk = story.chunk(chunk_id).ok_or_else(|| {
            Error::Precondition(format!(
                "chunk {chunk_id} is not part of story {}",
                story.id
            ))
        })?;
        let text = rewrite_span(
            self.gateway,
            chunk_id,
            &story.text,
            chunk.span(),
            direction,
            self.steering(feature),
            &self.cfg.chunking,
        )?;
        story.with_text(text, &self.cfg.chunking)
    }

    fn check_rules(&self, rules: &LearnedRules, direction: Direction) -> Result<()> {
        if rules.orientation() != direction.target() {
            return Err(Error::Config(format!(
                "rules were learned for {} but the target is {}",
                rules.orientation(),
                direction.target()
            )));
        }
        Ok(())
    }

    fn params(&self, k: usize, agg: Option<Agg>) -> RunParams {
        RunParams {
            k,
            t_max: self.cfg.t_max,
            agg,
            prompt: self.cfg.prompt,
            candidate_levels: self.cfg.candidate_levels,
            iteration_score: self.cfg.iteration_score,
            runs: self.diagnosis.runs,
            chunking: self.cfg.chunking,
        }
    }

    /// Diagnose, abduce, rewrite the abduced chunks, repeat; return the best-scoring story.
    pub fn run_iterative(
        &self,
        story: &Story,
        direction: Direction,
        rules: &LearnedRules,
    ) -> Result<TransformRun> {
        self.check_rules(rules, direction)?;
        if self.cfg.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        let k = self.cfg.k.unwrap_or_else(|| direction.default_budget());
        if k == 0 {
            return Err(Error::Config("feature budget k must be at least 1".into()));
        }
        let gw = self.gateway.fork();
        let diagnoser = self.diagnoser(&gw);
        let program = rules.program();
        let target = direction.target();

        let mut snapshots: Vec<Snapshot> = Vec::new();
        let mut current = story.clone();
        let mut abort = None;
        for t in 0..=self.cfg.t_max {
            let mark = gw.ledger().summary();
            let step = self.step(
                &gw,
                &diagnoser,
                &program,
                &current,
                direction,
                k,
                t,
                t == self.cfg.t_max,
            );
            match step {
                Ok((snap, next)) => {
                    let mut snap = snap;
                    snap.calls = gw.ledger().summary() - mark;
                    snapshots.push(snap);
                    match next {
                        Some(next) => current = next,
                        None => break,
                    }
                }
                Err(e) => {
                    log::warn!("{}: run aborted at iteration {t}: {e}", story.id);
                    abort = Some(e.to_string());
                    break;
                }
            }
        }
        if snapshots.is_empty() {
            let reason = abort.unwrap_or_else(|| "no iteration completed".into());
            return Err(Error::Transform(format!("{}: {reason}", story.id)));
        }

        let selected = select_best(snapshots.iter().map(|s| s.score));
        let final_story = snapshots[selected].story.clone();
        let evaluation = self.evaluate(
            &diagnoser,
            story,
            &final_story,
            target,
            &snapshots,
            selected,
        )?;
        let iterations = snapshots
            .into_iter()
            .enumerate()
            .map(|(t, s)| IterationRecord {
                t,
                explanation: s
                    .explanation
                    .as_ref()
                    .map(|e| explanation_dump(e, &s.story, self.catalog))
                    .unwrap_or_default(),
                sigma: s.explanation.as_ref().map(|e| e.sigma),
                text: s.story.text,
                score: s.score,
                observations: s.observations,
                rewrites: s.rewrites,
                calls: s.calls,
            })
            .collect();
        let ledger = gw.ledger();
        Ok(TransformRun {
            version: RUN_VERSION,
            story_id: story.id.clone(),
            method: Method::Abduction,
            direction,
            provider: gw.provider_name().to_string(),
            model: gw.model().to_string(),
            params: self.params(k, Some(rules.agg())),
            original: story.clone(),
            iterations,
            selected_iteration: selected,
            final_story,
            evaluation,
            ledger: ledger.summary(),
            transform_calls: ledger.transform_records().cloned().collect(),
            abort,
        })
    }

    /// Scores `current` and, unless this is the last state, abduces and rewrites it.
    /// Returns the snapshot and the next story (None to stop).
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        gw: &Gateway,
        diagnoser: &Diagnoser<'_>,
        program: &crate::logic::LogicProgram,
        current: &Story,
        direction: Direction,
        k: usize,
        t: usize,
        last: bool,
    ) -> Result<(Snapshot, Option<Story>)> {
        let target = direction.target();
        let chunk_diag = diagnoser.diagnose_chunks(current, target)?;
        let obs = observations(current, &chunk_diag)?;
        let (_, score) =
            diagnoser.score(current, target, self.cfg.iteration_score, Some(&chunk_diag))?;
        let mut snap = Snapshot {
            story: current.clone(),
            score,
            observations: obs.ratings(),
            explanation: None,
            rewrites: Vec::new(),
            calls: LedgerSummary::default(),
        };
        if last {
            return Ok((snap, None));
        }
        let hyp = build_hypothesis(current, &obs, target, self.cfg.candidate_levels);
        let explanation = match solve(program, &obs, &hyp, k) {
            Ok(e) => e,
            Err(Error::EmptyExplanation) => {
                log::info!("{}: nothing left to improve at iteration {t}", current.id);
                return Ok((snap, None));
            }
            Err(e) => return Err(e),
        };

        let mut text = current.text.clone();
        let mut shift: isize = 0;
        for index in explanation.chunks() {
            let chunk = &current.chunks[index];
            let (feature, tau) = extract_feature(&explanation, &chunk.id)?;
            let observed = obs.c_feat(&chunk.id, feature).unwrap_or(Annotation::BOTTOM);
            let span =
                (chunk.start as isize + shift) as usize..(chunk.end as isize + shift) as usize;
            let subject = format!("{}/t{t}/{}", current.id, chunk.id);
            let status = match rewrite_span(
                gw,
                &subject,
                &text,
                span,
                direction,
                self.steering(feature),
                &self.cfg.chunking,
            ) {
                Ok(new_text) => {
                    shift += new_text.len() as isize - text.len() as isize;
                    text = new_text;
                    RewriteStatus::Accepted
                }
                Err(Error::RejectedRewrite(reason)) => {
                    log::warn!("{subject}: {reason}");
                    RewriteStatus::Rejected(reason)
                }
                Err(e) => return Err(e),
            };
            snap.rewrites.push(ChunkRewrite {
                chunk_id: chunk.id.clone(),
                chunk_index: index,
                chunk_tokens: chunk.token_count,
                feature,
                feature_name: self.catalog.get(feature).name.clone(),
                observed,
                tau,
                status,
            });
        }
        snap.explanation = Some(explanation);
        let next = current.with_text(text, &self.cfg.chunking)?;
        Ok((snap, Some(next)))
    }

    fn evaluate(
        &self,
        diagnoser: &Diagnoser<'_>,
        original: &Story,
        final_story: &Story,
        target: Narrative,
        snapshots: &[Snapshot],
        selected: usize,
    ) -> Result<EvalScores> {
        let mode = self.cfg.eval_score;
        if mode == self.cfg.iteration_score {
            return Ok(EvalScores {
                mode,
                original: snapshots[0].score,
                final_score: snapshots[selected].score,
            });
        }
        let (_, orig) = diagnoser.score(original, target, mode, None)?;
        let (_, fin) = diagnoser.score(final_story, target, mode, None)?;
        Ok(EvalScores {
            mode,
            original: orig,
            final_score: fin,
        })
    }

    /// One zero-shot "make it more X" prompt; the reply becomes the new story verbatim.
    pub fn baseline_transform(&self, story: &Story, direction: Direction) -> Result<TransformRun> {
        let gw = self.gateway.fork();
        let diagnoser = self.diagnoser(&gw);
        let target = direction.target();
        let reply = gw.complete(
            &baseline_prompt(&story.text, target),
            Purpose::Transform,
            &format!("{}/baseline", story.id),
        )?;
        let final_story = story.with_text(reply.trim(), &self.cfg.chunking)?;
        let mode = self.cfg.eval_score;
        let (_, orig) = diagnoser.score(story, target, mode, None)?;
        let (_, fin) = diagnoser.score(&final_story, target, mode, None)?;
        let ledger = gw.ledger();
        let record = |t: usize, s: &Story, score: f64| IterationRecord {
            t,
            text: s.text.clone(),
            score,
            observations: BTreeMap::new(),
            sigma: None,
            explanation: Vec::new(),
            rewrites: Vec::new(),
            calls: LedgerSummary::default(),
        };
        Ok(TransformRun {
            version: RUN_VERSION,
            story_id: story.id.clone(),
            method: Method::Baseline,
            direction,
            provider: gw.provider_name().to_string(),
            model: gw.model().to_string(),
            params: self.params(0, None),
            original: story.clone(),
            iterations: vec![record(0, story, orig), record(1, &final_story, fin)],
            selected_iteration: 1,
            final_story,
            evaluation: EvalScores {
                mode,
                original: orig,
                final_score: fin,
            },
            ledger: ledger.summary(),
            transform_calls: ledger.transform_records().cloned().collect(),
            abort: None,
        })
    }
}
