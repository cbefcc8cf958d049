//! Survey-based narrative diagnosis: LLM ratings per (text, feature), aggregated over
//! repeated runs, normalized into `c_feat` observations.

mod cache;
mod catalog;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Story;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, Purpose};
use crate::logic::{Annotation, GroundAtom, Interpretation};
use crate::narrative::{FeatureId, Narrative};

pub use cache::DiagnosisCache;
pub use catalog::{FeatureCatalog, FeatureEntry};

/// Rating used when a reply never yields an integer in 1..=5.
pub const NEUTRAL_RATING: u8 = 3;

/// Maps a 1..=5 survey answer to its annotation `raw / 5`.
pub fn normalize_rating(raw: i64) -> Result<Annotation> {
    if !(1..=5).contains(&raw) {
        return Err(Error::Rating(raw));
    }
    Annotation::new(raw as f64 / 5.0)
}

/// First integer token of a reply, if it lies in 1..=5.
pub fn parse_rating(reply: &str) -> Option<u8> {
    let start = reply.find(|c: char| c.is_ascii_digit())?;
    let digits: String = reply[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse::<u8>().ok().filter(|r| (1..=5).contains(r))
}

const TEXT_OPEN: &str = "<<<\n";
const TEXT_CLOSE: &str = "\n>>>";

pub fn survey_prompt(entry: &FeatureEntry, text: &str) -> String {
    format!(
        "You are assessing the cultural orientation of a narrative text.\n\n\
         Question: {}\n\n\
         Text:\n{TEXT_OPEN}{text}{TEXT_CLOSE}\n\n\
         Answer with a single integer from 1 (not at all) to 5 (completely). Reply with the number only.",
        entry.question
    )
}

/// Recovers the rated text from a prompt built by [`survey_prompt`].
pub fn survey_prompt_text(prompt: &str) -> Option<&str> {
    if !prompt.starts_with("You are assessing the cultural orientation") {
        return None;
    }
    let start = prompt.find(TEXT_OPEN)? + TEXT_OPEN.len();
    let end = prompt.rfind(TEXT_CLOSE)?;
    (start <= end).then(|| &prompt[start..end])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingSample {
    pub subject: String,
    pub feature: FeatureId,
    pub raw: u8,
    pub run_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRating {
    /// Lower median of the per-run ratings.
    pub raw: u8,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub min: u8,
    pub max: u8,
    pub median: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub subject: String,
    pub per_feature: BTreeMap<FeatureId, FeatureRating>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RatingSample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DiagnosisResult {
    /// Builds the aggregate from raw samples (lower median per feature).
    pub fn from_samples(
        subject: impl Into<String>,
        runs: Vec<RatingSample>,
        warnings: Vec<String>,
    ) -> Self {
        let mut by_feature: BTreeMap<FeatureId, Vec<u8>> = BTreeMap::new();
        for s in &runs {
            by_feature.entry(s.feature).or_default().push(s.raw);
        }
        let per_feature = by_feature
            .into_iter()
            .map(|(f, raws)| {
                let raw = lower_median(&raws);
                let annotation = normalize_rating(raw as i64).expect("samples are validated");
                (f, FeatureRating { raw, annotation })
            })
            .collect();
        DiagnosisResult {
            subject: subject.into(),
            per_feature,
            runs,
            warnings,
        }
    }

    /// Median of the 20 aggregated ratings for `narrative`'s features.
    pub fn story_score(&self, narrative: Narrative) -> Result<f64> {
        story_score(self, narrative)
    }

    /// Per-feature spread of the raw ratings across runs.
    pub fn stability(&self) -> BTreeMap<FeatureId, Stability> {
        let mut by_feature: BTreeMap<FeatureId, Vec<u8>> = BTreeMap::new();
        for s in &self.runs {
            by_feature.entry(s.feature).or_default().push(s.raw);
        }
        by_feature
            .into_iter()
            .map(|(f, v)| {
                let st = Stability {
                    min: *v.iter().min().expect("non-empty"),
                    max: *v.iter().max().expect("non-empty"),
                    median: lower_median(&v),
                };
                (f, st)
            })
            .collect()
    }
}

/// Lower median of integer ratings; keeps the result on the 1..=5 grid.
pub fn lower_median(values: &[u8]) -> u8 {
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Median (mean of the middle pair for even counts) of the 20 ratings of `narrative`.
pub fn story_score(diag: &DiagnosisResult, narrative: Narrative) -> Result<f64> {
    let mut raws = Vec::with_capacity(20);
    for f in narrative.features() {
        let r = diag
            .per_feature
            .get(&f)
            .ok_or_else(|| Error::Observation(format!("{}: no rating for {f}", diag.subject)))?;
        raws.push(r.raw as f64);
    }
    raws.sort_by(f64::total_cmp);
    let n = raws.len();
    Ok(if n % 2 == 1 {
        raws[n / 2]
    } else {
        (raws[n / 2 - 1] + raws[n / 2]) / 2.0
    })
}

/// Story-level ratings rolled up from chunk ratings (max per feature).
pub fn rollup(story_id: &str, chunks: &[DiagnosisResult]) -> DiagnosisResult {
    let mut per_feature: BTreeMap<FeatureId, FeatureRating> = BTreeMap::new();
    for c in chunks {
        for (&f, &r) in &c.per_feature {
            per_feature
                .entry(f)
                .and_modify(|cur| {
                    if r.raw > cur.raw {
                        *cur = r;
                    }
                })
                .or_insert(r);
        }
    }
    DiagnosisResult {
        subject: story_id.to_string(),
        per_feature,
        runs: Vec::new(),
        warnings: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// A separate survey pass over the whole story text.
    #[default]
    Survey,
    /// Max over chunk ratings, no extra LLM calls.
    Rollup,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "survey" => Ok(ScoreMode::Survey),
            "rollup" => Ok(ScoreMode::Rollup),
            other => Err(Error::Config(format!("unknown survey mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisConfig {
    pub runs: u32,
    /// Extra requests allowed per rating when the reply is unparseable.
    pub retries: u32,
    /// Survey all 40 features instead of the target orientation's 20.
    pub full_spectrum: bool,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            runs: 10,
            retries: 3,
            full_spectrum: false,
        }
    }
}

pub struct Diagnoser<'a> {
    pub gateway: &'a Gateway,
    pub catalog: &'a FeatureCatalog,
    pub cfg: DiagnosisConfig,
    pub cache: Option<&'a DiagnosisCache>,
}

struct Job<'t> {
    subject: usize,
    feature: FeatureId,
    run: u32,
    text: &'t str,
    subject_id: &'t str,
}

impl<'a> Diagnoser<'a> {
    pub fn new(gateway: &'a Gateway, catalog: &'a FeatureCatalog, cfg: DiagnosisConfig) -> Self {
        Diagnoser {
            gateway,
            catalog,
            cfg,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a DiagnosisCache) -> Self {
        self.cache = Some(cache);
        self
    }

    fn features(&self, narrative: Narrative) -> Vec<FeatureId> {
        if self.cfg.full_spectrum {
            FeatureId::all().collect()
        } else {
            narrative.features().collect()
        }
    }

    /// One diagnosis per chunk, in chunk order.
    pub fn diagnose_chunks(
        &self,
        story: &Story,
        narrative: Narrative,
    ) -> Result<Vec<DiagnosisResult>> {
        if story.chunks.is_empty() {
            return Err(Error::DegenerateStory(story.id.clone()));
        }
        let subjects: Vec<(&str, &str)> = story
            .chunks
            .iter()
            .map(|c| (c.id.as_str(), c.text.as_str()))
            .collect();
        self.survey(&subjects, &self.features(narrative))
    }

    /// Story-level survey over the full text.
    pub fn diagnose_story(&self, story: &Story, narrative: Narrative) -> Result<DiagnosisResult> {
        let subjects = [(story.id.as_str(), story.text.as_str())];
        Ok(self
            .survey(&subjects, &self.features(narrative))?
            .pop()
            .expect("one subject"))
    }

    /// Story score under `mode`, reusing `chunk_diag` for roll-ups.
    pub fn score(
        &self,
        story: &Story,
        narrative: Narrative,
        mode: ScoreMode,
        chunk_diag: Option<&[DiagnosisResult]>,
    ) -> Result<(DiagnosisResult, f64)> {
        let diag = match (mode, chunk_diag) {
            (ScoreMode::Survey, _) => self.diagnose_story(story, narrative)?,
            (ScoreMode::Rollup, Some(chunks)) => rollup(&story.id, chunks),
            (ScoreMode::Rollup, None) => {
                rollup(&story.id, &self.diagnose_chunks(story, narrative)?)
            }
        };
        let score = story_score(&diag, narrative)?;
        Ok((diag, score))
    }

    fn survey(
        &self,
        subjects: &[(&str, &str)],
        features: &[FeatureId],
    ) -> Result<Vec<DiagnosisResult>> {
        let runs = self.cfg.runs.max(1);
        let mut cached: BTreeMap<(usize, FeatureId), Vec<u8>> = BTreeMap::new();
        let mut jobs = Vec::new();
        for (si, &(subject_id, text)) in subjects.iter().enumerate() {
            for &feature in features {
                if let Some(hit) = self.cache_lookup(text, feature, runs) {
                    cached.insert((si, feature), hit);
                    continue;
                }
                for run in 0..runs {
                    jobs.push(Job {
                        subject: si,
                        feature,
                        run,
                        text,
                        subject_id,
                    });
                }
            }
        }

        let answers: Vec<Result<(u8, Option<String>)>> =
            jobs.par_iter().map(|job| self.ask(job)).collect();

        let mut samples: Vec<Vec<RatingSample>> = vec![Vec::new(); subjects.len()];
        let mut warnings: Vec<Vec<String>> = vec![Vec::new(); subjects.len()];
        let mut fresh: BTreeMap<(usize, FeatureId), Vec<u8>> = BTreeMap::new();
        for (job, answer) in jobs.iter().zip(answers) {
            let (raw, warning) = answer?;
            if let Some(w) = warning {
                log::warn!("{w}");
                warnings[job.subject].push(w);
            }
            fresh
                .entry((job.subject, job.feature))
                .or_default()
                .push(raw);
        }
        if let Some(cache) = self.cache {
            for (&(si, feature), raws) in &fresh {
                cache.insert(subjects[si].1, feature, self.gateway, raws.clone());
            }
        }
        fresh.extend(cached);
        for ((si, feature), raws) in fresh {
            for (run, raw) in raws.into_iter().enumerate() {
                samples[si].push(RatingSample {
                    subject: subjects[si].0.to_string(),
                    feature,
                    raw,
                    run_index: run as u32,
                });
            }
        }
        Ok(subjects
            .iter()
            .zip(samples.into_iter().zip(warnings))
            .map(|(&(id, _), (s, w))| DiagnosisResult::from_samples(id, s, w))
            .collect())
    }

    fn cache_lookup(&self, text: &str, feature: FeatureId, runs: u32) -> Option<Vec<u8>> {
        let hit = self.cache?.get(text, feature, self.gateway)?;
        (hit.len() >= runs as usize).then(|| hit[..runs as usize].to_vec())
    }

    fn ask(&self, job: &Job<'_>) -> Result<(u8, Option<String>)> {
        let prompt = survey_prompt(self.catalog.get(job.feature), job.text);
        let subject = format!("{}/{}/run{}", job.subject_id, job.feature, job.run);
        for _ in 0..=self.cfg.retries {
            let reply = self
                .gateway
                .complete(&prompt, Purpose::Diagnosis, &subject)?;
            if let Some(r) = parse_rating(&reply) {
                return Ok((r, None));
            }
        }
        Ok((
            NEUTRAL_RATING,
            Some(format!(
                "{subject}: no rating in 1..=5 after {} attempts, using {NEUTRAL_RATING}",
                self.cfg.retries + 1
            )),
        ))
    }
}

/// Ground observations for a story: `contains(s, c)_1` per chunk plus every chunk rating.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub story_id: String,
    pub atoms: Interpretation,
}

impl Observations {
    pub fn c_feat(&self, chunk_id: &str, f: FeatureId) -> Option<Annotation> {
        self.atoms.get(&GroundAtom::c_feat(chunk_id, f)).copied()
    }

    /// Raw 1..=5 rating view, keyed by chunk id then feature.
    pub fn ratings(&self) -> BTreeMap<String, BTreeMap<FeatureId, u8>> {
        let mut out: BTreeMap<String, BTreeMap<FeatureId, u8>> = BTreeMap::new();
        for (atom, ann) in &self.atoms {
            if let (crate::logic::Const::Chunk(c), crate::logic::Const::Feature(f)) =
                (&atom.args[0], &atom.args[1])
            {
                out.entry(c.clone())
                    .or_default()
                    .insert(*f, ann.grid_level().unwrap_or(0));
            }
        }
        out
    }
}

pub fn observations(story: &Story, diag: &[DiagnosisResult]) -> Result<Observations> {
    let by_subject: BTreeMap<&str, &DiagnosisResult> =
        diag.iter().map(|d| (d.subject.as_str(), d)).collect();
    let mut atoms = Interpretation::new();
    for chunk in &story.chunks {
        let d = by_subject
            .get(chunk.id.as_str())
            .ok_or_else(|| Error::Observation(format!("chunk {} was not diagnosed", chunk.id)))?;
        atoms.insert(GroundAtom::contains(&story.id, &chunk.id), Annotation::TOP);
        for (&f, r) in &d.per_feature {
            atoms.insert(GroundAtom::c_feat(&chunk.id, f), r.annotation);
        }
    }
    Ok(Observations {
        story_id: story.id.clone(),
        atoms,
    })
}
