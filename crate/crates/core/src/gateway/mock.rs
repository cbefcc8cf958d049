//! Deterministic rule-table provider used for offline runs and tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, Completion, Provider, ProviderError, Usage};
use crate::corpus::{chunk_story, ChunkConfig};
use crate::diagnosis::{survey_prompt_text, FeatureCatalog};
use crate::error::{Error, Result};
use crate::evaluation::{count_tokens, tokenize};
use crate::narrative::{FeatureId, Narrative};
use crate::transform::prompt::{parse_baseline_prompt, parse_rewrite_prompt};

/// A surveyed text containing `token` gets `rating` on each of `features`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerRule {
    pub token: String,
    pub features: Vec<FeatureId>,
    pub rating: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    /// Rating for features no marker mentions.
    pub neutral: u8,
    pub markers: Vec<MarkerRule>,
    /// Sentence appended to a rewritten segment to express a feature.
    pub insertions: BTreeMap<FeatureId, String>,
    /// Sentence appended to every chunk by the zero-shot baseline.
    pub baseline: BTreeMap<Narrative, String>,
}

const INDIVIDUALISTIC: [(&str, &str); 5] = [
    ("alone", "She chose to face it alone."),
    ("ambition", "Her ambition drove every step."),
    ("unique", "She was proud to be unique."),
    ("independent", "She remained independent of their wishes."),
    ("breakthrough", "The breakthrough was hers."),
];

const COLLECTIVISTIC: [(&str, &str); 5] = [
    ("together", "They faced it together."),
    ("village", "The whole village shared the work."),
    ("ancestors", "They honored the ancestors."),
    ("harmony", "Harmony returned to the family."),
    ("duty", "Each did their duty to the others."),
];

const CLUSTER: u8 = 4;

impl Default for RuleTable {
    /// Ten marker words, one per block of four features. Each marker rates its own
    /// block 5 and the dual block in the other orientation 1.
    fn default() -> Self {
        let mut markers = Vec::new();
        let mut insertions = BTreeMap::new();
        for (narrative, words) in [
            (Narrative::Individualistic, INDIVIDUALISTIC),
            (Narrative::Collectivistic, COLLECTIVISTIC),
        ] {
            let first = narrative.features().next().expect("non-empty").get();
            for (i, (token, sentence)) in words.into_iter().enumerate() {
                let own: Vec<FeatureId> = (0..CLUSTER)
                    .filter_map(|j| FeatureId::new(first + i as u8 * CLUSTER + j))
                    .collect();
                let dual: Vec<FeatureId> = own.iter().map(|f| f.dual()).collect();
                for f in &own {
                    insertions.insert(*f, sentence.to_string());
                }
                markers.push(MarkerRule {
                    token: token.into(),
                    features: own,
                    rating: 5,
                });
                markers.push(MarkerRule {
                    token: token.into(),
                    features: dual,
                    rating: 1,
                });
            }
        }
        RuleTable {
            neutral: 3,
            markers,
            insertions,
            baseline: BTreeMap::from([
                (
                    Narrative::Individualistic,
                    "It was a personal breakthrough.".into(),
                ),
                (
                    Narrative::Collectivistic,
                    "It was their duty to one another.".into(),
                ),
            ]),
        }
    }
}

impl RuleTable {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: RuleTable = serde_json::from_str(&raw)?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: u8| (1..=5).contains(&r);
        if !ok(self.neutral) || self.markers.iter().any(|m| !ok(m.rating)) {
            return Err(Error::Config("mock ratings must lie in 1..=5".into()));
        }
        if self
            .markers
            .iter()
            .any(|m| tokenize(&m.token) != [m.token.to_lowercase()])
        {
            return Err(Error::Config(
                "mock marker tokens must be single words".into(),
            ));
        }
        Ok(())
    }

    /// Rating of `feature` for `text`: the highest matching marker rating, else neutral.
    pub fn rate(&self, text: &str, feature: FeatureId) -> u8 {
        let tokens: BTreeSet<String> = tokenize(text).into_iter().collect();
        self.markers
            .iter()
            .filter(|m| m.features.contains(&feature) && tokens.contains(&m.token.to_lowercase()))
            .map(|m| m.rating)
            .max()
            .unwrap_or(self.neutral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockMode {
    /// Rewrites insert marker sentences.
    #[default]
    Rewrite,
    /// Rewrites return the story unchanged.
    Echo,
}

impl std::str::FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rewrite" => Ok(MockMode::Rewrite),
            "echo" => Ok(MockMode::Echo),
            other => Err(format!(
                "unknown mock mode `{other}` (expected rewrite or echo)"
            )),
        }
    }
}

pub struct MockProvider {
    table: RuleTable,
    catalog: FeatureCatalog,
    mode: MockMode,
    seed: u64,
}

impl MockProvider {
    pub fn new(table: RuleTable, seed: u64) -> Self {
        MockProvider {
            table,
            catalog: FeatureCatalog::bundled(),
            mode: MockMode::Rewrite,
            seed,
        }
    }

    pub fn with_mode(mut self, mode: MockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn table(&self) -> &RuleTable {
        &self.table
    }

    fn reply(&self, prompt: &str) -> String {
        if let Some(text) = survey_prompt_text(prompt) {
            return match self.catalog.find_question_in(prompt) {
                Some(f) => self.table.rate(text, f).to_string(),
                None => self.table.neutral.to_string(),
            };
        }
        if let Some(parsed) = parse_rewrite_prompt(prompt) {
            if self.mode == MockMode::Echo {
                return parsed.story.to_string();
            }
            let feature = parsed
                .steering
                .and_then(|s| self.catalog.find_question_in(s))
                .unwrap_or_else(|| self.pick_feature(parsed.segment, parsed.target));
            return self.insert(parsed.story, parsed.segment, feature);
        }
        if let Some((target, story)) = parse_baseline_prompt(prompt) {
            if self.mode == MockMode::Echo {
                return story.to_string();
            }
            return self.baseline(story, target);
        }
        prompt.to_string()
    }

    fn pick_feature(&self, segment: &str, target: Narrative) -> FeatureId {
        let digest = Sha256::digest(segment.as_bytes());
        let mix = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ mix);
        let candidates: Vec<FeatureId> = target.features().collect();
        *candidates.choose(&mut rng).expect("narrative has features")
    }

    fn insert(&self, story: &str, segment: &str, feature: FeatureId) -> String {
        let Some(sentence) = self.table.insertions.get(&feature) else {
            return story.to_string();
        };
        match story.find(segment) {
            Some(at) if !segment.is_empty() => {
                let end = at + segment.len();
                format!("{} {sentence}{}", &story[..end], &story[end..])
            }
            _ => story.to_string(),
        }
    }

    fn baseline(&self, story: &str, target: Narrative) -> String {
        let Some(sentence) = self.table.baseline.get(&target) else {
            return story.to_string();
        };
        let Ok(chunks) = chunk_story(story, &ChunkConfig::default()) else {
            return story.to_string();
        };
        let mut out = String::with_capacity(story.len() + chunks.len() * (sentence.len() + 1));
        let mut cursor = 0;
        for c in &chunks {
            out.push_str(&story[cursor..c.end]);
            out.push(' ');
            out.push_str(sentence);
            cursor = c.end;
        }
        out.push_str(&story[cursor..]);
        out
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn model(&self) -> &str {
        match self.mode {
            MockMode::Rewrite => "mock-rewrite",
            MockMode::Echo => "mock-echo",
        }
    }

    fn complete(
        &self,
        request: &ChatRequest<'_>,
    ) -> std::result::Result<Completion, ProviderError> {
        let text = self.reply(request.prompt);
        Ok(Completion {
            usage: Some(Usage {
                prompt_tokens: count_tokens(request.prompt) as u64,
                completion_tokens: count_tokens(&text) as u64,
            }),
            text,
            latency: Some(Duration::ZERO),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnosis::survey_prompt;
    use crate::gateway::{Gateway, Purpose};
    use crate::transform::prompt::{baseline_prompt, rewrite_prompt, Steering};

    fn f(id: u8) -> FeatureId {
        FeatureId::new(id).unwrap()
    }

    fn ask(p: &MockProvider, text: &str, feature: u8) -> String {
        let prompt = survey_prompt(p.catalog.get(f(feature)), text);
        p.reply(&prompt)
    }

    #[test]
    fn marker_lookup() {
        let p = MockProvider::new(RuleTable::default(), 0);
        assert_eq!(ask(&p, "She walked alone.", 4), "5");
        assert_eq!(ask(&p, "She walked alone.", 24), "1");
        assert_eq!(ask(&p, "She walked alone.", 5), "3");
        assert_eq!(ask(&p, "They worked together.", 21), "5");
        assert_eq!(ask(&p, "They worked together.", 1), "1");
        assert_eq!(ask(&p, "Alone, yet together.", 1), "5");
    }

    #[test]
    fn rewrite_touches_only_the_segment() {
        let p = MockProvider::new(RuleTable::default(), 0);
        let cat = FeatureCatalog::bundled();
        let story = "The rain fell on the town. The river rose quickly.";
        let e = cat.get(f(2));
        let prompt = rewrite_prompt(
            story,
            "The river rose quickly.",
            Narrative::Collectivistic,
            Narrative::Individualistic,
            Some(Steering {
                name: &e.name,
                question: &e.question,
            }),
        );
        let out = p.reply(&prompt);
        assert_eq!(
            out,
            "The rain fell on the town. The river rose quickly. She chose to face it alone."
        );
    }

    #[test]
    fn verbatim_rewrite_is_seeded() {
        let story = "The rain fell on the town. The river rose quickly.";
        let prompt = rewrite_prompt(
            story,
            "The rain fell on the town.",
            Narrative::Individualistic,
            Narrative::Collectivistic,
            None,
        );
        let a = MockProvider::new(RuleTable::default(), 7).reply(&prompt);
        let b = MockProvider::new(RuleTable::default(), 7).reply(&prompt);
        assert_eq!(a, b);
        assert!(a.ends_with(" The river rose quickly."));
        assert_ne!(a, story);
    }

    #[test]
    fn echo_and_baseline() {
        let story =
            "The rain fell on the old town today.\n\nThe river rose very quickly late that night.";
        let prompt = baseline_prompt(story, Narrative::Collectivistic);
        let echo = MockProvider::new(RuleTable::default(), 0).with_mode(MockMode::Echo);
        assert_eq!(echo.reply(&prompt), story);
        let rewrite = MockProvider::new(RuleTable::default(), 0).reply(&prompt);
        assert_eq!(
            rewrite,
            "The rain fell on the old town today. It was their duty to one another.\n\n\
             The river rose very quickly late that night. It was their duty to one another."
        );
        assert_eq!(echo.reply("plain prompt"), "plain prompt");
    }

    #[test]
    fn gateway_records_usage() {
        let gw = Gateway::mock(MockProvider::new(RuleTable::default(), 0));
        assert_eq!(
            gw.complete("echo me", Purpose::Transform, "s").unwrap(),
            "echo me"
        );
        let ledger = gw.ledger();
        assert_eq!(ledger.transform_calls, 1);
        assert_eq!(ledger.prompt_tokens, 2);
        assert!(!ledger.records[0].estimated);
    }

    #[test]
    fn table_round_trips_through_json() {
        let table = RuleTable::default();
        let json = serde_json::to_string(&table).unwrap();
        let back: RuleTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);
        back.validate().unwrap();
    }
}
