use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::narrative::{FeatureId, Narrative, FEATURES_PER_NARRATIVE};

const BUNDLED: &str = include_str!("../../resources/survey_catalog.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub id: FeatureId,
    pub narrative: Narrative,
    pub name: String,
    pub question: String,
}

/// The 40-question narrative survey, 20 questions per orientation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureCatalog {
    entries: Vec<FeatureEntry>,
}

#[derive(Deserialize)]
struct CatalogFile {
    version: u32,
    features: Vec<FeatureEntry>,
}

impl FeatureCatalog {
    pub const VERSION: u32 = 1;

    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled survey catalog is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(json)?;
        if file.version != Self::VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: Self::VERSION,
            });
        }
        let mut entries = file.features;
        entries.sort_by_key(|e| e.id);
        let catalog = FeatureCatalog { entries };
        catalog.validate()?;
        Ok(catalog)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.len() != 2 * FEATURES_PER_NARRATIVE as usize {
            return Err(Error::Config(format!(
                "catalog has {} entries, expected 40",
                self.entries.len()
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.id.get() as usize != i + 1 {
                return Err(Error::Config(format!(
                    "catalog ids are not f1..f40 (found {} at {})",
                    e.id, i
                )));
            }
            if e.id.narrative() != e.narrative {
                return Err(Error::Config(format!(
                    "{} is filed under the wrong narrative",
                    e.id
                )));
            }
            if e.question.trim().is_empty() {
                return Err(Error::Config(format!("{} has no question", e.id)));
            }
        }
        let mut questions: Vec<&str> = self.entries.iter().map(|e| e.question.as_str()).collect();
        questions.sort_unstable();
        questions.dedup();
        if questions.len() != self.entries.len() {
            return Err(Error::Config("catalog questions are not unique".into()));
        }
        Ok(())
    }

    pub fn get(&self, id: FeatureId) -> &FeatureEntry {
        &self.entries[id.get() as usize - 1]
    }

    pub fn entries(&self) -> &[FeatureEntry] {
        &self.entries
    }

    pub fn for_narrative(&self, n: Narrative) -> impl Iterator<Item = &FeatureEntry> {
        self.entries.iter().filter(move |e| e.narrative == n)
    }

    /// The dual feature in the opposite orientation.
    pub fn pair(&self, id: FeatureId) -> &FeatureEntry {
        self.get(id.dual())
    }

    /// Feature whose question text appears in `text`, if any.
    pub fn find_question_in(&self, text: &str) -> Option<FeatureId> {
        self.entries
            .iter()
            .find(|e| text.contains(e.question.as_str()))
            .map(|e| e.id)
    }
}

impl Default for FeatureCatalog {
    fn default() -> Self {
        Self::bundled()
    }
}
