use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::narrative::FeatureId;

/// Per-run survey ratings keyed by (text hash, feature, provider, model).
#[derive(Debug, Default)]
pub struct DiagnosisCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, Vec<u8>>>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    entries: BTreeMap<String, Vec<u8>>,
}

impl DiagnosisCache {
    const VERSION: u32 = 1;

    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path`, starting empty when the file does not exist yet.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = match fs::read_to_string(path) {
            Ok(raw) => {
                let file: CacheFile = serde_json::from_str(&raw)?;
                if file.version != Self::VERSION {
                    return Err(Error::Version {
                        found: file.version,
                        expected: Self::VERSION,
                    });
                }
                file.entries
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(DiagnosisCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(text: &str, feature: FeatureId, provider: &str, model: &str) -> String {
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        format!("{digest}|{feature}|{provider}|{model}")
    }

    pub fn get(&self, text: &str, feature: FeatureId, gateway: &Gateway) -> Option<Vec<u8>> {
        let key = Self::key(text, feature, gateway.provider_name(), gateway.model());
        self.entries.lock().get(&key).cloned()
    }

    pub fn insert(&self, text: &str, feature: FeatureId, gateway: &Gateway, raws: Vec<u8>) {
        let key = Self::key(text, feature, gateway.provider_name(), gateway.model());
        self.entries.lock().insert(key, raws);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let file = CacheFile {
            version: Self::VERSION,
            entries: self.entries.lock().clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }
}
