use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use narrashift::abduction::CandidateLevels;
use narrashift::corpus::{ChunkConfig, ChunkMode};
use narrashift::diagnosis::{DiagnosisConfig, ScoreMode};
use narrashift::gateway::{
    Gateway, MockMode, MockProvider, ProviderConfig, ProviderKind, RuleTable,
};
use narrashift::logic::Agg;
use narrashift::transform::prompt::PromptStyle;
use narrashift::transform::{Method, TransformConfig};
use narrashift::Direction;
use serde::Deserialize;

/// Values from a `--config` file. Every key is optional and loses to the matching flag.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub provider: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub cache: Option<PathBuf>,
    pub mock_rules: Option<PathBuf>,
    pub mock_mode: Option<String>,
    pub runs: Option<u32>,
    pub agg: Option<String>,
    pub chunking: Option<String>,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub survey_mode: Option<String>,
    pub full_spectrum: Option<bool>,
    pub direction: Option<String>,
    pub method: Option<String>,
    pub rules: Option<PathBuf>,
    pub k: Option<usize>,
    pub t_max: Option<usize>,
    pub prompt: Option<String>,
    pub candidate_levels: Option<String>,
    pub alpha: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flag value, else config file value (parsed), else the default.
pub fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: Option<&str>,
    key: &str,
    default: T,
) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file {
        Some(raw) => raw
            .parse()
            .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}")),
        None => Ok(default),
    }
}

/// Resolved settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Common {
    pub provider: String,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub cache: Option<PathBuf>,
    pub mock_rules: Option<PathBuf>,
    pub mock_mode: MockMode,
    pub runs: u32,
    pub chunking: ChunkConfig,
    pub survey_mode: ScoreMode,
    pub full_spectrum: bool,
}

impl Common {
    pub fn diagnosis(&self) -> DiagnosisConfig {
        DiagnosisConfig {
            runs: self.runs,
            full_spectrum: self.full_spectrum,
            ..DiagnosisConfig::default()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.provider == "mock"
    }

    /// `mock`, or a TOML provider file whose `kind` selects the mock or an HTTP endpoint.
    pub fn gateway(&self) -> anyhow::Result<Gateway> {
        let mock = || -> anyhow::Result<MockProvider> {
            let table = match &self.mock_rules {
                Some(path) => RuleTable::load(path)?,
                None => RuleTable::default(),
            };
            Ok(MockProvider::new(table, self.seed).with_mode(self.mock_mode))
        };
        if self.is_mock() {
            return Ok(Gateway::mock(mock()?));
        }
        let path = Path::new(&self.provider);
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading provider config {}", path.display()))?;
        let cfg: ProviderConfig = toml::from_str(&raw)
            .with_context(|| format!("parsing provider config {}", path.display()))?;
        cfg.validate()?;
        Ok(match cfg.kind {
            ProviderKind::Mock => Gateway::new(std::sync::Arc::new(mock()?), cfg)?,
            ProviderKind::Http => Gateway::http(cfg)?,
        })
    }

    /// Rule provenance timestamp: `SOURCE_DATE_EPOCH` when set, `0` under the mock provider,
    /// else the current Unix time.
    pub fn timestamp(&self) -> String {
        if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
            return epoch;
        }
        if self.is_mock() {
            return "0".into();
        }
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_else(|_| "0".into())
    }

    pub fn pool(&self) -> anyhow::Result<rayon::ThreadPool> {
        if self.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()?)
    }
}

#[derive(Debug, Default, Clone)]
pub struct CommonFlags {
    pub provider: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub cache: Option<PathBuf>,
    pub mock_rules: Option<PathBuf>,
    pub mock_mode: Option<MockMode>,
    pub runs: Option<u32>,
    pub chunking: Option<ChunkMode>,
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub survey_mode: Option<ScoreMode>,
    pub full_spectrum: bool,
}

pub fn resolve_common(flags: CommonFlags, file: &FileConfig) -> anyhow::Result<Common> {
    let defaults = ChunkConfig::default();
    let chunking = ChunkConfig {
        mode: pick(
            flags.chunking,
            file.chunking.as_deref(),
            "chunking",
            defaults.mode,
        )?,
        min_tokens: flags
            .min_tokens
            .or(file.min_tokens)
            .unwrap_or(defaults.min_tokens),
        max_tokens: flags
            .max_tokens
            .or(file.max_tokens)
            .unwrap_or(defaults.max_tokens),
    };
    if chunking.min_tokens > chunking.max_tokens {
        bail!(
            "min-tokens ({}) exceeds max-tokens ({})",
            chunking.min_tokens,
            chunking.max_tokens
        );
    }
    let runs = flags
        .runs
        .or(file.runs)
        .unwrap_or(DiagnosisConfig::default().runs);
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    Ok(Common {
        provider: flags
            .provider
            .or(file.provider.clone())
            .unwrap_or_else(|| "mock".into()),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        out: flags
            .out
            .or(file.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        jobs: flags.jobs.or(file.jobs).unwrap_or(1),
        cache: flags.cache.or(file.cache.clone()),
        mock_rules: flags.mock_rules.or(file.mock_rules.clone()),
        mock_mode: pick(
            flags.mock_mode,
            file.mock_mode.as_deref(),
            "mock_mode",
            MockMode::Rewrite,
        )?,
        runs,
        chunking,
        survey_mode: pick(
            flags.survey_mode,
            file.survey_mode.as_deref(),
            "survey_mode",
            ScoreMode::Survey,
        )?,
        full_spectrum: flags.full_spectrum || file.full_spectrum.unwrap_or(false),
    })
}

pub fn resolve_agg(flag: Option<Agg>, file: &FileConfig) -> anyhow::Result<Agg> {
    pick(flag, file.agg.as_deref(), "agg", Agg::Mean)
}

pub fn resolve_direction(flag: Option<Direction>, file: &FileConfig) -> anyhow::Result<Direction> {
    match (flag, file.direction.as_deref()) {
        (Some(d), _) => Ok(d),
        (None, Some(raw)) => raw
            .parse()
            .map_err(|e| anyhow::anyhow!("config key `direction`: {e}")),
        (None, None) => bail!("--direction is required (C->I or I->C)"),
    }
}

pub fn resolve_method(flag: Option<Method>, file: &FileConfig) -> anyhow::Result<Method> {
    pick(flag, file.method.as_deref(), "method", Method::Abduction)
}

#[derive(Debug, Default, Clone)]
pub struct TransformFlags {
    pub k: Option<usize>,
    pub t_max: Option<usize>,
    pub prompt: Option<PromptStyle>,
    pub candidate_levels: Option<CandidateLevels>,
}

pub fn resolve_transform(
    flags: TransformFlags,
    file: &FileConfig,
    common: &Common,
) -> anyhow::Result<TransformConfig> {
    let defaults = TransformConfig::default();
    Ok(TransformConfig {
        k: flags.k.or(file.k),
        t_max: flags.t_max.or(file.t_max).unwrap_or(defaults.t_max),
        prompt: pick(
            flags.prompt,
            file.prompt.as_deref(),
            "prompt",
            defaults.prompt,
        )?,
        candidate_levels: pick(
            flags.candidate_levels,
            file.candidate_levels.as_deref(),
            "candidate_levels",
            defaults.candidate_levels,
        )?,
        iteration_score: common.survey_mode,
        eval_score: common.survey_mode,
        chunking: common.chunking,
    })
}
