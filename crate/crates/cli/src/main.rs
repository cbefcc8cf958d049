//! `narrashift`: learn orientation rules, diagnose stories, rewrite them and score the results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use narrashift::abduction::CandidateLevels;
use narrashift::corpus::ChunkMode;
use narrashift::diagnosis::ScoreMode;
use narrashift::evaluation::DEFAULT_ALPHA;
use narrashift::gateway::MockMode;
use narrashift::logic::Agg;
use narrashift::transform::prompt::PromptStyle;
use narrashift::transform::Method;
use narrashift::{Direction, Narrative};

use crate::config::{CommonFlags, FileConfig, TransformFlags};

#[derive(Parser)]
#[command(
    name = "narrashift",
    version,
    about = "Shift a story's narrative orientation with abduction-guided rewriting"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// `mock` for the built-in deterministic provider, or a TOML provider config file.
    #[arg(long, global = true, value_name = "mock|FILE")]
    provider: Option<String>,

    /// Seed for every artifact-internal random choice.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Key-value (TOML) run configuration. Flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Stories processed in parallel.
    #[arg(long, global = true, value_name = "INT")]
    jobs: Option<usize>,

    /// Diagnosis cache file, created when missing.
    #[arg(long, global = true, value_name = "FILE")]
    cache: Option<PathBuf>,

    /// Replacement marker table for the mock provider (JSON).
    #[arg(long, global = true, value_name = "FILE")]
    mock_rules: Option<PathBuf>,

    /// Mock rewrite behaviour: insert marker sentences, or echo the story unchanged.
    #[arg(long, global = true, value_name = "rewrite|echo")]
    mock_mode: Option<MockMode>,

    /// Diagnosis repetitions per rating (median taken).
    #[arg(long, global = true, value_name = "INT")]
    runs: Option<u32>,

    /// Chunking mode.
    #[arg(long, global = true, value_name = "sentence|paragraph")]
    chunking: Option<ChunkMode>,

    /// Chunks below this token count are merged into a neighbour.
    #[arg(long, global = true, value_name = "INT")]
    min_tokens: Option<usize>,

    /// Upper bound on merged chunk size.
    #[arg(long, global = true, value_name = "INT")]
    max_tokens: Option<usize>,

    /// Story score: a separate survey of the whole text, or the max over chunk ratings.
    #[arg(long, global = true, value_name = "survey|rollup")]
    survey_mode: Option<ScoreMode>,

    /// Survey all 40 features instead of the target orientation's 20.
    #[arg(long, global = true)]
    full_spectrum: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Learn corpus-similarity rules from a labeled JSONL corpus.
    Learn {
        /// Labeled corpus (JSONL with id, text, label).
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,

        /// Aggregation of chunk ratings into a story annotation.
        #[arg(long, value_name = "mean|max|median")]
        agg: Option<Agg>,

        /// Rules file to write (default: OUT/rules.<ind|col>.json).
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Survey stories and report per-feature medians, spreads and story scores.
    Diagnose {
        /// Stories (JSONL).
        #[arg(long, value_name = "FILE")]
        stories: PathBuf,

        /// Orientation to survey (default: both).
        #[arg(long, value_name = "ind|col")]
        narrative: Option<Narrative>,
    },
    /// Rewrite stories toward the target orientation and write one run artifact per story.
    Transform {
        /// Stories (JSONL).
        #[arg(long, value_name = "FILE")]
        stories: PathBuf,

        /// C->I or I->C.
        #[arg(long, value_name = "C->I|I->C")]
        direction: Option<Direction>,

        /// Abduction-guided iterative rewriting, or a single whole-story prompt.
        #[arg(long, value_name = "abduction|baseline")]
        method: Option<Method>,

        /// Learned rules for the target orientation (default: OUT/rules.<target>.json).
        #[arg(long, value_name = "FILE")]
        rules: Option<PathBuf>,

        /// Features abduced per iteration (default: 2 for C->I, 3 for I->C).
        #[arg(short, long, value_name = "INT")]
        k: Option<usize>,

        /// Maximum rewrite iterations.
        #[arg(long, value_name = "INT")]
        t_max: Option<usize>,

        /// Rewrite prompt: steered toward the abduced feature, or the plain template.
        #[arg(long, value_name = "steered|verbatim")]
        prompt: Option<PromptStyle>,

        /// Raised annotations considered by the solver.
        #[arg(long, value_name = "top|grid")]
        candidate_levels: Option<CandidateLevels>,
    },
    /// Score stored run artifacts and write report.csv and summary.json.
    Evaluate {
        /// Directory of run artifacts (default: OUT/runs).
        #[arg(long, value_name = "DIR")]
        runs_dir: Option<PathBuf>,

        /// Additive smoothing for the KL divergence.
        #[arg(long, value_name = "FLOAT")]
        alpha: Option<f64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let file = match &g.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let common = config::resolve_common(
        CommonFlags {
            provider: g.provider,
            seed: g.seed,
            out: g.out,
            jobs: g.jobs,
            cache: g.cache,
            mock_rules: g.mock_rules,
            mock_mode: g.mock_mode,
            runs: g.runs,
            chunking: g.chunking,
            min_tokens: g.min_tokens,
            max_tokens: g.max_tokens,
            survey_mode: g.survey_mode,
            full_spectrum: g.full_spectrum,
        },
        &file,
    )?;
    match cli.command {
        Command::Learn {
            corpus,
            agg,
            output,
        } => {
            commands::learn(&common, &corpus, config::resolve_agg(agg, &file)?, output)?;
        }
        Command::Diagnose { stories, narrative } => {
            commands::diagnose(&common, &stories, narrative)?;
        }
        Command::Transform {
            stories,
            direction,
            method,
            rules,
            k,
            t_max,
            prompt,
            candidate_levels,
        } => {
            let cfg = config::resolve_transform(
                TransformFlags {
                    k,
                    t_max,
                    prompt,
                    candidate_levels,
                },
                &file,
                &common,
            )?;
            let args = commands::TransformArgs {
                stories,
                direction: config::resolve_direction(direction, &file)?,
                method: config::resolve_method(method, &file)?,
                rules: rules.or(file.rules.clone()),
                cfg,
            };
            commands::transform(&common, &args)?;
        }
        Command::Evaluate { runs_dir, alpha } => {
            let alpha = alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA);
            commands::evaluate(&common, runs_dir, alpha)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
