//! Fidelity and shift metrics, the transform-call bound check, and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::narrative::Direction;
use crate::transform::{Method, TransformRun};

pub const DEFAULT_ALPHA: f64 = 1e-5;

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Lowercased runs of letters and digits. A single apostrophe joins two runs
/// ("don't", "mother's"); all other characters separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut chars = text.chars().peekable();
    let mut tokens = Vec::new();
    let mut current = String::new();
    while let Some(c) = chars.next() {
        if c.is_ascii_alphanumeric() {
            current.push(c.to_ascii_lowercase());
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if is_apostrophe(c)
            && !current.is_empty()
            && chars.peek().is_some_and(|n| n.is_alphanumeric())
        {
            current.push('\'');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Number of tokens `tokenize` would return, without allocating them.
pub fn count_tokens(text: &str) -> usize {
    let mut chars = text.chars().peekable();
    let mut count = 0;
    let mut in_token = false;
    while let Some(c) = chars.next() {
        let joins =
            is_apostrophe(c) && in_token && chars.peek().is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || joins {
            in_token = true;
        } else if in_token {
            count += 1;
            in_token = false;
        }
    }
    count + usize::from(in_token)
}

/// Smoothed unigram distribution over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: BTreeMap<String, f64>,
}

impl TokenDistribution {
    pub fn new<'a>(
        tokens: &[String],
        vocabulary: impl IntoIterator<Item = &'a String>,
        alpha: f64,
    ) -> Self {
        let mut counts: BTreeMap<String, f64> =
            vocabulary.into_iter().map(|t| (t.clone(), alpha)).collect();
        for t in tokens {
            *counts.entry(t.clone()).or_insert(alpha) += 1.0;
        }
        let total: f64 = counts.values().sum();
        for v in counts.values_mut() {
            *v /= total;
        }
        TokenDistribution { probs: counts }
    }
}

/// D_KL(transformed ‖ original) over the union vocabulary with additive smoothing,
/// in nats.
pub fn kl_divergence(transformed: &str, original: &str, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::UndefinedMetric(format!(
            "smoothing alpha must be positive, got {alpha}"
        )));
    }
    let t = tokenize(transformed);
    let o = tokenize(original);
    if t.is_empty() && o.is_empty() {
        return Err(Error::UndefinedMetric("both texts are empty".into()));
    }
    let vocab: std::collections::BTreeSet<String> = t.iter().chain(&o).cloned().collect();
    let p = TokenDistribution::new(&t, &vocab, alpha);
    let q = TokenDistribution::new(&o, &vocab, alpha);
    let kl: f64 = p
        .probs
        .iter()
        .map(|(tok, &pv)| pv * (pv / q.probs[tok]).ln())
        .sum();
    Ok(kl.max(0.0))
}

pub fn improvement(original_score: f64, final_score: f64) -> f64 {
    (final_score - original_score) / original_score * 100.0
}

/// Transform calls measured against the total size of the rewritten chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prop1 {
    pub n_c: u64,
    pub calls: u64,
    pub pass: bool,
}

pub fn prop1_bound(chunk_tokens: impl IntoIterator<Item = usize>, calls: u64) -> Prop1 {
    let n_c: u64 = chunk_tokens.into_iter().map(|n| n as u64).sum();
    Prop1 {
        n_c,
        calls,
        pass: calls <= n_c,
    }
}

pub fn prop1_check(run: &TransformRun) -> Prop1 {
    prop1_bound(run.transformed_chunk_tokens(), run.ledger.transform_calls)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub story_id: String,
    pub method: Method,
    pub direction: Direction,
    pub score_orig: f64,
    pub score_final: f64,
    pub improvement_pct: f64,
    pub kl: f64,
    pub token_share_pct: f64,
    pub n_c: u64,
    pub calls: u64,
    pub prop1_pass: bool,
}

impl EvalReport {
    pub fn from_run(run: &TransformRun, alpha: f64) -> Result<Self> {
        let scores = &run.evaluation;
        let bound = prop1_check(run);
        Ok(EvalReport {
            story_id: run.story_id.clone(),
            method: run.method,
            direction: run.direction,
            score_orig: scores.original,
            score_final: scores.final_score,
            improvement_pct: improvement(scores.original, scores.final_score),
            kl: kl_divergence(&run.final_story.text, &run.original.text, alpha)?,
            token_share_pct: run.token_share() * 100.0,
            n_c: bound.n_c,
            calls: bound.calls,
            prop1_pass: bound.pass,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    pub direction: Direction,
    pub stories: usize,
    pub mean_improvement_pct: f64,
    pub median_kl: f64,
    pub mean_token_share_pct: f64,
    pub prop1_pass: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub kl_log_base: String,
    pub alpha: f64,
    pub groups: Vec<GroupSummary>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per (method, direction) means and medians, in a fixed group order.
pub fn summarize(reports: &[EvalReport], alpha: f64) -> ReportSummary {
    let mut groups: BTreeMap<(Method, Direction), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method, r.direction)).or_default().push(r);
    }
    let groups = groups
        .into_iter()
        .map(|((method, direction), rows)| {
            let n = rows.len() as f64;
            let mut kls: Vec<f64> = rows.iter().map(|r| r.kl).collect();
            GroupSummary {
                method,
                direction,
                stories: rows.len(),
                mean_improvement_pct: rows.iter().map(|r| r.improvement_pct).sum::<f64>() / n,
                median_kl: median(&mut kls),
                mean_token_share_pct: rows.iter().map(|r| r.token_share_pct).sum::<f64>() / n,
                prop1_pass: rows.iter().filter(|r| r.prop1_pass).count(),
            }
        })
        .collect();
    ReportSummary {
        kl_log_base: "e".into(),
        alpha,
        groups,
    }
}

/// Rows sorted by (story id, method), so output does not depend on input order.
pub fn render_csv(reports: &[EvalReport]) -> Result<String> {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| (&a.story_id, a.method).cmp(&(&b.story_id, b.method)));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Transform(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Transform(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn emit_report(reports: &[EvalReport], alpha: f64, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("summary.json");
    fs::write(&csv_path, render_csv(reports)?).map_err(|e| Error::io(&csv_path, e))?;
    let summary = serde_json::to_string_pretty(&summarize(reports, alpha))? + "\n";
    fs::write(&json_path, summary).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
