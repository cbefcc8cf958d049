//! Story ingestion, segmentation into chunks, and JSONL corpus persistence.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::tokenize;
use crate::narrative::Narrative;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMode {
    #[default]
    Sentence,
    Paragraph,
}

impl std::str::FromStr for ChunkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(ChunkMode::Sentence),
            "paragraph" => Ok(ChunkMode::Paragraph),
            other => Err(Error::Config(format!("unknown chunking mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub mode: ChunkMode,
    /// Chunks shorter than this are merged into a neighbour when the merge stays under `max_tokens`.
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            mode: ChunkMode::Sentence,
            min_tokens: 8,
            max_tokens: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub story_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
    /// Byte offsets of `text` inside the owning story.
    pub start: usize,
    pub end: usize,
}

impl Chunk {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub id: String,
    pub text: String,
    pub label: Option<Narrative>,
    pub chunks: Vec<Chunk>,
}

impl Story {
    /// Segments `text` and builds the story. A missing id falls back to a content hash.
    pub fn new(
        id: Option<String>,
        text: impl Into<String>,
        label: Option<Narrative>,
        cfg: &ChunkConfig,
    ) -> Result<Self> {
        let text = text.into();
        let id = id.unwrap_or_else(|| content_id(&text));
        let spans = segment(&text, cfg)?;
        let chunks = spans
            .into_iter()
            .enumerate()
            .map(|(index, span)| {
                let chunk_text = text[span.clone()].to_string();
                Chunk {
                    id: format!("{id}:c{index}"),
                    story_id: id.clone(),
                    index,
                    token_count: tokenize(&chunk_text).len(),
                    text: chunk_text,
                    start: span.start,
                    end: span.end,
                }
            })
            .collect();
        Ok(Story {
            id,
            text,
            label,
            chunks,
        })
    }

    /// Re-segments a replacement text under the same id and label.
    pub fn with_text(&self, text: impl Into<String>, cfg: &ChunkConfig) -> Result<Self> {
        Story::new(Some(self.id.clone()), text, self.label, cfg)
    }

    pub fn token_count(&self) -> usize {
        self.chunks.iter().map(|c| c.token_count).sum()
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    /// Rebuilds the text from chunk texts and the original inter-chunk whitespace.
    pub fn reassemble(&self) -> String {
        let mut out = String::with_capacity(self.text.len());
        let mut cursor = 0;
        for chunk in &self.chunks {
            out.push_str(&self.text[cursor..chunk.start]);
            out.push_str(&chunk.text);
            cursor = chunk.end;
        }
        out.push_str(&self.text[cursor..]);
        out
    }
}

/// Hex SHA-256 prefix used when a record carries no id.
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("s-{}", &hex::encode(digest)[..12])
}

/// Splits `text` into ordered chunks under `cfg`.
pub fn chunk_story(text: &str, cfg: &ChunkConfig) -> Result<Vec<Chunk>> {
    Ok(Story::new(None, text, None, cfg)?.chunks)
}

fn segment(text: &str, cfg: &ChunkConfig) -> Result<Vec<Range<usize>>> {
    if text.trim().is_empty() || tokenize(text).is_empty() {
        return Err(Error::EmptyStory);
    }
    let raw = match cfg.mode {
        ChunkMode::Sentence => sentence_spans(text),
        ChunkMode::Paragraph => paragraph_spans(text),
    };
    let mut pieces: Vec<Piece> = Vec::new();
    for span in raw {
        split_long(text, span, cfg.max_tokens.max(1), &mut pieces);
    }
    Ok(merge_short(text, pieces, cfg))
}

#[derive(Debug, Clone)]
struct Piece {
    span: Range<usize>,
    tokens: usize,
}

fn trimmed(text: &str, span: Range<usize>) -> Option<Range<usize>> {
    let slice = &text[span.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    let r = span.start + lead..span.end - trail;
    (r.start < r.end).then_some(r)
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '”' | '’' | ')' | ']' | '»')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '“' | '‘' | '(' | '[' | '«')
}

/// Sentence boundaries: terminal punctuation (plus closing quotes) followed by
/// whitespace and then an uppercase letter, digit or opening quote.
fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if !is_terminal(chars[i].1) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (is_terminal(chars[j].1) || is_closer(chars[j].1)) {
            j += 1;
        }
        let mut k = j;
        while k < chars.len() && chars[k].1.is_whitespace() {
            k += 1;
        }
        let boundary = k > j
            && k < chars.len()
            && (chars[k].1.is_uppercase() || chars[k].1.is_numeric() || is_opener(chars[k].1));
        if boundary {
            let end = chars[j].0;
            if let Some(r) = trimmed(text, start..end) {
                spans.push(r);
            }
            start = chars[k].0;
            i = k;
        } else {
            i = j.max(i + 1);
        }
    }
    if let Some(r) = trimmed(text, start..text.len()) {
        spans.push(r);
    }
    spans
}

fn paragraph_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut line_start = 0;
    let mut blank_run = false;
    for (pos, c) in text
        .char_indices()
        .chain(std::iter::once((text.len(), '\n')))
    {
        if c != '\n' {
            continue;
        }
        let line = &text[line_start..pos];
        if line.trim().is_empty() {
            if !blank_run {
                if let Some(r) = trimmed(text, start..line_start) {
                    spans.push(r);
                }
                blank_run = true;
            }
            start = (pos + 1).min(text.len());
        } else {
            blank_run = false;
        }
        line_start = (pos + 1).min(text.len());
    }
    if let Some(r) = trimmed(text, start..text.len()) {
        spans.push(r);
    }
    spans
}

/// Word-boundary split of spans whose token count exceeds `max`.
fn split_long(text: &str, span: Range<usize>, max: usize, out: &mut Vec<Piece>) {
    let tokens = tokenize(&text[span.clone()]).len();
    if tokens <= max {
        out.push(Piece { span, tokens });
        return;
    }
    let mut piece_start = span.start;
    let mut count = 0;
    let mut in_word = false;
    for (off, c) in text[span.clone()].char_indices() {
        let pos = span.start + off;
        let word_char = c.is_alphanumeric();
        if word_char && !in_word {
            if count == max {
                if let Some(r) = trimmed(text, piece_start..pos) {
                    let n = tokenize(&text[r.clone()]).len();
                    out.push(Piece { span: r, tokens: n });
                }
                piece_start = pos;
                count = 0;
            }
            count += 1;
        }
        in_word = word_char || (in_word && matches!(c, '\'' | '’'));
    }
    if let Some(r) = trimmed(text, piece_start..span.end) {
        let n = tokenize(&text[r.clone()]).len();
        out.push(Piece { span: r, tokens: n });
    }
}

fn merge_short(text: &str, mut pieces: Vec<Piece>, cfg: &ChunkConfig) -> Vec<Range<usize>> {
    let fits = |a: &Piece, b: &Piece| a.tokens + b.tokens <= cfg.max_tokens;
    let join = |a: &Piece, b: &Piece| Piece {
        span: a.span.start..b.span.end,
        tokens: a.tokens + b.tokens,
    };
    let mut i = 0;
    while i < pieces.len() {
        let short = pieces[i].tokens < cfg.min_tokens || pieces[i].tokens == 0;
        if !short || pieces.len() == 1 {
            i += 1;
            continue;
        }
        // Zero-token pieces must always be absorbed.
        let forced = pieces[i].tokens == 0;
        if i + 1 < pieces.len() && (forced || fits(&pieces[i], &pieces[i + 1])) {
            let merged = join(&pieces[i], &pieces[i + 1]);
            pieces.splice(i..i + 2, [merged]);
        } else if i > 0 && (forced || fits(&pieces[i - 1], &pieces[i])) {
            let merged = join(&pieces[i - 1], &pieces[i]);
            pieces.splice(i - 1..i + 1, [merged]);
            i -= 1;
        } else {
            i += 1;
        }
    }
    debug_assert!(pieces
        .iter()
        .all(|p| !text[p.span.clone()].trim().is_empty()));
    pieces.into_iter().map(|p| p.span).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub stories: Vec<Story>,
    pub orientation: Narrative,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    label: Option<Narrative>,
}

/// Reads JSONL story records. Labels are optional; blank lines are skipped.
pub fn load_stories(path: &Path, cfg: &ChunkConfig) -> Result<Vec<Story>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(&raw);
    let mut stories = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let story =
            Story::new(rec.id, rec.text, rec.label, cfg).map_err(|e| parse_err(e.to_string()))?;
        stories.push(story);
    }
    Ok(stories)
}

/// Loads a labeled training corpus. The orientation is taken from the first record
/// and every other record must carry the same label.
pub fn load_corpus(path: &Path, cfg: &ChunkConfig) -> Result<Corpus> {
    let stories = load_stories(path, cfg)?;
    let orientation = match stories.first() {
        Some(s) => s.label.ok_or_else(|| Error::Label {
            story: s.id.clone(),
            expected: "a label".into(),
            found: None,
        })?,
        None => {
            return Err(Error::Learn(format!(
                "{} contains no stories",
                path.display()
            )))
        }
    };
    Corpus::new(stories, orientation)
}

impl Corpus {
    pub fn new(stories: Vec<Story>, orientation: Narrative) -> Result<Self> {
        if let Some(bad) = stories.iter().find(|s| s.label != Some(orientation)) {
            return Err(Error::Label {
                story: bad.id.clone(),
                expected: orientation.adjective().into(),
                found: bad.label.map(|l| l.adjective().to_string()),
            });
        }
        Ok(Corpus {
            stories,
            orientation,
        })
    }

    /// Canonical JSONL serialization (`id`, `text`, `label` per line).
    pub fn to_jsonl(&self) -> String {
        stories_to_jsonl(&self.stories)
    }

    /// SHA-256 of the canonical JSONL serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub fn stories_to_jsonl(stories: &[Story]) -> String {
    let mut out = String::new();
    for s in stories {
        let rec = Record {
            id: Some(s.id.clone()),
            text: s.text.clone(),
            label: s.label,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(corpus.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}
