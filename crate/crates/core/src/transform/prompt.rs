//! Rewrite and baseline prompts, plus the inverse parsers the mock provider uses.

use crate::narrative::Narrative;

const STORY_OPEN: &str = "** start of story **\n";
const STORY_CLOSE: &str = "\n** end of story **";
const SEGMENT_OPEN: &str = "Selected segment: ** ";
const SEGMENT_CLOSE: &str = " **\n\nNow, rewrite the whole story";
const GOAL_OPEN: &str = "Your goal is to make the story more ";
const STEER_OPEN: &str = "Focus the change on this narrative feature: ";
const BASELINE_OPEN: &str = "Make the following story more ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    /// Adds one sentence naming the abduced feature and its survey question.
    #[default]
    Steered,
    /// The bare segment-rewrite template.
    Verbatim,
}

impl std::str::FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steered" => Ok(PromptStyle::Steered),
            "verbatim" => Ok(PromptStyle::Verbatim),
            other => Err(format!(
                "unknown prompt style `{other}` (expected steered or verbatim)"
            )),
        }
    }
}

/// Feature named in a steered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Steering<'a> {
    pub name: &'a str,
    pub question: &'a str,
}

pub fn rewrite_prompt(
    story: &str,
    segment: &str,
    source: Narrative,
    target: Narrative,
    steering: Option<Steering<'_>>,
) -> String {
    let (src, tgt) = (source.adjective(), target.adjective());
    let steer = steering
        .map(|s| format!("{STEER_OPEN}{}. {}\n\n", s.name, s.question))
        .unwrap_or_default();
    format!(
        "You are given a {src} story below.\n\n\
         {STORY_OPEN}{story}{STORY_CLOSE}\n\n\
         {GOAL_OPEN}{tgt}. To make it more {tgt}, you will update only the selected segment from the story which is provided below.\n\n\
         {SEGMENT_OPEN}{segment}{SEGMENT_CLOSE} by updating only the selected segment to make the story more {tgt}. \
         Don't change other parts of the story, and just output the rewritten story, nothing else.\n\n\
         {steer}"
    )
    .trim_end()
    .to_string()
}

pub fn baseline_prompt(story: &str, target: Narrative) -> String {
    format!("{BASELINE_OPEN}{}.\n\n{story}", target.adjective())
}

/// Pieces recovered from a prompt built by [`rewrite_prompt`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRewrite<'a> {
    pub story: &'a str,
    pub segment: &'a str,
    pub target: Narrative,
    /// The steering paragraph, when present.
    pub steering: Option<&'a str>,
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

fn narrative_after(text: &str, open: &str) -> Option<Narrative> {
    let rest = &text[text.find(open)? + open.len()..];
    Narrative::ALL
        .into_iter()
        .find(|n| rest.starts_with(n.adjective()))
}

pub fn parse_rewrite_prompt(prompt: &str) -> Option<ParsedRewrite<'_>> {
    let story = between(prompt, STORY_OPEN, STORY_CLOSE)?;
    let after_story = &prompt[prompt.find(STORY_CLOSE)? + STORY_CLOSE.len()..];
    let segment = between(after_story, SEGMENT_OPEN, SEGMENT_CLOSE)?;
    let target = narrative_after(after_story, GOAL_OPEN)?;
    let steering = after_story.find(STEER_OPEN).map(|i| &after_story[i..]);
    Some(ParsedRewrite {
        story,
        segment,
        target,
        steering,
    })
}

/// Target and story of a prompt built by [`baseline_prompt`].
pub fn parse_baseline_prompt(prompt: &str) -> Option<(Narrative, &str)> {
    if !prompt.starts_with(BASELINE_OPEN) {
        return None;
    }
    let target = narrative_after(prompt, BASELINE_OPEN)?;
    let story = &prompt[prompt.find(".\n\n")? + 3..];
    Some((target, story))
}
