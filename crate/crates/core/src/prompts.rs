//! Prompt templates and their renderers.
//!
//! Templates are stored as literal/slot segment lists so that substitution is
//! single-pass: slot values containing placeholder-looking text are never
//! re-expanded. The dumped form writes slots as `{{slot_name}}`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::InteractionRecord;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("cannot render an empty history")]
    EmptyHistory,
    #[error("empty value for slot `{0}`")]
    EmptySlot(&'static str),
    #[error("template `{0}` is not a baseline profile template")]
    NotBaseline(TemplateId),
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    #[serde(rename = "lettinggo_profile")]
    LettingoProfile,
    #[serde(rename = "lettinggo_predict")]
    LettingoPredict,
    KarProfile,
    PalrProfile,
    RlmrecProfile,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        Self::LettingoProfile,
        Self::LettingoPredict,
        Self::KarProfile,
        Self::PalrProfile,
        Self::RlmrecProfile,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LettingoProfile => "lettinggo_profile",
            Self::LettingoPredict => "lettinggo_predict",
            Self::KarProfile => "kar_profile",
            Self::PalrProfile => "palr_profile",
            Self::RlmrecProfile => "rlmrec_profile",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Self::KarProfile | Self::PalrProfile | Self::RlmrecProfile)
    }

    /// Whether the model is asked for a profile (as opposed to a sentiment).
    pub fn is_profile(self) -> bool {
        self != Self::LettingoPredict
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, PromptError> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Lit(&'static str),
    Slot(&'static str),
}

use Segment::{Lit, Slot};

const PROFILE_TEMPLATE: &[Segment] = &[
    Lit("You will serve as an assistant to help me generate a user profile based on this user's sentiments history to better understand this users' interest and thus predict his/her sentiment about a target item. I will provide you with some behavior history of the user in this format: [item attributes and sentiment].The user profile you generate should contain as much useful content as possible to help predict the user's sentiment towards a new business.\nUSER HISTORY:\n"),
    Slot("user_history"),
    Lit(".\nPROFILE YOU GENERATE:"),
];

const PREDICT_HEAD: &str = "Given a user's past sentiments towards other items (sorted by time,from earliest to latest) in the format: [item attributes and sentiment]";
const PREDICT_PROFILE_CLAUSE: &str = ", and a user profile which depict the user's interest about items";
const PREDICT_TASK: &str = ", your task is helping me predict a user's possible sentiment about a target item based on these information in one word. The sentiment has three categories: like, neutral, and dislike. Remember, your output should only contain one word (like, neutral or dislike, in lowercase) that represent user sentiment you predict, without any additional content.\nUSER HISTORY:\n";

const PREDICT_TEMPLATE: &[Segment] = &[
    Lit(PREDICT_HEAD),
    Lit(PREDICT_PROFILE_CLAUSE),
    Lit(PREDICT_TASK),
    Slot("user_history"),
    Lit(".\nUSER PROFILE:\n"),
    Slot("user_profile"),
    Lit(".\nThe candidate item is:\n"),
    Slot("item"),
    Lit("."),
];

const PREDICT_NO_PROFILE_TEMPLATE: &[Segment] = &[
    Lit(PREDICT_HEAD),
    Lit(PREDICT_TASK),
    Slot("user_history"),
    Lit(".\nThe candidate item is:\n"),
    Slot("item"),
    Lit("."),
];

const KAR_TEMPLATE: &[Segment] = &[
    Lit("Given the user's business reviewing history with sentiments over time, listed below: "),
    Slot("user_history"),
    Lit(", analyze the user's preferences, taking into account factors such as business name and categories. \nProvide clear explanations based on the details from the user's reviewing history and other pertinent factors."),
];

const PALR_TEMPLATE: &[Segment] = &[
    Lit("Your task is to use keywords to summarize user's preference based on history interations. The Output is an itemized list based on importance. The output template is {1.KEY_WORD_1:\"HISTORY_BUSINESS_1\",\"HISTORY_BUSIN ESS_2\"; 2.KEY_WORD_2:\"HISTORY_BUSINESS_3\"}\nThe history businessed and their keywords and user' semtiment are:\n"),
    Slot("user_history"),
];

const RLMREC_TEMPLATE: &[Segment] = &[
    Lit("You will serve as an assistant to help me determine which types of businesses a specific user is likely to enjoy. I will provide you with information about businesses that the user has visited, as well as his or her sentiments of those businesses. Here are the instructions: 1. Each visited businesse will be described in the format with the following attributes: Title:the name of the business, Categories:the categories of the business, Sentiment:user semtiment toward business. 2. The information I will give you: INTERATION ITEMS: a list of JSON strings describing the items that the user has visited. Requirements: 1. Please provide your decision in JSON format, following this structure: { \"summarization\": \"A summarization of what types of businesses this user is likely to enjoy\" (if you are unable to summarize it, please set this value to \"None\") \"reasoning\": \"briefly explain your reasoning for the summarization\" } 2. Please ensure that the \"summarization\" is no longer than 100 words. 3. The \"reasoning\" has no word limits. 4. Do not provided any other text outside the JSON string.\n"),
    Slot("user_history"),
];

/// Registered segment list for a template.
pub fn template_segments(id: TemplateId) -> &'static [Segment] {
    match id {
        TemplateId::LettingoProfile => PROFILE_TEMPLATE,
        TemplateId::LettingoPredict => PREDICT_TEMPLATE,
        TemplateId::KarProfile => KAR_TEMPLATE,
        TemplateId::PalrProfile => PALR_TEMPLATE,
        TemplateId::RlmrecProfile => RLMREC_TEMPLATE,
    }
}

/// Segments of the profile-free prediction variant.
pub fn predict_without_profile_segments() -> &'static [Segment] {
    PREDICT_NO_PROFILE_TEMPLATE
}

/// Template text with slots written as `{{slot_name}}`.
pub fn dump_template(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Lit(t) => t.to_string(),
            Slot(name) => format!("{{{{{name}}}}}"),
        })
        .collect()
}

/// Writes every registered template (plus the profile-free prediction
/// variant) as `<template_id>.txt` into `dir`.
pub fn dump_registry(dir: &Path) -> Result<Vec<std::path::PathBuf>, PromptError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut entries: Vec<(String, &[Segment])> = TemplateId::ALL
        .iter()
        .map(|id| (id.as_str().to_string(), template_segments(*id)))
        .collect();
    entries.push((
        format!("{}_no_profile", TemplateId::LettingoPredict),
        predict_without_profile_segments(),
    ));
    for (name, segs) in entries {
        let path = dir.join(format!("{name}.txt"));
        std::fs::write(&path, dump_template(segs))?;
        written.push(path);
    }
    Ok(written)
}

fn fill<'a>(segments: &[Segment], value: impl Fn(&str) -> &'a str) -> String {
    let mut out = String::new();
    for seg in segments {
        match seg {
            Lit(t) => out.push_str(t),
            Slot(name) => out.push_str(value(name)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub template: TemplateId,
    pub user_id: Option<String>,
    /// Long-history window length for profile prompts.
    pub window: Option<usize>,
    /// Number of recent records for prediction prompts.
    pub recent: Option<usize>,
    pub with_profile: bool,
    pub estimated_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub role_layout: Vec<(Role, String)>,
    pub meta: PromptMeta,
}

impl RenderedPrompt {
    fn single_user_message(template: TemplateId, text: String, with_profile: bool) -> Self {
        let estimated_tokens = estimate_tokens(&text);
        Self {
            role_layout: vec![(Role::User, text.clone())],
            text,
            meta: PromptMeta {
                template,
                user_id: None,
                window: None,
                recent: None,
                with_profile,
                estimated_tokens,
            },
        }
    }

    pub fn for_user(mut self, user_id: impl Into<String>) -> Self {
        self.meta.user_id = Some(user_id.into());
        self
    }

    pub fn with_window(mut self, w: usize) -> Self {
        self.meta.window = Some(w);
        self
    }

    pub fn with_recent(mut self, k: usize) -> Self {
        self.meta.recent = Some(k);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistoryOrder {
    EarliestFirst,
    LatestFirst,
}

fn attribute_line(rec: &InteractionRecord) -> String {
    rec.attributes
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One line per record: `Name: value; ...; Sentiment: label`.
///
/// `records` are in storage order (most recent first).
pub fn render_history_lines(records: &[InteractionRecord], order: HistoryOrder) -> Result<String, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    let line = |r: &InteractionRecord| format!("{}; Sentiment: {}", attribute_line(r), r.sentiment);
    let lines: Vec<String> = match order {
        HistoryOrder::LatestFirst => records.iter().map(line).collect(),
        HistoryOrder::EarliestFirst => records.iter().rev().map(line).collect(),
    };
    Ok(lines.join("\n"))
}

/// Target item line: the history format without the sentiment field.
pub fn render_target_item(record: &InteractionRecord) -> String {
    attribute_line(record)
}

pub fn render_profile_prompt(long_history_text: &str) -> Result<RenderedPrompt, PromptError> {
    if long_history_text.is_empty() {
        return Err(PromptError::EmptySlot("user_history"));
    }
    let text = fill(PROFILE_TEMPLATE, |_| long_history_text);
    Ok(RenderedPrompt::single_user_message(TemplateId::LettingoProfile, text, false))
}

pub fn render_prediction_prompt(
    recent_history_text: &str,
    profile_text: Option<&str>,
    target_item_text: &str,
) -> Result<RenderedPrompt, PromptError> {
    if recent_history_text.is_empty() {
        return Err(PromptError::EmptySlot("user_history"));
    }
    if target_item_text.is_empty() {
        return Err(PromptError::EmptySlot("item"));
    }
    let segments = if profile_text.is_some() {
        PREDICT_TEMPLATE
    } else {
        PREDICT_NO_PROFILE_TEMPLATE
    };
    let text = fill(segments, |slot| match slot {
        "user_history" => recent_history_text,
        "user_profile" => profile_text.unwrap_or_default(),
        _ => target_item_text,
    });
    Ok(RenderedPrompt::single_user_message(
        TemplateId::LettingoPredict,
        text,
        profile_text.is_some(),
    ))
}

pub fn render_baseline_profile_prompt(kind: TemplateId, history_text: &str) -> Result<RenderedPrompt, PromptError> {
    if !kind.is_baseline() {
        return Err(PromptError::NotBaseline(kind));
    }
    if history_text.is_empty() {
        return Err(PromptError::EmptySlot("user_history"));
    }
    let text = fill(template_segments(kind), |_| history_text);
    Ok(RenderedPrompt::single_user_message(kind, text, false))
}

/// Model-free token estimate: `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentimentLabel;
    use proptest::prelude::*;

    fn rec(title: &str, genre: &str, ts: u64, s: SentimentLabel) -> InteractionRecord {
        InteractionRecord {
            user_id: "u".into(),
            item_id: title.into(),
            timestamp: ts,
            rating: 3.0,
            sentiment: s,
            attributes: vec![("Title".into(), title.into()), ("Genre".into(), genre.into())],
        }
    }

    #[test]
    fn history_line_format_and_order() {
        let one = render_history_lines(&[rec("X", "Y", 1, SentimentLabel::Like)], HistoryOrder::EarliestFirst).unwrap();
        assert_eq!(one, "Title: X; Genre: Y; Sentiment: like");

        let stored = [rec("Newer", "A", 20, SentimentLabel::Like), rec("Older", "B", 10, SentimentLabel::Dislike)];
        let early = render_history_lines(&stored, HistoryOrder::EarliestFirst).unwrap();
        assert!(early.starts_with("Title: Older"));
        let late = render_history_lines(&stored, HistoryOrder::LatestFirst).unwrap();
        let mut rev: Vec<&str> = early.lines().collect();
        rev.reverse();
        assert_eq!(late.lines().collect::<Vec<_>>(), rev);
        assert!(matches!(
            render_history_lines(&[], HistoryOrder::LatestFirst),
            Err(PromptError::EmptyHistory)
        ));
        assert_eq!(render_target_item(&stored[0]), "Title: Newer; Genre: A");
    }

    #[test]
    fn profile_prompt_contents() {
        let p = render_profile_prompt("Title: A; Sentiment: like").unwrap();
        assert!(p.text.contains("predict his/her sentiment about a target item"));
        assert!(p.text.ends_with("PROFILE YOU GENERATE:"));
        assert_eq!(p, render_profile_prompt("Title: A; Sentiment: like").unwrap());
        assert_eq!(p.meta.template, TemplateId::LettingoProfile);
        assert_eq!(p.role_layout, vec![(Role::User, p.text.clone())]);
    }

    #[test]
    fn placeholder_in_data_is_not_reexpanded() {
        let p = render_profile_prompt("weird [user history] {{user_history}}").unwrap();
        assert_eq!(p.text.matches("weird [user history] {{user_history}}").count(), 1);
        assert!(!p.text.contains("\n[user history]."));
    }

    #[test]
    fn prediction_prompt_variants() {
        let with = render_prediction_prompt("H", Some("P"), "I").unwrap();
        let idx = with.text.find("USER PROFILE:").unwrap();
        assert!(with.text[idx..].starts_with("USER PROFILE:\nP."));
        assert!(with.text.contains("The sentiment has three categories: like, neutral, and dislike."));
        assert!(with.text.contains("a user profile which depict the user's interest"));
        assert!(with.meta.with_profile);

        let without = render_prediction_prompt("H", None, "I").unwrap();
        assert!(!without.text.contains("USER PROFILE:"));
        assert!(!without.text.contains("user profile which depict"));
        assert!(without.text.contains("The sentiment has three categories: like, neutral, and dislike."));
        assert!(without.text.contains("in lowercase"));
        assert!(without.text.ends_with("The candidate item is:\nI."));
        assert!(render_prediction_prompt("", None, "I").is_err());
        assert!(render_prediction_prompt("H", None, "").is_err());
    }

    #[test]
    fn baseline_prompts() {
        let kar = render_baseline_profile_prompt(TemplateId::KarProfile, "H").unwrap();
        assert!(kar.text.contains("Provide clear explanations based on the details"));
        let palr = render_baseline_profile_prompt(TemplateId::PalrProfile, "H").unwrap();
        assert!(palr.text.contains("an itemized list based on importance"));
        let rlm = render_baseline_profile_prompt(TemplateId::RlmrecProfile, "H").unwrap();
        assert!(rlm.text.contains("no longer than 100 words"));
        assert!(matches!(
            render_baseline_profile_prompt(TemplateId::LettingoProfile, "H"),
            Err(PromptError::NotBaseline(_))
        ));
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcdefgh"), 2);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
    }

    #[test]
    fn dumped_slots_use_double_braces() {
        let d = dump_template(template_segments(TemplateId::LettingoPredict));
        assert!(d.contains("{{user_history}}") && d.contains("{{user_profile}}") && d.contains("{{item}}"));
        for id in TemplateId::ALL {
            assert_eq!(id.as_str().parse::<TemplateId>().unwrap(), id);
        }
    }

    fn literal_only(segments: &[Segment]) -> String {
        segments
            .iter()
            .filter_map(|s| match s {
                Lit(t) => Some(*t),
                Slot(_) => None,
            })
            .collect()
    }

    #[test]
    fn sentinel_render_reproduces_template() {
        const S: &str = "\u{1}SENTINEL\u{1}";
        let cases: Vec<(RenderedPrompt, &[Segment])> = vec![
            (render_profile_prompt(S).unwrap(), PROFILE_TEMPLATE),
            (render_prediction_prompt(S, Some(S), S).unwrap(), PREDICT_TEMPLATE),
            (render_prediction_prompt(S, None, S).unwrap(), PREDICT_NO_PROFILE_TEMPLATE),
            (render_baseline_profile_prompt(TemplateId::KarProfile, S).unwrap(), KAR_TEMPLATE),
            (render_baseline_profile_prompt(TemplateId::PalrProfile, S).unwrap(), PALR_TEMPLATE),
            (render_baseline_profile_prompt(TemplateId::RlmrecProfile, S).unwrap(), RLMREC_TEMPLATE),
        ];
        for (p, segs) in cases {
            assert_eq!(p.text.replace(S, ""), literal_only(segs));
        }
    }

    proptest! {
        #[test]
        fn token_estimate_monotone(a in ".{0,40}", b in ".{0,40}") {
            let ab = format!("{a}{b}");
            prop_assert!(estimate_tokens(&ab) >= estimate_tokens(&a).max(estimate_tokens(&b)));
        }

        #[test]
        fn substitution_injective(a in "[a-z ]{1,30}", b in "[a-z ]{1,30}") {
            prop_assume!(a != b);
            prop_assert_ne!(render_profile_prompt(&a).unwrap().text, render_profile_prompt(&b).unwrap().text);
            prop_assert_ne!(
                render_prediction_prompt("h", Some(&a), "i").unwrap().text,
                render_prediction_prompt("h", Some(&b), "i").unwrap().text
            );
        }
    }
}
