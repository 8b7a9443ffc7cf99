//! Task-driven profile evaluation and classification metrics.
//!
//! A profile is judged by the downstream predictor: at temperature 0, given
//! the recent history, the profile and the target item, does it name the
//! target's true sentiment?

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EvalInstance, SentimentLabel};
use crate::explore::ProfileSample;
use crate::modelgate::{CompletionRequest, Gateway, ModelSpec};
use crate::prompts::{render_history_lines, render_prediction_prompt, render_target_item, HistoryOrder, PromptError};

#[derive(Debug, thiserror::Error)]
pub enum EvaluateError {
    #[error("metric undefined on zero outcomes")]
    UndefinedMetric,
    #[error("predictor `{0}` must run at temperature 0")]
    Temperature(String),
    #[error("condition `{condition}`: {message}")]
    Config { condition: String, message: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parsed {
    Like,
    Neutral,
    Dislike,
    ParseFailure,
}

impl Parsed {
    pub fn label(self) -> Option<SentimentLabel> {
        match self {
            Self::Like => Some(SentimentLabel::Like),
            Self::Neutral => Some(SentimentLabel::Neutral),
            Self::Dislike => Some(SentimentLabel::Dislike),
            Self::ParseFailure => None,
        }
    }
}

impl From<SentimentLabel> for Parsed {
    fn from(l: SentimentLabel) -> Self {
        match l {
            SentimentLabel::Like => Self::Like,
            SentimentLabel::Neutral => Self::Neutral,
            SentimentLabel::Dislike => Self::Dislike,
        }
    }
}

/// Reads a one-word sentiment answer.
///
/// Exact match after lowercasing and trimming whitespace and terminal
/// punctuation; otherwise the answer is accepted only if exactly one label
/// occurs as a whole word.
pub fn parse_sentiment(raw: &str) -> Parsed {
    let lowered = raw.to_lowercase();
    let trimmed = lowered
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .trim_start_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*') || c.is_whitespace());
    if let Ok(label) = trimmed.parse::<SentimentLabel>() {
        return label.into();
    }
    let mut found: Option<SentimentLabel> = None;
    for word in lowered.split(|c: char| !c.is_alphanumeric()) {
        if let Ok(label) = word.parse::<SentimentLabel>() {
            match found {
                Some(prev) if prev != label => return Parsed::ParseFailure,
                _ => found = Some(label),
            }
        }
    }
    found.map_or(Parsed::ParseFailure, Parsed::from)
}

/// Identifies the profile a prediction was conditioned on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProfileRef {
    pub model_id: String,
    pub sample_index: u32,
    pub window_w: usize,
}

impl ProfileRef {
    pub fn of(s: &ProfileSample) -> Self {
        Self {
            model_id: s.model_id.clone(),
            sample_index: s.sample_index,
            window_w: s.window_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub user_id: String,
    pub profile_ref: Option<ProfileRef>,
    pub raw_text: String,
    pub parsed: Parsed,
    pub truth: SentimentLabel,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default)]
    pub estimated_prompt_tokens: usize,
}

impl PredictionOutcome {
    fn failed(instance: &EvalInstance, profile_ref: Option<ProfileRef>, note: String) -> Self {
        Self {
            user_id: instance.user_id.clone(),
            profile_ref,
            raw_text: String::new(),
            parsed: Parsed::ParseFailure,
            truth: instance.truth,
            correct: false,
            note: Some(note),
            estimated_prompt_tokens: 0,
        }
    }
}

/// The prediction request for `instance`, optionally conditioned on `profile`.
pub fn prediction_request(
    instance: &EvalInstance,
    profile: Option<&ProfileSample>,
    seed: u64,
) -> Result<CompletionRequest, PromptError> {
    let history = render_history_lines(&instance.split.recent, HistoryOrder::EarliestFirst)?;
    let item = render_target_item(&instance.target);
    let mut prompt = render_prediction_prompt(&history, profile.map(|p| p.text.as_str()), &item)?
        .for_user(&instance.user_id)
        .with_recent(instance.split.k());
    if let Some(p) = profile {
        prompt = prompt.with_window(p.window_w);
    }
    Ok(CompletionRequest {
        prompt,
        temperature: 0.0,
        sample_index: 0,
        seed,
    })
}

pub fn predict(
    instance: &EvalInstance,
    profile: Option<&ProfileSample>,
    predictor: &ModelSpec,
    gate: &Gateway,
    seed: u64,
) -> Result<PredictionOutcome, EvaluateError> {
    if predictor.temperature != 0.0 {
        return Err(EvaluateError::Temperature(predictor.model_id.clone()));
    }
    let profile_ref = profile.map(ProfileRef::of);
    if let Some(p) = profile {
        if !p.is_ok() {
            return Ok(PredictionOutcome::failed(instance, profile_ref, "profile missing".into()));
        }
    }
    let req = prediction_request(instance, profile, seed)?;
    let tokens = req.prompt.meta.estimated_tokens;
    match gate.complete(predictor, &req) {
        Ok(res) => {
            let parsed = parse_sentiment(&res.text);
            Ok(PredictionOutcome {
                user_id: instance.user_id.clone(),
                profile_ref,
                correct: parsed.label() == Some(instance.truth),
                raw_text: res.text,
                parsed,
                truth: instance.truth,
                note: None,
                estimated_prompt_tokens: tokens,
            })
        }
        Err(e) => {
            log::warn!("{}: prediction failed: {e}", instance.user_id);
            let mut out = PredictionOutcome::failed(instance, profile_ref, format!("transport: {e}"));
            out.estimated_prompt_tokens = tokens;
            Ok(out)
        }
    }
}

/// Rows are the truth, columns the parsed prediction, both indexed by
/// [`SentimentLabel::index`]. Unparseable answers are tallied per truth row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
    pub parse_failures: [u64; 3],
}

impl ConfusionMatrix {
    pub fn grid_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn failures(&self) -> u64 {
        self.parse_failures.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.grid_total() + self.failures()
    }

    pub fn diagonal(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    /// Support of class `c`, failures included.
    pub fn row(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() + self.parse_failures[c]
    }

    pub fn column(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn f1(&self, c: usize) -> f64 {
        let tp = self.counts[c][c] as f64;
        let col = self.column(c);
        let row = self.row(c);
        let precision = if col == 0 { 0.0 } else { tp / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp / row as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

pub fn confusion(outcomes: &[PredictionOutcome]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for o in outcomes {
        let t = o.truth.index();
        match o.parsed.label() {
            Some(p) => cm.counts[t][p.index()] += 1,
            None => cm.parse_failures[t] += 1,
        }
    }
    cm
}

/// Diagonal over all outcomes; parse failures count as wrong.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvaluateError> {
    match cm.total() {
        0 => Err(EvaluateError::UndefinedMetric),
        n => Ok(cm.diagonal() as f64 / n as f64),
    }
}

/// Per-class F1 averaged with weights proportional to class support.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64, EvaluateError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvaluateError::UndefinedMetric);
    }
    Ok((0..3).map(|c| cm.row(c) as f64 / total as f64 * cm.f1(c)).sum())
}

/// Unweighted mean of the three per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64, EvaluateError> {
    if cm.total() == 0 {
        return Err(EvaluateError::UndefinedMetric);
    }
    Ok((0..3).map(|c| cm.f1(c)).sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition_id: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub n: usize,
    pub parse_failures: u64,
    pub mean_estimated_prompt_tokens: f64,
    pub confusion: ConfusionMatrix,
}

pub fn metrics_report(condition_id: &str, outcomes: &[PredictionOutcome]) -> Result<MetricsReport, EvaluateError> {
    let cm = confusion(outcomes);
    let tokens: usize = outcomes.iter().map(|o| o.estimated_prompt_tokens).sum();
    Ok(MetricsReport {
        condition_id: condition_id.to_string(),
        accuracy: accuracy(&cm)?,
        weighted_f1: weighted_f1(&cm)?,
        macro_f1: macro_f1(&cm)?,
        n: outcomes.len(),
        parse_failures: cm.failures(),
        mean_estimated_prompt_tokens: tokens as f64 / outcomes.len() as f64,
        confusion: cm,
    })
}

/// Which profiles a condition conditions the predictor on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProfileSource {
    /// Recent history only.
    None,
    /// One designated sample per user.
    Fixed { model_id: String, sample_index: u32 },
    /// Every sample of every model for the user at the condition's window.
    Each,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: String,
    pub k: usize,
    pub window: Option<usize>,
    pub profile_source: ProfileSource,
}

impl Condition {
    /// `10H`-style recent-history-only condition.
    pub fn history_only(k: usize) -> Self {
        Self {
            id: format!("{k}H"),
            k,
            window: None,
            profile_source: ProfileSource::None,
        }
    }

    /// `10H+30P`-style condition using one designated profile per user.
    pub fn with_profile(k: usize, w: usize, model_id: &str, sample_index: u32) -> Self {
        Self {
            id: format!("{k}H+{w}P"),
            k,
            window: Some(w),
            profile_source: ProfileSource::Fixed {
                model_id: model_id.to_string(),
                sample_index,
            },
        }
    }

    fn validate(&self) -> Result<(), EvaluateError> {
        let err = |m: &str| {
            Err(EvaluateError::Config {
                condition: self.id.clone(),
                message: m.to_string(),
            })
        };
        match (&self.window, &self.profile_source) {
            (None, ProfileSource::None) | (Some(_), ProfileSource::Fixed { .. } | ProfileSource::Each) => Ok(()),
            (None, _) => err("profile source given without a window"),
            (Some(_), ProfileSource::None) => err("window given without a profile source"),
        }
    }
}

/// Profile lookup by `(user, model, sample index, window)`.
#[derive(Debug, Default)]
pub struct ProfileIndex<'a> {
    by_key: HashMap<(String, String, u32, usize), &'a ProfileSample>,
    by_user_window: HashMap<(String, usize), Vec<&'a ProfileSample>>,
}

impl<'a> ProfileIndex<'a> {
    pub fn new(samples: &'a [ProfileSample]) -> Self {
        let mut idx = Self::default();
        for s in samples {
            idx.by_key
                .insert((s.user_id.clone(), s.model_id.clone(), s.sample_index, s.window_w), s);
            idx.by_user_window.entry((s.user_id.clone(), s.window_w)).or_default().push(s);
        }
        idx
    }

    pub fn get(&self, user: &str, model: &str, sample_index: u32, w: usize) -> Option<&'a ProfileSample> {
        self.by_key
            .get(&(user.to_string(), model.to_string(), sample_index, w))
            .copied()
    }

    pub fn for_user(&self, user: &str, w: usize) -> &[&'a ProfileSample] {
        self.by_user_window
            .get(&(user.to_string(), w))
            .map(Vec::as_slice)
            .unwrap_or_default()
    }
}

/// Runs one condition over `instances` and aggregates the outcomes.
pub fn run_condition(
    condition: &Condition,
    instances: &[EvalInstance],
    profiles: &ProfileIndex<'_>,
    predictor: &ModelSpec,
    gate: &Gateway,
    seed: u64,
) -> Result<(Vec<PredictionOutcome>, MetricsReport), EvaluateError> {
    condition.validate()?;
    let cfg_err = |m: String| EvaluateError::Config {
        condition: condition.id.clone(),
        message: m,
    };
    let mut jobs: Vec<(&EvalInstance, Option<&ProfileSample>)> = Vec::new();
    for inst in instances {
        if inst.split.k() != condition.k {
            return Err(cfg_err(format!(
                "instance `{}` has {} recent records, condition needs {}",
                inst.user_id,
                inst.split.k(),
                condition.k
            )));
        }
        match (&condition.profile_source, condition.window) {
            (ProfileSource::None, _) => jobs.push((inst, None)),
            (ProfileSource::Fixed { model_id, sample_index }, Some(w)) => {
                let p = profiles
                    .get(&inst.user_id, model_id, *sample_index, w)
                    .ok_or_else(|| cfg_err(format!("no profile {model_id}#{sample_index} at W={w} for `{}`", inst.user_id)))?;
                jobs.push((inst, Some(p)));
            }
            (ProfileSource::Each, Some(w)) => {
                let ps = profiles.for_user(&inst.user_id, w);
                if ps.is_empty() {
                    return Err(cfg_err(format!("no profiles at W={w} for `{}`", inst.user_id)));
                }
                jobs.extend(ps.iter().map(|p| (inst, Some(*p))));
            }
            (_, None) => unreachable!("validated"),
        }
    }
    let mut outcomes = jobs
        .par_iter()
        .map(|(inst, p)| predict(inst, *p, predictor, gate, seed))
        .collect::<Result<Vec<_>, _>>()?;
    sort_outcomes(&mut outcomes);
    let report = metrics_report(&condition.id, &outcomes)?;
    Ok((outcomes, report))
}

pub fn sort_outcomes(outcomes: &mut [PredictionOutcome]) {
    outcomes.sort_by(|a, b| (&a.user_id, &a.profile_ref).cmp(&(&b.user_id, &b.profile_ref)));
}

pub fn write_outcomes<W: Write>(mut sink: W, outcomes: &[PredictionOutcome]) -> Result<(), EvaluateError> {
    for o in outcomes {
        serde_json::to_writer(&mut sink, o).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_outcomes<R: BufRead>(source: R) -> Result<Vec<PredictionOutcome>, EvaluateError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvaluateError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Plain-text table: one row per condition, metrics to four decimals.
pub fn render_report(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.condition_id.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>11}  {:>8}  {:>6}  {:>10}",
        "Condition", "Acc", "weighted-F1", "macro-F1", "n", "est.tokens"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>11.4}  {:>8.4}  {:>6}  {:>10.4}",
            r.condition_id, r.accuracy, r.weighted_f1, r.macro_f1, r.n, r.mean_estimated_prompt_tokens
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_timeline, make_eval_instance, InteractionRecord};
    use crate::explore::SampleStatus;
    use crate::modelgate::{mock_oracle_behavior, mock_scripted_behavior, MockBehavior, ScriptReply, ScriptRule};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn instance(user: &str, truth: SentimentLabel) -> EvalInstance {
        let rating = match truth {
            SentimentLabel::Like => 5.0,
            SentimentLabel::Neutral => 3.0,
            SentimentLabel::Dislike => 1.0,
        };
        let recs: Vec<InteractionRecord> = (0..11u64)
            .map(|i| InteractionRecord {
                user_id: user.into(),
                item_id: format!("i{i}"),
                timestamp: i,
                rating: if i == 10 { rating } else { 4.0 },
                sentiment: if i == 10 { truth } else { SentimentLabel::Like },
                attributes: vec![("Title".into(), format!("T{i}"))],
            })
            .collect();
        make_eval_instance(&build_timeline(recs).unwrap(), 10, 0).unwrap()
    }

    fn profile(user: &str, w: usize, text: &str) -> ProfileSample {
        ProfileSample {
            user_id: user.into(),
            model_id: "gen".into(),
            sample_index: 0,
            window_w: w,
            text: text.into(),
            prompt_digest: String::new(),
            status: SampleStatus::Ok,
        }
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_sentiment("like"), Parsed::Like);
        assert_eq!(parse_sentiment(" Neutral.\n"), Parsed::Neutral);
        assert_eq!(parse_sentiment("I would say like, maybe dislike"), Parsed::ParseFailure);
        assert_eq!(parse_sentiment("DISLIKE!"), Parsed::Dislike);
        assert_eq!(parse_sentiment("The answer is: dislike"), Parsed::Dislike);
        assert_eq!(parse_sentiment("\"like\""), Parsed::Like);
        assert_eq!(parse_sentiment("unlikely"), Parsed::ParseFailure);
        assert_eq!(parse_sentiment(""), Parsed::ParseFailure);
    }

    #[test]
    fn predict_with_mocks() {
        let gate = Gateway::offline();
        let inst = instance("u", SentimentLabel::Dislike);
        let oracle = ModelSpec::mock(
            "o",
            0.0,
            8,
            mock_oracle_behavior(BTreeMap::from([("u".to_string(), SentimentLabel::Dislike)])),
        );
        assert!(predict(&inst, None, &oracle, &gate, 0).unwrap().correct);

        let constant = ModelSpec::mock("c", 0.0, 8, MockBehavior::Constant { reply: "like".into() });
        let o = predict(&inst, None, &constant, &gate, 0).unwrap();
        assert!(!o.correct);
        assert_eq!(o.parsed, Parsed::Like);

        let mut scripted = mock_scripted_behavior(
            vec![ScriptRule {
                pattern: "USER PROFILE:".into(),
                reply: ScriptReply::Truth,
            }],
            Some("like".into()),
        )
        .unwrap();
        scripted.set_truth(BTreeMap::from([("u".to_string(), SentimentLabel::Dislike)]));
        let spec = ModelSpec::mock("s", 0.0, 8, scripted);
        let p = profile("u", 30, "PROFILE: likes drama");
        let with = predict(&inst, Some(&p), &spec, &gate, 0).unwrap();
        assert!(with.correct);
        assert_eq!(with.profile_ref, Some(ProfileRef::of(&p)));
        assert!(!predict(&inst, None, &spec, &gate, 0).unwrap().correct);

        let hot = ModelSpec::mock("h", 0.7, 8, MockBehavior::Constant { reply: "like".into() });
        assert!(matches!(predict(&inst, None, &hot, &gate, 0), Err(EvaluateError::Temperature(_))));
    }

    #[test]
    fn prediction_prompt_renders_recent_history_earliest_first() {
        let inst = instance("u", SentimentLabel::Like);
        let req = prediction_request(&inst, None, 0).unwrap();
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.prompt.meta.recent, Some(10));
        let t0 = req.prompt.text.find("Title: T0;").unwrap();
        let t9 = req.prompt.text.find("Title: T9;").unwrap();
        assert!(t0 < t9);
        assert!(req.prompt.text.ends_with("The candidate item is:\nTitle: T10."));
    }

    fn outcome(truth: SentimentLabel, parsed: Parsed) -> PredictionOutcome {
        PredictionOutcome {
            user_id: "u".into(),
            profile_ref: None,
            raw_text: String::new(),
            parsed,
            truth,
            correct: parsed.label() == Some(truth),
            note: None,
            estimated_prompt_tokens: 0,
        }
    }

    #[test]
    fn confusion_examples() {
        let all_like: Vec<_> = (0..3).map(|_| outcome(SentimentLabel::Like, Parsed::Like)).collect();
        assert_eq!(confusion(&all_like).counts[0][0], 3);
        let cm = confusion(&[outcome(SentimentLabel::Neutral, Parsed::ParseFailure)]);
        assert_eq!(cm.failures(), 1);
        assert_eq!(cm.grid_total(), 0);
        assert_eq!(confusion(&[]), ConfusionMatrix::default());
    }

    fn cm(rows: [[u64; 3]; 3], failures: [u64; 3]) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: rows,
            parse_failures: failures,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&cm([[5, 0, 0], [0, 3, 0], [0, 0, 2]], [0; 3])).unwrap(), 1.0);
        // 45 on the diagonal out of 100
        let m = cm([[20, 10, 5], [5, 15, 10], [5, 20, 10]], [0; 3]);
        assert_eq!(m.total(), 100);
        assert!((accuracy(&m).unwrap() - 0.45).abs() < 1e-15);
        let m = cm([[3, 0, 0], [0, 3, 0], [0, 0, 3]], [0, 1, 0]);
        assert!((accuracy(&m).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(accuracy(&ConfusionMatrix::default()), Err(EvaluateError::UndefinedMetric)));
        assert!(weighted_f1(&ConfusionMatrix::default()).is_err());
        assert!(macro_f1(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn f1_examples() {
        let perfect = cm([[4, 0, 0], [0, 4, 0], [0, 0, 2]], [0; 3]);
        assert_eq!(weighted_f1(&perfect).unwrap(), 1.0);
        assert_eq!(macro_f1(&perfect).unwrap(), 1.0);

        // Hand-derived: like P=8/9 R=8/10 F1=16/19; neutral P=4/7 R=4/5 F1=2/3;
        // dislike P=1 R=4/5 F1=8/9; supports 10,5,5 of 20.
        let m = cm([[8, 2, 0], [1, 4, 0], [0, 1, 4]], [0; 3]);
        let expected = 0.5 * 16.0 / 19.0 + 0.25 * 2.0 / 3.0 + 0.25 * 8.0 / 9.0;
        assert!((weighted_f1(&m).unwrap() - expected).abs() < 1e-12);
        let expected_macro = (16.0 / 19.0 + 2.0 / 3.0 + 8.0 / 9.0) / 3.0;
        assert!((macro_f1(&m).unwrap() - expected_macro).abs() < 1e-12);

        let single = cm([[7, 0, 0], [0, 0, 0], [0, 0, 0]], [0; 3]);
        assert_eq!(weighted_f1(&single).unwrap(), 1.0);
        assert!((macro_f1(&single).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn parse_failures_reduce_recall_only() {
        let m = cm([[2, 0, 0], [0, 0, 0], [0, 0, 0]], [2, 0, 0]);
        // P=1, R=1/2 → F1=2/3, support 4 of 4
        assert!((weighted_f1(&m).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((accuracy(&m).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conditions() {
        let gate = Gateway::offline();
        let labels = [SentimentLabel::Like, SentimentLabel::Neutral, SentimentLabel::Dislike];
        let insts: Vec<_> = (0..9).map(|i| instance(&format!("u{i}"), labels[i % 3])).collect();
        let truth: BTreeMap<_, _> = insts.iter().map(|i| (i.user_id.clone(), i.truth)).collect();
        let no_profiles = ProfileIndex::default();
        let h10 = Condition::history_only(10);

        let oracle = ModelSpec::mock("o", 0.0, 8, mock_oracle_behavior(truth.clone()));
        let (_, r) = run_condition(&h10, &insts, &no_profiles, &oracle, &gate, 0).unwrap();
        assert_eq!((r.accuracy, r.weighted_f1, r.n), (1.0, 1.0, 9));

        let constant = ModelSpec::mock("c", 0.0, 8, MockBehavior::Constant { reply: "like".into() });
        let (_, r) = run_condition(&h10, &insts, &no_profiles, &constant, &gate, 0).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);

        let samples: Vec<_> = insts.iter().map(|i| profile(&i.user_id, 30, "PROFILE: p")).collect();
        let index = ProfileIndex::new(&samples);
        let mut scripted = mock_scripted_behavior(
            vec![ScriptRule {
                pattern: "USER PROFILE:".into(),
                reply: ScriptReply::Truth,
            }],
            Some("neutral".into()),
        )
        .unwrap();
        scripted.set_truth(truth);
        let spec = ModelSpec::mock("s", 0.0, 8, scripted);
        let (_, base) = run_condition(&h10, &insts, &index, &spec, &gate, 0).unwrap();
        let with_p = Condition::with_profile(10, 30, "gen", 0);
        assert_eq!(with_p.id, "10H+30P");
        let (outs, prof) = run_condition(&with_p, &insts, &index, &spec, &gate, 0).unwrap();
        assert!(prof.accuracy > base.accuracy);
        assert!(outs.iter().all(|o| o.profile_ref.is_some()));

        let missing = Condition::with_profile(10, 50, "gen", 0);
        assert!(matches!(
            run_condition(&missing, &insts, &index, &spec, &gate, 0),
            Err(EvaluateError::Config { .. })
        ));
        assert!(run_condition(&h10, &[], &no_profiles, &spec, &gate, 0).is_err());
    }

    #[test]
    fn report_table() {
        let r = metrics_report("10H", &[outcome(SentimentLabel::Like, Parsed::Like)]).unwrap();
        let t = render_report(&[r]);
        assert!(t.contains("10H"));
        assert!(t.contains("1.0000"));
    }

    #[allow(clippy::needless_range_loop)]
    fn brute_f1(m: &ConfusionMatrix) -> (f64, f64) {
        let mut support = [0.0f64; 3];
        let mut predicted = [0.0f64; 3];
        let mut tp = [0.0f64; 3];
        for t in 0..3 {
            for p in 0..3 {
                for _ in 0..m.counts[t][p] {
                    support[t] += 1.0;
                    predicted[p] += 1.0;
                    if t == p {
                        tp[t] += 1.0;
                    }
                }
            }
            support[t] += m.parse_failures[t] as f64;
        }
        let n: f64 = support.iter().sum();
        let f1: Vec<f64> = (0..3)
            .map(|c| {
                let p = if predicted[c] > 0.0 { tp[c] / predicted[c] } else { 0.0 };
                let r = if support[c] > 0.0 { tp[c] / support[c] } else { 0.0 };
                if p + r > 0.0 {
                    2.0 * p * r / (p + r)
                } else {
                    0.0
                }
            })
            .collect();
        let w = (0..3).map(|c| support[c] / n * f1[c]).sum();
        (w, f1.iter().sum::<f64>() / 3.0)
    }

    fn arb_cm() -> impl Strategy<Value = ConfusionMatrix> {
        (proptest::array::uniform3(proptest::array::uniform3(0u64..20)), proptest::array::uniform3(0u64..5))
            .prop_filter("non-empty", |(c, f)| c.iter().flatten().sum::<u64>() + f.iter().sum::<u64>() > 0)
            .prop_map(|(counts, parse_failures)| ConfusionMatrix { counts, parse_failures })
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_match_brute_force(m in arb_cm()) {
            let (w, mac) = brute_f1(&m);
            let acc = accuracy(&m).unwrap();
            let wf = weighted_f1(&m).unwrap();
            let mf = macro_f1(&m).unwrap();
            prop_assert!((wf - w).abs() < 1e-12);
            prop_assert!((mf - mac).abs() < 1e-12);
            for v in [acc, wf, mf] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn permutation_equivariance(m in arb_cm(), perm in Just([1usize, 2, 0])) {
            let mut p = ConfusionMatrix::default();
            for t in 0..3 {
                for q in 0..3 {
                    p.counts[perm[t]][perm[q]] = m.counts[t][q];
                }
                p.parse_failures[perm[t]] = m.parse_failures[t];
            }
            prop_assert!((accuracy(&m).unwrap() - accuracy(&p).unwrap()).abs() < 1e-12);
            prop_assert!((macro_f1(&m).unwrap() - macro_f1(&p).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn equal_support_weighted_equals_macro(a in 0u64..10, b in 0u64..10, c in 0u64..10, d in 0u64..10, e in 0u64..10, f in 0u64..10) {
            // each row sums to 30
            let m = cm([[a, b, 30 - a - b], [c, d, 30 - c - d], [e, f, 30 - e - f]], [0; 3]);
            prop_assert!((weighted_f1(&m).unwrap() - macro_f1(&m).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn fixing_a_failure_never_hurts(m in arb_cm()) {
            prop_assume!(m.failures() > 0);
            let c = (0..3).find(|&c| m.parse_failures[c] > 0).unwrap();
            let mut fixed = m;
            fixed.parse_failures[c] -= 1;
            fixed.counts[c][c] += 1;
            prop_assert!(accuracy(&fixed).unwrap() >= accuracy(&m).unwrap() - 1e-12);
            prop_assert!(weighted_f1(&fixed).unwrap() >= weighted_f1(&m).unwrap() - 1e-12);
            prop_assert!(macro_f1(&fixed).unwrap() >= macro_f1(&m).unwrap() - 1e-12);
        }

        #[test]
        fn all_one_iff_diagonal(m in arb_cm()) {
            let diag = m.failures() == 0 && (0..3).all(|t| (0..3).all(|p| t == p || m.counts[t][p] == 0));
            let ones = accuracy(&m).unwrap() == 1.0;
            prop_assert_eq!(diag, ones);
        }
    }
}
