//! Preference-pair construction from evaluated profile pools.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::{make_eval_instance, SentimentLabel, UserTimeline};
use crate::evaluate::{PredictionOutcome, ProfileRef};
use crate::explore::ProfileSample;
use crate::prompts::{render_history_lines, render_profile_prompt, HistoryOrder, PromptError};

pub const DEFAULT_MAX_PAIRS_PER_USER: usize = 25;

#[derive(Debug, thiserror::Error)]
pub enum PairError {
    #[error("sample {user_id}/{model_id}#{sample_index} (W={window_w}) has no evaluation outcome")]
    MissingOutcome {
        user_id: String,
        model_id: String,
        sample_index: u32,
        window_w: usize,
    },
    #[error("sample {user_id}/{model_id}#{sample_index} (W={window_w}) has more than one outcome")]
    DuplicateOutcome {
        user_id: String,
        model_id: String,
        sample_index: u32,
        window_w: usize,
    },
    #[error("provenance: user `{user_id}` at W={window_w}: {message}")]
    Provenance {
        user_id: String,
        window_w: usize,
        message: String,
    },
    #[error("pairing policy: {0}")]
    Policy(String),
    #[error("refusing to export an empty preference dataset")]
    EmptyDataset,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    All,
    #[default]
    SeededUniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingPolicy {
    /// `None` keeps the full cross product. Written as `"unlimited"` in config.
    #[serde(default = "default_cap", with = "cap_serde")]
    pub max_pairs_per_user: Option<usize>,
    #[serde(default = "yes")]
    pub dedup_identical_texts: bool,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub seed: u64,
}

fn default_cap() -> Option<usize> {
    Some(DEFAULT_MAX_PAIRS_PER_USER)
}

fn yes() -> bool {
    true
}

mod cap_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(usize),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(n) => Repr::Count(*n),
            None => Repr::Word("unlimited".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Some(n)),
            Repr::Word(w) if w == "unlimited" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a count or \"unlimited\", got `{w}`"
            ))),
        }
    }
}

impl Default for PairingPolicy {
    fn default() -> Self {
        Self {
            max_pairs_per_user: default_cap(),
            dedup_identical_texts: true,
            selection: Selection::SeededUniform,
            seed: 0,
        }
    }
}

impl PairingPolicy {
    pub fn unlimited() -> Self {
        Self {
            max_pairs_per_user: None,
            dedup_identical_texts: false,
            selection: Selection::All,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PairError> {
        match (self.max_pairs_per_user, self.selection) {
            (Some(0), _) => Err(PairError::Policy("max_pairs_per_user must be at least 1".into())),
            (Some(_), Selection::All) => Err(PairError::Policy(
                "selection `all` keeps every pair; set max_pairs_per_user = \"unlimited\"".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One evaluated profile: the sample and whether its prediction was right.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub sample: &'a ProfileSample,
    pub correct: bool,
    pub truth: SentimentLabel,
}

/// Samples of one user at one window, split by outcome.
#[derive(Debug, Clone, Default)]
pub struct Pools<'a> {
    pub positive: Vec<&'a ProfileSample>,
    pub negative: Vec<&'a ProfileSample>,
    pub truth: Option<SentimentLabel>,
}

/// Splits one group's scored samples; input order is preserved on each side.
pub fn partition<'a>(scored: &[Scored<'a>]) -> Pools<'a> {
    let mut pools = Pools::default();
    for s in scored {
        pools.truth.get_or_insert(s.truth);
        if s.correct {
            pools.positive.push(s.sample);
        } else {
            pools.negative.push(s.sample);
        }
    }
    pools
}

/// Joins samples with their outcomes and partitions every `(user, W)` group.
/// Missing samples are left out of the pools.
pub fn group_pools<'a>(
    samples: &'a [ProfileSample],
    outcomes: &[PredictionOutcome],
) -> Result<BTreeMap<(String, usize), Pools<'a>>, PairError> {
    let mut by_ref: HashMap<(&str, &ProfileRef), &PredictionOutcome> = HashMap::new();
    for o in outcomes {
        if let Some(r) = &o.profile_ref {
            if by_ref.insert((o.user_id.as_str(), r), o).is_some() {
                return Err(PairError::DuplicateOutcome {
                    user_id: o.user_id.clone(),
                    model_id: r.model_id.clone(),
                    sample_index: r.sample_index,
                    window_w: r.window_w,
                });
            }
        }
    }
    let mut groups: BTreeMap<(String, usize), Vec<Scored<'a>>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.is_ok()) {
        let r = ProfileRef::of(s);
        let o = by_ref
            .get(&(s.user_id.as_str(), &r))
            .ok_or_else(|| PairError::MissingOutcome {
                user_id: s.user_id.clone(),
                model_id: s.model_id.clone(),
                sample_index: s.sample_index,
                window_w: s.window_w,
            })?;
        groups.entry((s.user_id.clone(), s.window_w)).or_default().push(Scored {
            sample: s,
            correct: o.correct,
            truth: o.truth,
        });
    }
    Ok(groups.into_iter().map(|(k, v)| (k, partition(&v))).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub user_id: String,
    pub window_w: usize,
    pub chosen: ProfileRef,
    pub chosen_text: String,
    pub rejected: ProfileRef,
    pub rejected_text: String,
    pub truth: SentimentLabel,
}

fn selection_seed(seed: u64, user_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Cross product of one group's pools, then dedup, then the cap.
pub fn build_pairs(pools: &Pools<'_>, policy: &PairingPolicy) -> Vec<PreferencePair> {
    if pools.positive.is_empty() || pools.negative.is_empty() {
        return Vec::new();
    }
    let truth = pools.truth.expect("non-empty pools carry a truth label");
    let mut pairs = Vec::with_capacity(pools.positive.len() * pools.negative.len());
    for p in &pools.positive {
        for q in &pools.negative {
            pairs.push(PreferencePair {
                user_id: p.user_id.clone(),
                window_w: p.window_w,
                chosen: ProfileRef::of(p),
                chosen_text: p.text.clone(),
                rejected: ProfileRef::of(q),
                rejected_text: q.text.clone(),
                truth,
            });
        }
    }
    if policy.dedup_identical_texts {
        let mut seen = BTreeSet::new();
        pairs.retain(|x| x.chosen_text != x.rejected_text && seen.insert((x.chosen_text.clone(), x.rejected_text.clone())));
    }
    if let (Some(cap), Selection::SeededUniform) = (policy.max_pairs_per_user, policy.selection) {
        if pairs.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(selection_seed(policy.seed, &pairs[0].user_id));
            let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), cap).into_vec();
            keep.sort_unstable();
            let mut keep = keep.into_iter().peekable();
            pairs = pairs
                .into_iter()
                .enumerate()
                .filter_map(|(i, p)| (keep.peek() == Some(&i)).then(|| {
                    keep.next();
                    p
                }))
                .collect();
        }
    }
    pairs
}

/// Pairs for every group, ordered by `(user_id, W, pair index)`.
pub fn build_all_pairs(
    groups: &BTreeMap<(String, usize), Pools<'_>>,
    policy: &PairingPolicy,
) -> Result<Vec<PreferencePair>, PairError> {
    policy.validate()?;
    Ok(groups.values().flat_map(|p| build_pairs(p, policy)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub user_id: String,
    #[serde(rename = "W")]
    pub window_w: usize,
    pub chosen_model: String,
    pub chosen_index: u32,
    pub rejected_model: String,
    pub rejected_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub label: SentimentLabel,
    pub meta: PairMeta,
}

/// Attaches the profile-generation prompt over each user's long history.
/// Pairs whose two texts coincide are dropped.
pub fn to_dpo_examples(
    pairs: &[PreferencePair],
    timelines: &BTreeMap<String, UserTimeline>,
    k: usize,
) -> Result<Vec<DpoExample>, PairError> {
    let mut prompts: HashMap<(&str, usize), String> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs.iter().filter(|p| p.chosen_text != p.rejected_text) {
        let key = (p.user_id.as_str(), p.window_w);
        let prompt = match prompts.entry(key) {
            Entry::Occupied(e) => e.get().clone(),
            Entry::Vacant(slot) => {
                let provenance = |message: String| PairError::Provenance {
                    user_id: p.user_id.clone(),
                    window_w: p.window_w,
                    message,
                };
                let tl = timelines
                    .get(&p.user_id)
                    .ok_or_else(|| provenance("user absent from corpus".into()))?;
                let inst = make_eval_instance(tl, k, p.window_w).map_err(|e| provenance(e.to_string()))?;
                let history = render_history_lines(&inst.split.long, HistoryOrder::EarliestFirst)?;
                slot.insert(render_profile_prompt(&history)?.text).clone()
            }
        };
        out.push(DpoExample {
            prompt,
            chosen: p.chosen_text.clone(),
            rejected: p.rejected_text.clone(),
            label: p.truth,
            meta: PairMeta {
                user_id: p.user_id.clone(),
                window_w: p.window_w,
                chosen_model: p.chosen.model_id.clone(),
                chosen_index: p.chosen.sample_index,
                rejected_model: p.rejected.model_id.clone(),
                rejected_index: p.rejected.sample_index,
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    #[default]
    PairwiseRecords,
    FlatRecords,
}

#[derive(Serialize)]
struct PairwiseLine<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
    meta: &'a PairMeta,
}

#[derive(Serialize)]
struct FlatLine<'a> {
    prompt: &'a str,
    response: &'a str,
    preferred: bool,
    meta: &'a PairMeta,
}

fn write_line<W: Write, T: Serialize>(sink: &mut W, value: &T) -> Result<(), PairError> {
    serde_json::to_writer(&mut *sink, value).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Writes `examples` in `format`; an empty list is refused before any byte
/// is written.
pub fn export_to<W: Write>(examples: &[DpoExample], format: ExportFormat, mut sink: W) -> Result<usize, PairError> {
    if examples.is_empty() {
        return Err(PairError::EmptyDataset);
    }
    for e in examples {
        match format {
            ExportFormat::PairwiseRecords => write_line(
                &mut sink,
                &PairwiseLine {
                    prompt: &e.prompt,
                    chosen: &e.chosen,
                    rejected: &e.rejected,
                    meta: &e.meta,
                },
            )?,
            ExportFormat::FlatRecords => {
                for (response, preferred) in [(&e.chosen, true), (&e.rejected, false)] {
                    write_line(
                        &mut sink,
                        &FlatLine {
                            prompt: &e.prompt,
                            response,
                            preferred,
                            meta: &e.meta,
                        },
                    )?;
                }
            }
        }
    }
    Ok(examples.len())
}

/// [`export_to`] into a file; no file is created for an empty list.
pub fn export(examples: &[DpoExample], format: ExportFormat, path: &Path) -> Result<usize, PairError> {
    if examples.is_empty() {
        return Err(PairError::EmptyDataset);
    }
    let mut buf = Vec::new();
    let n = export_to(examples, format, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(n)
}

/// A pairwise record read back from an export file.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PairwiseRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

pub fn read_pairwise<R: BufRead>(source: R) -> Result<Vec<PairwiseRecord>, PairError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PairError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_pairs<W: Write>(mut sink: W, pairs: &[PreferencePair]) -> Result<(), PairError> {
    pairs.iter().try_for_each(|p| write_line(&mut sink, p))
}

pub fn read_pairs<R: BufRead>(source: R) -> Result<Vec<PreferencePair>, PairError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PairError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
