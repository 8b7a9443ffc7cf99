//! Interaction-log ingestion and history splitting.
//!
//! Raw rating logs are normalized into [`InteractionRecord`]s, grouped into
//! per-user [`UserTimeline`]s stored most-recent-first, and cut into
//! evaluation instances: the most recent item is the prediction target, the
//! next `K` records are the recent history and the `W` records behind those
//! form the long-history window handed to the profile generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: invalid field `{field}`: {message}")]
    Parse {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("unknown dataset kind `{0}`")]
    UnknownKind(String),
    #[error("invalid rating map: {0}")]
    RatingMap(String),
    #[error("rating {rating} outside [0, {scale_max}]")]
    RatingOutOfRange { rating: f64, scale_max: f64 },
    #[error("timeline records belong to several users (`{expected}` and `{found}`)")]
    MixedUsers { expected: String, found: String },
    #[error("cannot build a timeline from zero records")]
    EmptyTimeline,
    #[error("user `{user_id}` has {available} interactions, {required} required")]
    InsufficientHistory {
        user_id: String,
        required: usize,
        available: usize,
    },
    #[error("cannot sample {requested} users from {available} eligible")]
    SampleSize { requested: usize, available: usize },
    #[error("window partition covers {partition} users but {requested} were requested")]
    Partition { partition: usize, requested: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Three-way sentiment toward an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Like,
    Neutral,
    Dislike,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [Self::Like, Self::Neutral, Self::Dislike];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Like => "like",
            Self::Neutral => "neutral",
            Self::Dislike => "dislike",
        }
    }

    /// Position in [`SentimentLabel::ALL`]; used as the confusion-matrix index.
    pub fn index(self) -> usize {
        match self {
            Self::Like => 0,
            Self::Neutral => 1,
            Self::Dislike => 2,
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "like" => Ok(Self::Like),
            "neutral" => Ok(Self::Neutral),
            "dislike" => Ok(Self::Dislike),
            other => Err(format!("not a sentiment label: `{other}`")),
        }
    }
}

/// Thresholds turning a dataset-native rating into a [`SentimentLabel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingMap {
    pub like_min: f64,
    pub dislike_max: f64,
    pub scale_max: f64,
}

impl Default for RatingMap {
    fn default() -> Self {
        Self {
            like_min: 4.0,
            dislike_max: 2.0,
            scale_max: 5.0,
        }
    }
}

impl RatingMap {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.like_min, self.dislike_max, self.scale_max]
            .iter()
            .all(|v| v.is_finite())
            && self.dislike_max < self.like_min
            && self.like_min <= self.scale_max;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::RatingMap(format!(
                "need dislike_max < like_min <= scale_max, got {} / {} / {}",
                self.dislike_max, self.like_min, self.scale_max
            )))
        }
    }
}

pub fn map_rating_to_sentiment(rating: f64, map: &RatingMap) -> Result<SentimentLabel> {
    if !(0.0..=map.scale_max).contains(&rating) {
        return Err(CorpusError::RatingOutOfRange {
            rating,
            scale_max: map.scale_max,
        });
    }
    Ok(if rating >= map.like_min {
        SentimentLabel::Like
    } else if rating <= map.dislike_max {
        SentimentLabel::Dislike
    } else {
        SentimentLabel::Neutral
    })
}

/// One timestamped user-item event.
///
/// Field order is the on-disk order of the normalized record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub rating: f64,
    pub sentiment: SentimentLabel,
    pub attributes: Vec<(String, String)>,
}

/// Source dataset family. Decides the attribute names attached to items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    MovieLens,
    Amazon,
    Yelp,
    /// Our own normalized record file; attributes are inline.
    Normalized,
}

impl DatasetKind {
    pub fn attribute_names(self) -> &'static [&'static str] {
        match self {
            Self::MovieLens => &["Title", "Genre"],
            Self::Amazon => &["Title", "Category"],
            Self::Yelp => &["Business name", "Category"],
            Self::Normalized => &[],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "movielens" => Ok(Self::MovieLens),
            "amazon" => Ok(Self::Amazon),
            "yelp" => Ok(Self::Yelp),
            "normalized" => Ok(Self::Normalized),
            _ => Err(CorpusError::UnknownKind(s.to_string())),
        }
    }
}

/// Physical layout of a rating file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordLayout {
    /// `user_id <d> item_id <d> rating <d> timestamp`, optional header line.
    Delimited {
        delimiter: String,
        #[serde(default)]
        header: bool,
    },
    /// One JSON object per line with `user_id`, `item_id`, `rating`, `timestamp`.
    JsonLines,
}

/// Item id to attribute pairs, loaded from a sidecar file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeTable {
    items: HashMap<String, Vec<(String, String)>>,
}

impl AttributeTable {
    pub fn insert(&mut self, item_id: impl Into<String>, attributes: Vec<(String, String)>) {
        self.items.insert(item_id.into(), attributes);
    }

    pub fn get(&self, item_id: &str) -> Option<&[(String, String)]> {
        self.items.get(item_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Reads `item_id <d> value_1 <d> value_2 ...`, naming values with the
    /// kind's attribute names. Extra trailing columns are ignored.
    pub fn load<R: BufRead>(source: R, kind: DatasetKind, delimiter: &str) -> Result<Self> {
        let names = kind.attribute_names();
        let mut table = AttributeTable::default();
        for (idx, line) in source.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(delimiter);
            let item_id = cols.next().unwrap_or_default().trim();
            if item_id.is_empty() {
                return Err(parse_err(line_no, "item_id", "empty"));
            }
            let values: Vec<&str> = cols.collect();
            if values.len() < names.len() {
                return Err(parse_err(
                    line_no,
                    "attributes",
                    format!("expected {} attribute columns, found {}", names.len(), values.len()),
                ));
            }
            let attrs = names
                .iter()
                .zip(values)
                .map(|(n, v)| (n.to_string(), v.trim().to_string()))
                .collect();
            table.insert(item_id, attrs);
        }
        Ok(table)
    }
}

fn parse_err(line: usize, field: &'static str, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        line,
        field,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct JsonRating {
    user_id: serde_json::Value,
    item_id: serde_json::Value,
    rating: serde_json::Value,
    timestamp: serde_json::Value,
}

fn json_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a rating log into records, one per non-blank row, in input order.
///
/// `Normalized` sources ignore `layout` and `attributes`.
pub fn load_interactions<R: BufRead>(
    source: R,
    kind: DatasetKind,
    layout: &RecordLayout,
    attributes: &AttributeTable,
    map: &RatingMap,
) -> Result<Vec<InteractionRecord>> {
    map.validate()?;
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if kind == DatasetKind::Normalized {
            let rec: InteractionRecord = serde_json::from_str(&line)
                .map_err(|e| parse_err(line_no, "record", e.to_string()))?;
            if rec.attributes.is_empty() {
                return Err(parse_err(line_no, "attributes", "empty"));
            }
            let expected = map_rating_to_sentiment(rec.rating, map)
                .map_err(|e| parse_err(line_no, "rating", e.to_string()))?;
            if expected != rec.sentiment {
                return Err(parse_err(
                    line_no,
                    "sentiment",
                    format!("`{}` inconsistent with rating {}", rec.sentiment, rec.rating),
                ));
            }
            out.push(rec);
            continue;
        }
        let (user_id, item_id, rating_raw, ts_raw) = match layout {
            RecordLayout::Delimited { delimiter, header } => {
                if *header && idx == 0 {
                    continue;
                }
                let cols: Vec<&str> = line.split(delimiter.as_str()).collect();
                let field = |i: usize, name: &'static str| -> Result<String> {
                    cols.get(i)
                        .map(|s| s.trim().to_string())
                        .ok_or_else(|| parse_err(line_no, name, "missing column"))
                };
                (
                    field(0, "user_id")?,
                    field(1, "item_id")?,
                    field(2, "rating")?,
                    field(3, "timestamp")?,
                )
            }
            RecordLayout::JsonLines => {
                let raw: JsonRating = serde_json::from_str(&line)
                    .map_err(|e| parse_err(line_no, "record", e.to_string()))?;
                (
                    json_text(&raw.user_id),
                    json_text(&raw.item_id),
                    json_text(&raw.rating),
                    json_text(&raw.timestamp),
                )
            }
        };
        if user_id.is_empty() {
            return Err(parse_err(line_no, "user_id", "empty"));
        }
        if item_id.is_empty() {
            return Err(parse_err(line_no, "item_id", "empty"));
        }
        let rating: f64 = rating_raw
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| parse_err(line_no, "rating", format!("not a number: `{rating_raw}`")))?;
        let timestamp: u64 = ts_raw.parse().map_err(|_| {
            parse_err(
                line_no,
                "timestamp",
                format!("not a non-negative integer: `{ts_raw}`"),
            )
        })?;
        let sentiment = map_rating_to_sentiment(rating, map)
            .map_err(|e| parse_err(line_no, "rating", e.to_string()))?;
        let attrs = attributes
            .get(&item_id)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| parse_err(line_no, "item_id", format!("no attributes for item `{item_id}`")))?
            .to_vec();
        out.push(InteractionRecord {
            user_id,
            item_id,
            timestamp,
            rating,
            sentiment,
            attributes: attrs,
        });
    }
    Ok(out)
}

/// Writes records as one JSON object per line.
pub fn write_records<W: Write>(mut sink: W, records: &[InteractionRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut sink, rec).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Users with strictly more than `min_exclusive` interactions.
pub fn filter_users(records: &[InteractionRecord], min_exclusive: usize) -> BTreeSet<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.user_id.as_str()).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(_, n)| *n > min_exclusive)
        .map(|(u, _)| u.to_string())
        .collect()
}

/// One user's records, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTimeline {
    pub user_id: String,
    pub records: Vec<InteractionRecord>,
}

impl UserTimeline {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn build_timeline(records: Vec<InteractionRecord>) -> Result<UserTimeline> {
    let user_id = records
        .first()
        .map(|r| r.user_id.clone())
        .ok_or(CorpusError::EmptyTimeline)?;
    if let Some(other) = records.iter().find(|r| r.user_id != user_id) {
        return Err(CorpusError::MixedUsers {
            expected: user_id,
            found: other.user_id.clone(),
        });
    }
    let mut records = records;
    // stable: equal timestamps keep input order
    records.sort_by_key(|r| std::cmp::Reverse(r.timestamp));
    Ok(UserTimeline { user_id, records })
}

/// Groups records by user and builds every timeline, keyed by user id.
pub fn build_timelines(records: &[InteractionRecord]) -> BTreeMap<String, UserTimeline> {
    let mut by_user: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.clone()).or_default().push(r.clone());
    }
    by_user
        .into_iter()
        .map(|(u, recs)| {
            let tl = build_timeline(recs).expect("grouped by user, non-empty");
            (u, tl)
        })
        .collect()
}

/// Recent / long history around a prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySplit {
    /// `K` records directly before the target, most recent first.
    pub recent: Vec<InteractionRecord>,
    /// `W` records before `recent`, most recent first.
    pub long: Vec<InteractionRecord>,
}

impl HistorySplit {
    pub fn k(&self) -> usize {
        self.recent.len()
    }

    pub fn w(&self) -> usize {
        self.long.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub user_id: String,
    pub target: InteractionRecord,
    pub truth: SentimentLabel,
    pub split: HistorySplit,
}

pub fn make_eval_instance(timeline: &UserTimeline, k: usize, w: usize) -> Result<EvalInstance> {
    let required = 1 + k + w;
    if timeline.len() < required {
        return Err(CorpusError::InsufficientHistory {
            user_id: timeline.user_id.clone(),
            required,
            available: timeline.len(),
        });
    }
    let recs = &timeline.records;
    let target = recs[0].clone();
    Ok(EvalInstance {
        user_id: timeline.user_id.clone(),
        truth: target.sentiment,
        target,
        split: HistorySplit {
            recent: recs[1..=k].to_vec(),
            long: recs[k + 1..required].to_vec(),
        },
    })
}

/// Seeded uniform sample of `n` users without replacement.
///
/// The result depends only on the order of `eligible`, `n` and `seed`.
pub fn sample_users(eligible: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > eligible.len() {
        return Err(CorpusError::SampleSize {
            requested: n,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect())
}

/// Assigns a window length to each sampled user, round-robin over the groups
/// of `partition` and skipping groups that are already full.
pub fn assign_windows(users: &[String], partition: &[(usize, usize)]) -> Result<Vec<(String, usize)>> {
    let capacity: usize = partition.iter().map(|(n, _)| n).sum();
    if capacity != users.len() {
        return Err(CorpusError::Partition {
            partition: capacity,
            requested: users.len(),
        });
    }
    let mut remaining: Vec<usize> = partition.iter().map(|(n, _)| *n).collect();
    let mut group = 0;
    let mut out = Vec::with_capacity(users.len());
    for user in users {
        while remaining[group] == 0 {
            group = (group + 1) % partition.len();
        }
        remaining[group] -= 1;
        out.push((user.clone(), partition[group].1));
        group = (group + 1) % partition.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_rows: usize,
    pub n_train_rows: usize,
    pub n_test_rows: usize,
}

/// Distinct user/item counts and row count. Train/test rows are filled in
/// by the pipeline once the split exists.
pub fn stats(records: &[InteractionRecord]) -> DatasetStats {
    let users: BTreeSet<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    let items: BTreeSet<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
    DatasetStats {
        n_users: users.len(),
        n_items: items.len(),
        n_rows: records.len(),
        ..DatasetStats::default()
    }
}
