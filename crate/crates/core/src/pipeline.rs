//! Runs the stages against a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig, RefMode};
use crate::corpus::{
    assign_windows, build_timelines, filter_users, load_interactions, make_eval_instance, sample_users, write_records,
    AttributeTable, DatasetKind, EvalInstance, SentimentLabel, UserTimeline,
};
use crate::dpocore::{dot, render_trace, text_batch, train, ToyScorer};
use crate::evaluate::{
    read_outcomes, render_report, run_condition, sort_outcomes, write_outcomes, Condition, EvaluateError,
    MetricsReport, PredictionOutcome, ProfileIndex, ProfileSource,
};
use crate::explore::{explore_profiles, read_samples, sort_samples, write_samples, ExploreConfig, ExploreError, ProfileSample};
use crate::modelgate::{CompletionCache, Gateway, HttpTransport};
use crate::pairgen::{build_all_pairs, export_to, group_pools, read_pairs, read_pairwise, to_dpo_examples, write_pairs, ExportFormat};
use crate::runstore::{ArtifactRecord, RunError, RunStore, Stage, StageState};

pub const INTERACTIONS: &str = "interactions.records";
pub const SPLIT: &str = "split.json";
pub const PROFILES: &str = "profiles.samples";
pub const PAIRS_RECORDS: &str = "pairs.records";
pub const PAIRS_DPO: &str = "pairs.dpo";
pub const SCORER: &str = "scorer.bin";
pub const TRACE: &str = "trace.txt";
pub const TRAIN_CONDITION: &str = "train";

pub fn outcomes_name(condition: &str) -> String {
    format!("outcomes.{condition}")
}

pub fn metrics_name(condition: &str) -> String {
    format!("metrics.{condition}")
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage `{stage}`: {message}")]
    StageConfig { stage: Stage, message: String },
    #[error("run `{0}` exists with a different config")]
    ConfigChanged(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("stage `{stage}`: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stage `{stage}`: every model request failed ({message})")]
    Transport { stage: Stage, message: String },
}

impl PipelineError {
    /// 2 configuration, 3 stage, 4 transport exhaustion.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::StageConfig { .. } | Self::ConfigChanged(_) => 2,
            Self::Run(RunError::BadRunId(_) | RunError::ConfigMismatch) => 2,
            Self::Transport { .. } => 4,
            Self::Run(_) | Self::Stage { .. } => 3,
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

impl From<(Stage, ExploreError)> for PipelineError {
    fn from((stage, e): (Stage, ExploreError)) -> Self {
        match e {
            ExploreError::Config(_) | ExploreError::Window { .. } => Self::StageConfig {
                stage,
                message: e.to_string(),
            },
            other => stage_err(stage)(&other),
        }
    }
}

impl From<(Stage, EvaluateError)> for PipelineError {
    fn from((stage, e): (Stage, EvaluateError)) -> Self {
        match e {
            EvaluateError::Config { .. } | EvaluateError::Temperature(_) => Self::StageConfig {
                stage,
                message: e.to_string(),
            },
            other => stage_err(stage)(&other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Completed,
    /// Already done; nothing was touched.
    AlreadyDone,
    Skipped,
}

/// Users chosen at ingest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitArtifact {
    /// Users with more than the minimum number of interactions.
    pub retained: usize,
    /// Retained users long enough for every configured window.
    pub eligible: usize,
    pub test_users: Vec<String>,
    pub train_users: Vec<(String, usize)>,
}

struct Corpus {
    timelines: BTreeMap<String, UserTimeline>,
    split: SplitArtifact,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    gate: Gateway,
    force: bool,
}

fn to_bytes<E>(f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<Vec<u8>, E> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn json_line<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, gate: Gateway) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self { cfg, gate, force: false })
    }

    /// The gateway a config asks for: on-disk cache if configured, HTTP
    /// transport, `parallel` in-flight requests per endpoint.
    pub fn gateway_for(cfg: &PipelineConfig, parallel: usize) -> Gateway {
        let cache = match &cfg.cache_dir {
            Some(dir) => CompletionCache::on_disk(dir),
            None => CompletionCache::in_memory(),
        };
        Gateway::new(cache, Arc::new(HttpTransport::default())).with_concurrency(parallel)
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn default_run_id(&self) -> String {
        format!("run-{}", &self.cfg.digest()[..12])
    }

    /// Opens the run if it exists with the same config, else creates it.
    pub fn open_or_init(&self, run_id: Option<&str>) -> Result<RunStore, PipelineError> {
        let id = run_id.map_or_else(|| self.default_run_id(), str::to_string);
        match RunStore::open_run(&self.cfg.output, &id) {
            Ok(store) => {
                if store.manifest().config_digest != self.cfg.digest() {
                    return Err(PipelineError::ConfigChanged(id));
                }
                Ok(store)
            }
            Err(RunError::NotFound(_)) => Ok(RunStore::init_run(&self.cfg.output, &id, &self.cfg.dump(), self.cfg.seeds())?),
            Err(e) => Err(e.into()),
        }
    }

    pub fn run_all(&self, store: &mut RunStore) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            self.run_stage(store, stage)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, store: &mut RunStore, stage: Stage) -> Result<StageStatus, PipelineError> {
        match store.begin(stage, self.force) {
            Ok(()) => {}
            Err(RunError::Immutable { .. }) => {
                log::info!("stage `{stage}` already done");
                return Ok(StageStatus::AlreadyDone);
            }
            Err(e) => return Err(e.into()),
        }
        log::info!("stage `{stage}` starting");
        let result = match stage {
            Stage::Ingest => self.ingest(store),
            Stage::Explore => self.explore(store),
            Stage::Evaluate => self.evaluate(store),
            Stage::Pairs => self.pairs(store),
            Stage::Export => self.export(store),
            Stage::ToyDpo => self.toy_dpo(store),
        };
        if let Err(e) = &result {
            if let Err(save) = store.fail(stage, e.to_string()) {
                log::error!("could not record failure of `{stage}`: {save}");
            }
        }
        result
    }

    fn ingest(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::Ingest;
        let err = stage_err(st);
        let d = &self.cfg.dataset;
        let s = &self.cfg.split;
        let attrs = match (&d.attributes, d.kind) {
            (_, DatasetKind::Normalized) | (None, _) => AttributeTable::default(),
            (Some(path), kind) => {
                let f = File::open(path).map_err(|e| err(&e))?;
                AttributeTable::load(BufReader::new(f), kind, &d.attribute_delimiter).map_err(|e| err(&e))?
            }
        };
        let f = File::open(&d.interactions).map_err(|e| err(&e))?;
        let records =
            load_interactions(BufReader::new(f), d.kind, &d.layout, &attrs, &d.rating_map).map_err(|e| err(&e))?;
        let retained = filter_users(&records, s.min_history_exclusive);
        let records: Vec<_> = records.into_iter().filter(|r| retained.contains(&r.user_id)).collect();
        let timelines = build_timelines(&records);
        let required = s.required_history();
        let eligible: Vec<String> = retained
            .iter()
            .filter(|u| timelines[*u].len() >= required)
            .cloned()
            .collect();
        if eligible.len() < retained.len() {
            log::warn!(
                "{} of {} retained users have fewer than {required} interactions and cannot be sampled",
                retained.len() - eligible.len(),
                retained.len()
            );
        }
        let sampled = sample_users(&eligible, s.test_users + s.train_users, s.seed).map_err(|e| err(&e))?;
        let (test, train) = sampled.split_at(s.test_users);
        let train = assign_windows(train, &s.window_partition).map_err(|e| err(&e))?;
        let split = SplitArtifact {
            retained: retained.len(),
            eligible: eligible.len(),
            test_users: test.to_vec(),
            train_users: train,
        };
        let rec_bytes = to_bytes(|b| write_records(b, &records)).map_err(|e| err(&e))?;
        let a = store.put_artifact(st, INTERACTIONS, &rec_bytes, records.len())?;
        let b = store.put_artifact(st, SPLIT, &json_line(&split), split.test_users.len() + split.train_users.len())?;
        store.complete(st, vec![a, b])?;
        Ok(StageStatus::Completed)
    }

    fn load_corpus(&self, store: &RunStore, stage: Stage) -> Result<Corpus, PipelineError> {
        let err = stage_err(stage);
        let bytes = store.get_artifact(Stage::Ingest, INTERACTIONS)?;
        let records = load_interactions(
            bytes.as_slice(),
            DatasetKind::Normalized,
            &self.cfg.dataset.layout,
            &AttributeTable::default(),
            &self.cfg.dataset.rating_map,
        )
        .map_err(|e| err(&e))?;
        let split: SplitArtifact =
            serde_json::from_slice(&store.get_artifact(Stage::Ingest, SPLIT)?).map_err(|e| err(&e))?;
        Ok(Corpus {
            timelines: build_timelines(&records),
            split,
        })
    }

    fn instances<'a>(
        &self,
        corpus: &Corpus,
        users: impl Iterator<Item = (&'a str, usize)>,
        stage: Stage,
    ) -> Result<Vec<EvalInstance>, PipelineError> {
        users
            .map(|(u, w)| {
                let tl = corpus.timelines.get(u).ok_or_else(|| PipelineError::Stage {
                    stage,
                    message: format!("user `{u}` missing from the corpus"),
                })?;
                make_eval_instance(tl, self.cfg.split.k, w).map_err(|e| stage_err(stage)(&e))
            })
            .collect()
    }

    fn train_instances(&self, corpus: &Corpus, stage: Stage) -> Result<Vec<EvalInstance>, PipelineError> {
        self.instances(corpus, corpus.split.train_users.iter().map(|(u, w)| (u.as_str(), *w)), stage)
    }

    fn test_instances(&self, corpus: &Corpus, w: usize, stage: Stage) -> Result<Vec<EvalInstance>, PipelineError> {
        self.instances(corpus, corpus.split.test_users.iter().map(|u| (u.as_str(), w)), stage)
    }

    fn explore(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::Explore;
        let corpus = self.load_corpus(store, st)?;
        let mut cfg = self.cfg.explore.clone();
        cfg.window_partition = self.cfg.split.window_partition.clone();
        let train = self.train_instances(&corpus, st)?;
        let mut samples = if train.is_empty() {
            Vec::new()
        } else {
            explore_profiles(&train, &cfg, &self.gate).map_err(|e| (st, e))?
        };
        // test users only need the designated generator's designated sample
        let designated = cfg
            .models
            .iter()
            .find(|m| m.model_id == self.cfg.evaluate.designated_model)
            .cloned()
            .expect("validated config names an explore model");
        let test_cfg = ExploreConfig {
            models: vec![designated],
            samples_per_model: self.cfg.evaluate.designated_sample + 1,
            temperature: cfg.temperature,
            window_partition: Vec::new(),
            seed: cfg.seed,
        };
        for &w in &self.cfg.split.test_windows {
            let test = self.test_instances(&corpus, w, st)?;
            samples.extend(explore_profiles(&test, &test_cfg, &self.gate).map_err(|e| (st, e))?);
        }
        sort_samples(&mut samples);
        if !samples.is_empty() && samples.iter().all(|s| !s.is_ok()) {
            return Err(PipelineError::Transport {
                stage: st,
                message: format!("all {} profile samples missing", samples.len()),
            });
        }
        let bytes = to_bytes(|b| write_samples(b, &samples)).map_err(|e| stage_err(st)(&e))?;
        let a = store.put_artifact(st, PROFILES, &bytes, samples.len())?;
        store.complete(st, vec![a])?;
        Ok(StageStatus::Completed)
    }

    fn load_samples(&self, store: &RunStore, stage: Stage) -> Result<Vec<ProfileSample>, PipelineError> {
        read_samples(store.get_artifact(Stage::Explore, PROFILES)?.as_slice()).map_err(|e| stage_err(stage)(&e))
    }

    /// Test conditions in report order.
    pub fn conditions(&self) -> Vec<Condition> {
        let k = self.cfg.split.k;
        let e = &self.cfg.evaluate;
        std::iter::once(Condition::history_only(k))
            .chain(
                self.cfg
                    .split
                    .test_windows
                    .iter()
                    .map(|&w| Condition::with_profile(k, w, &e.designated_model, e.designated_sample)),
            )
            .collect()
    }

    fn evaluate(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::Evaluate;
        let err = stage_err(st);
        let corpus = self.load_corpus(store, st)?;
        let samples = self.load_samples(store, st)?;
        let index = ProfileIndex::new(&samples);
        let test = self.test_instances(&corpus, 0, st)?;
        let train = self.train_instances(&corpus, st)?;

        let mut predictor = self.cfg.predictor.clone();
        if let Some(mock) = predictor.mock.as_mut().filter(|m| m.uses_truth()) {
            let truth: BTreeMap<String, SentimentLabel> =
                test.iter().chain(&train).map(|i| (i.user_id.clone(), i.truth)).collect();
            mock.set_truth(truth);
        }

        let mut artifacts = Vec::new();
        let mut all: Vec<PredictionOutcome> = Vec::new();
        let put = |store: &mut RunStore, id: &str, outs: &[PredictionOutcome], report: Option<&MetricsReport>| -> Result<Vec<ArtifactRecord>, PipelineError> {
            let bytes = to_bytes(|b| write_outcomes(b, outs)).map_err(|e| err(&e))?;
            let mut recs = vec![store.put_artifact(st, &outcomes_name(id), &bytes, outs.len())?];
            if let Some(r) = report {
                recs.push(store.put_artifact(st, &metrics_name(id), &json_line(r), 1)?);
            }
            Ok(recs)
        };
        for c in self.conditions() {
            let (outs, report) =
                run_condition(&c, &test, &index, &predictor, &self.gate, self.cfg.evaluate.seed).map_err(|e| (st, e))?;
            artifacts.extend(put(store, &c.id, &outs, Some(&report))?);
            all.extend(outs);
        }

        let mut train_outs = Vec::new();
        for w in self.cfg.split.train_windows() {
            let group: Vec<EvalInstance> = train.iter().filter(|i| i.split.w() == w).cloned().collect();
            if group.is_empty() {
                continue;
            }
            let c = Condition {
                id: TRAIN_CONDITION.into(),
                k: self.cfg.split.k,
                window: Some(w),
                profile_source: ProfileSource::Each,
            };
            let (outs, _) =
                run_condition(&c, &group, &index, &predictor, &self.gate, self.cfg.evaluate.seed).map_err(|e| (st, e))?;
            train_outs.extend(outs);
        }
        sort_outcomes(&mut train_outs);
        let train_report = if train_outs.is_empty() {
            None
        } else {
            Some(crate::evaluate::metrics_report(TRAIN_CONDITION, &train_outs).map_err(|e| (st, e))?)
        };
        artifacts.extend(put(store, TRAIN_CONDITION, &train_outs, train_report.as_ref())?);
        all.extend(train_outs);

        let transport = |o: &PredictionOutcome| o.note.as_deref().is_some_and(|n| n.starts_with("transport"));
        if !all.is_empty() && all.iter().all(transport) {
            return Err(PipelineError::Transport {
                stage: st,
                message: format!("all {} predictions failed", all.len()),
            });
        }
        store.complete(st, artifacts)?;
        Ok(StageStatus::Completed)
    }

    fn skip_rest(&self, store: &mut RunStore, from: Stage, note: &str) -> Result<StageStatus, PipelineError> {
        for s in Stage::ALL.into_iter().filter(|s| *s >= from) {
            store.skip(s, note)?;
        }
        log::info!("{note}; skipping stages from `{from}` on");
        Ok(StageStatus::Skipped)
    }

    fn pairs(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::Pairs;
        let err = stage_err(st);
        let corpus = self.load_corpus(store, st)?;
        let train_users: BTreeSet<&str> = corpus.split.train_users.iter().map(|(u, _)| u.as_str()).collect();
        let samples: Vec<ProfileSample> = self
            .load_samples(store, st)?
            .into_iter()
            .filter(|s| train_users.contains(s.user_id.as_str()))
            .collect();
        let outcomes = read_outcomes(store.get_artifact(Stage::Evaluate, &outcomes_name(TRAIN_CONDITION))?.as_slice())
            .map_err(|e| err(&e))?;
        let groups = group_pools(&samples, &outcomes).map_err(|e| err(&e))?;
        let pairs = build_all_pairs(&groups, &self.cfg.pairing).map_err(|e| PipelineError::StageConfig {
            stage: st,
            message: e.to_string(),
        })?;
        let bytes = to_bytes(|b| write_pairs(b, &pairs)).map_err(|e| err(&e))?;
        let a = store.put_artifact(st, PAIRS_RECORDS, &bytes, pairs.len())?;
        store.complete(st, vec![a])?;
        if pairs.is_empty() {
            self.skip_rest(store, Stage::Export, "no preference pairs")?;
        }
        Ok(StageStatus::Completed)
    }

    fn export(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::Export;
        let err = stage_err(st);
        let corpus = self.load_corpus(store, st)?;
        let pairs = read_pairs(store.get_artifact(Stage::Pairs, PAIRS_RECORDS)?.as_slice()).map_err(|e| err(&e))?;
        let examples = to_dpo_examples(&pairs, &corpus.timelines, self.cfg.split.k).map_err(|e| err(&e))?;
        if examples.is_empty() {
            return self.skip_rest(store, st, "no exportable preference pairs");
        }
        let bytes = to_bytes(|b| export_to(&examples, ExportFormat::PairwiseRecords, b).map(|_| ())).map_err(|e| err(&e))?;
        let a = store.put_artifact(st, PAIRS_DPO, &bytes, examples.len())?;
        store.complete(st, vec![a])?;
        Ok(StageStatus::Completed)
    }

    fn toy_dpo(&self, store: &mut RunStore) -> Result<StageStatus, PipelineError> {
        let st = Stage::ToyDpo;
        let err = stage_err(st);
        let dpo = &self.cfg.dpo;
        let records = read_pairwise(store.get_artifact(Stage::Export, PAIRS_DPO)?.as_slice()).map_err(|e| err(&e))?;
        let texts: Vec<(&str, &str)> = records.iter().map(|r| (r.chosen.as_str(), r.rejected.as_str())).collect();
        let mut batch = text_batch(&texts, dpo.feature_dim, dpo.beta);
        if let RefMode::Scorer(path) = &dpo.ref_mode {
            let reference = ToyScorer::read_from(File::open(path).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
            if reference.feature_dim != dpo.feature_dim {
                return Err(PipelineError::StageConfig {
                    stage: st,
                    message: format!(
                        "reference scorer has dimension {}, config says {}",
                        reference.feature_dim, dpo.feature_dim
                    ),
                });
            }
            let deltas = batch.pairs.iter().map(|(p, m)| dot(&reference.theta, p) - dot(&reference.theta, m)).collect();
            batch = batch.with_reference(deltas);
        }
        let (scorer, trace) = train(&batch, &dpo.train).map_err(|e| err(&e))?;
        let a = store.put_artifact(st, SCORER, &scorer.to_bytes(), scorer.feature_dim)?;
        let b = store.put_artifact(st, TRACE, render_trace(&trace).as_bytes(), trace.len())?;
        store.complete(st, vec![a, b])?;
        Ok(StageStatus::Completed)
    }

    /// Condition table plus pair and training summaries.
    pub fn report(&self, store: &RunStore) -> Result<String, PipelineError> {
        let err = stage_err(Stage::Evaluate);
        let mut reports = Vec::new();
        for c in self.conditions() {
            let bytes = store.get_artifact(Stage::Evaluate, &metrics_name(&c.id))?;
            reports.push(serde_json::from_slice::<MetricsReport>(&bytes).map_err(|e| err(&e))?);
        }
        let mut out = render_report(&reports);
        let mut push = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        match store.manifest().state(Stage::Pairs) {
            StageState::Complete { artifacts } => {
                let n = artifacts.iter().find(|a| a.path == PAIRS_RECORDS).map_or(0, |a| a.n_records);
                push(format!("preference pairs: {n}"));
            }
            _ => push("preference pairs: not built".into()),
        }
        if let Ok(bytes) = store.get_artifact(Stage::ToyDpo, TRACE) {
            if let Some(last) = String::from_utf8_lossy(&bytes).lines().last() {
                let cols: Vec<&str> = last.split_whitespace().collect();
                if let [epoch, loss, acc] = cols.as_slice() {
                    let loss: f64 = loss.parse().unwrap_or(f64::NAN);
                    let acc: f64 = acc.parse().unwrap_or(f64::NAN);
                    push(format!("toy scorer after {epoch} epochs: loss {loss:.4}, pairwise accuracy {acc:.4}"));
                }
            }
        }
        Ok(out)
    }
}
