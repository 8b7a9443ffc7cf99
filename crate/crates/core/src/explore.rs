//! Profile exploration: `N` high-temperature samples per generator model
//! for every instance's long-history window.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::modelgate::{cache_key, CompletionRequest, Gateway, ModelSpec};
use crate::prompts::{render_history_lines, render_profile_prompt, HistoryOrder, PromptError};

pub const DEFAULT_EXPLORE_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_SAMPLES_PER_MODEL: u32 = 10;

#[derive(Debug, thiserror::Error)]
pub enum ExploreError {
    #[error("explore config: {0}")]
    Config(String),
    #[error("user `{user_id}`: long history has {found} records, window partition expects one of {expected:?}")]
    Window {
        user_id: String,
        found: usize,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Ok,
    Missing,
}

/// One generated profile. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub user_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub window_w: usize,
    pub text: String,
    /// Hex digest of the completion cache key that produced `text`.
    pub prompt_digest: String,
    pub status: SampleStatus,
}

impl ProfileSample {
    pub fn is_ok(&self) -> bool {
        self.status == SampleStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_samples")]
    pub samples_per_model: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// `(group_size, W)` groups; empty means any window is accepted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub window_partition: Vec<(usize, usize)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> u32 {
    DEFAULT_SAMPLES_PER_MODEL
}

fn default_temperature() -> f64 {
    DEFAULT_EXPLORE_TEMPERATURE
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.models.is_empty() {
            return Err(ExploreError::Config("no generator models".into()));
        }
        if self.samples_per_model == 0 {
            return Err(ExploreError::Config("samples_per_model must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(ExploreError::Config("exploration temperature must be positive".into()));
        }
        let mut ids: Vec<&str> = self.models.iter().map(|m| m.model_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(ExploreError::Config("duplicate generator model_id".into()));
        }
        for m in &self.models {
            m.validate().map_err(|e| ExploreError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// The request that generates sample `sample_index` of `model` for
/// `instance`. Rebuilding it reproduces the sample's `prompt_digest`.
pub fn profile_request(
    instance: &EvalInstance,
    sample_index: u32,
    cfg: &ExploreConfig,
) -> Result<CompletionRequest, PromptError> {
    let history = render_history_lines(&instance.split.long, HistoryOrder::EarliestFirst)?;
    let prompt = render_profile_prompt(&history)?
        .for_user(&instance.user_id)
        .with_window(instance.split.w());
    Ok(CompletionRequest {
        prompt,
        temperature: cfg.temperature,
        sample_index,
        seed: cfg.seed,
    })
}

pub fn explore_profiles(
    instances: &[EvalInstance],
    cfg: &ExploreConfig,
    gate: &Gateway,
) -> Result<Vec<ProfileSample>, ExploreError> {
    cfg.validate()?;
    let allowed: Vec<usize> = cfg.window_partition.iter().map(|(_, w)| *w).collect();
    for inst in instances {
        if !allowed.is_empty() && !allowed.contains(&inst.split.w()) {
            return Err(ExploreError::Window {
                user_id: inst.user_id.clone(),
                found: inst.split.w(),
                expected: allowed,
            });
        }
    }
    let jobs: Vec<(&EvalInstance, &ModelSpec, u32)> = instances
        .iter()
        .flat_map(|inst| {
            cfg.models
                .iter()
                .flat_map(move |m| (0..cfg.samples_per_model).map(move |n| (inst, m, n)))
        })
        .collect();
    let mut samples = jobs
        .par_iter()
        .map(|(inst, model, n)| -> Result<ProfileSample, ExploreError> {
            let req = profile_request(inst, *n, cfg)?;
            let digest = cache_key(model, &req).hex();
            let (text, status) = match gate.complete(model, &req) {
                Ok(res) if !res.text.trim().is_empty() => (res.text, SampleStatus::Ok),
                Ok(_) => {
                    log::warn!("{}/{}#{}: empty profile", inst.user_id, model.model_id, n);
                    (String::new(), SampleStatus::Missing)
                }
                Err(e) => {
                    log::warn!("{}/{}#{}: {e}", inst.user_id, model.model_id, n);
                    (String::new(), SampleStatus::Missing)
                }
            };
            Ok(ProfileSample {
                user_id: inst.user_id.clone(),
                model_id: model.model_id.clone(),
                sample_index: *n,
                window_w: inst.split.w(),
                text,
                prompt_digest: digest,
                status,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    sort_samples(&mut samples);
    Ok(samples)
}

/// Canonical order: user, model, sample index, then window.
pub fn sort_samples(samples: &mut [ProfileSample]) {
    samples.sort_by(|a, b| {
        (&a.user_id, &a.model_id, a.sample_index, a.window_w).cmp(&(&b.user_id, &b.model_id, b.sample_index, b.window_w))
    });
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OkMissing {
    pub ok: usize,
    pub missing: usize,
}

impl OkMissing {
    fn add(&mut self, s: &ProfileSample) {
        match s.status {
            SampleStatus::Ok => self.ok += 1,
            SampleStatus::Missing => self.missing += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PoolSummary {
    pub per_user: BTreeMap<String, OkMissing>,
    pub per_model: BTreeMap<String, OkMissing>,
}

pub fn pool_summary(samples: &[ProfileSample]) -> PoolSummary {
    let mut out = PoolSummary::default();
    for s in samples {
        out.per_user.entry(s.user_id.clone()).or_default().add(s);
        out.per_model.entry(s.model_id.clone()).or_default().add(s);
    }
    out
}

pub fn write_samples<W: Write>(mut sink: W, samples: &[ProfileSample]) -> Result<(), ExploreError> {
    for s in samples {
        serde_json::to_writer(&mut sink, s).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(source: R) -> Result<Vec<ProfileSample>, ExploreError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ExploreError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
