//! Pipeline configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetKind, RatingMap, RecordLayout};
use crate::dpocore::{TrainConfig, DEFAULT_FEATURE_DIM};
use crate::explore::ExploreConfig;
use crate::modelgate::ModelSpec;
use crate::pairgen::PairingPolicy;
use crate::runstore::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub interactions: PathBuf,
    /// Item sidecar; not used for normalized sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<PathBuf>,
    #[serde(default = "default_layout")]
    pub layout: RecordLayout,
    #[serde(default = "default_delimiter")]
    pub attribute_delimiter: String,
    #[serde(default)]
    pub rating_map: RatingMap,
}

fn default_layout() -> RecordLayout {
    RecordLayout::Delimited {
        delimiter: "::".into(),
        header: false,
    }
}

fn default_delimiter() -> String {
    "::".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_min_history")]
    pub min_history_exclusive: usize,
    pub test_users: usize,
    pub train_users: usize,
    /// `(group_size, W)` for training users.
    #[serde(default)]
    pub window_partition: Vec<(usize, usize)>,
    #[serde(default = "default_test_windows")]
    pub test_windows: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    10
}

fn default_min_history() -> usize {
    70
}

fn default_test_windows() -> Vec<usize> {
    vec![30, 50, 70]
}

impl SplitConfig {
    /// Records a user needs to serve at every configured window.
    pub fn required_history(&self) -> usize {
        let w = self
            .window_partition
            .iter()
            .map(|(_, w)| *w)
            .chain(self.test_windows.iter().copied())
            .max()
            .unwrap_or(0);
        1 + self.k + w
    }

    pub fn train_windows(&self) -> Vec<usize> {
        let mut ws: Vec<usize> = self.window_partition.iter().map(|(_, w)| *w).collect();
        ws.sort_unstable();
        ws.dedup();
        ws
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Generator whose profiles the test conditions use.
    pub designated_model: String,
    #[serde(default)]
    pub designated_sample: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// Reference score differences are all zero.
    #[default]
    None,
    /// Differences come from a previously trained scorer file.
    Scorer(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub ref_mode: RefMode,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_beta() -> f64 {
    1.0
}

fn default_feature_dim() -> usize {
    DEFAULT_FEATURE_DIM
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            ref_mode: RefMode::None,
            feature_dim: DEFAULT_FEATURE_DIM,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root directory holding one subdirectory per run.
    pub output: PathBuf,
    /// On-disk completion cache; in-memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub explore: ExploreConfig,
    pub evaluate: EvaluateConfig,
    pub predictor: ModelSpec,
    #[serde(default)]
    pub pairing: PairingPolicy,
    #[serde(default)]
    pub dpo: DpoConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output);
        if let Some(c) = &mut self.cache_dir {
            resolve(base, c);
        }
        resolve(base, &mut self.dataset.interactions);
        if let Some(a) = &mut self.dataset.attributes {
            resolve(base, a);
        }
        if let RefMode::Scorer(p) = &mut self.dpo.ref_mode {
            resolve(base, p);
        }
    }

    /// Canonical TOML text; parsing it back yields an equal config.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.dump().as_bytes())
    }

    pub fn all_models_mut(&mut self) -> impl Iterator<Item = &mut ModelSpec> {
        self.explore.models.iter_mut().chain(std::iter::once(&mut self.predictor))
    }

    /// Replaces every model with its declared mock.
    pub fn force_mock(&mut self) -> Result<(), ConfigError> {
        for m in self.all_models_mut() {
            let id = m.model_id.clone();
            m.force_mock().map_err(|e| field(&format!("model `{id}`"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn override_seeds(&mut self, seed: u64) {
        self.split.seed = seed;
        self.explore.seed = seed;
        self.evaluate.seed = seed;
        self.pairing.seed = seed;
        self.dpo.train.seed = seed;
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("split".to_string(), self.split.seed),
            ("explore".to_string(), self.explore.seed),
            ("evaluate".to_string(), self.evaluate.seed),
            ("pairing".to_string(), self.pairing.seed),
            ("dpo".to_string(), self.dpo.train.seed),
        ])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if !d.interactions.is_file() {
            return Err(field("dataset.interactions", format!("{} does not exist", d.interactions.display())));
        }
        if d.kind != DatasetKind::Normalized {
            match &d.attributes {
                Some(a) if a.is_file() => {}
                Some(a) => return Err(field("dataset.attributes", format!("{} does not exist", a.display()))),
                None => return Err(field("dataset.attributes", "required for this dataset kind")),
            }
        }
        if let RecordLayout::Delimited { delimiter, .. } = &d.layout {
            if delimiter.is_empty() {
                return Err(field("dataset.layout.delimiter", "empty"));
            }
        }
        if d.attribute_delimiter.is_empty() {
            return Err(field("dataset.attribute_delimiter", "empty"));
        }
        d.rating_map.validate().map_err(|e| field("dataset.rating_map", e.to_string()))?;

        let s = &self.split;
        if s.k < 1 {
            return Err(field("split.k", "must be at least 1"));
        }
        if s.test_users < 1 {
            return Err(field("split.test_users", "must be at least 1"));
        }
        if s.test_windows.is_empty() || s.test_windows.contains(&0) {
            return Err(field("split.test_windows", "need at least one positive window"));
        }
        let capacity: usize = s.window_partition.iter().map(|(n, _)| n).sum();
        if capacity != s.train_users {
            return Err(field(
                "split.window_partition",
                format!("groups hold {capacity} users, train_users is {}", s.train_users),
            ));
        }
        if s.window_partition.iter().any(|(_, w)| *w == 0) {
            return Err(field("split.window_partition", "window lengths must be positive"));
        }

        self.explore.validate().map_err(|e| field("explore", e.to_string()))?;
        if !self.explore.models.iter().any(|m| m.model_id == self.evaluate.designated_model) {
            return Err(field(
                "evaluate.designated_model",
                format!("`{}` is not an explore model", self.evaluate.designated_model),
            ));
        }
        self.predictor.validate().map_err(|e| field("predictor", e.to_string()))?;
        if self.predictor.temperature != 0.0 {
            return Err(field("predictor.temperature", "prediction runs at temperature 0"));
        }
        self.pairing.validate().map_err(|e| field("pairing", e.to_string()))?;
        if !(self.dpo.beta > 0.0) {
            return Err(field("dpo.beta", "must be positive"));
        }
        if self.dpo.feature_dim < 1 {
            return Err(field("dpo.feature_dim", "must be at least 1"));
        }
        if let RefMode::Scorer(p) = &self.dpo.ref_mode {
            if !p.is_file() {
                return Err(field("dpo.ref_mode", format!("{} does not exist", p.display())));
            }
        }
        self.dpo.train.validate().map_err(|e| field("dpo.train", e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
output = "runs"

[dataset]
kind = "movielens"
interactions = "ratings.dat"
attributes = "movies.dat"

[split]
test_users = 4
train_users = 3
window_partition = [[1, 30], [1, 50], [1, 70]]

[explore]
samples_per_model = 2
seed = 3

[[explore.models]]
model_id = "gen-a"
temperature = 1.0
max_output_tokens = 1024
mock = { type = "hash" }

[evaluate]
designated_model = "gen-a"

[predictor]
model_id = "judge"
temperature = 0.0
max_output_tokens = 8
endpoint = "https://api.example.com/v1/chat/completions"
mock = { type = "oracle" }
"#;

    fn dir_with_files() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("ratings.dat"), "").unwrap();
        std::fs::write(d.path().join("movies.dat"), "").unwrap();
        std::fs::write(d.path().join("c.toml"), SAMPLE).unwrap();
        d
    }

    #[test]
    fn defaults_and_paths() {
        let d = dir_with_files();
        let cfg = PipelineConfig::load(&d.path().join("c.toml")).unwrap();
        assert_eq!(cfg.split.k, 10);
        assert_eq!(cfg.split.min_history_exclusive, 70);
        assert_eq!(cfg.split.test_windows, vec![30, 50, 70]);
        assert_eq!(cfg.split.required_history(), 81);
        assert_eq!(cfg.dataset.interactions, d.path().join("ratings.dat"));
        assert_eq!(cfg.pairing, PairingPolicy::default());
        assert_eq!(cfg.dpo.feature_dim, 1 << 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn dump_roundtrip_is_stable() {
        let d = dir_with_files();
        let cfg = PipelineConfig::load(&d.path().join("c.toml")).unwrap();
        let once = cfg.dump();
        let again = PipelineConfig::parse(&once).unwrap();
        again.validate().unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.dump(), once);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn validation_names_field() {
        let d = dir_with_files();
        let base = PipelineConfig::load(&d.path().join("c.toml")).unwrap();
        let check = |f: &dyn Fn(&mut PipelineConfig), name: &str| {
            let mut c = base.clone();
            f(&mut c);
            match c.validate() {
                Err(ConfigError::Field { field, .. }) => assert_eq!(field, name),
                other => panic!("expected error on {name}, got {other:?}"),
            }
        };
        check(&|c| c.split.k = 0, "split.k");
        check(&|c| c.split.train_users = 4, "split.window_partition");
        check(&|c| c.predictor.temperature = 0.5, "predictor.temperature");
        check(&|c| c.evaluate.designated_model = "nope".into(), "evaluate.designated_model");
        check(&|c| c.dataset.interactions = d.path().join("absent"), "dataset.interactions");
        check(&|c| c.explore.samples_per_model = 0, "explore");
        check(&|c| c.dpo.train.epochs = 0, "dpo.train");
        assert!(matches!(PipelineConfig::parse("output = 3"), Err(ConfigError::Syntax(_))));
        assert!(matches!(PipelineConfig::parse(&format!("bogus = 1\n{SAMPLE}")), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn mock_and_seed_overrides() {
        let d = dir_with_files();
        let mut cfg = PipelineConfig::load(&d.path().join("c.toml")).unwrap();
        cfg.force_mock().unwrap();
        assert!(cfg.predictor.endpoint.is_none());
        cfg.override_seeds(99);
        assert!(cfg.seeds().values().all(|s| *s == 99));
        let mut live_only = cfg.clone();
        live_only.predictor.mock = None;
        live_only.predictor.endpoint = Some("http://x".into());
        assert!(live_only.force_mock().is_err());
    }
}
