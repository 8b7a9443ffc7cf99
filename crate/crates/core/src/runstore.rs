//! Run directories: a manifest plus one file per stage artifact.
//!
//! Every file is written through a temporary sibling and renamed into place,
//! and the manifest is rewritten whole after each change.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest";
pub const CONFIG_FILE: &str = "config";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("run `{0}` already exists")]
    Collision(String),
    #[error("run `{0}` not found")]
    NotFound(String),
    #[error("invalid run id `{0}`")]
    BadRunId(String),
    #[error("stage `{stage}` is already complete (use --force to redo it)")]
    Immutable { stage: Stage },
    #[error("stage `{stage}` needs `{missing}` to complete first")]
    OrderedStage { stage: Stage, missing: Stage },
    #[error("stage `{stage}` is not complete")]
    NotComplete { stage: Stage },
    #[error("stage `{stage}` has no artifact `{name}`")]
    NoArtifact { stage: Stage, name: String },
    #[error("artifact `{path}` is corrupt: digest {found}, manifest says {expected}")]
    Corruption {
        path: String,
        expected: String,
        found: String,
    },
    #[error("stored config does not match the manifest digest")]
    ConfigMismatch,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Explore,
    Evaluate,
    Pairs,
    Export,
    ToyDpo,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Explore,
        Stage::Evaluate,
        Stage::Pairs,
        Stage::Export,
        Stage::ToyDpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ingest => "ingest",
            Self::Explore => "explore",
            Self::Evaluate => "evaluate",
            Self::Pairs => "pairs",
            Self::Export => "export",
            Self::ToyDpo => "toy-dpo",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, RunError> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| RunError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: Stage,
    /// Relative to the run directory.
    pub path: String,
    pub digest: String,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum StageState {
    #[default]
    Pending,
    Complete {
        artifacts: Vec<ArtifactRecord>,
    },
    Failed {
        note: String,
    },
    /// Nothing to do, e.g. no preference pairs to export.
    Skipped {
        note: String,
    },
}

impl StageState {
    /// Complete or skipped: later stages may run.
    pub fn is_done(&self) -> bool {
        matches!(self, Self::Complete { .. } | Self::Skipped { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub stages: BTreeMap<Stage, StageState>,
    pub created_at: u64,
    pub seeds: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn state(&self, stage: Stage) -> &StageState {
        self.stages.get(&stage).unwrap_or(&StageState::Pending)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// One run directory and its manifest.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunStore {
    /// Creates `root/run_id`, copies the config text verbatim and writes a
    /// manifest with every stage pending.
    pub fn init_run(root: &Path, run_id: &str, config_text: &str, seeds: BTreeMap<String, u64>) -> Result<Self, RunError> {
        if !valid_run_id(run_id) {
            return Err(RunError::BadRunId(run_id.into()));
        }
        std::fs::create_dir_all(root)?;
        let dir = root.join(run_id);
        match std::fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(RunError::Collision(run_id.into())),
            Err(e) => return Err(e.into()),
        }
        write_atomic(&dir.join(CONFIG_FILE), config_text.as_bytes())?;
        let manifest = RunManifest {
            run_id: run_id.into(),
            config_digest: sha256_hex(config_text.as_bytes()),
            stages: Stage::ALL.into_iter().map(|s| (s, StageState::Pending)).collect(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default(),
            seeds,
        };
        let store = Self { dir, manifest };
        store.save()?;
        Ok(store)
    }

    pub fn open_run(root: &Path, run_id: &str) -> Result<Self, RunError> {
        if !valid_run_id(run_id) {
            return Err(RunError::BadRunId(run_id.into()));
        }
        let dir = root.join(run_id);
        let text = match std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(RunError::NotFound(run_id.into())),
            Err(e) => return Err(e.into()),
        };
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| RunError::Manifest(e.to_string()))?;
        let config = std::fs::read(dir.join(CONFIG_FILE))?;
        if sha256_hex(&config) != manifest.config_digest {
            return Err(RunError::ConfigMismatch);
        }
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config_text(&self) -> Result<String, RunError> {
        Ok(std::fs::read_to_string(self.dir.join(CONFIG_FILE))?)
    }

    fn save(&self) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| RunError::Manifest(e.to_string()))?;
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    /// First stage in pipeline order that is neither complete nor skipped;
    /// `None` once the run is done.
    pub fn resume(&self) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| !self.manifest.state(*s).is_done())
    }

    /// Checks that `stage` may run. Earlier stages must be done. A complete
    /// stage is immutable unless `force`, which resets it and every later
    /// stage to pending.
    pub fn begin(&mut self, stage: Stage, force: bool) -> Result<(), RunError> {
        if let Some(missing) = Stage::ALL
            .into_iter()
            .take_while(|s| *s < stage)
            .find(|s| !self.manifest.state(*s).is_done())
        {
            return Err(RunError::OrderedStage { stage, missing });
        }
        if self.manifest.state(stage).is_done() {
            if !force {
                return Err(RunError::Immutable { stage });
            }
            for s in Stage::ALL.into_iter().filter(|s| *s >= stage) {
                self.manifest.stages.insert(s, StageState::Pending);
            }
            self.save()?;
        }
        Ok(())
    }

    /// Writes one artifact of a stage that is not yet complete.
    pub fn put_artifact(&mut self, stage: Stage, name: &str, bytes: &[u8], n_records: usize) -> Result<ArtifactRecord, RunError> {
        if self.manifest.state(stage).is_done() {
            return Err(RunError::Immutable { stage });
        }
        if name.contains(['/', '\\']) || name == MANIFEST_FILE || name == CONFIG_FILE || name.is_empty() {
            return Err(RunError::Manifest(format!("invalid artifact name `{name}`")));
        }
        write_atomic(&self.dir.join(name), bytes)?;
        Ok(ArtifactRecord {
            stage,
            path: name.to_string(),
            digest: sha256_hex(bytes),
            n_records,
        })
    }

    pub fn complete(&mut self, stage: Stage, artifacts: Vec<ArtifactRecord>) -> Result<(), RunError> {
        self.manifest.stages.insert(stage, StageState::Complete { artifacts });
        self.save()
    }

    pub fn fail(&mut self, stage: Stage, note: impl Into<String>) -> Result<(), RunError> {
        self.manifest.stages.insert(stage, StageState::Failed { note: note.into() });
        self.save()
    }

    pub fn skip(&mut self, stage: Stage, note: impl Into<String>) -> Result<(), RunError> {
        self.manifest.stages.insert(stage, StageState::Skipped { note: note.into() });
        self.save()
    }

    pub fn artifacts(&self, stage: Stage) -> Result<&[ArtifactRecord], RunError> {
        match self.manifest.state(stage) {
            StageState::Complete { artifacts } => Ok(artifacts),
            _ => Err(RunError::NotComplete { stage }),
        }
    }

    /// Reads an artifact of a complete stage after checking its digest.
    pub fn get_artifact(&self, stage: Stage, name: &str) -> Result<Vec<u8>, RunError> {
        let rec = self
            .artifacts(stage)?
            .iter()
            .find(|a| a.path == name)
            .ok_or_else(|| RunError::NoArtifact {
                stage,
                name: name.into(),
            })?;
        let bytes = std::fs::read(self.dir.join(&rec.path))?;
        let found = sha256_hex(&bytes);
        if found != rec.digest {
            return Err(RunError::Corruption {
                path: rec.path.clone(),
                expected: rec.digest.clone(),
                found,
            });
        }
        Ok(bytes)
    }
}
