use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sar_retrieval::contrastive::TrainConfig;
use sar_retrieval::datagen::{SceneParams, SplitSpec};
use sar_retrieval::encoder::ArchConfig;
use sar_retrieval::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    #[serde(flatten)]
    pub params: SceneParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            params: SceneParams::default(),
        }
    }
}

/// Everything a command may need. Loaded from a JSON file, then
/// overridden by command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub scene: SceneConfig,
    /// Named preset for the query offsets; explicit `split` fields win.
    pub split_kind: Option<SplitKind>,
    pub split: Option<SplitSpec>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))
    }

    pub fn split_spec(&self) -> SplitSpec {
        if let Some(s) = &self.split {
            return s.clone();
        }
        let seed = self.seed.unwrap_or(0).wrapping_add(1);
        match self.split_kind.unwrap_or(SplitKind::Easy) {
            SplitKind::Easy => SplitSpec::easy(seed),
            SplitKind::Hard => SplitSpec::hard(seed),
        }
    }
}

pub fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing {what} (flag or config field)")))
}

pub fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("directory {} does not exist", dir.display())))
    }
}

/// The directory a new output file will land in must already exist.
pub fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => require_dir(p),
        _ => Ok(()),
    }
}
