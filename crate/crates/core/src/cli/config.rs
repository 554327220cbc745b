use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitMode;
use crate::densenet::ArchitectureConfig;
use crate::trainer::TrainConfig;
use crate::transfer::StageSpec;

/// How training images are colour-normalized in memory before use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// The first image of the training split.
    FirstTrain,
    /// A PNG, or a JSON file holding `{"mean": [...], "std": [...]}`.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// `path,split` CSV; when absent the split is drawn from `ratios`, `split_seed` and `split_mode`.
    pub split_file: Option<PathBuf>,
    pub ratios: String,
    pub split_mode: SplitMode,
    pub split_seed: u64,
    /// Must equal `architecture.input_hw` when set.
    pub input_size: Option<usize>,
    /// Normalize in memory against this reference; `None` for already preprocessed data.
    pub reference: Option<ReferenceSource>,
    /// Expand the training split six ways in memory.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            split_file: None,
            ratios: "7:1:2".into(),
            split_mode: SplitMode::Image,
            split_seed: 0,
            input_size: None,
            reference: None,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub stages: Vec<StageSpec>,
}

impl RunConfig {
    /// Parses JSON, reporting unknown keys by their full path (e.g. `train.lr`).
    pub fn from_json(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("{path}: {}", e.inner())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.architecture.validate().map_err(|e| format!("architecture: {e}"))?;
        self.train.validate().map_err(|e| format!("train: {e}"))?;
        crate::data::parse_ratios(&self.data.ratios).map_err(|e| format!("data.ratios: {e}"))?;
        if let Some(s) = self.data.input_size {
            if s != self.architecture.input_hw {
                return Err(format!(
                    "data.input_size {s} differs from architecture.input_hw {}",
                    self.architecture.input_hw
                ));
            }
        }
        let mut names = std::collections::HashSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            if st.name.is_empty() || st.name.contains(['/', '\\']) {
                return Err(format!("stages[{i}].name must be a non-empty file-safe name"));
            }
            if !names.insert(st.name.as_str()) {
                return Err(format!("stages[{i}].name {:?} is repeated", st.name));
            }
            if st.manifest.is_none() && self.data.manifest.is_none() {
                return Err(format!("stages[{i}] has no manifest and data.manifest is unset"));
            }
        }
        if self.stages.is_empty() && self.data.manifest.is_none() {
            return Err("data.manifest is required".into());
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`, the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.split_file);
        if let Some(ReferenceSource::Path(p)) = &mut self.data.reference {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for st in &mut self.stages {
            fix(&mut st.manifest);
            fix(&mut st.split_file);
            if let Some(crate::transfer::StageInit::Checkpoint(p)) = &mut st.init {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}
