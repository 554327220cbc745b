use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{default_boundary, load_partial, partition_layers, read_checkpoint, train_only, Checkpoint, CheckpointError, Selector, TransplantReport};
use crate::data::Dataset;
use crate::densenet::{ArchitectureConfig, Model, ModelError};
use crate::trainer::{train_loop, TrainConfig, TrainError, TrainHistory};

/// Where a stage's weights come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageInit {
    Random,
    /// The preceding stage's best checkpoint.
    Previous,
    Checkpoint(PathBuf),
}

impl Serialize for StageInit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            StageInit::Random => s.serialize_str("random"),
            StageInit::Previous => s.serialize_str("previous"),
            StageInit::Checkpoint(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for StageInit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "random" => StageInit::Random,
            "previous" => StageInit::Previous,
            _ => StageInit::Checkpoint(PathBuf::from(s)),
        })
    }
}

/// One step of a multi-stage transfer run. Unset fields fall back to the
/// pipeline-wide settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split_file: Option<PathBuf>,
    /// Defaults to random for the first stage and previous afterwards.
    #[serde(default)]
    pub init: Option<StageInit>,
    /// Defaults to all for random init and deep (which includes the head) otherwise.
    #[serde(default)]
    pub trainable: Option<Selector>,
    #[serde(default)]
    pub boundary: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub learning_rate: Option<f32>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl StageSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            manifest: None,
            split_file: None,
            init: None,
            trainable: None,
            boundary: None,
            epochs: None,
            learning_rate: None,
            seed: None,
            num_classes: None,
        }
    }

    fn resolved_init(&self, index: usize) -> StageInit {
        self.init.clone().unwrap_or(if index == 0 {
            StageInit::Random
        } else {
            StageInit::Previous
        })
    }
}

/// Train and validation data for one stage.
pub struct StageData {
    pub train: Dataset,
    pub val: Dataset,
}

pub struct StageResult {
    pub name: String,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    /// Present when the stage started from earlier weights.
    pub transplant: Option<TransplantReport>,
    pub trainable: Selector,
}

#[derive(Debug, thiserror::Error)]
pub enum StageFailure {
    #[error("{0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {failure}")]
pub struct PipelineError {
    pub stage: String,
    pub failure: StageFailure,
}

/// Runs the stages in order. `load` supplies each stage's data; every stage
/// starts from its init source, trains the selected layers, and passes its best
/// checkpoint (provenance extended by the stage name) to the next.
pub fn run_pipeline(
    stages: &[StageSpec],
    base_config: &ArchitectureConfig,
    base_train: &TrainConfig,
    mut load: impl FnMut(&StageSpec) -> Result<StageData, String>,
) -> Result<Vec<StageResult>, PipelineError> {
    let mut results: Vec<StageResult> = Vec::with_capacity(stages.len());
    for (i, spec) in stages.iter().enumerate() {
        let fail = |failure: StageFailure| PipelineError {
            stage: spec.name.clone(),
            failure,
        };
        let previous = results.last().map(|r| &r.checkpoint);
        let result = run_stage(i, spec, previous, base_config, base_train, &mut load).map_err(fail)?;
        results.push(result);
    }
    Ok(results)
}

fn run_stage(
    index: usize,
    spec: &StageSpec,
    previous: Option<&Checkpoint>,
    base_config: &ArchitectureConfig,
    base_train: &TrainConfig,
    load: &mut impl FnMut(&StageSpec) -> Result<StageData, String>,
) -> Result<StageResult, StageFailure> {
    let mut config = base_config.clone();
    if let Some(k) = spec.num_classes {
        config.num_classes = k;
    }
    let train_cfg = TrainConfig {
        epochs: spec.epochs.unwrap_or(base_train.epochs),
        learning_rate: spec.learning_rate.unwrap_or(base_train.learning_rate),
        seed: spec.seed.unwrap_or(base_train.seed),
        ..base_train.clone()
    };
    train_cfg.validate()?;

    let init = spec.resolved_init(index);
    let source = match &init {
        StageInit::Random => None,
        StageInit::Previous => Some(
            previous
                .cloned()
                .ok_or_else(|| StageFailure::Config("init \"previous\" but there is no earlier stage".into()))?,
        ),
        StageInit::Checkpoint(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| StageFailure::Data(format!("checkpoint {}: {e}", path.display())))?;
            Some(read_checkpoint(std::io::BufReader::new(file))?)
        }
    };
    let data = load(spec).map_err(StageFailure::Data)?;

    let mut model = Model::build(&config, train_cfg.seed)?;
    let mut provenance = Vec::new();
    let transplant = source.map(|ckpt| {
        provenance = ckpt.provenance.clone();
        load_partial(&ckpt, &mut model, |_| true)
    });
    provenance.push(spec.name.clone());

    let selector = spec.trainable.unwrap_or(if init == StageInit::Random {
        Selector::All
    } else {
        Selector::Deep
    });
    let boundary = spec.boundary.unwrap_or_else(|| default_boundary(&config));
    let partition = partition_layers(&model, boundary).map_err(|e| StageFailure::Config(e.to_string()))?;
    train_only(&mut model, selector, &partition);

    let outcome = train_loop(&mut model, &data.train, &data.val, &train_cfg)?;
    Ok(StageResult {
        name: spec.name.clone(),
        checkpoint: Checkpoint::from_model(&outcome.best, &provenance),
        history: outcome.history,
        transplant,
        trainable: selector,
    })
}
