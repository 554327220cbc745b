//! Checkpoints, layer partitioning and freezing, partial weight transplant and
//! the multi-stage transfer pipeline.
//!
//! Checkpoint layout: `DTLC`, a little-endian `u32` version, a little-endian
//! `u64` header length, a UTF-8 JSON header with sorted keys, then the payload of
//! little-endian `f32` parameter data in name order. Batch-norm running
//! statistics travel hex-encoded inside the header, so the payload is exactly
//! the parameter set.

mod checkpoint;
mod partition;
mod pipeline;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError, DirectoryEntry, FORMAT_VERSION, MAGIC,
};
pub use partition::{
    default_boundary, load_partial, partition_layers, set_trainable, train_only, BoundaryError, LayerPartition, Selector, TransplantReport,
};
pub use pipeline::{run_pipeline, PipelineError, StageData, StageFailure, StageInit, StageResult, StageSpec};
