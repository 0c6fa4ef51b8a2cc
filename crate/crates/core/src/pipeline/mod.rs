//! Training, evaluation and experiment configuration.

pub mod config;
pub mod data;
pub mod optim;
pub mod train;

use std::path::Path;

pub use config::{Ablation, RunConfig};
pub use data::{load_dataset, split_indices, subject_dirs, synthesize_dataset, Subject};
pub use optim::{Nadam, PlateauSchedule, ScheduleEvent};
pub use train::{objective, train, EpochRecord, PatternPolicy, StepRecord, TrainOptions, TrainOutcome, Trainer};

use crate::dropout::PatternMask;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_patterns, ResultTable};
use crate::network::{predict, Checkpoint};

/// Per-pattern Dice/Hausdorff table of a checkpoint on labelled subjects.
pub fn evaluate(
    checkpoint: &Checkpoint,
    subjects: &[Subject],
    patterns: &[PatternMask],
    name: &str,
) -> Result<ResultTable> {
    let Some(first) = subjects.first() else {
        return Err(Error::EmptyDataset("no subjects to evaluate".into()));
    };
    if subjects.iter().any(|s| s.spacing != first.spacing) {
        return Err(Error::Config("subjects have different voxel spacings".into()));
    }
    let pairs: Vec<_> = subjects.iter().map(|s| (&s.volume, &s.labels)).collect();
    evaluate_patterns(
        name,
        |v, p| predict(&checkpoint.params, &checkpoint.network, v, p).map(|r| r.labels),
        &pairs,
        patterns,
        first.spacing,
    )
}

/// Load a checkpoint and the dataset it was built for, then evaluate.
pub fn evaluate_path(checkpoint: &Path, dataset: &Path, patterns: &[PatternMask], name: &str) -> Result<ResultTable> {
    let ck = Checkpoint::load(checkpoint)?;
    let subjects = load_dataset(dataset, ck.network.input_shape)?;
    evaluate(&ck, &subjects, patterns, name)
}
