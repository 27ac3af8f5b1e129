//! Continual fine-tuning of a toy dual encoder with gradient null-space
//! projection, contrastive distillation and modality alignment preservation.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod projection;
pub mod tasks;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{Activation, DualEncoder, EncoderLayer, EncoderStack, ForwardTrace, Gradients, ModelSpec};
pub use error::{CheckpointError, Error, Result};
pub use linalg::{sym_eig, EigenSpectrum, Matrix};
pub use losses::{CombinedLoss, LossOutput, LossWeights};
pub use metrics::{summarize, AccuracyMatrix, GapRecord, GapSeries, Probe, Summary};
pub use projection::{adaptive_split, build_projector, project_update, GramAccumulator, Projector};
pub use tasks::{make_reference_set, make_sequence, make_task, ReferenceSet, SequenceSpec, Split, TaskDataset};
pub use trainer::{
    pretrain_alignment, run_sequence, train_task, ContinualState, Method, Optimizer, RunOutcome, TrainerConfig,
};
