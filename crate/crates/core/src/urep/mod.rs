//! Shared backbones, task heads, their training loops, relatedness and checkpoints.

mod arch;
pub mod checkpoint;
mod model;
mod relatedness;
mod train;

pub use arch::{build_cdae, build_dilated_cnn, Architecture, BackboneKind};
pub use model::{
    attach_head, check_head_compatible, classification_layers, segmentation_layers, ConstructionMode, HeadKind,
    HeadOptions, HeadSummary, Provenance, Task, TaskHead, Theta, URepModel, INFER_CHUNK,
};
pub use relatedness::{
    assess_datasets, assess_relatedness, intensity_histogram, js_divergence, RelatednessReport, DEFAULT_THRESHOLD,
    HISTOGRAM_BINS,
};
pub use train::{
    fresh_model, joint_batch_losses, reconstruction_mse, train_backbone_supervised, train_backbone_unsupervised,
    train_head, train_individual, train_joint, validation_noise, BackboneRun, Budget, HeadTraining, AXES, SOURCE_TASK,
    VAL_NOISE_STREAM,
};
