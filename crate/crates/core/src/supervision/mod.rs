//! Pseudo labels, the multi-task loss with gradients, gradient checking and training.

mod gradcheck;
mod labels;
mod losses;
mod step;
mod train;

pub use gradcheck::{grad_check, tiny_architecture, toy_pair, GradCheckConfig, TOY_SEED, GradCheckReport, TensorGradError, ToyPair};
pub use labels::{
    affinity_target, displaced, generate_labels, index_iou, inherit_ids, moving_object_sets, point_labels,
    point_object_ids, GroundTruthLabels, LabelConfig, PointLabels,
};
pub use losses::{empty_loss_warnings, loss_aff, loss_flow, loss_seg, loss_total, LossConfig, LossParts};
pub use step::{step, Objective, StepConfig, StepContext, StepResult, TeacherTrack};
pub use train::{
    prepare_sequence, train, train_stage, write_epoch_log, write_train_log, EpochSummary, LogRow, TrainOutcome,
    TrainSchedule, TrainSettings, TrainingSequence,
};
