//! Single-view and multi-view training: negative sampling, loss
//! composition per mode, global gradient clipping and Adam.

mod negatives;
mod optim;
mod plan;
mod run;
mod step;

pub use negatives::{get_neg_samples, NegIndex};
pub use optim::{adam_step, clip_gradients, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use plan::{Mode, NegStrategy, TrainPlan};
pub use run::{
    evaluate, predict_records, seeded_stream, train, EpochLog, Evaluation, SecondView,
    TrainOutcome,
};
pub use step::{
    build_losses, check_views, multiview_train_step, AdamStates, LossTerms, PairedBatch, StepReport,
};
