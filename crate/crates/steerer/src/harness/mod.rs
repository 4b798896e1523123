//! Training/evaluation orchestration, configuration, checkpoints and the
//! gradient-verification suite behind the command-line interface.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod schedule;
pub mod train;

pub use checkpoint::{load as load_checkpoint, restore_model, save as save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use eval::{
    count_level0, diagnose_masks, evaluate, localize_image, predict_density, EvalReport,
    LOCALIZE_SIGMA_MIN,
};
pub use gradcheck::{run_gradcheck, GradCheckOptions, GradCheckReport};
pub use schedule::learning_rate;
pub use train::{load_dataset, train, Dataset, EpochMetrics, StepEvent, TrainOptions, TrainOutcome};
