//! Training, checkpointing, evaluation, ablation and overlays.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod model;
pub mod optim;
pub mod overlay;
pub mod train;

pub use ablate::{ablate_losses, ablate_losses_on, AblationReport, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{SchedulerConfig, TrainConfig};
pub use evaluate::{evaluate, EvalMode, EvalOptions, GroundTruthInjector, HeadPredictor};
pub use model::{ModelSpec, SegModel};
pub use optim::Adam;
pub use overlay::infer_overlay;
pub use train::{train, train_on, EpochLog, TrainOutcome, Trainer};
