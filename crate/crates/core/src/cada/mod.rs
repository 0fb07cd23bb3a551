//! Calibration heads. A regressor predicts the normal-score statistics of an
//! image's class from its features alone; a classifier predicts the class
//! and borrows that class's fitted statistics. Either way the score map is
//! then mean-max normalized.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{CHECKPOINT_FORMAT, HEADER_FILE, LOSS_FILE};
pub use config::{Activation, HeadConfig, HeadMode, LrSchedule, Structure, TargetSpace, TrainConfig};
pub use model::{
    argmax, calibrate, calibrate_with_classifier, compute_image_stats, train_classifier,
    train_regressor, FeatureNorm, HeadModel, ImageStats, PredictedStats, TargetNorm,
};
