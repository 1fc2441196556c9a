//! Training, evaluation and the alignment / orientation analyses.

mod alignment;
mod report;
mod sweep;
mod train;

pub use alignment::{
    alignment_analysis, AlignmentOptions, AlignmentRecord, AlignmentReport, FeatureExtractor, MatchedFilterBank,
};
pub use report::{
    alignment_csv, confusion_csv, history_csv, read_strict_csv, render_alignment_grid, strict_number, sweep_csv,
    GrayImage, ALIGNMENT_HEADER, HISTORY_HEADER, SWEEP_HEADER,
};
pub use sweep::{angle_sweep, circular_correlation, sweep_angles, AngleSweep, SweepRecord, ThetaPredictor, SIGN_CONVENTION};
pub use train::{evaluate, train, train_with, Classifier, EpochRecord, EvalReport, LrSchedule, Optimizer, TrainConfig, TrainOutcome};
