//! Evaluation metrics for protected references and their clones.

pub mod dtw;
pub mod mcd;
pub mod quality;
pub mod report;
pub mod ssim;

pub use dtw::dtw_distance;
pub use mcd::mcd;
pub use quality::{QualityProxy, QualityTrainConfig, QualityTrainReport};
pub use report::{dsr, snr_db, Aggregates, DecisionThresholds, DefenseReport, SampleMetrics, Snr};
pub use ssim::{spectrogram_ssim, SsimParams};
