//! Score-based diffusion voice conversion at toy scale.

pub mod model;
pub mod sde;
pub mod train;
pub mod unet;

pub use model::{DiffVc, MelStats, SynthesisResult};
pub use sde::{NoisySample, SdeSchedule};
pub use train::{build_triples, train_score, ScoreTrainConfig, ScoreTrainReport, TrainingTriple};
pub use unet::{FeatureTapBundle, LayerTap, ScoreNet, TapRequest, UNetConfig, DOWN_LAYERS, LAYER_IDS, UP_LAYERS};
