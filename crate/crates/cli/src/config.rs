//! Experiment configuration: one JSON document, overridable from flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxshield::defense::PgdConfig;
use voxshield::diffusion::{ScoreTrainConfig, SdeSchedule, UNetConfig};
use voxshield::experiment::{EvalSettings, SweepAxis};
use voxshield::identity::EncoderTrainConfig;
use voxshield::metrics::QualityTrainConfig;
use voxshield::robustness::transform::{LossyTransform, TransformKind};
use voxshield::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the corpus WAVs and `manifest.csv`.
    pub corpus: PathBuf,
    /// Directory holding every trained network and the enrollments.
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus".into(),
            checkpoints: "data/checkpoints".into(),
            output: "out".into(),
        }
    }
}

impl Paths {
    pub fn manifest(&self) -> PathBuf {
        self.corpus.join("manifest.csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub speakers_per_class: usize,
    pub utterances_per_speaker: usize,
    pub roster_seed: u64,
    pub content_seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            speakers_per_class: 6,
            utterances_per_speaker: 12,
            roster_seed: 1,
            content_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialSettings {
    pub count: usize,
    pub seed: u64,
}

impl Default for TrialSettings {
    fn default() -> Self {
        Self { count: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    /// Empty means the axis defaults.
    pub values: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Epsilon,
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSettings {
    /// Empty means every swept level of every transform.
    pub transforms: Vec<LossyTransform>,
    pub allow_proxy: bool,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        Self {
            transforms: Vec::new(),
            allow_proxy: true,
        }
    }
}

impl RobustnessSettings {
    pub fn resolved(&self) -> Vec<LossyTransform> {
        if !self.transforms.is_empty() {
            return self.transforms.clone();
        }
        [TransformKind::Compression, TransformKind::GaussianNoise, TransformKind::Lowpass]
            .iter()
            .flat_map(|&k| k.levels().iter().map(move |&l| LossyTransform::new(k, l)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub corpus: CorpusSettings,
    pub unet: UNetConfig,
    pub sde: SdeSchedule,
    pub score_training: ScoreTrainConfig,
    pub encoder_training: EncoderTrainConfig,
    pub quality_training: QualityTrainConfig,
    pub pgd: PgdConfig,
    pub eval: EvalSettings,
    pub trials: TrialSettings,
    pub sweep: SweepSettings,
    pub robustness: RobustnessSettings,
    /// Seed of sampling, clone synthesis and noise baselines.
    pub seed: u64,
    /// Worker threads for independent samples.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusSettings::default(),
            unet: UNetConfig::default(),
            sde: SdeSchedule::default(),
            score_training: ScoreTrainConfig::default(),
            encoder_training: EncoderTrainConfig::default(),
            quality_training: QualityTrainConfig::default(),
            pgd: PgdConfig::default(),
            eval: EvalSettings::default(),
            trials: TrialSettings::default(),
            sweep: SweepSettings::default(),
            robustness: RobustnessSettings::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// A malformed document is an invalid argument; an unreadable file is
    /// an I/O error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        voxshield::io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.pgd.validate()?;
        self.eval.thresholds.validate()?;
        self.eval.ssim.validate()?;
        if self.eval.inference_steps < 1 {
            return Err(Error::invalid("inference steps must be at least 1"));
        }
        if self.pgd.t_adv > self.sde.n_steps {
            return Err(Error::invalid(format!(
                "t_adv {} exceeds the {} model steps",
                self.pgd.t_adv, self.sde.n_steps
            )));
        }
        if self.jobs < 1 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), c);
        assert_eq!(c.pgd.epsilon, 0.002);
        assert_eq!(c.pgd.alpha, 4e-5);
        assert_eq!(c.pgd.iterations, 50);
        assert_eq!(c.pgd.t_adv, 6);
        assert_eq!(c.eval.inference_steps, 100);
        assert_eq!(c.pgd.weights.as_array(), [1.0, 4.5, 10.0, 0.85]);
        assert_eq!((c.eval.thresholds.tau_asv, c.eval.thresholds.tau_q), (0.25, 3.0));
        c.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"pgd": {"epsilon": 0.001}, "jobs": 2}"#).unwrap();
        assert_eq!(c.pgd.epsilon, 0.001);
        assert_eq!(c.pgd.iterations, 50);
        assert_eq!(c.jobs, 2);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        let low_reading: ExperimentConfig = serde_json::from_str(r#"{"eval": {"thresholds": {"tau_q": 0.3}}}"#).unwrap();
        assert_eq!(low_reading.eval.thresholds.tau_q, 0.3);
        low_reading.validate().unwrap();
        let negative: ExperimentConfig = serde_json::from_str(r#"{"eval": {"thresholds": {"tau_q": -1.0}}}"#).unwrap();
        assert!(negative.validate().is_err());
    }
}
