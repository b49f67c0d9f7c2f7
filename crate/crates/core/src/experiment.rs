//! Trial construction, model bundles and ablation sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::corpus::{Gender, Utterance};
use crate::audio::vocoder::GriffinLim;
use crate::audio::Waveform;
use crate::defense::{protect, AdversarialState, PgdConfig};
use crate::diffusion::DiffVc;
use crate::error::{Error, Result};
use crate::identity::{opposite_gender_centroid, Encoder, EnrollmentStore, GenderCentroid};
use crate::metrics::{DecisionThresholds, DefenseReport, QualityProxy, SampleMetrics, SsimParams};
use crate::pipeline::{par_map, Evaluator};

pub const MODEL_FILE: &str = "model.safetensors";
pub const DEFENSE_FILE: &str = "defense.safetensors";
pub const ASV_FILE: &str = "asv.safetensors";
pub const QUALITY_FILE: &str = "quality.safetensors";
pub const ENROLLMENT_DIR: &str = "enrollments";

/// Every frozen network an experiment needs, stored side by side in one
/// checkpoint directory.
pub struct ModelBundle {
    pub model: DiffVc,
    pub defense: Encoder,
    pub asv: Encoder,
    pub quality: QualityProxy,
    pub enrollments: EnrollmentStore,
}

fn required(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    Ok(path)
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            model: DiffVc::load(&required(dir, MODEL_FILE)?)?,
            defense: Encoder::load(&required(dir, DEFENSE_FILE)?)?,
            asv: Encoder::load(&required(dir, ASV_FILE)?)?,
            quality: QualityProxy::load(&required(dir, QUALITY_FILE)?)?,
            enrollments: EnrollmentStore::load(&required(dir, ENROLLMENT_DIR)?)?,
        })
    }

    pub fn evaluator(&self, settings: &EvalSettings) -> Evaluator<'_> {
        Evaluator {
            model: &self.model,
            asv: &self.asv,
            quality: &self.quality,
            thresholds: settings.thresholds,
            ssim: settings.ssim,
            inference_steps: settings.inference_steps,
            vocoder: GriffinLim::default(),
        }
    }

    /// Opposite-class centroid for a reference of class `gender`, drawn with `seed`.
    pub fn centroid_for(&self, corpus: &[Utterance], gender: Gender, seed: u64) -> Result<GenderCentroid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(opposite_gender_centroid(&self.defense, corpus, gender, &mut rng)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub thresholds: DecisionThresholds,
    pub ssim: SsimParams,
    pub inference_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: DecisionThresholds::default(),
            ssim: SsimParams::default(),
            inference_steps: 100,
        }
    }
}

/// A reference to protect and a source utterance of another speaker whose
/// content an attacker would re-voice.
#[derive(Debug, Clone)]
pub struct Trial {
    pub id: String,
    pub speaker_id: String,
    pub gender: Gender,
    pub x_ref: Waveform,
    pub x_src: Waveform,
    pub seed: u64,
}

/// `n` trials cycling over a seeded speaker order. Sources come from a
/// different speaker and, on parallel corpora, a different content index.
pub fn make_trials(corpus: &[Utterance], n: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in corpus {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(u);
    }
    if by_speaker.len() < 2 {
        return Err(Error::invalid("trials need at least two speakers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&str> = by_speaker.keys().copied().collect();
    order.shuffle(&mut rng);
    (0..n)
        .map(|i| {
            let speaker = order[i % order.len()];
            let reference = *by_speaker[speaker].choose(&mut rng).expect("speaker has utterances");
            let sources: Vec<&Utterance> = corpus
                .iter()
                .filter(|u| u.speaker_id != speaker)
                .filter(|u| u.content.is_none() || u.content != reference.content)
                .collect();
            let source = *sources
                .choose(&mut rng)
                .ok_or_else(|| Error::invalid("no source utterance for trial"))?;
            Ok(Trial {
                id: format!("trial{i:03}"),
                speaker_id: speaker.to_string(),
                gender: reference.gender,
                x_ref: reference.waveform.clone(),
                x_src: source.waveform.clone(),
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            })
        })
        .collect()
}

/// Protects one trial; the PGD seed and the centroid draw derive from the
/// trial seed.
pub fn protect_trial(bundle: &ModelBundle, corpus: &[Utterance], trial: &Trial, cfg: &PgdConfig) -> Result<AdversarialState> {
    let c_opp = bundle.centroid_for(corpus, trial.gender, trial.seed)?;
    let cfg = PgdConfig {
        seed: cfg.seed ^ trial.seed,
        ..*cfg
    };
    protect(&trial.x_ref, &trial.x_src, &bundle.model, &bundle.defense, &c_opp, &cfg)
}

/// Clones of `x_ref` and `x_adv` with the trial's seed, scored against the
/// target's enrollment.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub metrics: SampleMetrics,
    pub y: Waveform,
    pub y_adv: Waveform,
    /// Reverse-diffusion seconds of the `y_adv` clone.
    pub clone_seconds: f64,
}

pub fn evaluate_trial(evaluator: &Evaluator, enrollments: &EnrollmentStore, trial: &Trial, x_adv: &Waveform) -> Result<TrialOutcome> {
    let y = evaluator.clone_voice(&trial.x_src, &trial.x_ref, trial.seed)?;
    let adv = evaluator.clone_voice(&trial.x_src, x_adv, trial.seed)?;
    let metrics = evaluator.metrics(
        &trial.id,
        &trial.x_ref,
        x_adv,
        &y.waveform_out,
        &adv.waveform_out,
        enrollments.get(&trial.speaker_id)?,
    )?;
    Ok(TrialOutcome {
        metrics,
        y: y.waveform_out,
        y_adv: adv.waveform_out,
        clone_seconds: adv.seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    InferenceSteps,
    PgdIters,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::InferenceSteps => "inference_steps",
            SweepAxis::PgdIters => "pgd_iters",
        }
    }

    /// Default values of each sweep.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Epsilon => vec![0.0005, 0.001, 0.002, 0.005, 0.01],
            SweepAxis::InferenceSteps => vec![6.0, 18.0, 30.0, 100.0, 200.0],
            SweepAxis::PgdIters => vec![5.0, 10.0, 25.0, 50.0],
        }
    }

    /// Attack and evaluation settings at one axis value. The step size
    /// follows ε so that every budget is reachable in the same iterations.
    pub fn apply(self, value: f64, pgd: &PgdConfig, eval: &EvalSettings) -> Result<(PgdConfig, EvalSettings)> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        let ratio = pgd.alpha / pgd.epsilon;
        let (mut p, mut e) = (*pgd, *eval);
        match self {
            SweepAxis::Epsilon => {
                p.epsilon = value;
                p.alpha = ratio * value;
            }
            SweepAxis::InferenceSteps => e.inference_steps = count()?,
            SweepAxis::PgdIters => p.iterations = count()?,
        }
        p.validate()?;
        Ok((p, e))
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "inference_steps" => Ok(SweepAxis::InferenceSteps),
            "pgd_iters" => Ok(SweepAxis::PgdIters),
            _ => Err(Error::invalid(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Aggregates at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub samples: usize,
    pub failures: Vec<String>,
    pub asv_rate: f64,
    pub mean_asv_score: f64,
    pub quality: f64,
    pub dsr: f64,
    pub snr: Option<f64>,
    pub dtw: f64,
    pub ssim: f64,
    pub mcd: f64,
    /// Mean wall-clock seconds of one protection run. Timings stay out of
    /// serialised rows so that those are reproducible byte for byte.
    #[serde(skip)]
    pub protect_seconds: f64,
    /// Mean reverse-diffusion seconds of one clone.
    #[serde(skip)]
    pub clone_seconds: f64,
    pub report: Option<DefenseReport>,
}

/// Full pipeline per axis value with shared trial seeds. Failed trials are
/// recorded in the row; a value whose trials all fail yields a row without
/// a report.
pub fn run_ablation(
    bundle: &ModelBundle,
    corpus: &[Utterance],
    trials: &[Trial],
    axis: SweepAxis,
    values: &[f64],
    pgd: &PgdConfig,
    eval: &EvalSettings,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep values are empty"));
    }
    if trials.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    // The steps axis protects once; the attack does not depend on T.
    let shared: Option<Vec<Result<AdversarialState>>> = (axis == SweepAxis::InferenceSteps)
        .then(|| par_map(jobs, trials, |_, t| protect_trial(bundle, corpus, t, pgd)));
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let (p, e) = axis.apply(value, pgd, eval)?;
        let evaluator = bundle.evaluator(&e);
        let cells = par_map(jobs, trials, |i, t| -> Result<(SampleMetrics, f64, f64)> {
            let state = match &shared {
                Some(states) => states[i].as_ref().map_err(|e| Error::invalid(e.to_string()))?.clone(),
                None => protect_trial(bundle, corpus, t, &p)?,
            };
            let out = evaluate_trial(&evaluator, &bundle.enrollments, t, &state.x_adv)?;
            Ok((out.metrics, state.seconds, out.clone_seconds))
        });
        let mut failures = Vec::new();
        let mut metrics = Vec::new();
        let (mut protect_s, mut clone_s) = (0.0, 0.0);
        for (t, cell) in trials.iter().zip(cells) {
            match cell {
                Ok((m, ps, cs)) => {
                    metrics.push(m);
                    protect_s += ps;
                    clone_s += cs;
                }
                Err(err) => {
                    log::warn!("{} = {value}: {} failed: {err}", axis.name(), t.id);
                    failures.push(format!("{}: {err}", t.id));
                }
            }
        }
        let n = metrics.len();
        let report = if n > 0 {
            Some(DefenseReport::new(metrics, e.thresholds, failures.len())?)
        } else {
            None
        };
        let agg = report.as_ref().map(|r| r.aggregates.clone());
        let get = |f: fn(&crate::metrics::Aggregates) -> f64| agg.as_ref().map_or(f64::NAN, f);
        rows.push(AblationRow {
            axis,
            value,
            samples: n,
            failures,
            asv_rate: get(|a| a.asv_rate),
            mean_asv_score: get(|a| a.mean_asv_score),
            quality: get(|a| a.mean_quality),
            dsr: get(|a| a.dsr),
            snr: agg.as_ref().and_then(|a| a.mean_snr),
            dtw: get(|a| a.mean_dtw),
            ssim: get(|a| a.mean_ssim),
            mcd: get(|a| a.mean_mcd),
            protect_seconds: protect_s / n.max(1) as f64,
            clone_seconds: clone_s / n.max(1) as f64,
            report,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::corpus::{roster, synth_utterance};

    fn corpus() -> Vec<Utterance> {
        roster(2, 1)
            .iter()
            .flat_map(|s| {
                (0..3).map(move |u| Utterance {
                    speaker_id: s.speaker_id.clone(),
                    gender: s.gender,
                    content: Some(u),
                    waveform: synth_utterance(s, 7, u, 4096),
                })
            })
            .collect()
    }

    #[test]
    fn trials_are_seeded_and_cross_speaker() {
        let c = corpus();
        let a = make_trials(&c, 6, 3).unwrap();
        let b = make_trials(&c, 6, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x_ref, y.x_ref);
            assert_eq!(x.x_src, y.x_src);
        }
        for t in &a {
            let src = c.iter().find(|u| u.waveform == t.x_src).unwrap();
            let rf = c.iter().find(|u| u.waveform == t.x_ref).unwrap();
            assert_ne!(src.speaker_id, t.speaker_id);
            assert_ne!(src.content, rf.content);
        }
        let speakers: std::collections::BTreeSet<_> = a.iter().take(4).map(|t| t.speaker_id.clone()).collect();
        assert_eq!(speakers.len(), 4);
    }

    #[test]
    fn axis_application() {
        let pgd = PgdConfig::default();
        let eval = EvalSettings::default();
        let (p, _) = SweepAxis::Epsilon.apply(0.01, &pgd, &eval).unwrap();
        assert_eq!(p.epsilon, 0.01);
        assert!((p.alpha - 2e-4).abs() < 1e-15);
        let (_, e) = SweepAxis::InferenceSteps.apply(18.0, &pgd, &eval).unwrap();
        assert_eq!(e.inference_steps, 18);
        assert!(SweepAxis::PgdIters.apply(2.5, &pgd, &eval).is_err());
        assert!(SweepAxis::Epsilon.apply(0.0, &pgd, &eval).is_err());
        assert_eq!("pgd_iters".parse::<SweepAxis>().unwrap(), SweepAxis::PgdIters);
    }

    #[test]
    fn missing_bundle_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ModelBundle::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
