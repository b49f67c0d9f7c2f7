//! Speaker-classification training for both encoders.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use crate::audio::corpus::{Gender, Utterance};
use crate::audio::mel::{MelAnalyzer, MelSpectrogram};
use crate::audio::vocoder::GriffinLim;
use crate::diffusion::MelStats;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, DEVICE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Scale of the cosine classifier logits.
    pub logit_scale: f64,
    /// Frames per random training crop.
    pub crop_frames: usize,
    /// Utterances per speaker held out for the accuracy check.
    pub held_out_per_speaker: usize,
    /// Add phase-reconstructed copies of the training audio so that vocoded
    /// speech stays in-distribution.
    pub vocoder_augmentation: bool,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            logit_scale: 10.0,
            crop_frames: 48,
            held_out_per_speaker: 2,
            vocoder_augmentation: true,
            min_accuracy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub kind: super::EncoderKind,
    pub initial_accuracy: f64,
    pub held_out_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorReport {
    pub defense: EncoderReport,
    pub asv: EncoderReport,
}

struct Example {
    label: usize,
    mel: MelSpectrogram,
}

/// Split a corpus into training and held-out utterances per speaker.
fn split(corpus: &[Utterance], held_out: usize) -> (Vec<usize>, Vec<usize>) {
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_speaker.values() {
        let keep = idx.len().saturating_sub(held_out).max(1);
        train.extend_from_slice(&idx[..keep]);
        test.extend_from_slice(&idx[keep..]);
    }
    (train, test)
}

fn crop_batch<R: Rng>(examples: &[&Example], crop: usize, noise: bool, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let n_mels = examples[0].mel.n_mels;
    let frames = examples.iter().map(|e| e.mel.n_frames).min().unwrap_or(0);
    let len = crop.min(frames).max(1);
    let mut data = Vec::with_capacity(examples.len() * n_mels * len);
    let mut labels = Vec::with_capacity(examples.len());
    for e in examples {
        let start = rng.random_range(0..=e.mel.n_frames - len);
        let bands = e.mel.to_band_major();
        let gain: f32 = if noise { 0.3 * rng.sample::<f32, _>(StandardNormal) } else { 0.0 };
        for b in 0..n_mels {
            for f in 0..len {
                data.push(bands[b * e.mel.n_frames + start + f] + gain);
            }
        }
        labels.push(e.label as u32);
    }
    Ok((
        Tensor::from_vec(data, (examples.len(), n_mels, len), &DEVICE)?,
        Tensor::from_vec(labels, examples.len(), &DEVICE)?,
    ))
}

fn full_mel_tensor(mel: &MelSpectrogram) -> Result<Tensor> {
    Ok(Tensor::from_vec(mel.to_band_major(), (1, mel.n_mels, mel.n_frames), &DEVICE)?)
}

/// Nearest-class accuracy of an encoder on whole utterances.
fn accuracy(encoder: &Encoder, examples: &[Example], scale: f64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for e in examples {
        let logits = encoder.logits(&encoder.embed_log_mel(&full_mel_tensor(&e.mel)?)?, scale)?;
        let pred = logits.argmax(1)?.to_vec1::<u32>()?[0] as usize;
        correct += usize::from(pred == e.label);
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn train_one(
    config: EncoderConfig,
    train: &[Example],
    test: &[Example],
    stats: MelStats,
    speakers: &[String],
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> Result<(Encoder, EncoderReport)> {
    let mut store = ParamStore::seeded(seed, DType::F32);
    let encoder = Encoder::build(&mut store, config, stats, speakers.to_vec())?;
    let initial_accuracy = accuracy(&encoder, test, cfg.logit_scale)?;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 1e-4,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = crop_batch(&items, cfg.crop_frames, true, &mut rng)?;
            let logits = encoder.logits(&encoder.embed_log_mel(&x)?, cfg.logit_scale)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "{:?} loss became {value} at epoch {epoch}",
                    config.kind
                )));
            }
            opt.backward_step(&loss)?;
            sum += value * chunk.len() as f64;
            n += chunk.len();
        }
        epoch_losses.push(sum / n.max(1) as f64);
    }
    let frozen = Encoder::from_tensors(store.snapshot(), config, stats, speakers.to_vec())?;
    let held_out_accuracy = accuracy(&frozen, test, cfg.logit_scale)?;
    Ok((
        frozen,
        EncoderReport {
            kind: config.kind,
            initial_accuracy,
            held_out_accuracy,
            epoch_losses,
        },
    ))
}

/// Trains the defense extractor and the ASV evaluator from independent seeds.
///
/// Fails with [`Error::Training`] when either encoder stays below
/// `cfg.min_accuracy` on the held-out utterances.
pub fn train_extractors(
    corpus: &[Utterance],
    cfg: &EncoderTrainConfig,
) -> Result<(Encoder, Encoder, ExtractorReport)> {
    for g in [Gender::A, Gender::B] {
        let n = corpus
            .iter()
            .filter(|u| u.gender == g)
            .map(|u| u.speaker_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 speakers of class {g}, got {n}")));
        }
    }
    let speakers: Vec<String> = corpus
        .iter()
        .map(|u| u.speaker_id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let label = |id: &str| speakers.iter().position(|s| s == id).expect("speaker listed");
    let analyzer = MelAnalyzer::shared();
    let (train_idx, test_idx) = split(corpus, cfg.held_out_per_speaker);
    let mut train = Vec::new();
    let gl = GriffinLim::default();
    for &i in &train_idx {
        let u = &corpus[i];
        let mel = analyzer.forward(&u.waveform.samples)?;
        if cfg.vocoder_augmentation {
            let vocoded = GriffinLim { seed: cfg.seed ^ i as u64, ..gl }.reconstruct(&analyzer, &mel)?;
            train.push(Example {
                label: label(&u.speaker_id),
                mel: analyzer.forward(&vocoded.samples)?,
            });
        }
        train.push(Example {
            label: label(&u.speaker_id),
            mel,
        });
    }
    let test: Vec<Example> = test_idx
        .iter()
        .map(|&i| {
            Ok(Example {
                label: label(&corpus[i].speaker_id),
                mel: analyzer.forward(&corpus[i].waveform.samples)?,
            })
        })
        .collect::<Result<_>>()?;
    let stats = MelStats::fit(train.iter().map(|e| &e.mel))?;
    let (defense, d_rep) = train_one(EncoderConfig::defense(), &train, &test, stats, &speakers, cfg, cfg.seed)?;
    let (asv, a_rep) = train_one(
        EncoderConfig::asv(),
        &train,
        &test,
        stats,
        &speakers,
        cfg,
        cfg.seed.wrapping_add(0x9e37_79b9),
    )?;
    for rep in [&d_rep, &a_rep] {
        if rep.held_out_accuracy < cfg.min_accuracy {
            return Err(Error::Training(format!(
                "{:?} held-out accuracy {:.3} below {:.2} (initial {:.3}, final loss {:.4})",
                rep.kind,
                rep.held_out_accuracy,
                cfg.min_accuracy,
                rep.initial_accuracy,
                rep.epoch_losses.last().copied().unwrap_or(f64::NAN)
            )));
        }
    }
    Ok((defense, asv, ExtractorReport { defense: d_rep, asv: a_rep }))
}
