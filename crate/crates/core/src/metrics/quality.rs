//! Learned speech-quality proxy on a 1–5 opinion scale.
//!
//! A small regressor over per-band log-mel statistics, trained on corpus
//! audio with programmatic degradations whose severity `s ∈ [0, 1]` maps to
//! the label `5 − 4s`. Griffin-Lim resyntheses of clean mels count as clean,
//! so the proxy scores artefacts beyond those of the vocoder itself.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::corpus::Utterance;
use crate::audio::mel::{MelAnalyzer, MelSpectrogram};
use crate::audio::vocoder::GriffinLim;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, to_vec_f32, Linear, ParamStore, DEVICE};
use crate::robustness::transform::{add_noise_at_snr, fft_lowpass, quantize_bits};

pub const CHECKPOINT_KIND: &str = "quality-proxy";
pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

/// Per-band mean and standard deviation of the log-mel and of its frame
/// delta, concatenated.
pub fn features(mel: &MelSpectrogram) -> Vec<f32> {
    let m = mel.n_mels;
    let stats = |values: &dyn Fn(usize) -> Vec<f64>| -> (Vec<f32>, Vec<f32>) {
        (0..m)
            .map(|b| {
                let v = values(b);
                let n = v.len().max(1) as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean as f32, var.sqrt() as f32)
            })
            .unzip()
    };
    let (level_mean, level_std) = stats(&|b| mel.frames().map(|f| f[b] as f64).collect());
    let (delta_mean, delta_std) = stats(&|b| {
        (1..mel.n_frames)
            .map(|i| (mel.frame(i)[b] - mel.frame(i - 1)[b]) as f64)
            .collect()
    });
    [level_mean, level_std, delta_mean, delta_std].concat()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QualityMeta {
    hidden: usize,
    feature_mean: Vec<f32>,
    feature_std: Vec<f32>,
}

#[derive(Debug)]
pub struct QualityProxy {
    hidden_layer: Linear,
    output: Linear,
    meta: QualityMeta,
    tensors: BTreeMap<String, Tensor>,
}

impl QualityProxy {
    fn build(store: &mut ParamStore, meta: QualityMeta) -> Result<Self> {
        let d = meta.feature_mean.len();
        let hidden_layer = Linear::new(store, "quality.hidden", d, meta.hidden)?;
        let output = Linear::with_gain(store, "quality.out", meta.hidden, 1, 0.1)?;
        Ok(Self {
            hidden_layer,
            output,
            meta,
            tensors: store.snapshot(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_KIND, &self.tensors, &self.meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta): (_, QualityMeta) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::build(&mut ParamStore::frozen(tensors, DType::F32), meta)
    }

    fn standardized(&self, rows: &[Vec<f32>]) -> Result<Tensor> {
        let d = self.meta.feature_mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::ShapeMismatch(format!("{} quality features, expected {d}", r.len())));
            }
            data.extend(
                r.iter()
                    .zip(&self.meta.feature_mean)
                    .zip(&self.meta.feature_std)
                    .map(|((x, m), s)| (x - m) / s),
            );
        }
        Ok(Tensor::from_vec(data, (rows.len(), d), &DEVICE)?)
    }

    /// Scores `[B]` in the open interval (1, 5).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden_layer.forward(x)?.silu()?;
        let z = self.output.forward(&h)?.squeeze(1)?;
        Ok(((candle_nn::ops::sigmoid(&z)? * (MAX_SCORE - MIN_SCORE))? + MIN_SCORE)?)
    }

    pub fn score_mel(&self, mel: &MelSpectrogram) -> Result<f64> {
        let out = to_vec_f32(&self.forward(&self.standardized(&[features(mel)])?)?)?;
        let v = out[0] as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite("quality score".into()));
        }
        Ok(v.clamp(MIN_SCORE, MAX_SCORE))
    }

    pub fn score(&self, y: &Waveform) -> Result<f64> {
        self.score_mel(&MelAnalyzer::shared().forward(&y.samples)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Degraded copies drawn per utterance and degradation family.
    pub draws_per_family: usize,
    /// Every n-th utterance is held out for validation.
    pub validation_stride: usize,
    pub seed: u64,
}

impl Default for QualityTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            learning_rate: 3e-3,
            hidden: 64,
            draws_per_family: 2,
            validation_stride: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTrainReport {
    pub train_examples: usize,
    pub validation_examples: usize,
    pub train_mse: f64,
    pub validation_mse: f64,
    /// Mean score of untouched validation utterances.
    pub validation_clean_mean: f64,
    /// Fraction of validation utterances scoring lower with 10 dB noise.
    pub noise_monotonic_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Noise,
    Lowpass,
    Quantize,
    MelJitter,
}

const FAMILIES: [Family; 4] = [Family::Noise, Family::Lowpass, Family::Quantize, Family::MelJitter];

/// A severity-`s` degradation of `w` (`s = 0` leaves the audio clean).
fn degrade(w: &Waveform, family: Family, s: f64, rng: &mut ChaCha8Rng, analyzer: &MelAnalyzer) -> Result<MelSpectrogram> {
    let out = match family {
        Family::Noise => add_noise_at_snr(w, 45.0 - 45.0 * s, rng.random())?,
        Family::Lowpass => fft_lowpass(w, 8000.0 - 6500.0 * s),
        Family::Quantize => quantize_bits(w, (16.0 - 13.0 * s).round() as u32),
        Family::MelJitter => {
            let mut mel = analyzer.forward(&w.samples)?;
            let normal = Normal::new(0.0, 1.5 * s).map_err(|e| Error::invalid(e.to_string()))?;
            let raw: Vec<f32> = (0..mel.data.len()).map(|_| normal.sample(rng) as f32).collect();
            // Smooth over neighbouring frames so the jitter resembles
            // structured synthesis errors rather than white noise.
            let m = mel.n_mels;
            for f in 0..mel.n_frames {
                for b in 0..m {
                    let lo = f.saturating_sub(1);
                    let hi = (f + 1).min(mel.n_frames - 1);
                    let avg = (lo..=hi).map(|g| raw[g * m + b]).sum::<f32>() / (hi - lo + 1) as f32;
                    mel.data[f * m + b] += avg;
                }
            }
            let gl = GriffinLim {
                seed: rng.random(),
                ..GriffinLim::default()
            };
            gl.reconstruct(analyzer, &mel)?
        }
    };
    analyzer.forward(&out.samples)
}

fn resynthesized(w: &Waveform, analyzer: &MelAnalyzer, seed: u64) -> Result<MelSpectrogram> {
    let mel = analyzer.forward(&w.samples)?;
    let gl = GriffinLim {
        seed,
        ..GriffinLim::default()
    };
    analyzer.forward(&gl.reconstruct(analyzer, &mel)?.samples)
}

fn examples(utts: &[&Waveform], cfg: &QualityTrainConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
    let analyzer = MelAnalyzer::shared();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for w in utts {
        xs.push(features(&analyzer.forward(&w.samples)?));
        ys.push(MAX_SCORE as f32);
        xs.push(features(&resynthesized(w, &analyzer, rng.random())?));
        ys.push(MAX_SCORE as f32);
        for &family in &FAMILIES {
            for _ in 0..cfg.draws_per_family {
                let s: f64 = rng.random();
                xs.push(features(&degrade(w, family, s, rng, &analyzer)?));
                ys.push((MAX_SCORE - 4.0 * s) as f32);
            }
        }
    }
    Ok((xs, ys))
}

fn mse(model: &QualityProxy, xs: &[Vec<f32>], ys: &[f32]) -> Result<f64> {
    let pred = to_vec_f32(&model.forward(&model.standardized(xs)?)?)?;
    Ok(pred.iter().zip(ys).map(|(p, y)| ((p - y) as f64).powi(2)).sum::<f64>() / ys.len() as f64)
}

/// Fits the proxy on degraded copies of `corpus`.
pub fn train_quality_proxy(corpus: &[Utterance], cfg: &QualityTrainConfig) -> Result<(QualityProxy, QualityTrainReport)> {
    if cfg.validation_stride < 2 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::invalid("quality training needs stride ≥ 2, nonzero batch and width"));
    }
    let (train_w, val_w): (Vec<_>, Vec<_>) = corpus.iter().enumerate().partition(|(i, _)| i % cfg.validation_stride != 0);
    let train_w: Vec<&Waveform> = train_w.into_iter().map(|(_, u)| &u.waveform).collect();
    let val_w: Vec<&Waveform> = val_w.into_iter().map(|(_, u)| &u.waveform).collect();
    if train_w.is_empty() || val_w.is_empty() {
        return Err(Error::invalid("corpus too small to split for quality training"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (xs, ys) = examples(&train_w, cfg, &mut rng)?;
    let (vxs, vys) = examples(&val_w, cfg, &mut rng)?;

    let d = xs[0].len();
    let n = xs.len() as f64;
    let feature_mean: Vec<f32> = (0..d).map(|j| (xs.iter().map(|r| r[j] as f64).sum::<f64>() / n) as f32).collect();
    let feature_std: Vec<f32> = (0..d)
        .map(|j| {
            let var = xs.iter().map(|r| (r[j] - feature_mean[j]) as f64).map(|v| v * v).sum::<f64>() / n;
            (var.sqrt() as f32).max(1e-3)
        })
        .collect();
    let meta = QualityMeta {
        hidden: cfg.hidden,
        feature_mean,
        feature_std,
    };
    let mut store = ParamStore::seeded(cfg.seed ^ 0x51a1_17e5, DType::F32);
    let model = QualityProxy::build(&mut store, meta.clone())?;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 1e-4,
            ..Default::default()
        },
    )?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<Vec<f32>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<f32> = chunk.iter().map(|&i| ys[i]).collect();
            let target = Tensor::from_vec(by, chunk.len(), &DEVICE)?;
            let loss = (model.forward(&model.standardized(&bx)?)? - target)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
        }
    }
    let frozen = QualityProxy::build(&mut ParamStore::frozen(store.snapshot(), DType::F32), meta)?;
    let analyzer = MelAnalyzer::shared();
    let mut clean_scores = Vec::new();
    let mut monotone = 0usize;
    for (k, w) in val_w.iter().enumerate() {
        let clean = frozen.score(w)?;
        let noisy = frozen.score_mel(&analyzer.forward(&add_noise_at_snr(w, 10.0, cfg.seed + k as u64)?.samples)?)?;
        clean_scores.push(clean);
        monotone += usize::from(noisy < clean);
    }
    let report = QualityTrainReport {
        train_examples: xs.len(),
        validation_examples: vxs.len(),
        train_mse: mse(&frozen, &xs, &ys)?,
        validation_mse: mse(&frozen, &vxs, &vys)?,
        validation_clean_mean: clean_scores.iter().sum::<f64>() / clean_scores.len() as f64,
        noise_monotonic_fraction: monotone as f64 / val_w.len() as f64,
    };
    Ok((frozen, report))
}
