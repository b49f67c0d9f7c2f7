//! Denoising score matching on parallel (source, reference, target) triples.

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{DiffVc, MelStats};
use super::sde::SdeSchedule;
use super::unet::{ScoreNet, TapRequest, UNetConfig};
use crate::audio::corpus::Utterance;
use crate::audio::mel::{MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, DEVICE};

/// One conversion example: `target` carries the content of `source` in the
/// voice of `reference`.
#[derive(Debug, Clone)]
pub struct TrainingTriple {
    pub target: MelSpectrogram,
    pub source: MelSpectrogram,
    pub reference: MelSpectrogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training crop of target and source.
    pub crop_frames: usize,
    pub learning_rate: f64,
    /// Smallest diffusion time sampled during training.
    pub t_min: f64,
    /// Fraction of triples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 16,
            crop_frames: 32,
            learning_rate: 2e-3,
            t_min: 1e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub val_initial: f64,
    pub val_final: f64,
    pub steps: usize,
}

/// Builds parallel triples: for each utterance `(s, u)` a source `(s', u)`
/// with `s' != s` and a reference `(s, u')` with `u' != u`, both drawn with
/// the seeded generator. Without parallel content the source falls back to
/// the target itself.
pub fn build_triples(corpus: &[Utterance], seed: u64) -> Result<Vec<TrainingTriple>> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let analyzer = MelAnalyzer::shared();
    let mels: Vec<MelSpectrogram> = corpus
        .iter()
        .map(|u| analyzer.forward(&u.waveform.samples))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(corpus.len());
    for (i, u) in corpus.iter().enumerate() {
        let sources: Vec<usize> = (0..corpus.len())
            .filter(|&j| corpus[j].speaker_id != u.speaker_id && u.content.is_some() && corpus[j].content == u.content)
            .collect();
        let refs: Vec<usize> = (0..corpus.len())
            .filter(|&j| j != i && corpus[j].speaker_id == u.speaker_id)
            .collect();
        let source = sources.choose(&mut rng).copied().unwrap_or(i);
        let reference = refs.choose(&mut rng).copied().unwrap_or(i);
        triples.push(TrainingTriple {
            target: mels[i].clone(),
            source: mels[source].clone(),
            reference: mels[reference].clone(),
        });
    }
    Ok(triples)
}

struct Batch {
    x_t: Tensor,
    source: Tensor,
    reference: Tensor,
    noise: Tensor,
    t: Vec<f64>,
    sigma: Vec<f64>,
}

fn crop(mel: &MelSpectrogram, start: usize, len: usize) -> Vec<f32> {
    let bands = mel.to_band_major();
    let mut out = Vec::with_capacity(mel.n_mels * len);
    for b in 0..mel.n_mels {
        out.extend_from_slice(&bands[b * mel.n_frames + start..][..len]);
    }
    out
}

fn make_batch<R: Rng>(
    items: &[&TrainingTriple],
    sde: &SdeSchedule,
    stats: &MelStats,
    cfg: &ScoreTrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let n_mels = items[0].target.n_mels;
    let frames = items.iter().map(|it| it.target.n_frames.min(it.source.n_frames)).min().unwrap_or(0);
    let crop_len = cfg.crop_frames.min(frames).max(1);
    let ref_frames = items.iter().map(|it| it.reference.n_frames).min().unwrap_or(0);
    let norm = |v: f32| (v - stats.mean) / stats.std;
    let (mut xs, mut srcs, mut refs, mut zs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut t, mut sigma) = (Vec::new(), Vec::new());
    for it in items {
        let start = rng.random_range(0..=frames - crop_len);
        let ti = rng.random_range(cfg.t_min..1.0);
        let (a, s) = (sde.alpha(ti), sde.sigma(ti));
        for v in crop(&it.target, start, crop_len) {
            let z: f32 = rng.sample(StandardNormal);
            xs.push((a * norm(v) as f64 + s * z as f64) as f32);
            zs.push(z);
        }
        srcs.extend(crop(&it.source, start, crop_len).into_iter().map(norm));
        refs.extend(crop(&it.reference, 0, ref_frames).into_iter().map(norm));
        t.push(ti);
        sigma.push(s);
    }
    let b = items.len();
    Ok(Batch {
        x_t: Tensor::from_vec(xs, (b, n_mels, crop_len), &DEVICE)?,
        source: Tensor::from_vec(srcs, (b, n_mels, crop_len), &DEVICE)?,
        reference: Tensor::from_vec(refs, (b, n_mels, ref_frames), &DEVICE)?,
        noise: Tensor::from_vec(zs, (b, n_mels, crop_len), &DEVICE)?,
        t,
        sigma,
    })
}

fn batch_loss(net: &ScoreNet, batch: &Batch) -> Result<Tensor> {
    let out = net.forward(&batch.x_t, &batch.source, &batch.reference, &batch.t, &batch.sigma, &TapRequest::none())?;
    Ok((out.eps - &batch.noise)?.sqr()?.mean_all()?)
}

/// Cosine decay from `base` to a tenth of it over `total` steps.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Trains a score network from seeded initialisation.
///
/// The validation loss uses fixed crops, times and noise so that values are
/// comparable across epochs. A non-finite loss aborts training.
pub fn train_score(
    triples: &[TrainingTriple],
    sde: SdeSchedule,
    unet: UNetConfig,
    cfg: &ScoreTrainConfig,
) -> Result<(DiffVc, ScoreTrainReport)> {
    if triples.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let stats = MelStats::fit(triples.iter().map(|t| &t.target))?;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_val = ((triples.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, triples.len());
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx: Vec<usize> = if train_idx.is_empty() { val_idx.to_vec() } else { train_idx.to_vec() };

    let mut store = ParamStore::seeded(cfg.seed, DType::F32);
    let net = ScoreNet::new(&mut store, unet)?;

    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let val_batches: Vec<Batch> = val_idx
        .chunks(cfg.batch_size.max(1))
        .map(|c| {
            let items: Vec<&TrainingTriple> = c.iter().map(|&i| &triples[i]).collect();
            make_batch(&items, &sde, &stats, cfg, &mut val_rng)
        })
        .collect::<Result<_>>()?;
    let validate = |net: &ScoreNet| -> Result<f64> {
        let mut total = 0.0;
        for b in &val_batches {
            total += batch_loss(net, b)?.to_scalar::<f32>()? as f64 * b.t.len() as f64;
        }
        Ok(total / n_val as f64)
    };
    let val_initial = validate(&net)?;

    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let total_steps = cfg.epochs * train_idx.len().div_ceil(cfg.batch_size.max(1));
    let mut shuffled = train_idx.clone();
    for epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in shuffled.chunks(cfg.batch_size.max(1)) {
            let items: Vec<&TrainingTriple> = chunk.iter().map(|&i| &triples[i]).collect();
            let batch = make_batch(&items, &sde, &stats, cfg, &mut rng)?;
            let loss = batch_loss(&net, &batch)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "score loss became {value} at epoch {epoch}, step {steps}"
                )));
            }
            opt.set_learning_rate(cosine_lr(cfg.learning_rate, steps, total_steps));
            opt.backward_step(&loss)?;
            sum += value * chunk.len() as f64;
            count += chunk.len();
            steps += 1;
        }
        let mean = sum / count as f64;
        log::debug!("score epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let val_final = validate(&net)?;
    let model = DiffVc::from_tensors(store.snapshot(), unet, sde, stats)?;
    Ok((
        model,
        ScoreTrainReport {
            epoch_losses,
            val_initial,
            val_final,
            steps,
        },
    ))
}
