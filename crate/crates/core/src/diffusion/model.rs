//! Trained voice-conversion model: score network, schedule and the mel
//! normalisation it was trained with.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sde::SdeSchedule;
use super::unet::{FeatureTapBundle, ScoreNet, TapRequest, UNetConfig, LAYER_IDS};
use crate::audio::mel::{MelAnalyzer, MelSpectrogram};
use crate::audio::vocoder::GriffinLim;
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, to_vec_f32, ParamStore, DEVICE};

pub const CHECKPOINT_KIND: &str = "score-model";

/// Global affine normalisation applied to log-mels before the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: f32,
    pub std: f32,
}

impl MelStats {
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let (mut n, mut s, mut sq) = (0usize, 0.0f64, 0.0f64);
        for m in mels {
            for &v in &m.data {
                n += 1;
                s += v as f64;
                sq += (v as f64).powi(2);
            }
        }
        if n == 0 {
            return Err(Error::EmptyAudio);
        }
        let mean = s / n as f64;
        let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
        Ok(Self {
            mean: mean as f32,
            std: std as f32,
        })
    }

    /// `[1, n_mels, F]` standardised tensor of one mel.
    pub fn tensor(&self, mel: &MelSpectrogram) -> Result<Tensor> {
        let data: Vec<f32> = mel.to_band_major().iter().map(|v| (v - self.mean) / self.std).collect();
        Ok(Tensor::from_vec(data, (1, mel.n_mels, mel.n_frames), &DEVICE)?)
    }

    /// Standardises a band-major `[n_mels, F]` log-mel tensor (graph-preserving).
    pub fn standardize(&self, log_mel: &Tensor) -> Result<Tensor> {
        Ok(log_mel.affine(1.0 / self.std as f64, -(self.mean / self.std) as f64)?)
    }

    /// Inverse of [`MelStats::tensor`] for a `[1, n_mels, F]` tensor.
    pub fn mel(&self, t: &Tensor) -> Result<MelSpectrogram> {
        let (_, n_mels, frames) = t.dims3()?;
        let v: Vec<f32> = to_vec_f32(t)?.iter().map(|x| x * self.std + self.mean).collect();
        MelSpectrogram::from_band_major(n_mels, frames, &v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    unet: UNetConfig,
    sde: SdeSchedule,
    stats: MelStats,
    layers: Vec<String>,
}

/// Output of one conversion run.
#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub mel_out: MelSpectrogram,
    pub waveform_out: Waveform,
    pub inference_steps: usize,
    pub rng_seed: u64,
    /// Wall-clock seconds spent in the reverse diffusion.
    pub seconds: f64,
}

/// Frozen diffusion VC model.
#[derive(Debug)]
pub struct DiffVc {
    pub net: ScoreNet,
    pub sde: SdeSchedule,
    pub stats: MelStats,
    tensors: BTreeMap<String, Tensor>,
}

impl DiffVc {
    /// Builds a frozen model from parameter tensors.
    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        unet: UNetConfig,
        sde: SdeSchedule,
        stats: MelStats,
    ) -> Result<Self> {
        let mut store = ParamStore::frozen(tensors, DType::F32);
        let net = ScoreNet::new(&mut store, unet)?;
        Ok(Self {
            net,
            sde,
            stats,
            tensors: store.snapshot(),
        })
    }

    /// Untrained model with seeded weights.
    pub fn initialized(unet: UNetConfig, sde: SdeSchedule, stats: MelStats, seed: u64) -> Result<Self> {
        let mut store = ParamStore::seeded(seed, DType::F32);
        ScoreNet::new(&mut store, unet)?;
        Self::from_tensors(store.snapshot(), unet, sde, stats)
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            unet: *self.net.config(),
            sde: self.sde,
            stats: self.stats,
            layers: LAYER_IDS.iter().map(|s| s.to_string()).collect(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &self.tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta): (_, ModelMeta) = checkpoint::load(path, CHECKPOINT_KIND)?;
        if meta.layers != LAYER_IDS {
            return Err(Error::Checkpoint(format!(
                "{}: layer registry {:?} does not match this build",
                path.display(),
                meta.layers
            )));
        }
        Self::from_tensors(tensors, meta.unet, meta.sde, meta.stats)
    }

    /// One network evaluation on standardised `[B, n_mels, F]` inputs at
    /// diffusion times `t`.
    pub fn forward_with_taps(
        &self,
        x_t: &Tensor,
        source: &Tensor,
        reference: &Tensor,
        t: &[f64],
        taps: &TapRequest,
    ) -> Result<FeatureTapBundle> {
        for &ti in t {
            SdeSchedule::check_time(ti)?;
        }
        let sigma: Vec<f64> = t.iter().map(|&ti| self.sde.sigma(ti)).collect();
        self.net.forward(x_t, source, reference, t, &sigma, taps)
    }

    /// Reverse diffusion from the standard normal prior over `steps` steps.
    pub fn convert_mel(
        &self,
        source: &MelSpectrogram,
        reference: &MelSpectrogram,
        steps: usize,
        seed: u64,
    ) -> Result<MelSpectrogram> {
        if steps < 1 {
            return Err(Error::invalid("inference steps must be at least 1"));
        }
        let src = self.stats.tensor(source)?;
        let refm = self.stats.tensor(reference)?;
        let n = source.data.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let h = 1.0 / steps as f64;
        let none = TapRequest::none();
        for k in 1..=steps {
            let t = SdeSchedule::step_time(k, steps);
            let xt = Tensor::from_slice(&x, (1, source.n_mels, source.n_frames), &DEVICE)?;
            let bundle = self.forward_with_taps(&xt, &src, &refm, &[t], &none)?;
            let score = to_vec_f32(&bundle.score)?;
            for (xi, &si) in x.iter_mut().zip(&score) {
                let z = (k < steps).then(|| rng.sample::<f64, _>(StandardNormal));
                *xi = self.sde.reverse_step(*xi as f64, si as f64, t, h, z) as f32;
            }
        }
        let out = Tensor::from_vec(x, (1, source.n_mels, source.n_frames), &DEVICE)?;
        self.stats.mel(&out)
    }

    /// Converts `x_src` to the voice of `x_ref` and vocodes the result.
    pub fn synthesize(
        &self,
        x_src: &Waveform,
        x_ref: &Waveform,
        steps: usize,
        seed: u64,
        vocoder: &GriffinLim,
    ) -> Result<SynthesisResult> {
        let analyzer = MelAnalyzer::shared();
        let src = analyzer.forward(&x_src.samples)?;
        let refm = analyzer.forward(&x_ref.samples)?;
        let start = Instant::now();
        let mel_out = self.convert_mel(&src, &refm, steps, seed)?;
        let seconds = start.elapsed().as_secs_f64();
        let gl = GriffinLim { seed, ..*vocoder };
        let waveform_out = gl.reconstruct(&analyzer, &mel_out)?;
        Ok(SynthesisResult {
            mel_out,
            waveform_out,
            inference_steps: steps,
            rng_seed: seed,
            seconds,
        })
    }
}
