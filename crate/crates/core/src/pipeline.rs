//! Clone synthesis and metric evaluation shared by the experiments.

use crate::audio::mel::mel_spectrogram;
use crate::audio::vocoder::GriffinLim;
use crate::audio::Waveform;
use crate::diffusion::{DiffVc, SynthesisResult};
use crate::error::Result;
use crate::identity::{asv_accept, Encoder, Enrollment};
use crate::metrics::{dtw_distance, mcd, snr_db, spectrogram_ssim, DecisionThresholds, QualityProxy, SampleMetrics, SsimParams};

/// A protected reference together with what is needed to attack it.
#[derive(Debug, Clone)]
pub struct ProtectedSample {
    pub id: String,
    /// Speaker whose enrollment the clone is verified against.
    pub speaker_id: String,
    pub x_ref: Waveform,
    pub x_adv: Waveform,
    pub x_src: Waveform,
    /// Seed of the reverse diffusion and vocoder for this sample.
    pub clone_seed: u64,
}

/// Frozen models and settings used to clone and score.
pub struct Evaluator<'a> {
    pub model: &'a DiffVc,
    pub asv: &'a Encoder,
    pub quality: &'a QualityProxy,
    pub thresholds: DecisionThresholds,
    pub ssim: SsimParams,
    pub inference_steps: usize,
    pub vocoder: GriffinLim,
}

impl Evaluator<'_> {
    pub fn clone_voice(&self, x_src: &Waveform, reference: &Waveform, seed: u64) -> Result<SynthesisResult> {
        self.model.synthesize(x_src, reference, self.inference_steps, seed, &self.vocoder)
    }

    /// Metrics of clone `y_adv` against the undefended clone `y`; the SNR
    /// measures the perturbation `x_adv − x_ref`.
    pub fn metrics(
        &self,
        id: &str,
        x_ref: &Waveform,
        x_adv: &Waveform,
        y: &Waveform,
        y_adv: &Waveform,
        enrollment: &Enrollment,
    ) -> Result<SampleMetrics> {
        let decision = asv_accept(self.asv, y_adv, enrollment, self.thresholds.tau_asv)?;
        let quality = self.quality.score(y_adv)?;
        Ok(SampleMetrics {
            id: id.to_string(),
            asv_score: decision.score,
            quality,
            dtw: dtw_distance(&mel_spectrogram(y)?, &mel_spectrogram(y_adv)?)?,
            ssim: spectrogram_ssim(y, y_adv, &self.ssim)?,
            mcd: mcd(y, y_adv)?,
            snr: snr_db(&x_ref.samples, &x_adv.samples)?,
            success: self.thresholds.success(decision.score, quality),
        })
    }
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
