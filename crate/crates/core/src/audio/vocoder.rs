//! Mel-to-waveform phase reconstruction.
//!
//! Linear magnitudes are recovered per frame by non-negative least squares on
//! the filterbank, then a phase is found by alternating projections between
//! the target magnitudes and consistent STFTs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::mel::{MelAnalyzer, MelSpectrogram};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriffinLim {
    pub iterations: usize,
    /// Multiplicative NNLS sweeps used to invert the filterbank.
    pub nnls_iterations: usize,
    pub seed: u64,
}

impl Default for GriffinLim {
    fn default() -> Self {
        Self {
            iterations: 32,
            nnls_iterations: 40,
            seed: 0,
        }
    }
}

impl GriffinLim {
    /// Non-negative magnitudes `m` with `project(m) ≈ exp(mel)` for one frame.
    pub fn invert_filterbank(&self, analyzer: &MelAnalyzer, log_mel: &[f32]) -> Vec<f64> {
        let target: Vec<f64> = log_mel.iter().map(|&v| (v as f64).exp()).collect();
        let n_bins = analyzer.stft.n_bins();
        let mut numer = vec![0.0; n_bins];
        analyzer.project_transpose(&target, &mut numer);
        let mut denom = vec![0.0; n_bins];
        // Column sums give a scale-correct start.
        analyzer.project_transpose(&vec![1.0; target.len()], &mut denom);
        let mut m: Vec<f64> = numer
            .iter()
            .zip(&denom)
            .map(|(&n, &d)| if d > 0.0 { n / (d * d).max(1e-20) } else { 0.0 })
            .collect();
        let mut back = vec![0.0; n_bins];
        for _ in 0..self.nnls_iterations {
            let approx = analyzer.project(&m);
            analyzer.project_transpose(&approx, &mut back);
            for ((v, &n), &b) in m.iter_mut().zip(&numer).zip(&back) {
                if b > 1e-30 {
                    *v *= n / b;
                }
            }
        }
        m
    }

    pub fn reconstruct(&self, analyzer: &MelAnalyzer, mel: &MelSpectrogram) -> Result<Waveform> {
        if mel.n_frames == 0 {
            return Err(Error::EmptyAudio);
        }
        if mel.n_mels != analyzer.cfg.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "mel has {} bands, analyzer {}",
                mel.n_mels, analyzer.cfg.n_mels
            )));
        }
        let stft = &analyzer.stft;
        let len = (mel.n_frames - 1) * stft.hop + stft.win;
        let mags: Vec<Vec<f64>> = mel.frames().map(|f| self.invert_filterbank(analyzer, f)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut spectra: Vec<Vec<Complex64>> = mags
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&a| Complex64::from_polar(a, rng.random_range(0.0..std::f64::consts::TAU)))
                    .collect()
            })
            .collect();
        for _ in 0..self.iterations {
            let y = stft.synthesize(&spectra, len);
            let est = stft.analyze(&y)?;
            for ((spec, e), m) in spectra.iter_mut().zip(&est).zip(&mags) {
                for ((s, c), &a) in spec.iter_mut().zip(e).zip(m) {
                    let n = c.norm();
                    *s = if n > 1e-12 { c * (a / n) } else { Complex64::new(a, 0.0) };
                }
            }
        }
        let samples = stft.synthesize(&spectra, len);
        Ok(Waveform::new(samples, SAMPLE_RATE).clamped())
    }
}
