//! Log-mel front end shared by the score network, the identity encoders and
//! the metrics.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::stft::{frame_count, Stft};
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win: 1024,
            hop: 256,
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-5,
        }
    }
}

/// Log-amplitude mel spectrogram stored frame-major: `data[frame * n_mels + band]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * n_mels {
            return Err(Error::ShapeMismatch(format!(
                "mel data of length {} does not match {n_frames}x{n_mels}",
                data.len()
            )));
        }
        Ok(Self {
            n_frames,
            n_mels,
            data,
        })
    }

    /// Build from band-major data (`[n_mels][n_frames]`), the layout tensors use.
    pub fn from_band_major(n_mels: usize, n_frames: usize, bands: &[f32]) -> Result<Self> {
        if bands.len() != n_frames * n_mels {
            return Err(Error::ShapeMismatch("band-major mel data".into()));
        }
        let mut data = vec![0.0; bands.len()];
        for m in 0..n_mels {
            for f in 0..n_frames {
                data[f * n_mels + m] = bands[m * n_frames + f];
            }
        }
        Self::new(n_frames, n_mels, data)
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.data[f * self.n_mels..(f + 1) * self.n_mels]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.n_mels)
    }

    /// `[n_mels][n_frames]` layout.
    pub fn to_band_major(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for f in 0..self.n_frames {
            for m in 0..self.n_mels {
                out[m * self.n_frames + f] = self.data[f * self.n_mels + m];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// One triangular band: weights for bins `start..start + weights.len()`.
#[derive(Debug, Clone)]
pub struct MelBand {
    pub start: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

/// Slaney-scale, area-normalised triangular filterbank.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<MelBand> {
    let n_bins = cfg.win / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let pts: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.win as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            let enorm = 2.0 / (r - l);
            let mut start = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0) * enorm;
                if w > 0.0 {
                    start.get_or_insert(k);
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            MelBand {
                start: start.unwrap_or(0),
                weights,
                center_hz: c,
            }
        })
        .collect()
}

/// STFT plan plus filterbank for one [`MelConfig`].
#[derive(Debug)]
pub struct MelAnalyzer {
    pub cfg: MelConfig,
    pub stft: Stft,
    pub bands: Vec<MelBand>,
}

/// Intermediate values kept by [`MelAnalyzer::forward_with_cache`] for the VJP.
pub struct MelCache {
    pub spectra: Vec<Vec<Complex64>>,
    /// Pre-log mel energies, `[frame][band]`.
    pub energies: Vec<Vec<f64>>,
    pub len: usize,
}

impl MelAnalyzer {
    pub fn new(cfg: MelConfig) -> Self {
        let stft = Stft::new(cfg.win, cfg.hop);
        let bands = mel_filterbank(&cfg);
        Self { cfg, stft, bands }
    }

    /// Shared analyzer for the default configuration.
    pub fn shared() -> Arc<MelAnalyzer> {
        static SHARED: OnceLock<Arc<MelAnalyzer>> = OnceLock::new();
        SHARED
            .get_or_init(|| Arc::new(MelAnalyzer::new(MelConfig::default())))
            .clone()
    }

    pub fn n_frames(&self, len: usize) -> usize {
        frame_count(len, self.cfg.win, self.cfg.hop)
    }

    /// Mel energies of one spectrum of magnitudes.
    pub fn project(&self, mags: &[f64]) -> Vec<f64> {
        self.bands
            .iter()
            .map(|b| {
                b.weights
                    .iter()
                    .zip(&mags[b.start..])
                    .map(|(w, m)| w * m)
                    .sum()
            })
            .collect()
    }

    /// Transposed projection: band values back onto FFT bins.
    pub fn project_transpose(&self, band_values: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (b, &v) in self.bands.iter().zip(band_values) {
            for (i, w) in b.weights.iter().enumerate() {
                out[b.start + i] += w * v;
            }
        }
    }

    pub fn forward_with_cache<T: Copy + Into<f64>>(
        &self,
        samples: &[T],
    ) -> Result<(MelSpectrogram, MelCache)> {
        let spectra = self.stft.analyze(samples)?;
        let n_frames = spectra.len();
        let mut data = Vec::with_capacity(n_frames * self.cfg.n_mels);
        let mut energies = Vec::with_capacity(n_frames);
        for spec in &spectra {
            let mags: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
            let e = self.project(&mags);
            data.extend(e.iter().map(|&v| v.max(self.cfg.log_floor).ln() as f32));
            energies.push(e);
        }
        let mel = MelSpectrogram::new(n_frames, self.cfg.n_mels, data)?;
        Ok((
            mel,
            MelCache {
                spectra,
                energies,
                len: samples.len(),
            },
        ))
    }

    pub fn forward<T: Copy + Into<f64>>(&self, samples: &[T]) -> Result<MelSpectrogram> {
        Ok(self.forward_with_cache(samples)?.0)
    }

    /// Vector-Jacobian product of the log-mel map. `grad` is frame-major
    /// (`[frame][band]`); returns the gradient with respect to the samples.
    pub fn backward(&self, cache: &MelCache, grad: &[f64]) -> Vec<f64> {
        let n_mels = self.cfg.n_mels;
        let win = self.cfg.win;
        let mut out = vec![0.0f64; cache.len];
        let mut g_bins = vec![0.0f64; self.stft.n_bins()];
        let mut frame = vec![0.0f64; win];
        let mut g_spec = vec![Complex64::new(0.0, 0.0); self.stft.n_bins()];
        for (f, (spec, energy)) in cache.spectra.iter().zip(&cache.energies).enumerate() {
            let g_energy: Vec<f64> = energy
                .iter()
                .zip(&grad[f * n_mels..(f + 1) * n_mels])
                .map(|(&e, &g)| if e > self.cfg.log_floor { g / e } else { 0.0 })
                .collect();
            self.project_transpose(&g_energy, &mut g_bins);
            for ((gs, c), &gm) in g_spec.iter_mut().zip(spec).zip(&g_bins) {
                let mag = c.norm();
                *gs = if mag > 1e-12 {
                    *c * (gm / mag)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.stft.adjoint_frame(&g_spec, &mut frame);
            let start = f * self.cfg.hop;
            for n in 0..win {
                out[start + n] += frame[n] * self.stft.window[n];
            }
        }
        out
    }
}

/// Log-mel spectrogram with the default 80-band configuration.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    MelAnalyzer::shared().forward(&w.samples)
}
