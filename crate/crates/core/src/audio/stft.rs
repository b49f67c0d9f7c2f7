//! Framed short-time Fourier transform without centre padding.
//!
//! Frame `f` covers samples `[f * hop, f * hop + win)`; the number of frames is
//! `floor((len - win) / hop) + 1`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Forward/inverse transforms for one window size.
pub struct Stft {
    pub win: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("win", &self.win)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            win,
            hop,
            window: hann(win),
            forward: planner.plan_fft_forward(win),
            inverse: planner.plan_fft_inverse(win),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// One-sided spectra, `[frames][win / 2 + 1]`.
    pub fn analyze<T: Copy + Into<f64>>(&self, samples: &[T]) -> Result<Vec<Vec<Complex64>>> {
        let frames = frame_count(samples.len(), self.win, self.hop);
        if frames == 0 {
            return Err(Error::TooShort {
                needed: self.win,
                got: samples.len(),
            });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win];
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let start = f * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(samples[start + n].into() * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.n_bins()].to_vec());
        }
        Ok(out)
    }

    /// Unnormalised inverse DFT of a one-sided spectrum treated as zero on the
    /// negative frequencies; returns the real part. This is the adjoint of the
    /// real-input forward transform restricted to the one-sided bins.
    pub fn adjoint_frame(&self, spectrum: &[Complex64], out: &mut [f64]) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win];
        buf[..spectrum.len()].copy_from_slice(spectrum);
        self.inverse.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }

    /// Inverse of one frame's one-sided spectrum with Hermitian completion.
    fn synth_frame(&self, spectrum: &[Complex64], out: &mut [f64]) {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win];
        buf[..spectrum.len()].copy_from_slice(spectrum);
        for k in 1..self.win - spectrum.len() + 1 {
            buf[self.win - k] = spectrum[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.win as f64;
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re * scale;
        }
    }

    /// Weighted overlap-add inverse (least-squares estimate for the window).
    pub fn synthesize(&self, spectra: &[Vec<Complex64>], len: usize) -> Vec<f32> {
        let mut acc = vec![0.0f64; len];
        let mut norm = vec![0.0f64; len];
        let mut frame = vec![0.0f64; self.win];
        for (f, spec) in spectra.iter().enumerate() {
            self.synth_frame(spec, &mut frame);
            let start = f * self.hop;
            for n in 0..self.win {
                if start + n >= len {
                    break;
                }
                acc[start + n] += frame[n] * self.window[n];
                norm[start + n] += self.window[n] * self.window[n];
            }
        }
        acc.iter()
            .zip(&norm)
            .map(|(&a, &w)| if w > 1e-8 { (a / w) as f32 } else { 0.0 })
            .collect()
    }
}
