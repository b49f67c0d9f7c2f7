//! Structural similarity of normalised log-magnitude spectrograms.

use serde::{Deserialize, Serialize};

use crate::audio::stft::Stft;
use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    /// Side of the square local-statistics window.
    pub window: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            window: 7,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        if self.window == 0 {
            return Err(Error::invalid("SSIM window must be nonzero"));
        }
        Ok(())
    }
}

/// A row-major 2-D array of `rows` time frames by `cols` frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn cropped_rows(&self, rows: usize) -> Self {
        Self {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    /// Affine map onto `[0, 1]`; a constant plane maps to zero.
    pub fn min_max_normalized(&self) -> Self {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect();
        Self { data, ..*self }
    }
}

/// SSIM of one pair of local statistics.
pub fn ssim_formula(mu_u: f64, mu_v: f64, var_u: f64, var_v: f64, cov: f64, p: &SsimParams) -> f64 {
    ((2.0 * mu_u * mu_v + p.c1) * (2.0 * cov + p.c2)) / ((mu_u * mu_u + mu_v * mu_v + p.c1) * (var_u + var_v + p.c2))
}

/// Mean SSIM over every fully contained `window × window` patch, using
/// population statistics.
pub fn ssim_planes(u: &Plane, v: &Plane, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if u.rows != v.rows || u.cols != v.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            u.rows, u.cols, v.rows, v.cols
        )));
    }
    let w = p.window;
    if u.rows < w || u.cols < w {
        return Err(Error::TooShort {
            needed: w,
            got: u.rows.min(u.cols),
        });
    }
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=u.rows - w {
        for c in 0..=u.cols - w {
            let (mut su, mut sv, mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + w {
                for j in c..c + w {
                    let (a, b) = (u.at(i, j), v.at(i, j));
                    su += a;
                    sv += b;
                    suu += a * a;
                    svv += b * b;
                    suv += a * b;
                }
            }
            let (mu, mv) = (su / n, sv / n);
            let var_u = suu / n - mu * mu;
            let var_v = svv / n - mv * mv;
            let cov = suv / n - mu * mv;
            total += ssim_formula(mu, mv, var_u, var_v, cov, p);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Log-dB STFT magnitude, frames by bins.
pub fn db_spectrogram(w: &Waveform) -> Result<Plane> {
    let stft = Stft::new(1024, 256);
    let spectra = stft.analyze(&w.samples)?;
    let rows = spectra.len();
    let cols = stft.n_bins();
    let data = spectra
        .iter()
        .flat_map(|frame| frame.iter().map(|c| 10.0 * (c.norm_sqr() + 1e-10).log10()))
        .collect();
    Plane::new(rows, cols, data)
}

/// SSIM between the normalised dB spectrograms of two waveforms, cropped to
/// their common frame count.
pub fn spectrogram_ssim(y: &Waveform, y_adv: &Waveform, p: &SsimParams) -> Result<f64> {
    let a = db_spectrogram(y)?;
    let b = db_spectrogram(y_adv)?;
    let rows = a.rows.min(b.rows);
    let a = a.cropped_rows(rows).min_max_normalized();
    let b = b.cropped_rows(rows).min_max_normalized();
    ssim_planes(&a, &b, p)
}
