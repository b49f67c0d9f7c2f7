//! Mel-cepstral distortion over DTW-aligned frames.

use crate::audio::mel::{mel_spectrogram, MelSpectrogram};
use crate::audio::Waveform;
use crate::error::{Error, Result};

use super::dtw::align;

/// Cepstral coefficients kept per frame (the energy term is dropped).
pub const CEPSTRAL_ORDER: usize = 13;

/// `10·√2 / ln 10`: converts natural-log cepstral distance to dB.
pub fn mcd_scale() -> f64 {
    10.0 * 2f64.sqrt() / std::f64::consts::LN_10
}

/// Orthonormal DCT-II of each log-mel frame, coefficients `1..=order`.
pub fn cepstra(mel: &MelSpectrogram, order: usize) -> Result<Vec<Vec<f64>>> {
    let m = mel.n_mels;
    if order >= m {
        return Err(Error::invalid(format!("cepstral order {order} needs more than {m} bands")));
    }
    let norm = (2.0 / m as f64).sqrt();
    Ok(mel
        .frames()
        .map(|frame| {
            (1..=order)
                .map(|k| {
                    norm * frame
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v as f64 * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / m as f64).cos())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Scaled mean Euclidean distance along the optimal alignment path.
pub fn mcd_cepstra(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let order = a.first().map(Vec::len).ok_or(Error::EmptyAudio)?;
    if b.iter().chain(a).any(|f| f.len() != order) {
        return Err(Error::ShapeMismatch("cepstral order differs between frames".into()));
    }
    let (_, path) = align(a.len(), b.len(), |i, j| euclid(&a[i], &b[j]))?;
    let sum: f64 = path.iter().map(|&(i, j)| euclid(&a[i], &b[j])).sum();
    Ok(mcd_scale() * sum / path.len() as f64)
}

pub fn mcd(y: &Waveform, y_adv: &Waveform) -> Result<f64> {
    let a = cepstra(&mel_spectrogram(y)?, CEPSTRAL_ORDER)?;
    let b = cepstra(&mel_spectrogram(y_adv)?, CEPSTRAL_ORDER)?;
    mcd_cepstra(&a, &b)
}
