//! Lossy channel simulations applied to protected audio.

use std::path::PathBuf;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{quantize_pcm16, read_wav, write_wav, Waveform};
use crate::error::{Error, Result};
use crate::metrics::report::snr_db;

/// Environment variable naming an external codec executable, invoked as
/// `<codec> <in.wav> <out.wav> <kbps>`.
pub const CODEC_ENV: &str = "VOXSHIELD_CODEC";

pub const COMPRESSION_LEVELS: [f64; 5] = [128.0, 96.0, 64.0, 48.0, 32.0];
pub const NOISE_LEVELS: [f64; 5] = [30.0, 25.0, 20.0, 15.0, 10.0];
pub const LOWPASS_LEVELS: [f64; 5] = [7000.0, 6000.0, 5000.0, 4000.0, 3000.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Compression,
    GaussianNoise,
    Lowpass,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Compression => "compression",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::Lowpass => "lowpass",
        }
    }

    /// Swept levels, mildest first.
    pub fn levels(self) -> &'static [f64; 5] {
        match self {
            TransformKind::Compression => &COMPRESSION_LEVELS,
            TransformKind::GaussianNoise => &NOISE_LEVELS,
            TransformKind::Lowpass => &LOWPASS_LEVELS,
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compression" => Ok(TransformKind::Compression),
            "gaussian_noise" | "noise" => Ok(TransformKind::GaussianNoise),
            "lowpass" => Ok(TransformKind::Lowpass),
            _ => Err(Error::invalid(format!("unknown transform `{s}`"))),
        }
    }
}

/// `level` is kbps, target SNR in dB or cutoff in Hz depending on `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossyTransform {
    pub kind: TransformKind,
    pub level: f64,
}

/// How a transform was realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformOutcome {
    /// The compression proxy stood in for a real codec.
    pub proxy: bool,
    /// The level is physically valid but outside the swept set.
    pub out_of_range: bool,
}

impl LossyTransform {
    pub fn new(kind: TransformKind, level: f64) -> Self {
        Self { kind, level }
    }

    /// Ok(true) when the level is outside the swept set but still usable.
    pub fn validate(&self, sample_rate: u32) -> Result<bool> {
        let usable = self.level.is_finite()
            && match self.kind {
                TransformKind::Compression => self.level > 0.0,
                TransformKind::GaussianNoise => true,
                TransformKind::Lowpass => self.level > 0.0 && self.level < sample_rate as f64 / 2.0,
            };
        if !usable {
            return Err(Error::invalid(format!("{} level {}", self.kind.name(), self.level)));
        }
        Ok(!self.kind.levels().contains(&self.level))
    }
}

impl std::fmt::Display for LossyTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.kind.name(), self.level)
    }
}

/// `(cutoff Hz, bits)` of the compression proxy for a bitrate; lower bitrates
/// lose more bandwidth and resolution. Off-grid bitrates interpolate linearly
/// between neighbours and clamp at the ends.
pub fn compression_proxy_params(kbps: f64) -> (f64, u32) {
    const TABLE: [(f64, f64, f64); 5] = [
        (32.0, 4000.0, 7.0),
        (48.0, 5500.0, 8.0),
        (64.0, 7000.0, 9.0),
        (96.0, 9000.0, 10.0),
        (128.0, 11000.0, 12.0),
    ];
    let k = kbps.clamp(TABLE[0].0, TABLE[4].0);
    let i = TABLE.iter().rposition(|r| r.0 <= k).unwrap_or(0).min(3);
    let (lo, hi) = (TABLE[i], TABLE[i + 1]);
    let w = (k - lo.0) / (hi.0 - lo.0);
    let cutoff = lo.1 + w * (hi.1 - lo.1);
    let bits = (lo.2 + w * (hi.2 - lo.2)).round() as u32;
    (cutoff, bits)
}

/// Zeroes every DFT bin above `cutoff` over the whole signal.
pub fn fft_lowpass(x: &Waveform, cutoff: f64) -> Waveform {
    let n = x.len();
    if n == 0 {
        return x.clone();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.samples.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let bin_hz = x.sample_rate as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * bin_hz;
        if freq > cutoff {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let samples = buf.iter().map(|c| (c.re / n as f64) as f32).collect();
    Waveform::new(samples, x.sample_rate)
}

/// Uniform mid-tread quantisation of `[-1, 1]` to `bits` bits.
pub fn quantize_bits(x: &Waveform, bits: u32) -> Waveform {
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let samples = x
        .samples
        .iter()
        .map(|&v| ((v as f64).clamp(-1.0, 1.0) * levels).round() / levels)
        .map(|v| v as f32)
        .collect();
    Waveform::new(samples, x.sample_rate)
}

/// Adds seeded white noise scaled so that the measured SNR, after clamping
/// to `[-1, 1]`, is within 0.1 dB of `snr`.
pub fn add_noise_at_snr(x: &Waveform, snr: f64, seed: u64) -> Result<Waveform> {
    let signal: f64 = x.samples.iter().map(|&v| (v as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::invalid("noise at a target SNR needs a nonzero signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let power: f64 = noise.iter().map(|v| v * v).sum();
    let apply = |k: f64| -> Waveform {
        let samples = x
            .samples
            .iter()
            .zip(&noise)
            .map(|(&s, &z)| (s as f64 + k * z).clamp(-1.0, 1.0) as f32)
            .collect();
        Waveform::new(samples, x.sample_rate)
    };
    let measured = |w: &Waveform| snr_db(&x.samples, &w.samples).map(|s| s.db());
    let exact = (signal / (power * 10f64.powf(snr / 10.0))).sqrt();
    let out = apply(exact);
    if (measured(&out)? - snr).abs() <= 0.05 {
        return Ok(out);
    }
    // Clipping removed noise energy: the measured SNR is monotone in the
    // scale, so bisect on it.
    let (mut lo, mut hi) = (exact, exact);
    while measured(&apply(hi))? > snr {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::invalid(format!("SNR {snr} dB unreachable under clipping")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let candidate = apply(mid);
        let m = measured(&candidate)?;
        if (m - snr).abs() <= 0.05 {
            return Ok(candidate);
        }
        if m > snr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let candidate = apply(0.5 * (lo + hi));
    if (measured(&candidate)? - snr).abs() > 0.1 {
        return Err(Error::invalid(format!("could not reach SNR {snr} dB")));
    }
    Ok(candidate)
}

fn external_codec(x: &Waveform, kbps: f64, codec: &PathBuf, seed: u64) -> Result<Waveform> {
    let dir = std::env::temp_dir().join(format!("voxshield-codec-{}-{seed}-{kbps}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let input = dir.join("in.wav");
    let output = dir.join("out.wav");
    write_wav(&input, &quantize_pcm16(x))?;
    let status = Command::new(codec)
        .arg(&input)
        .arg(&output)
        .arg(format!("{kbps}"))
        .status()
        .map_err(|e| Error::Codec(format!("{}: {e}", codec.display())))?;
    if !status.success() {
        return Err(Error::Codec(format!("{} exited with {status}", codec.display())));
    }
    let decoded = read_wav(&output)?;
    let _ = std::fs::remove_dir_all(&dir);
    if decoded.sample_rate != x.sample_rate {
        return Err(Error::Codec(format!(
            "codec changed the sample rate to {}",
            decoded.sample_rate
        )));
    }
    // Codec delay and padding change the length by less than a frame.
    Ok(decoded.fit_length(x.len()))
}

/// Applies `t` to `x`. Compression uses the executable in [`CODEC_ENV`] when
/// set, or the proxy when `allow_proxy` holds.
pub fn apply_transform(x: &Waveform, t: &LossyTransform, seed: u64, allow_proxy: bool) -> Result<(Waveform, TransformOutcome)> {
    let out_of_range = t.validate(x.sample_rate)?;
    let codec = std::env::var_os(CODEC_ENV).map(PathBuf::from);
    let (out, proxy) = match t.kind {
        TransformKind::GaussianNoise => (add_noise_at_snr(x, t.level, seed)?, false),
        TransformKind::Lowpass => (fft_lowpass(x, t.level), false),
        TransformKind::Compression => match (&codec, allow_proxy) {
            (Some(path), _) => (external_codec(x, t.level, path, seed)?, false),
            (None, true) => {
                let (cutoff, bits) = compression_proxy_params(t.level);
                (quantize_bits(&fft_lowpass(x, cutoff), bits), true)
            }
            (None, false) => {
                return Err(Error::Codec(format!("{CODEC_ENV} is not set and the proxy is disabled")));
            }
        },
    };
    Ok((out, TransformOutcome { proxy, out_of_range }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::FftPlanner;

    fn tone(freq: f64, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()) as f32)
            .collect();
        Waveform::new(s, 22050)
    }

    fn rms(w: &Waveform) -> f64 {
        w.rms()
    }

    fn mix(a: &Waveform, b: &Waveform) -> Waveform {
        Waveform::new(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(), a.sample_rate)
    }

    #[test]
    fn noise_hits_target_snr() {
        let x = mix(&tone(220.0, 20000, 0.4), &tone(1330.0, 20000, 0.2));
        for &level in &NOISE_LEVELS {
            let (y, outcome) = apply_transform(&x, &LossyTransform::new(TransformKind::GaussianNoise, level), 5, true).unwrap();
            let measured = snr_db(&x.samples, &y.samples).unwrap().db();
            assert!((measured - level).abs() <= 0.1, "{level}: {measured}");
            assert_eq!(y.len(), x.len());
            assert!(!outcome.proxy && !outcome.out_of_range);
        }
        // A near-full-scale signal clips, which the bisection compensates.
        let loud = tone(300.0, 20000, 0.999);
        let y = add_noise_at_snr(&loud, 10.0, 1).unwrap();
        assert!((snr_db(&loud.samples, &y.samples).unwrap().db() - 10.0).abs() <= 0.1);
    }

    #[test]
    fn lowpass_removes_tone_above_cutoff() {
        let x = tone(5000.0, 20000, 0.5);
        let (y, _) = apply_transform(&x, &LossyTransform::new(TransformKind::Lowpass, 3000.0), 0, true).unwrap();
        assert!(rms(&y) < 0.01 * rms(&x));
        let keep = tone(1000.0, 20000, 0.5);
        let y = fft_lowpass(&keep, 3000.0);
        assert!((rms(&y) / rms(&keep) - 1.0).abs() < 0.01);
    }

    #[test]
    fn lowpass_attenuates_band_energy_by_40_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Waveform::new((0..16384).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| (0.1 * v) as f32).collect(), 22050);
        let y = fft_lowpass(&x, 7000.0);
        let band_energy = |w: &Waveform| -> f64 {
            let mut buf: Vec<Complex64> = w.samples.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
            FftPlanner::<f64>::new().plan_fft_forward(buf.len()).process(&mut buf);
            let hz = 22050.0 / buf.len() as f64;
            (0..buf.len() / 2).filter(|&k| k as f64 * hz > 7000.0).map(|k| buf[k].norm_sqr()).sum()
        };
        let ratio = 10.0 * (band_energy(&x) / band_energy(&y).max(1e-300)).log10();
        assert!(ratio >= 40.0, "{ratio}");
    }

    #[test]
    fn compression_proxy_is_flagged_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hiss = Waveform::new((0..12000).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| (0.05 * v) as f32).collect(), 22050);
        let x = mix(&tone(440.0, 12000, 0.3), &hiss);
        let mut errs = Vec::new();
        for &k in &COMPRESSION_LEVELS {
            let (y, outcome) = apply_transform(&x, &LossyTransform::new(TransformKind::Compression, k), 0, true).unwrap();
            assert!(outcome.proxy);
            assert_eq!(y.len(), x.len());
            errs.push(snr_db(&x.samples, &y.samples).unwrap().db());
        }
        assert!(errs.windows(2).all(|w| w[0] > w[1]), "{errs:?}");
        assert_eq!(compression_proxy_params(64.0), (7000.0, 9));
        if std::env::var_os(CODEC_ENV).is_none() {
            assert!(apply_transform(&x, &LossyTransform::new(TransformKind::Compression, 64.0), 0, false).is_err());
        }
    }

    #[test]
    fn level_validation() {
        let lp = |l| LossyTransform::new(TransformKind::Lowpass, l);
        assert_eq!(lp(3000.0).validate(22050).unwrap(), false);
        assert_eq!(lp(2500.0).validate(22050).unwrap(), true);
        assert!(lp(20000.0).validate(22050).is_err());
        assert!(LossyTransform::new(TransformKind::GaussianNoise, f64::NAN).validate(22050).is_err());
        assert_eq!("noise".parse::<TransformKind>().unwrap(), TransformKind::GaussianNoise);
    }

    #[test]
    fn transforms_are_deterministic() {
        let x = tone(300.0, 8000, 0.5);
        let t = LossyTransform::new(TransformKind::GaussianNoise, 20.0);
        assert_eq!(apply_transform(&x, &t, 3, true).unwrap().0, apply_transform(&x, &t, 3, true).unwrap().0);
        assert_ne!(apply_transform(&x, &t, 3, true).unwrap().0, apply_transform(&x, &t, 4, true).unwrap().0);
    }
}
