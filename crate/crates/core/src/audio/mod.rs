//! Waveform I/O, resampling, peak normalisation, the STFT/mel front end and
//! the synthetic multi-speaker corpus.

pub mod corpus;
pub mod mel;
pub mod pitch;
pub mod vocoder;
pub mod stft;

use std::path::Path;

use rubato::{FftFixedInOut, Resampler};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every model in the crate operates on.
pub const SAMPLE_RATE: u32 = 22050;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Non-fatal conditions raised while ingesting audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestWarning {
    /// The file contained only zeros; it is returned unchanged.
    ZeroPeak,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&x| (x as f64) * (x as f64)).sum();
        (e / self.samples.len() as f64).sqrt()
    }

    /// Clamp every sample into `[-1, 1]`.
    pub fn clamped(mut self) -> Self {
        for x in &mut self.samples {
            *x = x.clamp(-1.0, 1.0);
        }
        self
    }

    /// Divide by the absolute peak. Silence is returned unchanged with a warning.
    pub fn peak_normalized(mut self) -> (Self, Option<IngestWarning>) {
        let peak = self.peak();
        if peak == 0.0 {
            return (self, Some(IngestWarning::ZeroPeak));
        }
        for x in &mut self.samples {
            *x /= peak;
        }
        (self, None)
    }

    /// Resample to `target_rate` (no-op when the rate already matches).
    pub fn resampled(self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 {
            return Err(Error::invalid("target sample rate must be positive"));
        }
        if self.sample_rate == target_rate || self.samples.is_empty() {
            return Ok(Self {
                sample_rate: if self.samples.is_empty() {
                    target_rate
                } else {
                    self.sample_rate
                },
                ..self
            });
        }
        let samples = resample(&self.samples, self.sample_rate, target_rate)?;
        Ok(Self::new(samples, target_rate))
    }

    /// Crop or zero-pad to exactly `len` samples.
    pub fn fit_length(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

fn resample(input: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    let chunk = 1024;
    let mut rs = FftFixedInOut::<f64>::new(from as usize, to as usize, chunk, 1)
        .map_err(|e| Error::invalid(format!("resampler: {e}")))?;
    let expected = ((input.len() as f64) * to as f64 / from as f64).round() as usize;
    let delay = rs.output_delay();
    let mut out: Vec<f64> = Vec::with_capacity(expected + delay + 2 * chunk);
    let mut pos = 0usize;
    while out.len() < expected + delay {
        let need = rs.input_frames_next();
        let mut block = vec![0.0f64; need];
        for (i, b) in block.iter_mut().enumerate() {
            if let Some(&x) = input.get(pos + i) {
                *b = x as f64;
            }
        }
        pos += need;
        let res = rs
            .process(&[block], None)
            .map_err(|e| Error::invalid(format!("resampler: {e}")))?;
        out.extend_from_slice(&res[0]);
    }
    Ok(out[delay..delay + expected].iter().map(|&x| x as f32).collect())
}

/// Resample to `target_rate` and peak-normalise.
pub fn prepare(w: Waveform, target_rate: u32) -> Result<(Waveform, Option<IngestWarning>)> {
    if w.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let w = w.resampled(target_rate)?;
    Ok(w.peak_normalized())
}

/// Read a mono WAV file, resample it to `target_rate` and normalise by peak.
pub fn ingest(path: &Path, target_rate: u32) -> Result<(Waveform, Option<IngestWarning>)> {
    let w = read_wav(path)?;
    let (w, warning) = prepare(w, target_rate)?;
    if warning.is_some() {
        log::warn!("{}: zero peak, returning silence unchanged", path.display());
    }
    Ok((w, warning))
}

/// Read a mono WAV file without any processing. Integer PCM is scaled by the
/// positive full-scale value so that `i16::MAX` maps to exactly `1.0`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full = ((1i64 << (spec.bits_per_sample - 1)) - 1) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f32 / full).clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio);
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Write 16-bit PCM mono. Samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in &w.samples {
        let v = (x.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    Ok(())
}

/// Round every sample to the PCM-16 grid used by [`write_wav`], so that an
/// in-memory waveform equals what a write/read round trip would give.
pub fn quantize_pcm16(w: &Waveform) -> Waveform {
    let full = i16::MAX as f32;
    let samples = w
        .samples
        .iter()
        .map(|&x| ((x.clamp(-1.0, 1.0) * full).round() / full).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, w.sample_rate)
}
