//! Synthetic multi-speaker corpus.
//!
//! Each speaker is a harmonic source shaped by three formant resonances.
//! The two gender classes occupy disjoint F0 bands and use different
//! vocal-tract scalings. Utterance `u` has the same phone sequence and timing
//! for every speaker, so the corpus is parallel: the content index is encoded
//! in the file name (`<speaker>_u<index>.wav`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::pitch::estimate_f0;
use super::{ingest, quantize_pcm16, write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Number of samples in a generated utterance (64 mel frames).
pub const UTTERANCE_SAMPLES: usize = 63 * 256 + 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    A,
    B,
}

impl Gender {
    pub fn opposite(self) -> Self {
        match self {
            Gender::A => Gender::B,
            Gender::B => Gender::A,
        }
    }

    /// F0 band (Hz) of the class. The two bands do not overlap.
    pub fn f0_band(self) -> (f64, f64) {
        match self {
            Gender::A => (95.0, 145.0),
            Gender::B => (185.0, 255.0),
        }
    }

    fn vocal_tract_band(self) -> (f64, f64) {
        match self {
            Gender::A => (0.92, 1.0),
            Gender::B => (1.12, 1.22),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::A => "A",
            Gender::B => "B",
        })
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Gender::A),
            "B" | "b" => Ok(Gender::B),
            other => Err(Error::invalid(format!("unknown gender class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: String,
    pub gender: Gender,
    pub f0_base: f64,
    /// `[vocal_tract_scale, spectral_tilt, breathiness]`
    pub formant_params: Vec<f64>,
    pub rng_seed: u64,
}

impl SpeakerSpec {
    fn vocal_tract_scale(&self) -> f64 {
        self.formant_params.first().copied().unwrap_or(1.0)
    }

    fn tilt(&self) -> f64 {
        self.formant_params.get(1).copied().unwrap_or(1.0)
    }

    fn breathiness(&self) -> f64 {
        self.formant_params.get(2).copied().unwrap_or(0.02)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gender.f0_band();
        if !(lo..=hi).contains(&self.f0_base) {
            return Err(Error::invalid(format!(
                "speaker {}: f0 {} Hz outside class {} band [{lo}, {hi}]",
                self.speaker_id, self.f0_base, self.gender
            )));
        }
        Ok(())
    }
}

/// `n_per_class` speakers of each class with evenly spread, jittered traits.
pub fn roster(n_per_class: usize, seed: u64) -> Vec<SpeakerSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for gender in [Gender::A, Gender::B] {
        let (f_lo, f_hi) = gender.f0_band();
        let (v_lo, v_hi) = gender.vocal_tract_band();
        for i in 0..n_per_class {
            let frac = (i as f64 + 0.5) / n_per_class as f64;
            // speakers in a class differ in pitch and vocal tract in opposite
            // directions so that no two are close in both
            let vt_frac = ((i * 7 + 3) % n_per_class) as f64 / n_per_class.max(1) as f64;
            let f0 = f_lo + (f_hi - f_lo) * (0.1 + 0.8 * frac) + rng.random_range(-1.5..1.5);
            let vt = v_lo + (v_hi - v_lo) * (0.1 + 0.8 * vt_frac);
            let tilt = rng.random_range(0.7..1.4);
            let breath = rng.random_range(0.005..0.04);
            out.push(SpeakerSpec {
                speaker_id: format!("spk{}{:02}", gender, i),
                gender,
                f0_base: (f0 * 10.0).round() / 10.0,
                formant_params: vec![vt, tilt, breath],
                rng_seed: rng.random(),
            });
        }
    }
    out
}

/// Average-speaker formant targets (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 120.0, 170.0];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.6, 0.3];

#[derive(Debug, Clone)]
struct Segment {
    start: usize,
    end: usize,
    vowel: usize,
    /// Fricative burst before the vowel, in samples.
    burst: usize,
}

/// Phone sequence and timing, shared by every speaker.
#[derive(Debug, Clone)]
struct Content {
    segments: Vec<Segment>,
    contour_shape: [f64; 3],
}

fn content_plan(content_seed: u64, index: usize, len: usize) -> Content {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n_syll = rng.random_range(3..=5);
    let lead = rng.random_range(200..1200);
    let tail = rng.random_range(200..1200);
    let usable = len - lead - tail;
    let weights: Vec<f64> = (0..n_syll).map(|_| rng.random_range(0.6..1.4)).collect();
    let total: f64 = weights.iter().sum();
    let mut pos = lead;
    let mut segments = Vec::with_capacity(n_syll);
    for w in &weights {
        let span = (usable as f64 * w / total) as usize;
        let gap = (span as f64 * rng.random_range(0.05..0.15)) as usize;
        let burst = if rng.random_bool(0.5) {
            (span as f64 * rng.random_range(0.1..0.2)) as usize
        } else {
            0
        };
        segments.push(Segment {
            start: pos + gap + burst,
            end: pos + span - gap,
            vowel: rng.random_range(0..VOWELS.len()),
            burst,
        });
        pos += span;
    }
    Content {
        segments,
        contour_shape: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        ],
    }
}

fn lorentz(f: f64, center: f64, bw: f64) -> f64 {
    let d = (f - center) / (0.5 * bw);
    1.0 / (1.0 + d * d)
}

/// Generate utterance `index` for one speaker. Deterministic in
/// `(spec, content_seed, index, len)`; the result is peak-normalised and
/// already on the PCM-16 grid.
pub fn synth_utterance(spec: &SpeakerSpec, content_seed: u64, index: usize, len: usize) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let content = content_plan(content_seed, index, len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    let vt = spec.vocal_tract_scale();
    let tilt = spec.tilt();
    let breath = spec.breathiness();
    let speaker_formant_offsets: Vec<f64> = {
        let mut r = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        (0..3).map(|_| r.random_range(-0.04..0.04)).collect()
    };

    // zero-mean intonation contour
    let [a1, a2, ph] = content.contour_shape;
    let raw: Vec<f64> = (0..len)
        .map(|n| {
            let x = n as f64 / len as f64;
            a1 * (std::f64::consts::PI * x + ph).sin() + a2 * (x - 0.5)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / len as f64;
    let contour: Vec<f64> = raw.iter().map(|v| 1.0 + 0.035 * (v - mean)).collect();

    let mut env = vec![0.0f64; len];
    let mut formants = vec![[0.0f64; 3]; len];
    let mut fric = vec![0.0f64; len];
    for (i, seg) in content.segments.iter().enumerate() {
        let dur = seg.end.saturating_sub(seg.start).max(1);
        let ramp = (dur / 6).max(1);
        let next = content.segments.get(i + 1).map(|s| s.vowel).unwrap_or(seg.vowel);
        for n in seg.start..seg.end.min(len) {
            let k = n - seg.start;
            let a = if k < ramp {
                k as f64 / ramp as f64
            } else if dur - k < ramp {
                (dur - k) as f64 / ramp as f64
            } else {
                1.0
            };
            env[n] = a;
            // glide towards the next vowel over the last third
            let glide = ((k as f64 / dur as f64) - 0.66).max(0.0) / 0.34;
            for j in 0..3 {
                let target = VOWELS[seg.vowel][j] * (1.0 - 0.3 * glide) + VOWELS[next][j] * 0.3 * glide;
                formants[n][j] = target;
            }
        }
        let b0 = seg.start.saturating_sub(seg.burst);
        for n in b0..seg.start.min(len) {
            let k = (n - b0) as f64 / seg.burst.max(1) as f64;
            fric[n] = (std::f64::consts::PI * k).sin();
        }
    }

    let mut out = vec![0.0f64; len];
    let mut phase = 0.0f64;
    let block = 64;
    let mut amps: Vec<f64> = Vec::new();
    let mut prev_noise = 0.0f64;
    for n in 0..len {
        let f0 = spec.f0_base * contour[n] * {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 + 0.002 * z
        };
        phase += std::f64::consts::TAU * f0 / sr;
        if phase > std::f64::consts::TAU * 1e6 {
            phase -= std::f64::consts::TAU * 1e6;
        }
        if n % block == 0 {
            let n_harm = ((7600.0 / f0).floor() as usize).max(1);
            amps.clear();
            for h in 1..=n_harm {
                let f = h as f64 * f0;
                let mut a = 0.02;
                for j in 0..3 {
                    let fc = formants[n][j] * vt * (1.0 + speaker_formant_offsets[j]);
                    a += FORMANT_GAINS[j] * lorentz(f, fc, BANDWIDTHS[j] * vt);
                }
                amps.push(a / (h as f64).powf(tilt));
            }
        }
        let voiced: f64 = if env[n] > 0.0 {
            amps.iter()
                .enumerate()
                .map(|(i, a)| a * ((i + 1) as f64 * phase).sin())
                .sum()
        } else {
            0.0
        };
        let white: f64 = StandardNormal.sample(&mut rng);
        // first difference tilts the burst towards high frequencies
        let hi = white - prev_noise;
        prev_noise = white;
        out[n] = env[n] * (voiced + breath * white) + 0.08 * fric[n] * hi + 2e-4 * white;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples: Vec<f32> = out.iter().map(|v| (v / peak) as f32).collect();
    let w = quantize_pcm16(&Waveform::new(samples, SAMPLE_RATE));
    // The PCM grid can move the peak off 1.0 only by rounding; rescale onto it.
    let p = w.peak();
    quantize_pcm16(&Waveform::new(w.samples.iter().map(|x| x / p).collect(), SAMPLE_RATE))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub gender: Gender,
    pub path: PathBuf,
}

impl ManifestEntry {
    /// Content index parsed from a `<speaker>_u<index>.wav` file name.
    pub fn content_index(&self) -> Option<usize> {
        let stem = self.path.file_stem()?.to_str()?;
        let (_, idx) = stem.rsplit_once("_u")?;
        idx.parse().ok()
    }
}

/// Corpus listing with header `speaker_id,gender,path`. Relative paths are
/// resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    speaker_id: String,
    gender: String,
    path: String,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.serialize(ManifestRow {
                speaker_id: e.speaker_id.clone(),
                gender: e.gender.to_string(),
                path: rel.to_string_lossy().into_owned(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["speaker_id", "gender", "path"] {
            return Err(Error::invalid(format!(
                "{}: expected header speaker_id,gender,path",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for row in r.deserialize::<ManifestRow>() {
            let row = row?;
            let p = PathBuf::from(&row.path);
            entries.push(ManifestEntry {
                speaker_id: row.speaker_id,
                gender: row.gender.parse()?,
                path: if p.is_absolute() { p } else { base.join(p) },
            });
        }
        Ok(Self { entries })
    }

    pub fn speakers(&self) -> BTreeMap<String, Gender> {
        self.entries
            .iter()
            .map(|e| (e.speaker_id.clone(), e.gender))
            .collect()
    }

    pub fn by_speaker(&self, speaker: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.speaker_id == speaker).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub out_dir: PathBuf,
    pub utterances_per_speaker: usize,
    pub content_seed: u64,
    pub utterance_samples: usize,
}

impl CorpusConfig {
    pub fn new(out_dir: impl Into<PathBuf>, utterances_per_speaker: usize) -> Self {
        Self {
            out_dir: out_dir.into(),
            utterances_per_speaker,
            content_seed: 7,
            utterance_samples: UTTERANCE_SAMPLES,
        }
    }
}

/// Write every utterance plus `manifest.csv` into `cfg.out_dir`.
pub fn synth_corpus(specs: &[SpeakerSpec], cfg: &CorpusConfig) -> Result<Manifest> {
    for g in [Gender::A, Gender::B] {
        let n = specs.iter().filter(|s| s.gender == g).count();
        if n < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 speakers of class {g}, got {n}"
            )));
        }
    }
    for s in specs {
        s.validate()?;
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let per_speaker: Vec<Result<Vec<ManifestEntry>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                scope.spawn(move || {
                    let mut rows = Vec::with_capacity(cfg.utterances_per_speaker);
                    for u in 0..cfg.utterances_per_speaker {
                        let w = synth_utterance(spec, cfg.content_seed, u, cfg.utterance_samples);
                        let path = cfg.out_dir.join(format!("{}_u{:03}.wav", spec.speaker_id, u));
                        write_wav(&path, &w)?;
                        rows.push(ManifestEntry {
                            speaker_id: spec.speaker_id.clone(),
                            gender: spec.gender,
                            path,
                        });
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("corpus worker panicked")).collect()
    });
    let mut manifest = Manifest::default();
    for rows in per_speaker {
        manifest.entries.extend(rows?);
    }
    manifest.write(&cfg.out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// One ingested corpus utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker_id: String,
    pub gender: Gender,
    /// Shared content index for parallel corpora.
    pub content: Option<usize>,
    pub waveform: Waveform,
}

/// Ingest every manifest entry at the working sample rate.
pub fn load_corpus(manifest: &Manifest) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let (waveform, _) = ingest(&e.path, SAMPLE_RATE)?;
            Ok(Utterance {
                speaker_id: e.speaker_id.clone(),
                gender: e.gender,
                content: e.content_index(),
                waveform,
            })
        })
        .collect()
}

/// Check that the generated pitch of a speaker is within `tol` (relative) of its spec.
pub fn verify_pitch(spec: &SpeakerSpec, w: &Waveform, tol: f64) -> Result<f64> {
    let est = estimate_f0(w, 60.0, 400.0)
        .ok_or_else(|| Error::invalid(format!("{}: no voiced frames", spec.speaker_id)))?;
    if (est - spec.f0_base).abs() > tol * spec.f0_base {
        return Err(Error::invalid(format!(
            "{}: estimated F0 {est:.1} Hz vs spec {:.1} Hz",
            spec.speaker_id, spec.f0_base
        )));
    }
    Ok(est)
}
