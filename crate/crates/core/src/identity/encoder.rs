//! Speaker encoders over log-mel features.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::mel::MelAnalyzer;
use crate::audio::Waveform;
use crate::diffusion::MelStats;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, to_vec_f32, Conv1d, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "identity-encoder";

/// Which of the two disjoint encoders produced an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Representation extractor the defense optimises through.
    DefenseExtractor,
    /// Held-out verifier used only for evaluation.
    AsvEvaluator,
}

impl EncoderKind {
    fn tag(self) -> &'static str {
        match self {
            EncoderKind::DefenseExtractor => "defense",
            EncoderKind::AsvEvaluator => "asv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub n_mels: usize,
    pub channels: usize,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn defense() -> Self {
        Self {
            kind: EncoderKind::DefenseExtractor,
            n_mels: 80,
            channels: 96,
            embedding_dim: 128,
        }
    }

    pub fn asv() -> Self {
        Self {
            kind: EncoderKind::AsvEvaluator,
            n_mels: 80,
            channels: 64,
            embedding_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding {
    pub vector: Vec<f32>,
    pub source: EncoderKind,
}

impl IdentityEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> Result<f64> {
        cosine(&self.vector, &other.vector)
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} dims", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += (x as f64).powi(2);
        bb += (y as f64).powi(2);
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    stats: MelStats,
    speakers: Vec<String>,
}

#[derive(Debug)]
enum Body {
    /// Three k=3 convolutions, mean pooling.
    Defense([Conv1d; 3]),
    /// k=5 convolutions with a strided middle layer, mean and std pooling.
    Asv([Conv1d; 3]),
}

/// Frozen or trainable speaker encoder.
#[derive(Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stats: MelStats,
    /// Speakers of the classification head, in label order.
    pub speakers: Vec<String>,
    body: Body,
    project: Linear,
    /// Cosine classifier weights `[dim, n_speakers]`.
    classes: Tensor,
    tensors: BTreeMap<String, Tensor>,
}

impl Encoder {
    pub(crate) fn build(
        store: &mut ParamStore,
        config: EncoderConfig,
        stats: MelStats,
        speakers: Vec<String>,
    ) -> Result<Self> {
        let c = config.channels;
        store.push(config.kind.tag());
        let (body, pooled) = match config.kind {
            EncoderKind::DefenseExtractor => (
                Body::Defense([
                    Conv1d::new(store, "conv.0", config.n_mels, c, 3, 1)?,
                    Conv1d::new(store, "conv.1", c, c, 3, 1)?,
                    Conv1d::new(store, "conv.2", c, c, 3, 1)?,
                ]),
                c,
            ),
            EncoderKind::AsvEvaluator => (
                Body::Asv([
                    Conv1d::new(store, "conv.0", config.n_mels, c, 5, 1)?,
                    Conv1d::new(store, "conv.1", c, c, 5, 2)?,
                    Conv1d::new(store, "conv.2", c, c, 5, 1)?,
                ]),
                2 * c,
            ),
        };
        let project = Linear::new(store, "project", pooled, config.embedding_dim)?;
        let classes = store.param(
            "classes",
            &[config.embedding_dim, speakers.len().max(1)],
            crate::nn::Init::Kaiming {
                fan_in: config.embedding_dim,
                gain: 1.0,
            },
        )?;
        store.pop();
        let tensors = store.snapshot();
        Ok(Self {
            config,
            stats,
            speakers,
            body,
            project,
            classes,
            tensors,
        })
    }

    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        config: EncoderConfig,
        stats: MelStats,
        speakers: Vec<String>,
    ) -> Result<Self> {
        let mut store = ParamStore::frozen(tensors, DType::F32);
        Self::build(&mut store, config, stats, speakers)
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EncoderMeta {
            config: self.config,
            stats: self.stats,
            speakers: self.speakers.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &self.tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta): (_, EncoderMeta) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::from_tensors(tensors, meta.config, meta.stats, meta.speakers)
    }

    /// Embeddings of raw log-mels `[B, n_mels, F] -> [B, dim]`.
    pub fn embed_log_mel(&self, log_mel: &Tensor) -> Result<Tensor> {
        let x = self.stats.standardize(log_mel)?;
        let pooled = match &self.body {
            Body::Defense(convs) => {
                let mut h = x;
                for c in convs {
                    h = c.forward(&h)?.silu()?;
                }
                h.mean(D::Minus1)?
            }
            Body::Asv(convs) => {
                let mut h = x;
                for c in convs {
                    h = c.forward(&h)?.silu()?;
                }
                let mean = h.mean_keepdim(D::Minus1)?;
                let var = h.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
                let std = (var + 1e-6)?.sqrt()?;
                Tensor::cat(&[&mean.squeeze(D::Minus1)?, &std], 1)?
            }
        };
        self.project.forward(&pooled)
    }

    /// Scaled cosine logits against the speaker classes.
    pub(crate) fn logits(&self, embeddings: &Tensor, scale: f64) -> Result<Tensor> {
        let e = normalize_rows(embeddings)?;
        let w = normalize_rows(&self.classes.t()?)?.t()?;
        Ok((e.matmul(&w)? * scale)?)
    }

    pub fn embed(&self, w: &Waveform) -> Result<IdentityEmbedding> {
        let mel = MelAnalyzer::shared().forward(&w.samples)?;
        let t = Tensor::from_vec(mel.to_band_major(), (1, mel.n_mels, mel.n_frames), &crate::nn::DEVICE)?;
        let vector = to_vec_f32(&self.embed_log_mel(&t)?)?;
        let e = IdentityEmbedding {
            vector,
            source: self.kind(),
        };
        if !e.is_finite() {
            return Err(Error::NonFinite("identity embedding".into()));
        }
        Ok(e)
    }
}

/// L2-normalises each row of a `[B, D]` tensor.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}
