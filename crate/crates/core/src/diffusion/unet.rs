//! 1-D U-Net score network over mel frames.
//!
//! The source mel enters through a narrow content bottleneck and is
//! concatenated with the noisy mel. The reference mel is encoded by a conv
//! stack and reaches every resolution through a linear-attention layer, so
//! speaker information has no other path into the network.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv1d, GroupNorm, Linear, ParamStore};

/// Attention layers in forward order.
pub const LAYER_IDS: [&str; 4] = ["down.0.attn", "down.1.attn", "up.1.attn", "up.0.attn"];
/// Layers of the contracting path.
pub const DOWN_LAYERS: [&str; 2] = ["down.0.attn", "down.1.attn"];
/// Layers of the expanding path.
pub const UP_LAYERS: [&str; 2] = ["up.1.attn", "up.0.attn"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub n_mels: usize,
    /// Widths of the two down/up levels.
    pub channels: [usize; 2],
    /// Width of the bottleneck level.
    pub hidden: usize,
    pub content_dim: usize,
    pub ref_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: [32, 64],
            hidden: 256,
            content_dim: 16,
            ref_dim: 64,
            key_dim: 32,
            value_dim: 32,
            time_dim: 64,
            groups: 8,
        }
    }
}

/// Layers whose taps a forward pass should record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TapRequest {
    layers: BTreeSet<String>,
}

impl TapRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self::of(&LAYER_IDS).expect("known layers")
    }

    pub fn of<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        let mut layers = BTreeSet::new();
        for id in ids {
            let id = id.as_ref();
            if !LAYER_IDS.contains(&id) {
                return Err(Error::UnknownLayer(id.to_string()));
            }
            layers.insert(id.to_string());
        }
        Ok(Self { layers })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.layers.contains(id)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Quantities captured at one attention layer.
#[derive(Debug, Clone)]
pub struct LayerTap {
    /// `softmax(K) Vᵀ`, `[B, key_dim, value_dim]`.
    pub ctx: Tensor,
    /// `W_Q h`, `[B, key_dim, F']`.
    pub query: Tensor,
    /// `ctxᵀ query`, `[B, value_dim, F']`.
    pub attended: Tensor,
    /// Block output after attention, `[B, C, F']`.
    pub feature: Tensor,
}

/// Everything one conditioned forward pass exposes.
#[derive(Debug, Clone)]
pub struct FeatureTapBundle {
    pub layers: BTreeMap<String, LayerTap>,
    /// Predicted noise `ε̂`, `[B, n_mels, F]`.
    pub eps: Tensor,
    /// Score estimate `-ε̂ / σ_t`.
    pub score: Tensor,
    pub t: Vec<f64>,
}

impl FeatureTapBundle {
    pub fn tap(&self, id: &str) -> Result<&LayerTap> {
        self.layers.get(id).ok_or_else(|| Error::MissingTap(id.to_string()))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv1d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv1d,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        store.push(name);
        let block = Self {
            norm1: GroupNorm::new(store, "norm1", c_in, cfg.groups)?,
            conv1: Conv1d::new(store, "conv1", c_in, c_out, 3, 1)?,
            time: Linear::new(store, "time", 2 * cfg.time_dim, c_out)?,
            norm2: GroupNorm::new(store, "norm2", c_out, cfg.groups)?,
            conv2: Conv1d::new(store, "conv2", c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv1d::new(store, "skip", c_in, c_out, 1, 1)?)
            } else {
                None
            },
        };
        store.pop();
        Ok(block)
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = h.broadcast_add(&self.time.forward(temb)?.unsqueeze(2)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Linear attention with queries from the content path and keys/values from
/// the reference encoding.
#[derive(Debug, Clone)]
pub struct LinearAttention {
    w_q: Conv1d,
    w_k: Conv1d,
    w_v: Conv1d,
    w_o: Conv1d,
    time: Linear,
}

impl LinearAttention {
    fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig) -> Result<Self> {
        store.push(name);
        let layer = Self {
            w_q: Conv1d::new(store, "w_q", channels, cfg.key_dim, 1, 1)?,
            w_k: Conv1d::new(store, "w_k", cfg.ref_dim, cfg.key_dim, 1, 1)?,
            w_v: Conv1d::new(store, "w_v", cfg.ref_dim, cfg.value_dim, 1, 1)?,
            w_o: Conv1d::new(store, "w_o", cfg.value_dim, channels, 1, 1)?,
            time: Linear::new(store, "time", 2 * cfg.time_dim, cfg.ref_dim)?,
        };
        store.pop();
        Ok(layer)
    }

    /// `[B, ref_dim, F_ref] -> [B, key_dim, value_dim]`
    pub fn context(&self, reference: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let phi = reference.broadcast_add(&self.time.forward(temb)?.unsqueeze(2)?)?;
        let k = candle_nn::ops::softmax(&self.w_k.forward(&phi)?, D::Minus1)?;
        let v = self.w_v.forward(&phi)?;
        Ok(k.matmul(&v.transpose(1, 2)?.contiguous()?)?)
    }

    /// `W_Q h`
    pub fn query(&self, h: &Tensor) -> Result<Tensor> {
        self.w_q.forward(h)
    }

    /// `ctxᵀ q`
    pub fn attend(ctx: &Tensor, query: &Tensor) -> Result<Tensor> {
        Ok(ctx.transpose(1, 2)?.contiguous()?.matmul(&query.contiguous()?)?)
    }

    fn forward(&self, h: &Tensor, reference: &Tensor, temb: &Tensor) -> Result<(Tensor, LayerTap)> {
        let ctx = self.context(reference, temb)?;
        let query = self.query(h)?;
        let attended = Self::attend(&ctx, &query)?;
        let feature = (h + self.w_o.forward(&attended)?)?;
        Ok((
            feature.clone(),
            LayerTap {
                ctx,
                query,
                attended,
                feature,
            },
        ))
    }
}

/// Noise-prediction network `ε̂(x_t, source, reference, t)`.
#[derive(Debug)]
pub struct ScoreNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    content1: Conv1d,
    content2: Conv1d,
    ref1: Conv1d,
    ref2: Conv1d,
    ref3: Conv1d,
    input: Conv1d,
    down_res: [ResBlock; 2],
    down_attn: [LinearAttention; 2],
    down_sample: [Conv1d; 2],
    mid: ResBlock,
    up_sample: [Conv1d; 2],
    up_res: [ResBlock; 2],
    up_attn: [LinearAttention; 2],
    out_norm: GroupNorm,
    output: Conv1d,
    refine: Conv1d,
    refine_gain: Linear,
    evaluations: AtomicUsize,
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, cfg: UNetConfig) -> Result<Self> {
        let [c0, c1] = cfg.channels;
        let t2 = 2 * cfg.time_dim;
        let time1 = Linear::new(store, "time.0", cfg.time_dim, t2)?;
        let time2 = Linear::new(store, "time.1", t2, t2)?;
        let content1 = Conv1d::new(store, "content.0", cfg.n_mels, c0, 3, 1)?;
        let content2 = Conv1d::new(store, "content.1", c0, cfg.content_dim, 3, 1)?;
        let ref1 = Conv1d::new(store, "reference.0", cfg.n_mels, cfg.ref_dim, 3, 1)?;
        let ref2 = Conv1d::new(store, "reference.1", cfg.ref_dim, cfg.ref_dim, 3, 1)?;
        let ref3 = Conv1d::new(store, "reference.2", cfg.ref_dim, cfg.ref_dim, 3, 1)?;
        let input = Conv1d::new(store, "input", cfg.n_mels + cfg.content_dim, c0, 3, 1)?;
        let down_res = [
            ResBlock::new(store, "down.0.res", c0, c0, &cfg)?,
            ResBlock::new(store, "down.1.res", c1, c1, &cfg)?,
        ];
        let down_attn = [
            LinearAttention::new(store, "down.0.attn", c0, &cfg)?,
            LinearAttention::new(store, "down.1.attn", c1, &cfg)?,
        ];
        let down_sample = [
            Conv1d::new(store, "down.0.sample", c0, c1, 3, 2)?,
            Conv1d::new(store, "down.1.sample", c1, cfg.hidden, 3, 2)?,
        ];
        let mid = ResBlock::new(store, "mid", cfg.hidden, cfg.hidden, &cfg)?;
        let up_sample = [
            Conv1d::new(store, "up.0.sample", c1, c0, 3, 1)?,
            Conv1d::new(store, "up.1.sample", cfg.hidden, c1, 3, 1)?,
        ];
        let up_res = [
            ResBlock::new(store, "up.0.res", 2 * c0, c0, &cfg)?,
            ResBlock::new(store, "up.1.res", 2 * c1, c1, &cfg)?,
        ];
        let up_attn = [
            LinearAttention::new(store, "up.0.attn", c0, &cfg)?,
            LinearAttention::new(store, "up.1.attn", c1, &cfg)?,
        ];
        let out_norm = GroupNorm::new(store, "out.norm", c0, cfg.groups)?;
        let output = Conv1d::new(store, "out.conv", c0, cfg.n_mels, 3, 1)?;
        let refine = Conv1d::new(store, "out.refine", cfg.n_mels, cfg.n_mels, 3, 1)?;
        let refine_gain = Linear::with_gain(store, "out.refine_gain", t2, cfg.n_mels, 0.1)?;
        Ok(Self {
            cfg,
            time1,
            time2,
            content1,
            content2,
            ref1,
            ref2,
            ref3,
            input,
            down_res,
            down_attn,
            down_sample,
            mid,
            up_sample,
            up_res,
            up_attn,
            out_norm,
            output,
            refine,
            refine_gain,
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Number of completed forward passes.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn attention(&self, id: &str) -> Result<&LinearAttention> {
        match id {
            "down.0.attn" => Ok(&self.down_attn[0]),
            "down.1.attn" => Ok(&self.down_attn[1]),
            "up.0.attn" => Ok(&self.up_attn[0]),
            "up.1.attn" => Ok(&self.up_attn[1]),
            _ => Err(Error::UnknownLayer(id.to_string())),
        }
    }

    fn time_embedding(&self, t: &[f64], dtype: DType) -> Result<Tensor> {
        let t: Vec<f32> = t.iter().map(|&v| v as f32).collect();
        let e = sinusoidal_embedding(&t, self.cfg.time_dim, 1000.0)?.to_dtype(dtype)?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }

    /// Reference encoding `[B, n_mels, F_ref] -> [B, ref_dim, F_ref]`.
    pub fn encode_reference(&self, reference: &Tensor) -> Result<Tensor> {
        let h = self.ref1.forward(reference)?.silu()?;
        let h = self.ref2.forward(&h)?.silu()?;
        self.ref3.forward(&h)
    }

    /// Single conditioned evaluation.
    ///
    /// `x_t` and `source` are `[B, n_mels, F]` standardised mels, `reference`
    /// is `[B, n_mels, F_ref]`, and `sigma[b]` is the kernel std at `t[b]`
    /// of a variance-preserving process (`α² + σ² = 1`).
    pub fn forward(
        &self,
        x_t: &Tensor,
        source: &Tensor,
        reference: &Tensor,
        t: &[f64],
        sigma: &[f64],
        taps: &TapRequest,
    ) -> Result<FeatureTapBundle> {
        let (b, n_mels, frames) = x_t.dims3()?;
        if source.dims3()? != (b, n_mels, frames) || n_mels != self.cfg.n_mels {
            return Err(Error::ShapeMismatch(format!(
                "x_t {:?} vs source {:?}",
                x_t.dims(),
                source.dims()
            )));
        }
        let (rb, rm, _) = reference.dims3()?;
        if rb != b || rm != n_mels || t.len() != b || sigma.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "reference {:?}, {} times for batch {b}",
                reference.dims(),
                t.len()
            )));
        }
        let pad = (4 - frames % 4) % 4;
        let x_t = x_t.pad_with_zeros(2, 0, pad)?;
        let source = source.pad_with_zeros(2, 0, pad)?;
        let full = frames + pad;

        let temb = self.time_embedding(t, x_t.dtype())?;
        let content = self.content2.forward(&self.content1.forward(&source)?.silu()?)?;
        let reference = self.encode_reference(reference)?;
        let mut layers = BTreeMap::new();
        let mut record = |id: &str, tap: LayerTap| {
            if taps.contains(id) {
                layers.insert(id.to_string(), tap);
            }
        };

        let h = self.input.forward(&Tensor::cat(&[&x_t, &content], 1)?)?;
        let h = self.down_res[0].forward(&h, &temb)?;
        let (skip0, tap) = self.down_attn[0].forward(&h, &reference, &temb)?;
        record(LAYER_IDS[0], tap);
        let h = self.down_sample[0].forward(&skip0)?;
        let h = self.down_res[1].forward(&h, &temb)?;
        let (skip1, tap) = self.down_attn[1].forward(&h, &reference, &temb)?;
        record(LAYER_IDS[1], tap);
        let h = self.down_sample[1].forward(&skip1)?;
        let h = self.mid.forward(&h, &temb)?;

        let h = self.up_sample[1].forward(&h.upsample_nearest1d(full / 2)?)?;
        let h = self.up_res[1].forward(&Tensor::cat(&[&h, &skip1], 1)?, &temb)?;
        let (h, tap) = self.up_attn[1].forward(&h, &reference, &temb)?;
        record(LAYER_IDS[2], tap);
        let h = self.up_sample[0].forward(&h.upsample_nearest1d(full)?)?;
        let h = self.up_res[0].forward(&Tensor::cat(&[&h, &skip0], 1)?, &temb)?;
        let (h, tap) = self.up_attn[0].forward(&h, &reference, &temb)?;
        record(LAYER_IDS[3], tap);

        // Full-rank path from x_t with a per-band gain set by the time,
        // since the channel widths are narrower than the mel axis.
        let gain = self.refine_gain.forward(&temb)?.unsqueeze(2)?;
        let v = (self.output.forward(&self.out_norm.forward(&h)?.silu()?)?
            + self.refine.forward(&x_t)?.broadcast_mul(&gain)?)?;
        let v = v.narrow(2, 0, frames)?;
        // ε̂ = σ x_t + α v: the linear part is the optimal noise estimate for
        // unit-variance data, so the network only models the residual.
        let per_item = |vals: Vec<f32>| -> Result<Tensor> {
            Ok(Tensor::from_vec(vals, (b, 1, 1), v.device())?.to_dtype(v.dtype())?)
        };
        let sig = per_item(sigma.iter().map(|&s| s as f32).collect())?;
        let alpha = per_item(sigma.iter().map(|&s| (1.0 - s * s).max(0.0).sqrt() as f32).collect())?;
        let x_in = x_t.narrow(2, 0, frames)?;
        let eps = (x_in.broadcast_mul(&sig)? + v.broadcast_mul(&alpha)?)?;
        let inv_sigma: Vec<f32> = sigma.iter().map(|&s| (-1.0 / s) as f32).collect();
        let inv_sigma = Tensor::from_vec(inv_sigma, (b, 1, 1), eps.device())?.to_dtype(eps.dtype())?;
        let score = eps.broadcast_mul(&inv_sigma)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(FeatureTapBundle {
            layers,
            eps,
            score,
            t: t.to_vec(),
        })
    }
}
