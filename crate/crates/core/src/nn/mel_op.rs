//! Differentiable waveform -> log-mel map for candle graphs.
//!
//! Perturbations are optimised on raw samples while every model consumes
//! log-mel features, so the front end has to sit inside the autodiff graph.
//! The forward and backward passes both run through [`MelAnalyzer`]; the
//! backward pass is the analytic vector-Jacobian product.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::audio::mel::MelAnalyzer;
use crate::error::Result;

struct LogMel {
    analyzer: Arc<MelAnalyzer>,
}

fn contiguous<T: Copy>(data: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(data[a..b].to_vec()),
        None => candle_core::bail!("log-mel input must be contiguous"),
    }
}

impl LogMel {
    fn compute(&self, samples: &[f64]) -> candle_core::Result<(Vec<f64>, usize)> {
        let (mel, cache) = self
            .analyzer
            .forward_with_cache(samples)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let n_mels = mel.n_mels;
        let n_frames = mel.n_frames;
        let floor = self.analyzer.cfg.log_floor;
        let mut out = vec![0.0f64; n_mels * n_frames];
        for (f, e) in cache.energies.iter().enumerate() {
            for (m, &v) in e.iter().enumerate() {
                out[m * n_frames + f] = v.max(floor).ln();
            }
        }
        Ok((out, n_frames))
    }
}

impl CustomOp1 for LogMel {
    fn name(&self) -> &'static str {
        "log-mel"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        if layout.dims().len() != 1 {
            candle_core::bail!("log-mel expects a 1-D waveform, got {:?}", layout.dims());
        }
        let n_mels = self.analyzer.cfg.n_mels;
        match storage {
            CpuStorage::F32(d) => {
                let x: Vec<f64> = contiguous(d, layout)?.into_iter().map(f64::from).collect();
                let (out, frames) = self.compute(&x)?;
                let out = out.into_iter().map(|v| v as f32).collect();
                Ok((CpuStorage::F32(out), Shape::from((n_mels, frames))))
            }
            CpuStorage::F64(d) => {
                let x = contiguous(d, layout)?;
                let (out, frames) = self.compute(&x)?;
                Ok((CpuStorage::F64(out), Shape::from((n_mels, frames))))
            }
            _ => candle_core::bail!("log-mel supports f32 and f64 only"),
        }
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dtype = arg.dtype();
        let x: Vec<f64> = arg.to_dtype(DType::F64)?.to_vec1()?;
        let (_, cache) = self
            .analyzer
            .forward_with_cache(&x)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        // band-major gradient -> frame-major for the analyzer
        let g = grad_res.to_dtype(DType::F64)?.t()?.contiguous()?.flatten_all()?.to_vec1::<f64>()?;
        let gx = self.analyzer.backward(&cache, &g);
        let t = Tensor::from_vec(gx, arg.dims(), arg.device())?.to_dtype(dtype)?;
        Ok(Some(t))
    }
}

/// `[L] -> [n_mels, n_frames]` log-mel spectrogram that supports backprop.
pub fn log_mel(samples: &Tensor, analyzer: Arc<MelAnalyzer>) -> Result<Tensor> {
    Ok(samples.contiguous()?.apply_op1(LogMel { analyzer })?)
}
