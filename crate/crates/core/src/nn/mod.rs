//! Small tensor building blocks shared by the score network, the identity
//! encoders and the quality regressor.

pub mod checkpoint;
mod kernels;
mod layers;
pub mod mel_op;
mod params;

pub use layers::{Conv1d, GroupNorm, Linear};
pub use params::{Init, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Device used by every model in the crate.
pub const DEVICE: Device = Device::Cpu;

/// Builds a `[rows, cols]` f32 tensor from row-major data.
pub fn matrix(data: &[f32], rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, (rows, cols), &DEVICE)?)
}

/// Flattens any tensor to a `Vec<f32>`.
pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Sinusoidal embedding of a batch of scalars, `[B] -> [B, dim]`.
pub fn sinusoidal_embedding(values: &[f32], dim: usize, scale: f32) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            out.push((v * scale * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            out.push((v * scale * freq).cos());
        }
    }
    Ok(Tensor::from_vec(out, (values.len(), dim), &DEVICE)?)
}
