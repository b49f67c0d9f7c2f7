//! CPU kernels with hand-written backward passes for the hot layers.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor};

fn contiguous_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    match storage {
        CpuStorage::F32(x) => Ok(x[a..b].iter().map(|&v| v as f64).collect()),
        CpuStorage::F64(x) => Ok(x[a..b].to_vec()),
        _ => candle_core::bail!("kernels support f32 and f64 only"),
    }
}

fn storage_like(storage: &CpuStorage, data: Vec<f64>) -> CpuStorage {
    match storage {
        CpuStorage::F32(_) => CpuStorage::F32(data.into_iter().map(|v| v as f32).collect()),
        _ => CpuStorage::F64(data),
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn tensor_like(data: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(data, like.dims(), like.device())?.to_dtype(like.dtype())
}

/// Unfolds `[B, C, L]` into `[C * kernel + 1, B * L_out]` with zero padding.
///
/// Rows are ordered `(c, k)` to match a flattened `[C_out, C, kernel]`
/// weight; the final row is all ones so a bias column folds into the matmul.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Im2Col {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Im2Col {
    fn out_len(&self, l: usize) -> usize {
        (l + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn source(&self, j: usize, k: usize, l: usize) -> Option<usize> {
        let pos = (j * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < l).then_some(pos as usize)
    }

    fn unfold(&self, x: &[f64], (b, c, l): (usize, usize, usize)) -> Vec<f64> {
        let lo = self.out_len(l);
        let width = b * lo;
        let mut out = vec![0.0; (c * self.kernel + 1) * width];
        for ci in 0..c {
            for k in 0..self.kernel {
                let row = &mut out[(ci * self.kernel + k) * width..][..width];
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * l..][..l];
                    for j in 0..lo {
                        if let Some(p) = self.source(j, k, l) {
                            row[bi * lo + j] = src[p];
                        }
                    }
                }
            }
        }
        out[c * self.kernel * width..].iter_mut().for_each(|v| *v = 1.0);
        out
    }

    fn fold(&self, g: &[f64], (b, c, l): (usize, usize, usize)) -> Vec<f64> {
        let lo = self.out_len(l);
        let width = b * lo;
        let mut out = vec![0.0; b * c * l];
        for ci in 0..c {
            for k in 0..self.kernel {
                let row = &g[(ci * self.kernel + k) * width..][..width];
                for bi in 0..b {
                    let dst = &mut out[(bi * c + ci) * l..][..l];
                    for j in 0..lo {
                        if let Some(p) = self.source(j, k, l) {
                            dst[p] += row[bi * lo + j];
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col1d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims3()?;
        let x = contiguous_f64(storage, layout)?;
        let shape = Shape::from((dims.1 * self.kernel + 1, dims.0 * self.out_len(dims.2)));
        Ok((storage_like(storage, self.unfold(&x, dims)), shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = self.fold(&tensor_f64(grad)?, arg.dims3()?);
        Ok(Some(tensor_like(g, arg)?))
    }
}

/// Group normalisation of `[B, C, L]` with per-channel affine parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GroupStats {
    /// Normalised input.
    x_hat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per `(b, group)`.
    inv_std: Vec<f64>,
}

impl GroupNormOp {
    fn stats(&self, x: &[f64], (b, c, l): (usize, usize, usize)) -> GroupStats {
        let per = c / self.groups * l;
        let mut x_hat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(b * self.groups);
        // channels of one group are contiguous within a batch item
        for (chunk, out) in x.chunks(per).zip(x_hat.chunks_mut(per)) {
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (o, v) in out.iter_mut().zip(chunk) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        GroupStats { x_hat, inv_std }
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims3()?;
        let (_, c, l) = dims;
        if c % self.groups != 0 {
            candle_core::bail!("{c} channels not divisible into {} groups", self.groups);
        }
        let x = contiguous_f64(s1, l1)?;
        let gamma = contiguous_f64(s2, l2)?;
        let beta = contiguous_f64(s3, l3)?;
        let mut y = self.stats(&x, dims).x_hat;
        for (i, v) in y.iter_mut().enumerate() {
            let ch = (i / l) % c;
            *v = *v * gamma[ch] + beta[ch];
        }
        Ok((storage_like(s1, y), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims3()?;
        let (_, c, l) = dims;
        let xs = tensor_f64(x)?;
        let gs = tensor_f64(grad)?;
        let gamma_v = tensor_f64(gamma)?;
        let GroupStats { x_hat, inv_std } = self.stats(&xs, dims);
        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        let mut dx = vec![0.0; xs.len()];
        let per = c / self.groups * l;
        for (gi, start) in (0..xs.len()).step_by(per).enumerate() {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for i in start..start + per {
                let ch = (i / l) % c;
                d_gamma[ch] += gs[i] * x_hat[i];
                d_beta[ch] += gs[i];
                let d = gs[i] * gamma_v[ch];
                mean_d += d;
                mean_dx += d * x_hat[i];
            }
            mean_d /= per as f64;
            mean_dx /= per as f64;
            for i in start..start + per {
                let ch = (i / l) % c;
                let d = gs[i] * gamma_v[ch];
                dx[i] = inv_std[gi] * (d - mean_d - x_hat[i] * mean_dx);
            }
        }
        Ok((
            Some(tensor_like(dx, x)?),
            Some(tensor_like(d_gamma, gamma)?),
            Some(tensor_like(d_beta, gamma)?),
        ))
    }
}
