use candle_core::Tensor;

use super::kernels::{GroupNormOp, Im2Col};
use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        store.push(name);
        let weight = store.param(
            "weight",
            &[c_out, c_in, kernel],
            Init::Kaiming {
                fan_in: c_in * kernel,
                gain: 1.0,
            },
        )?;
        let bias = store.param("bias", &[c_out], Init::Const(0.0))?;
        store.pop();
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    /// `[B, C_in, L] -> [B, C_out, L']`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let (c_out, c_in, kernel) = self.weight.dims3()?;
        let unfold = Im2Col {
            kernel,
            stride: self.stride,
            padding: self.padding,
        };
        // the unfolded matrix carries a row of ones for the bias
        let cols = x.contiguous()?.apply_op1(unfold)?;
        let l_out = cols.dim(1)? / b;
        let w = Tensor::cat(
            &[
                &self.weight.reshape((c_out, c_in * kernel))?,
                &self.bias.reshape((c_out, 1))?,
            ],
            1,
        )?;
        let y = w.matmul(&cols)?;
        Ok(y.reshape((c_out, b, l_out))?.transpose(0, 1)?.contiguous()?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_gain(store, name, d_in, d_out, 1.0)
    }

    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Result<Self> {
        store.push(name);
        let weight = store.param("weight", &[d_in, d_out], Init::Kaiming { fan_in: d_in, gain })?;
        let bias = store.param("bias", &[d_out], Init::Const(0.0))?;
        store.pop();
        Ok(Self { weight, bias })
    }

    /// `[B, d_in] -> [B, d_out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        store.push(name);
        let weight = store.param("weight", &[channels], Init::Const(1.0))?;
        let bias = store.param("bias", &[channels], Init::Const(0.0))?;
        store.pop();
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::invalid(format!("{channels} channels in {groups} groups")));
        }
        Ok(Self { weight, bias, groups })
    }

    /// `[B, C, L] -> [B, C, L]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = GroupNormOp {
            groups: self.groups,
            eps: 1e-5,
        };
        Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEVICE;
    use candle_core::DType;

    #[test]
    fn im2col_matches_native_convolution() {
        for (kernel, stride, len) in [(3, 1, 11), (3, 2, 12), (3, 2, 13), (5, 1, 9), (1, 1, 7)] {
            let mut store = ParamStore::seeded(3, DType::F32);
            let conv = Conv1d::new(&mut store, "c", 4, 6, kernel, stride).unwrap();
            let x = Tensor::randn(0f32, 1.0, (2, 4, len), &DEVICE).unwrap();
            let ours = conv.forward(&x).unwrap();
            let native = x
                .conv1d(&conv.weight, conv.padding, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.reshape((1, (), 1)).unwrap())
                .unwrap();
            assert_eq!(ours.dims(), native.dims());
            let diff = (ours - native).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-5, "k={kernel} s={stride}: {diff}");
        }
    }

    #[test]
    fn group_norm_matches_reference_implementation() {
        let mut store = ParamStore::seeded(3, DType::F32);
        let gn = GroupNorm::new(&mut store, "g", 8, 4).unwrap();
        let w = Tensor::randn(0f32, 1.0, 8, &DEVICE).unwrap();
        let b = Tensor::randn(0f32, 1.0, 8, &DEVICE).unwrap();
        let gn = GroupNorm { weight: w.clone(), bias: b.clone(), ..gn };
        let reference = candle_nn::GroupNorm::new(w, b, 8, 4, 1e-5).unwrap();
        let x = Tensor::randn(0f32, 2.0, (3, 8, 10), &DEVICE).unwrap();
        let diff = (gn.forward(&x).unwrap() - candle_core::Module::forward(&reference, &x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut store = ParamStore::seeded(8, DType::F64);
        let gn = GroupNorm::new(&mut store, "g", 6, 3).unwrap();
        let w = candle_core::Var::from_tensor(&Tensor::randn(1f64, 0.3, 6, &DEVICE).unwrap()).unwrap();
        let b = candle_core::Var::from_tensor(&Tensor::randn(0f64, 0.3, 6, &DEVICE).unwrap()).unwrap();
        let x = candle_core::Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 6, 5), &DEVICE).unwrap()).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 6, 5), &DEVICE).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let g = GroupNorm { weight: w.clone(), bias: b.clone(), groups: gn.groups };
            (g.forward(x).unwrap() * &target).unwrap().sum_all().unwrap().sqr().unwrap()
        };
        let grads = f(x.as_tensor(), w.as_tensor(), b.as_tensor()).backward().unwrap();
        let check = |var: &candle_core::Var, which: usize| {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for i in 0..base.len().min(12) {
                let eval = |h: f64| {
                    let mut v = base.clone();
                    v[i] += h;
                    let t = Tensor::from_vec(v, var.as_tensor().dims(), &DEVICE).unwrap();
                    let out = match which {
                        0 => f(&t, w.as_tensor(), b.as_tensor()),
                        1 => f(x.as_tensor(), &t, b.as_tensor()),
                        _ => f(x.as_tensor(), w.as_tensor(), &t),
                    };
                    out.to_scalar::<f64>().unwrap()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "arg {which} [{i}]: {fd} vs {}", g[i]);
            }
        };
        check(&x, 0);
        check(&w, 1);
        check(&b, 2);
    }

    #[test]
    fn unfold_gradient_matches_finite_differences() {
        let mut store = ParamStore::seeded(4, DType::F64);
        let conv = Conv1d::new(&mut store, "c", 3, 2, 3, 2).unwrap();
        let x0 = Tensor::randn(0f64, 1.0, (2, 3, 9), &DEVICE).unwrap();
        let var = candle_core::Var::from_tensor(&x0).unwrap();
        let f = |x: &Tensor| conv.forward(x).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in [0usize, 7, 20, 53] {
            let eval = |h: f64| {
                let mut v = base.clone();
                v[i] += h;
                let t = Tensor::from_vec(v, (2, 3, 9), &DEVICE).unwrap();
                f(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }
}
