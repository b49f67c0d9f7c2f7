//! Differentiable defense objectives over identity embeddings and U-Net taps.
//!
//! Every loss returns a scalar tensor so that gradients reach the waveform.
//! Batched inputs are reduced by the mean over the batch axis.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::FeatureTapBundle;
use crate::error::{Error, Result};

/// Relative weights of the four components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub id: f64,
    pub ctx: f64,
    pub score: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 1.0,
            ctx: 4.5,
            score: 10.0,
            sem: 0.85,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.id, self.ctx, self.score, self.sem]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            id: self.id * factor,
            ctx: self.ctx * factor,
            score: self.score * factor,
            sem: self.sem * factor,
        }
    }

    /// Weights divided by their sum, rounded to f32. Any positive rescaling
    /// of `self` yields the same values, so sign-gradient steps do not
    /// depend on the overall scale.
    pub fn normalized_f32(&self) -> Result<[f32; 4]> {
        self.validate()?;
        let w = self.as_array();
        let sum: f64 = w.iter().sum();
        Ok(w.map(|v| (v / sum) as f32))
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_ctx: f64,
    pub l_score: f64,
    pub l_sem: f64,
    /// `λ · (l_id, l_ctx, l_score, l_sem)` with the unnormalised weights.
    pub l_total: f64,
    /// Input-gradient norm of each weighted component, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norms: Option<[f64; 4]>,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 4] {
        [self.l_id, self.l_ctx, self.l_score, self.l_sem]
    }
}

/// Weighted aggregate of finite components.
pub fn loss_total(components: [f64; 4], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let names = ["l_id", "l_ctx", "l_score", "l_sem"];
    for (name, v) in names.iter().zip(components) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let l_total = components.iter().zip(weights.as_array()).map(|(c, w)| c * w).sum();
    let [l_id, l_ctx, l_score, l_sem] = components;
    Ok(LossBreakdown {
        l_id,
        l_ctx,
        l_score,
        l_sem,
        l_total,
        grad_norms: None,
    })
}

/// The four component losses as graph-connected scalars.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub id: Tensor,
    pub ctx: Tensor,
    pub score: Tensor,
    pub sem: Tensor,
}

impl LossComponents {
    pub fn as_array(&self) -> [&Tensor; 4] {
        [&self.id, &self.ctx, &self.score, &self.sem]
    }

    pub fn values(&self) -> Result<[f64; 4]> {
        let mut out = [0.0; 4];
        for (o, t) in out.iter_mut().zip(self.as_array()) {
            *o = scalar(t)?;
        }
        Ok(out)
    }

    /// Scalar to ascend, `Σ (λ_i / Σλ) L_i`, with its breakdown.
    pub fn objective(&self, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
        let breakdown = loss_total(self.values()?, weights)?;
        let w = weights.normalized_f32()?;
        let mut total: Option<Tensor> = None;
        for (t, &wi) in self.as_array().into_iter().zip(&w) {
            if wi == 0.0 {
                continue;
            }
            let term = t.affine(wi as f64, 0.0)?;
            total = Some(match total {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("all loss weights are zero"))?;
        Ok((total, breakdown))
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattens to `[B, N]`, treating a 1-D input as one row.
fn rows(x: &Tensor) -> Result<Tensor> {
    Ok(match x.rank() {
        0 => return Err(Error::ShapeMismatch("scalar where a vector was expected".into())),
        1 => x.unsqueeze(0)?,
        _ => x.flatten_from(1)?,
    })
}

/// Row-wise cosine similarity, `[B, N] x [B or 1, N] -> [B]`.
fn row_cosine(a: &Tensor, b: &Tensor, what: &'static str) -> Result<Tensor> {
    let (a, b) = (rows(a)?, rows(b)?);
    if a.dim(1)? != b.dim(1)? {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let na = a.sqr()?.sum(1)?.sqrt()?;
    let nb = b.sqr()?.sum(1)?.sqrt()?;
    for n in [&na, &nb] {
        if n.to_dtype(DType::F64)?.to_vec1::<f64>()?.iter().any(|&v| v == 0.0) {
            return Err(Error::ZeroNorm(what));
        }
    }
    let dot = a.broadcast_mul(&b)?.sum(1)?;
    Ok(dot.broadcast_div(&na)?.broadcast_div(&nb)?)
}

/// `1 − cos(e_adv, e_ref) + cos(e_adv, c_opp)`, averaged over rows of `e_adv`.
pub fn loss_id(e_adv: &Tensor, e_ref: &Tensor, c_opp: &Tensor) -> Result<Tensor> {
    let away = row_cosine(e_adv, e_ref, "identity embedding")?;
    let toward = row_cosine(e_adv, c_opp, "identity embedding")?;
    Ok((toward - away)?.affine(1.0, 1.0)?.mean_all()?)
}

fn summed_context(bundle: &FeatureTapBundle, layers: &[&str]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for id in layers {
        let ctx = &bundle.tap(id)?.ctx;
        acc = Some(match acc {
            None => ctx.clone(),
            Some(a) => {
                if a.dims() != ctx.dims() {
                    return Err(Error::ShapeMismatch(format!("context of {id}: {:?} vs {:?}", ctx.dims(), a.dims())));
                }
                (a + ctx)?
            }
        });
    }
    acc.ok_or_else(|| Error::invalid("no context layers selected"))
}

/// `D_KL(P_ref ∥ P_adv)` between softmaxes of the flattened contexts summed
/// over `layers`.
pub fn loss_ctx(bundle_ref: &FeatureTapBundle, bundle_adv: &FeatureTapBundle, layers: &[&str]) -> Result<Tensor> {
    let c_ref = summed_context(bundle_ref, layers)?;
    let c_adv = summed_context(bundle_adv, layers)?;
    if c_ref.dims() != c_adv.dims() {
        return Err(Error::ShapeMismatch(format!("contexts {:?} vs {:?}", c_ref.dims(), c_adv.dims())));
    }
    kl_of_logits(&rows(&c_ref)?, &rows(&c_adv)?)
}

/// Mean over rows of `KL(softmax(p) ∥ softmax(q))`.
pub fn kl_of_logits(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let lp = candle_nn::ops::log_softmax(p, D::Minus1)?;
    let lq = candle_nn::ops::log_softmax(q, D::Minus1)?;
    Ok(lp.exp()?.mul(&(lp - lq)?)?.sum(D::Minus1)?.mean_all()?)
}

/// L2 norm of the score prediction, averaged over the batch of draws.
pub fn loss_score(bundle: &FeatureTapBundle) -> Result<Tensor> {
    Ok(rows(&bundle.score)?.sqr()?.sum(1)?.sqrt()?.mean_all()?)
}

/// Mean over `layers` of `1 − cos(f_adv, f_ref) + cos(f_adv, f_noise)`.
///
/// `bundle_noise` may have a batch of one, shared by every draw.
pub fn loss_sem(
    bundle_adv: &FeatureTapBundle,
    bundle_ref: &FeatureTapBundle,
    bundle_noise: &FeatureTapBundle,
    layers: &[&str],
) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(Error::invalid("no feature layers selected"));
    }
    let mut acc: Option<Tensor> = None;
    for id in layers {
        let f_adv = &bundle_adv.tap(id)?.feature;
        let away = row_cosine(f_adv, &bundle_ref.tap(id)?.feature, "U-Net feature")?;
        let toward = row_cosine(f_adv, &bundle_noise.tap(id)?.feature, "U-Net feature")?;
        let term = (toward - away)?.affine(1.0, 1.0)?.mean_all()?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    let sum = acc.expect("layers nonempty");
    Ok(sum.affine(1.0 / layers.len() as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::LayerTap;
    use crate::nn::DEVICE;
    use approx::assert_relative_eq;
    use candle_core::Var;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &DEVICE).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn bundle(ctx: Vec<(&str, Tensor)>, features: Vec<(&str, Tensor)>, score: Tensor) -> FeatureTapBundle {
        let mut layers = BTreeMap::new();
        let empty = Tensor::zeros(1, DType::F64, &DEVICE).unwrap();
        for (id, c) in ctx {
            layers.insert(
                id.to_string(),
                LayerTap {
                    ctx: c,
                    query: empty.clone(),
                    attended: empty.clone(),
                    feature: empty.clone(),
                },
            );
        }
        for (id, f) in features {
            let entry = layers.entry(id.to_string()).or_insert(LayerTap {
                ctx: empty.clone(),
                query: empty.clone(),
                attended: empty.clone(),
                feature: empty.clone(),
            });
            entry.feature = f;
        }
        FeatureTapBundle {
            layers,
            eps: score.clone(),
            score,
            t: vec![0.05],
        }
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn loss_id_boundary_values() {
        let (x, y) = (t64(&[1.0, 0.0, 0.0], &[3]), t64(&[0.0, 2.0, 0.0], &[3]));
        assert_relative_eq!(scalar(&loss_id(&x, &x, &y).unwrap()).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scalar(&loss_id(&y, &x, &y).unwrap()).unwrap(), 2.0, epsilon = 1e-12);
        let z = t64(&[0.0; 3], &[3]);
        assert!(matches!(loss_id(&z, &x, &y), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn loss_id_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (a, r, c) = (randn(&mut rng, 16), randn(&mut rng, 16), randn(&mut rng, 16));
            let got = scalar(&loss_id(&t64(&a, &[16]), &t64(&r, &[16]), &t64(&c, &[16])).unwrap()).unwrap();
            assert_relative_eq!(got, 1.0 - cos(&a, &r) + cos(&a, &c), epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_hand_computed() {
        // logits whose softmaxes are (0.5, 0.5) and (0.9, 0.1)
        let p = t64(&[0.0, 0.0], &[1, 2]);
        let q = t64(&[(0.9f64).ln(), (0.1f64).ln()], &[1, 2]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_relative_eq!(scalar(&kl_of_logits(&p, &q).unwrap()).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.5108, epsilon = 1e-4);
    }

    #[test]
    fn loss_ctx_sums_layers_before_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = [1, 2, 3];
        let (a0, a1, b0, b1) = (randn(&mut rng, 6), randn(&mut rng, 6), randn(&mut rng, 6), randn(&mut rng, 6));
        let r = bundle(vec![("d0", t64(&a0, &shape)), ("d1", t64(&a1, &shape))], vec![], t64(&[0.0], &[1]));
        let a = bundle(vec![("d0", t64(&b0, &shape)), ("d1", t64(&b1, &shape))], vec![], t64(&[0.0], &[1]));
        let got = scalar(&loss_ctx(&r, &a, &["d0", "d1"]).unwrap()).unwrap();
        let soft = |x: Vec<f64>| {
            let m: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / m).collect::<Vec<_>>()
        };
        let p = soft(a0.iter().zip(&a1).map(|(x, y)| x + y).collect());
        let q = soft(b0.iter().zip(&b1).map(|(x, y)| x + y).collect());
        let expected: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(scalar(&loss_ctx(&r, &r, &["d0", "d1"]).unwrap()).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(loss_ctx(&r, &a, &["up"]), Err(Error::MissingTap(_))));
        let wrong = bundle(vec![("d0", t64(&b0, &[1, 3, 2])), ("d1", t64(&b1, &[1, 3, 2]))], vec![], t64(&[0.0], &[1]));
        assert!(loss_ctx(&r, &wrong, &["d0", "d1"]).is_err());
    }

    #[test]
    fn loss_score_norms() {
        let z = bundle(vec![], vec![], t64(&[0.0; 12], &[1, 3, 4]));
        assert_eq!(scalar(&loss_score(&z).unwrap()).unwrap(), 0.0);
        let ones = bundle(vec![], vec![], t64(&[1.0; 12], &[1, 3, 4]));
        assert_relative_eq!(scalar(&loss_score(&ones).unwrap()).unwrap(), 12f64.sqrt(), epsilon = 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = randn(&mut rng, 24);
        let b = bundle(vec![], vec![], t64(&v, &[2, 3, 4]));
        let n0 = v[..12].iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1 = v[12..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_relative_eq!(scalar(&loss_score(&b).unwrap()).unwrap(), 0.5 * (n0 + n1), epsilon = 1e-12);
    }

    #[test]
    fn loss_sem_boundaries_and_oracle() {
        let s = t64(&[0.0], &[1]);
        let (x, y) = (t64(&[1.0, 0.0, 0.0, 0.0], &[1, 2, 2]), t64(&[0.0, 0.0, 3.0, 0.0], &[1, 2, 2]));
        let fx = bundle(vec![], vec![("u", x.clone())], s.clone());
        let fy = bundle(vec![], vec![("u", y.clone())], s.clone());
        assert_relative_eq!(scalar(&loss_sem(&fx, &fx, &fy, &["u"]).unwrap()).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(scalar(&loss_sem(&fy, &fx, &fy, &["u"]).unwrap()).unwrap(), 2.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a0, a1, r0, r1, n0, n1) = (
            randn(&mut rng, 8),
            randn(&mut rng, 6),
            randn(&mut rng, 8),
            randn(&mut rng, 6),
            randn(&mut rng, 8),
            randn(&mut rng, 6),
        );
        let mk = |u0: &[f64], u1: &[f64]| bundle(vec![], vec![("u0", t64(u0, &[1, 4, 2])), ("u1", t64(u1, &[1, 3, 2]))], s.clone());
        let got = scalar(&loss_sem(&mk(&a0, &a1), &mk(&r0, &r1), &mk(&n0, &n1), &["u0", "u1"]).unwrap()).unwrap();
        let l0 = 1.0 - cos(&a0, &r0) + cos(&a0, &n0);
        let l1 = 1.0 - cos(&a1, &r1) + cos(&a1, &n1);
        assert_relative_eq!(got, 0.5 * (l0 + l1), epsilon = 1e-12);
        let zero = bundle(vec![], vec![("u", t64(&[0.0; 4], &[1, 2, 2]))], s);
        assert!(matches!(loss_sem(&fx, &zero, &fy, &["u"]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn loss_sem_broadcasts_a_single_noise_bundle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, r, n) = (randn(&mut rng, 12), randn(&mut rng, 12), randn(&mut rng, 6));
        let s = t64(&[0.0], &[1]);
        let adv = bundle(vec![], vec![("u", t64(&a, &[2, 3, 2]))], s.clone());
        let rf = bundle(vec![], vec![("u", t64(&r, &[2, 3, 2]))], s.clone());
        let noise = bundle(vec![], vec![("u", t64(&n, &[1, 3, 2]))], s);
        let got = scalar(&loss_sem(&adv, &rf, &noise, &["u"]).unwrap()).unwrap();
        let per = |i: usize| 1.0 - cos(&a[6 * i..6 * i + 6], &r[6 * i..6 * i + 6]) + cos(&a[6 * i..6 * i + 6], &n);
        assert_relative_eq!(got, 0.5 * (per(0) + per(1)), epsilon = 1e-12);
    }

    #[test]
    fn weighted_total_examples() {
        let w = LossWeights::default();
        let b = loss_total([1.0; 4], &w).unwrap();
        assert_relative_eq!(b.l_total, 16.35, epsilon = 1e-12);
        let only_id = LossWeights {
            id: 1.0,
            ctx: 0.0,
            score: 0.0,
            sem: 0.0,
        };
        assert_eq!(loss_total([0.3, 5.0, 7.0, 1.0], &only_id).unwrap().l_total, 0.3);
        assert!(loss_total([1.0; 4], &only_id.scaled(0.0)).is_err());
        assert!(matches!(loss_total([1.0, f64::NAN, 1.0, 1.0], &w), Err(Error::NonFinite(_))));
        let neg = LossWeights { id: -1.0, ..w };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn normalized_weights_ignore_scale() {
        let w = LossWeights::default();
        for k in [7.0, 0.25, 3.0, 1e3] {
            assert_eq!(w.normalized_f32().unwrap(), w.scaled(k).normalized_f32().unwrap());
        }
    }

    /// Directional central difference against the autograd gradient.
    fn check_gradient(f: impl Fn(&Tensor) -> Tensor, x: &[f64], shape: &[usize], rng: &mut ChaCha8Rng) {
        let var = Var::from_tensor(&t64(x, shape)).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let d = randn(rng, x.len());
        let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let h = 1e-4;
        let at = |s: f64| {
            let moved: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            scalar(&f(&t64(&moved, shape))).unwrap()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "analytic {analytic} numeric {numeric} rel {rel}");
    }

    #[test]
    fn component_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (r, c) = (randn(&mut rng, 10), randn(&mut rng, 10));
            let x = randn(&mut rng, 10);
            check_gradient(|e| loss_id(e, &t64(&r, &[10]), &t64(&c, &[10])).unwrap(), &x, &[10], &mut rng);

            let cref: Vec<f64> = randn(&mut rng, 12);
            let other = randn(&mut rng, 12);
            let rb = bundle(
                vec![("d0", t64(&cref[..6], &[1, 2, 3])), ("d1", t64(&cref[6..], &[1, 2, 3]))],
                vec![],
                t64(&[0.0], &[1]),
            );
            let x = randn(&mut rng, 6);
            check_gradient(
                |c| {
                    let ab = bundle(
                        vec![("d0", c.clone()), ("d1", t64(&other[..6], &[1, 2, 3]))],
                        vec![],
                        t64(&[0.0], &[1]),
                    );
                    loss_ctx(&rb, &ab, &["d0", "d1"]).unwrap()
                },
                &x,
                &[1, 2, 3],
                &mut rng,
            );

            let x = randn(&mut rng, 24);
            check_gradient(
                |s| loss_score(&bundle(vec![], vec![], s.clone())).unwrap(),
                &x,
                &[2, 3, 4],
                &mut rng,
            );

            let (fr, fnoise) = (randn(&mut rng, 12), randn(&mut rng, 12));
            let x = randn(&mut rng, 12);
            let s = t64(&[0.0], &[1]);
            let rb = bundle(vec![], vec![("u", t64(&fr, &[1, 4, 3]))], s.clone());
            let nb = bundle(vec![], vec![("u", t64(&fnoise, &[1, 4, 3]))], s.clone());
            check_gradient(
                |f| loss_sem(&bundle(vec![], vec![("u", f.clone())], s.clone()), &rb, &nb, &["u"]).unwrap(),
                &x,
                &[1, 4, 3],
                &mut rng,
            );
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(-5.0f64..5.0, 6), q in prop::collection::vec(-5.0f64..5.0, 6)) {
            let v = scalar(&kl_of_logits(&t64(&p, &[1, 6]), &t64(&q, &[1, 6])).unwrap()).unwrap();
            prop_assert!(v >= -1e-12);
        }

        #[test]
        fn cosine_losses_ignore_positive_scale(
            a in prop::collection::vec(-3.0f64..3.0, 8),
            r in prop::collection::vec(-3.0f64..3.0, 8),
            c in prop::collection::vec(-3.0f64..3.0, 8),
            k in 0.01f64..100.0,
        ) {
            prop_assume!([&a, &r, &c].iter().all(|v| v.iter().any(|x| x.abs() > 1e-2)));
            let scale = |v: &[f64]| v.iter().map(|x| x * k).collect::<Vec<_>>();
            let base = scalar(&loss_id(&t64(&a, &[8]), &t64(&r, &[8]), &t64(&c, &[8])).unwrap()).unwrap();
            let scaled = scalar(&loss_id(&t64(&scale(&a), &[8]), &t64(&scale(&r), &[8]), &t64(&c, &[8])).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            let s = t64(&[0.0], &[1]);
            let mk = |v: &[f64]| bundle(vec![], vec![("u", t64(v, &[1, 4, 2]))], s.clone());
            let base = scalar(&loss_sem(&mk(&a), &mk(&r), &mk(&c), &["u"]).unwrap()).unwrap();
            let scaled = scalar(&loss_sem(&mk(&scale(&a)), &mk(&r), &mk(&scale(&c)), &["u"]).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
