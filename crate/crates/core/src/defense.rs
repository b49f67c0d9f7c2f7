//! Projected sign-gradient ascent on the defense objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::mel::MelAnalyzer;
use crate::audio::Waveform;
use crate::diffusion::{DiffVc, SdeSchedule, FeatureTapBundle, TapRequest, DOWN_LAYERS, UP_LAYERS};
use crate::error::{Error, Result};
use crate::identity::{EncoderKind, Encoder, GenderCentroid};
use crate::nn::mel_op::log_mel;
use crate::nn::{to_vec_f32, DEVICE};
use crate::objectives::{loss_ctx, loss_id, loss_score, loss_sem, LossBreakdown, LossComponents, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    /// L∞ budget on the waveform perturbation.
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Independent (timestep, noise) draws averaged per iteration.
    pub grad_repeats: usize,
    /// Losses are evaluated only at the first `t_adv` steps of the reverse
    /// process on the model's discretisation grid.
    pub t_adv: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Also record the input-gradient norm of each weighted component. Costs
    /// four extra backward passes per iteration.
    #[serde(default)]
    pub component_grad_norms: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            alpha: 4e-5,
            iterations: 50,
            grad_repeats: 5,
            t_adv: 6,
            seed: 0,
            weights: LossWeights::default(),
            component_grad_norms: false,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.iterations < 1 {
            return Err(Error::invalid("at least one iteration is required"));
        }
        if self.grad_repeats < 1 {
            return Err(Error::invalid("at least one gradient repeat is required"));
        }
        if self.t_adv < 1 {
            return Err(Error::invalid("t_adv must be at least 1"));
        }
        self.weights.validate()
    }
}

/// Loss values of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Breakdown over the averaged draws.
    pub loss: LossBreakdown,
    /// `l_total` of each draw separately.
    pub repeat_totals: Vec<f64>,
    /// Timestep indices drawn this iteration.
    pub timesteps: Vec<usize>,
    /// `max |x_adv − x_ref|` after this iteration's projection.
    pub max_abs_delta: f64,
}

/// Anything PGD can ascend: returns the input-gradient at `x_adv` together
/// with the loss record (iteration and delta fields are filled by the driver).
pub trait Objective {
    fn gradient(&mut self, x_adv: &[f32], rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, IterationRecord)>;
}

/// Perturbed waveform with the trace that produced it.
#[derive(Debug, Clone)]
pub struct AdversarialState {
    pub x_adv: Waveform,
    pub iteration: usize,
    pub trace: Vec<IterationRecord>,
    pub seconds: f64,
}

/// Projects one sample onto the ε-ball around `r` and the amplitude range.
/// The check is done in f64 on the f32 values that are stored.
fn project(x: f32, r: f32, epsilon: f64) -> f32 {
    let (lo, hi) = ((r as f64 - epsilon).max(-1.0), (r as f64 + epsilon).min(1.0));
    let mut y = (x as f64).clamp(lo, hi) as f32;
    while (y as f64 - r as f64).abs() > epsilon || y.abs() > 1.0 {
        // rounding to f32 pushed the value just past the bound
        y = if y > r { y.next_down() } else { y.next_up() };
    }
    y
}

fn max_abs_delta(x: &[f32], r: &[f32]) -> f64 {
    x.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).abs()).fold(0.0, f64::max)
}

/// Runs exactly `cfg.iterations` projected sign-gradient steps from `x_ref`.
pub fn protect_with<O: Objective>(x_ref: &Waveform, objective: &mut O, cfg: &PgdConfig) -> Result<AdversarialState> {
    cfg.validate()?;
    if x_ref.is_empty() {
        return Err(Error::EmptyAudio);
    }
    if x_ref.samples.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::invalid("reference samples must be finite and within [-1, 1]"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = &x_ref.samples;
    let mut x = r.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let (grad, mut record) = objective.gradient(&x, &mut rng)?;
        if grad.len() != x.len() {
            return Err(Error::ShapeMismatch(format!("gradient of {} samples for {}", grad.len(), x.len())));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient sample {i} at iteration {iteration}; trace so far: {}",
                serde_json::to_string(&trace)?
            )));
        }
        for ((xi, &ri), &g) in x.iter_mut().zip(r).zip(&grad) {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *xi = project((*xi as f64 + cfg.alpha * s) as f32, ri, cfg.epsilon);
        }
        let delta = max_abs_delta(&x, r);
        if delta > cfg.epsilon + 1e-9 {
            return Err(Error::invalid(format!("projection left the ε-ball: {delta} at iteration {iteration}")));
        }
        record.iteration = iteration;
        record.max_abs_delta = delta;
        trace.push(record);
    }
    Ok(AdversarialState {
        x_adv: Waveform::new(x, x_ref.sample_rate),
        iteration: cfg.iterations,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Moves each sample to the PCM-16 grid while staying inside the ε-ball of
/// `x_ref`, so that writing and re-reading the file keeps the budget.
/// `x_ref` should itself lie on the grid; otherwise a point may be left at
/// the clamped boundary value.
pub fn quantize_within_ball(x_adv: &Waveform, x_ref: &Waveform, epsilon: f64) -> Result<Waveform> {
    if x_adv.len() != x_ref.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", x_adv.len(), x_ref.len())));
    }
    let full = i16::MAX as f32;
    let samples = x_adv
        .samples
        .iter()
        .zip(&x_ref.samples)
        .map(|(&x, &r)| {
            let mut q = (x.clamp(-1.0, 1.0) * full).round() as i32;
            let target = (r.clamp(-1.0, 1.0) * full).round() as i32;
            while q != target && (q as f32 / full - r).abs() as f64 > epsilon {
                q += (target - q).signum();
            }
            q as f32 / full
        })
        .collect();
    Ok(Waveform::new(samples, x_adv.sample_rate))
}

/// `x_ref` plus Gaussian noise of standard deviation `epsilon`, clipped to
/// the ε-ball and to the amplitude range.
pub fn random_noise_baseline(x_ref: &Waveform, epsilon: f64, seed: u64) -> Result<Waveform> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = x_ref
        .samples
        .iter()
        .map(|&r| {
            let n: f64 = rng.sample::<f64, _>(StandardNormal) * epsilon;
            project((r as f64 + n.clamp(-epsilon, epsilon)) as f32, r, epsilon)
        })
        .collect();
    Ok(Waveform::new(samples, x_ref.sample_rate))
}

/// Writes one JSON object per iteration.
pub fn write_trace(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in trace {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The full defense objective on a frozen conversion model.
pub struct DefenseObjective<'a> {
    model: &'a DiffVc,
    extractor: &'a Encoder,
    analyzer: Arc<MelAnalyzer>,
    /// Standardised source mel `[1, n_mels, F]`.
    source: Tensor,
    /// Standardised clean reference mel `[1, n_mels, F_ref]`.
    reference: Tensor,
    e_ref: Tensor,
    c_opp: Tensor,
    f_noise: FeatureTapBundle,
    weights: LossWeights,
    repeats: usize,
    t_adv: usize,
    component_grad_norms: bool,
    taps: TapRequest,
}

impl<'a> DefenseObjective<'a> {
    /// Precomputes `e_ref`, the clean source/reference mels and the
    /// pure-noise features `f_noise` (drawn from `cfg.seed`).
    pub fn new(
        model: &'a DiffVc,
        extractor: &'a Encoder,
        x_ref: &Waveform,
        x_src: &Waveform,
        c_opp: &GenderCentroid,
        cfg: &PgdConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if extractor.kind() != EncoderKind::DefenseExtractor || c_opp.source != EncoderKind::DefenseExtractor {
            return Err(Error::invalid("the defense objective needs the defense extractor and its centroid"));
        }
        if extractor.config.n_mels != model.net.config().n_mels {
            return Err(Error::invalid("extractor and model disagree on the mel resolution"));
        }
        if cfg.t_adv > model.sde.n_steps {
            return Err(Error::invalid(format!("t_adv {} exceeds the {} step grid", cfg.t_adv, model.sde.n_steps)));
        }
        let analyzer = MelAnalyzer::shared();
        let src_mel = analyzer.forward(&x_src.samples)?;
        let ref_mel = analyzer.forward(&x_ref.samples)?;
        let source = model.stats.tensor(&src_mel)?;
        let reference = model.stats.tensor(&ref_mel)?;
        let ref_log = Tensor::from_vec(ref_mel.to_band_major(), (1, ref_mel.n_mels, ref_mel.n_frames), &DEVICE)?;
        let e_ref = extractor.embed_log_mel(&ref_log)?.detach();
        let c_opp = Tensor::from_slice(&c_opp.vector, (1, c_opp.vector.len()), &DEVICE)?;

        // f_noise: pure noise as both content and reference at the largest
        // adversarial timestep
        let rms = x_ref.rms();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e01_5e00);
        let noise: Vec<f32> = (0..x_src.len())
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * rms).clamp(-1.0, 1.0) as f32)
            .collect();
        let noise_mel = model.stats.tensor(&analyzer.forward(&noise)?)?;
        let t_noise = SdeSchedule::step_time(cfg.t_adv, model.sde.n_steps);
        let taps = TapRequest::of(&[DOWN_LAYERS, UP_LAYERS].concat())?;
        let f_noise = model.forward_with_taps(&noise_mel, &noise_mel, &noise_mel, &[t_noise], &TapRequest::of(&UP_LAYERS)?)?;
        Ok(Self {
            model,
            extractor,
            analyzer,
            source,
            reference,
            e_ref,
            c_opp,
            f_noise,
            weights: cfg.weights,
            repeats: cfg.grad_repeats,
            t_adv: cfg.t_adv,
            component_grad_norms: cfg.component_grad_norms,
            taps,
        })
    }

    /// Noised source mels `α m_src + σ z` for each draw, `[R, n_mels, F]`.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
        let src = to_vec_f32(&self.source)?;
        let (_, n_mels, frames) = self.source.dims3()?;
        let mut data = Vec::with_capacity(self.repeats * src.len());
        let (mut ks, mut ts) = (Vec::new(), Vec::new());
        for _ in 0..self.repeats {
            let k = rng.random_range(1..=self.t_adv);
            let t = SdeSchedule::step_time(k, self.model.sde.n_steps);
            let (a, s) = (self.model.sde.alpha(t), self.model.sde.sigma(t));
            data.extend(src.iter().map(|&m| (a * m as f64 + s * rng.sample::<f64, _>(StandardNormal)) as f32));
            ks.push(k);
            ts.push(t);
        }
        Ok((Tensor::from_vec(data, (self.repeats, n_mels, frames), &DEVICE)?, ks, ts))
    }

    /// Loss components of a batch of draws at `x_adv` (given as a graph
    /// tensor), and the per-draw components for the trace.
    pub fn components(&self, x: &Tensor, x_t: &Tensor, t: &[f64]) -> Result<(LossComponents, Vec<[f64; 4]>)> {
        let r = t.len();
        let lm = log_mel(x, self.analyzer.clone())?;
        let (n_mels, frames) = lm.dims2()?;
        let lm = lm.unsqueeze(0)?;
        let e_adv = self.extractor.embed_log_mel(&lm)?;
        let adv_ref = self.model.stats.standardize(&lm)?.broadcast_as((r, n_mels, frames))?.contiguous()?;
        let source = self.source.broadcast_as((r, self.source.dim(1)?, self.source.dim(2)?))?.contiguous()?;
        let clean_ref = self.reference.broadcast_as((r, n_mels, self.reference.dim(2)?))?.contiguous()?;

        let adv = self.model.forward_with_taps(x_t, &source, &adv_ref, t, &self.taps)?;
        let refb = detach_bundle(self.model.forward_with_taps(x_t, &source, &clean_ref, t, &self.taps)?);
        let comps = LossComponents {
            id: loss_id(&e_adv, &self.e_ref, &self.c_opp)?,
            ctx: loss_ctx(&refb, &adv, &DOWN_LAYERS)?,
            score: loss_score(&adv)?,
            sem: loss_sem(&adv, &refb, &self.f_noise, &UP_LAYERS)?,
        };
        // per-draw values: identity is shared, the rest split along the batch
        let id = crate::objectives::scalar(&comps.id)?;
        let mut per = Vec::with_capacity(r);
        for i in 0..r {
            let pick = |b: &FeatureTapBundle| narrow_bundle(b, i);
            let (a, rb) = (pick(&adv)?, pick(&refb)?);
            per.push([
                id,
                crate::objectives::scalar(&loss_ctx(&rb, &a, &DOWN_LAYERS)?)?,
                crate::objectives::scalar(&loss_score(&a)?)?,
                crate::objectives::scalar(&loss_sem(&a, &rb, &self.f_noise, &UP_LAYERS)?)?,
            ]);
        }
        Ok((comps, per))
    }
}

fn detach_bundle(mut b: FeatureTapBundle) -> FeatureTapBundle {
    for tap in b.layers.values_mut() {
        tap.ctx = tap.ctx.detach();
        tap.query = tap.query.detach();
        tap.attended = tap.attended.detach();
        tap.feature = tap.feature.detach();
    }
    b.eps = b.eps.detach();
    b.score = b.score.detach();
    b
}

fn narrow_bundle(b: &FeatureTapBundle, i: usize) -> Result<FeatureTapBundle> {
    let mut layers = b.layers.clone();
    for tap in layers.values_mut() {
        tap.ctx = tap.ctx.narrow(0, i, 1)?;
        tap.feature = tap.feature.narrow(0, i, 1)?;
    }
    Ok(FeatureTapBundle {
        layers,
        eps: b.eps.narrow(0, i, 1)?,
        score: b.score.narrow(0, i, 1)?,
        t: vec![b.t[i]],
    })
}

impl Objective for DefenseObjective<'_> {
    fn gradient(&mut self, x_adv: &[f32], rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, IterationRecord)> {
        let (x_t, timesteps, t) = self.draw(rng)?;
        let var = Var::from_tensor(&Tensor::from_slice(x_adv, x_adv.len(), &DEVICE)?)?;
        let (comps, per) = self.components(var.as_tensor(), &x_t, &t)?;
        let (total, mut loss) = comps.objective(&self.weights)?;
        let grads = total.backward()?;
        let grad = grads
            .get(var.as_tensor())
            .ok_or_else(|| Error::invalid("objective does not depend on the waveform"))?;
        let grad = grad.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        if self.component_grad_norms {
            let mut norms = [0.0; 4];
            for ((n, c), w) in norms.iter_mut().zip(comps.as_array()).zip(self.weights.as_array()) {
                if w == 0.0 {
                    continue;
                }
                let g = c.affine(w, 0.0)?.backward()?;
                if let Some(g) = g.get(var.as_tensor()) {
                    *n = crate::objectives::scalar(&g.sqr()?.sum_all()?.sqrt()?)?;
                }
            }
            loss.grad_norms = Some(norms);
        }
        let w = self.weights.as_array();
        let repeat_totals = per.iter().map(|c| c.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        Ok((
            grad,
            IterationRecord {
                iteration: 0,
                loss,
                repeat_totals,
                timesteps,
                max_abs_delta: 0.0,
            },
        ))
    }
}

/// Protects `x_ref` against conversion of `x_src` into its voice.
pub fn protect(
    x_ref: &Waveform,
    x_src: &Waveform,
    model: &DiffVc,
    extractor: &Encoder,
    c_opp: &GenderCentroid,
    cfg: &PgdConfig,
) -> Result<AdversarialState> {
    let mut objective = DefenseObjective::new(model, extractor, x_ref, x_src, c_opp, cfg)?;
    protect_with(x_ref, &mut objective, cfg)
}
