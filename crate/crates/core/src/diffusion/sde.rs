//! Variance-preserving SDE with a linear noise schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::mel::MelSpectrogram;
use crate::error::{Error, Result};

/// `dx = -½β(t)x dt + √β(t) dw` on `t ∈ (0, 1]`, with `β` linear in `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of discrete steps used for training and default sampling.
    pub n_steps: usize,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.05,
            beta_max: 20.0,
            n_steps: 100,
        }
    }
}

/// Draw from the transition kernel together with its score.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub x_t: MelSpectrogram,
    /// `∇ log p_t(x_t | x_0)`, frame-major like `x_t`.
    pub score: Vec<f32>,
    /// Standard normal draw used to build `x_t`.
    pub noise: Vec<f32>,
    pub mean_scale: f64,
    pub std: f64,
}

impl SdeSchedule {
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `∫₀ᵗ β(s) ds`
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Mean scale `α_t` of the kernel `N(α_t x_0, σ_t² I)`.
    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.integrated_beta(t)).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (1.0 - (-self.integrated_beta(t)).exp()).max(0.0).sqrt()
    }

    pub fn drift(&self, x: f64, t: f64) -> f64 {
        -0.5 * self.beta(t) * x
    }

    pub fn diffusion(&self, t: f64) -> f64 {
        self.beta(t).sqrt()
    }

    /// Start time of the `k`-th reverse step (1-based) on an `n`-step grid:
    /// step `k` integrates from `1 - (k-1)/n` down to `1 - k/n`.
    pub fn step_time(k: usize, n: usize) -> f64 {
        1.0 - (k as f64 - 1.0) / n as f64
    }

    pub fn check_time(t: f64) -> Result<()> {
        if t.is_finite() && t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("diffusion time {t} outside (0, 1]")))
        }
    }

    pub fn noise_sample<R: Rng + ?Sized>(
        &self,
        x0: &MelSpectrogram,
        t: f64,
        rng: &mut R,
    ) -> Result<NoisySample> {
        Self::check_time(t)?;
        let a = self.alpha(t);
        let s = self.sigma(t);
        let noise: Vec<f32> = (0..x0.data.len()).map(|_| rng.sample(StandardNormal)).collect();
        let data = x0
            .data
            .iter()
            .zip(&noise)
            .map(|(&x, &z)| (a * x as f64 + s * z as f64) as f32)
            .collect();
        let score = noise.iter().map(|&z| (-(z as f64) / s) as f32).collect();
        Ok(NoisySample {
            x_t: MelSpectrogram::new(x0.n_frames, x0.n_mels, data)?,
            score,
            noise,
            mean_scale: a,
            std: s,
        })
    }

    /// One Euler–Maruyama step of the reverse SDE from `t` to `t - h`.
    ///
    /// `z = None` takes the deterministic final step.
    pub fn reverse_step(&self, x: f64, score: f64, t: f64, h: f64, z: Option<f64>) -> f64 {
        let b = self.beta(t);
        let mean = x + h * (0.5 * b * x + b * score);
        match z {
            Some(z) => mean + (b * h).sqrt() * z,
            None => mean,
        }
    }
}
