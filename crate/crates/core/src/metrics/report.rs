//! Per-sample metric rows, the success decision and aggregate reports.

use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever the report layout changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PESQ_STATUS: &str = "not implemented";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionThresholds {
    pub tau_asv: f64,
    pub tau_q: f64,
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        Self {
            tau_asv: 0.25,
            tau_q: 3.0,
        }
    }
}

impl DecisionThresholds {
    /// `τ_q` must be positive and at most just above the quality range, so
    /// that vacuous thresholds remain expressible. Values below the range
    /// are accepted with a warning: no sample can then succeed.
    pub fn validate(&self) -> Result<()> {
        if !self.tau_asv.is_finite() || !(self.tau_q > 0.0 && self.tau_q <= 5.1) {
            return Err(Error::invalid(format!(
                "thresholds τ_ASV={} τ_q={} outside the score ranges",
                self.tau_asv, self.tau_q
            )));
        }
        if self.tau_q < super::quality::MIN_SCORE {
            log::warn!("τ_q={} is below the quality range; every sample will fail the quality test", self.tau_q);
        }
        Ok(())
    }

    /// Speaker verification is defeated and the clone sounds degraded.
    pub fn success(&self, asv_score: f64, quality: f64) -> bool {
        asv_score < self.tau_asv && quality < self.tau_q
    }

    pub fn asv_accepts(&self, asv_score: f64) -> bool {
        asv_score >= self.tau_asv
    }
}

/// Signal-to-perturbation ratio; `Clean` when the perturbation is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Clean,
}

impl Snr {
    pub fn db(&self) -> f64 {
        match self {
            Snr::Db(v) => *v,
            Snr::Clean => f64::INFINITY,
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Db(v) => s.serialize_f64(*v),
            Snr::Clean => s.serialize_str("clean"),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr::Db(v)),
            Raw::Text(t) if t == "clean" => Ok(Snr::Clean),
            Raw::Text(t) => Err(de::Error::custom(format!("unexpected SNR value {t}"))),
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Db(v) => write!(f, "{v}"),
            Snr::Clean => f.write_str("clean"),
        }
    }
}

/// `10·log10(Σ x_ref² / Σ δ²)` with `δ = x_adv − x_ref`.
pub fn snr_db(x_ref: &[f32], x_adv: &[f32]) -> Result<Snr> {
    if x_ref.len() != x_adv.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", x_ref.len(), x_adv.len())));
    }
    let delta: Vec<f64> = x_ref.iter().zip(x_adv).map(|(&a, &b)| b as f64 - a as f64).collect();
    snr_of_delta(x_ref, &delta)
}

/// SNR of an explicit perturbation `δ`.
pub fn snr_of_delta(x_ref: &[f32], delta: &[f64]) -> Result<Snr> {
    if x_ref.len() != delta.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} samples", x_ref.len(), delta.len())));
    }
    let signal: f64 = x_ref.iter().map(|&x| (x as f64).powi(2)).sum();
    let noise: f64 = delta.iter().map(|d| d * d).sum();
    if noise == 0.0 {
        return Ok(Snr::Clean);
    }
    Ok(Snr::Db(10.0 * (signal / noise).log10()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub asv_score: f64,
    pub quality: f64,
    pub dtw: f64,
    pub ssim: f64,
    pub mcd: f64,
    pub snr: Snr,
    pub success: bool,
}

impl SampleMetrics {
    fn finite(&self) -> bool {
        [self.asv_score, self.quality, self.dtw, self.ssim, self.mcd]
            .iter()
            .all(|v| v.is_finite())
            && !matches!(self.snr, Snr::Db(v) if !v.is_finite())
    }
}

/// Fraction of samples that both fail verification and fall below the
/// quality threshold.
pub fn dsr(scores: &[(f64, f64)], thresholds: &DecisionThresholds) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let hits = scores.iter().filter(|&&(a, q)| thresholds.success(a, q)).count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub samples: usize,
    pub successes: usize,
    pub asv_rate: f64,
    pub dsr: f64,
    pub mean_asv_score: f64,
    pub mean_quality: f64,
    pub mean_dtw: f64,
    pub mean_ssim: f64,
    pub mean_mcd: f64,
    /// Mean over samples with a nonzero perturbation; `None` when all are clean.
    pub mean_snr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub schema_version: u32,
    pub thresholds: DecisionThresholds,
    pub pesq: String,
    pub samples: Vec<SampleMetrics>,
    /// Input rows that could not be evaluated.
    pub skipped: usize,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

impl DefenseReport {
    /// Recomputes every `success` flag and the aggregates from the rows.
    pub fn new(mut samples: Vec<SampleMetrics>, thresholds: DecisionThresholds, skipped: usize) -> Result<Self> {
        thresholds.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("no samples"));
        }
        if let Some(bad) = samples.iter().find(|s| !s.finite()) {
            return Err(Error::NonFinite(format!("metrics of sample {}", bad.id)));
        }
        for s in &mut samples {
            s.success = thresholds.success(s.asv_score, s.quality);
        }
        let n = samples.len();
        let successes = samples.iter().filter(|s| s.success).count();
        let accepted = samples.iter().filter(|s| thresholds.asv_accepts(s.asv_score)).count();
        let snrs: Vec<f64> = samples
            .iter()
            .filter_map(|s| match s.snr {
                Snr::Db(v) => Some(v),
                Snr::Clean => None,
            })
            .collect();
        let aggregates = Aggregates {
            samples: n,
            successes,
            asv_rate: accepted as f64 / n as f64,
            dsr: successes as f64 / n as f64,
            mean_asv_score: mean(samples.iter().map(|s| s.asv_score)),
            mean_quality: mean(samples.iter().map(|s| s.quality)),
            mean_dtw: mean(samples.iter().map(|s| s.dtw)),
            mean_ssim: mean(samples.iter().map(|s| s.ssim)),
            mean_mcd: mean(samples.iter().map(|s| s.mcd)),
            mean_snr: (!snrs.is_empty()).then(|| mean(snrs.into_iter())),
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            thresholds,
            pesq: PESQ_STATUS.into(),
            samples,
            skipped,
            aggregates,
            config: None,
        })
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// One aggregate row with the comparison-table columns.
    pub fn write_aggregate_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(["dtw", "asv_rate", "ssim", "quality", "dsr", "pesq", "mcd", "snr"])?;
        let a = &self.aggregates;
        w.write_record([
            a.mean_dtw.to_string(),
            a.asv_rate.to_string(),
            a.mean_ssim.to_string(),
            a.mean_quality.to_string(),
            a.dsr.to_string(),
            self.pesq.clone(),
            a.mean_mcd.to_string(),
            a.mean_snr.map_or_else(|| "clean".to_string(), |v| v.to_string()),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_samples_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(["id", "asv_score", "quality", "dtw", "ssim", "mcd", "snr", "success"])?;
        for s in &self.samples {
            w.write_record([
                s.id.clone(),
                s.asv_score.to_string(),
                s.quality.to_string(),
                s.dtw.to_string(),
                s.ssim.to_string(),
                s.mcd.to_string(),
                s.snr.to_string(),
                s.success.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
