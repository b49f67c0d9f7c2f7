//! Lossy post-processing of protected references and the severity sweep.

pub mod transform;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use transform::{apply_transform, LossyTransform, TransformKind, TransformOutcome, CODEC_ENV};

use crate::error::{Error, Result};
use crate::identity::EnrollmentStore;
use crate::metrics::{DefenseReport, SampleMetrics};
use crate::pipeline::{par_map, Evaluator, ProtectedSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seed: u64,
    /// Fall back to the compression proxy when no codec is configured.
    pub allow_proxy: bool,
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            allow_proxy: true,
            jobs: 1,
        }
    }
}

/// One transform level: reports for clones of the transformed protected and
/// transformed clean references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the untransformed row.
    pub transform: Option<LossyTransform>,
    pub protected: Option<DefenseReport>,
    pub undefended: Option<DefenseReport>,
    pub proxy: bool,
    pub out_of_range: bool,
    /// Cells that failed, as `sample id: error`.
    pub failures: Vec<String>,
}

fn cell_seed(seed: u64, row: usize, sample: usize) -> u64 {
    seed ^ ((row as u64) << 32) ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Cell {
    protected: SampleMetrics,
    undefended: SampleMetrics,
    outcome: TransformOutcome,
}

/// Runs every transform, plus the untransformed row first, over the
/// protected set. Each clone is compared with the clone of the untouched
/// clean reference from the same seed. Failed cells are recorded and the
/// sweep continues.
pub fn robustness_sweep(
    samples: &[ProtectedSample],
    transforms: &[LossyTransform],
    evaluator: &Evaluator,
    enrollments: &EnrollmentStore,
    cfg: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let baseline: Vec<Result<_>> = par_map(cfg.jobs, samples, |_, s| {
        Ok(evaluator.clone_voice(&s.x_src, &s.x_ref, s.clone_seed)?.waveform_out)
    });
    let rows: Vec<Option<LossyTransform>> = std::iter::once(None).chain(transforms.iter().copied().map(Some)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for (r, t) in rows.iter().enumerate() {
        let cells = par_map(cfg.jobs, samples, |i, s| -> Result<Cell> {
            let y = baseline[i].as_ref().map_err(|e| Error::invalid(format!("clean clone failed: {e}")))?;
            let enrollment = enrollments.get(&s.speaker_id)?;
            let seed = cell_seed(cfg.seed, r, i);
            let (adv, clean, outcome) = match t {
                Some(t) => {
                    let (adv, outcome) = apply_transform(&s.x_adv, t, seed, cfg.allow_proxy)?;
                    let (clean, _) = apply_transform(&s.x_ref, t, seed, cfg.allow_proxy)?;
                    (adv, clean, outcome)
                }
                None => (
                    s.x_adv.clone(),
                    s.x_ref.clone(),
                    TransformOutcome {
                        proxy: false,
                        out_of_range: false,
                    },
                ),
            };
            let y_adv = evaluator.clone_voice(&s.x_src, &adv, s.clone_seed)?.waveform_out;
            let y_clean = evaluator.clone_voice(&s.x_src, &clean, s.clone_seed)?.waveform_out;
            Ok(Cell {
                protected: evaluator.metrics(&s.id, &s.x_ref, &adv, y, &y_adv, enrollment)?,
                undefended: evaluator.metrics(&s.id, &s.x_ref, &clean, y, &y_clean, enrollment)?,
                outcome,
            })
        });
        let mut row = SweepRow {
            transform: *t,
            protected: None,
            undefended: None,
            proxy: false,
            out_of_range: t.is_some_and(|t| t.validate(samples[0].x_ref.sample_rate).unwrap_or(true)),
            failures: Vec::new(),
        };
        let (mut prot, mut undef) = (Vec::new(), Vec::new());
        for (s, cell) in samples.iter().zip(cells) {
            match cell {
                Ok(c) => {
                    row.proxy |= c.outcome.proxy;
                    prot.push(c.protected);
                    undef.push(c.undefended);
                }
                Err(e) => {
                    log::warn!("robustness cell {} / {:?} failed: {e}", s.id, t);
                    row.failures.push(format!("{}: {e}", s.id));
                }
            }
        }
        let skipped = row.failures.len();
        if !prot.is_empty() {
            row.protected = Some(DefenseReport::new(prot, evaluator.thresholds, skipped)?);
            row.undefended = Some(DefenseReport::new(undef, evaluator.thresholds, skipped)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// Sweep table with one line per transform level.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = crate::io::csv_writer(path)?;
    w.write_record([
        "lossy_type",
        "level",
        "dtw",
        "asv_rate",
        "quality",
        "dsr",
        "undefended_asv_rate",
        "undefended_dsr",
        "proxy",
        "out_of_range",
        "failures",
    ])?;
    for row in rows {
        let (kind, level) = match &row.transform {
            Some(t) => (t.kind.name().to_string(), t.level.to_string()),
            None => ("none".to_string(), String::new()),
        };
        let field = |r: &Option<DefenseReport>, f: fn(&DefenseReport) -> f64| r.as_ref().map_or(String::new(), |r| f(r).to_string());
        w.write_record([
            kind,
            level,
            field(&row.protected, |r| r.aggregates.mean_dtw),
            field(&row.protected, |r| r.aggregates.asv_rate),
            field(&row.protected, |r| r.aggregates.mean_quality),
            field(&row.protected, |r| r.aggregates.dsr),
            field(&row.undefended, |r| r.aggregates.asv_rate),
            field(&row.undefended, |r| r.aggregates.dsr),
            row.proxy.to_string(),
            row.out_of_range.to_string(),
            row.failures.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
