//! Protect, clone, score and sweep on small untrained models.

use std::sync::OnceLock;

use voxshield::audio::corpus::{roster, synth_utterance, Utterance};
use voxshield::defense::PgdConfig;
use voxshield::diffusion::{build_triples, DiffVc, MelStats, SdeSchedule, UNetConfig};
use voxshield::experiment::{evaluate_trial, make_trials, protect_trial, run_ablation, EvalSettings, ModelBundle, SweepAxis};
use voxshield::identity::{train_extractors, EncoderTrainConfig, EnrollmentStore};
use voxshield::metrics::quality::train_quality_proxy;
use voxshield::metrics::{DefenseReport, QualityTrainConfig, Snr};
use voxshield::pipeline::ProtectedSample;
use voxshield::robustness::transform::{LossyTransform, TransformKind};
use voxshield::robustness::{robustness_sweep, write_sweep_csv, SweepConfig};

struct Setup {
    corpus: Vec<Utterance>,
    bundle: ModelBundle,
}

fn corpus() -> Vec<Utterance> {
    roster(2, 1)
        .iter()
        .flat_map(|s| {
            (0..4).map(move |u| Utterance {
                speaker_id: s.speaker_id.clone(),
                gender: s.gender,
                content: Some(u),
                waveform: synth_utterance(s, 7, u, 8192),
            })
        })
        .collect()
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let corpus = corpus();
        let triples = build_triples(&corpus, 0).unwrap();
        let unet = UNetConfig {
            channels: [8, 16],
            hidden: 16,
            content_dim: 4,
            ref_dim: 8,
            key_dim: 4,
            value_dim: 4,
            time_dim: 8,
            groups: 4,
            ..UNetConfig::default()
        };
        let stats = MelStats::fit(triples.iter().map(|t| &t.target)).unwrap();
        let model = DiffVc::initialized(unet, SdeSchedule::default(), stats, 1).unwrap();
        let enc = EncoderTrainConfig {
            epochs: 1,
            held_out_per_speaker: 1,
            vocoder_augmentation: false,
            min_accuracy: 0.0,
            ..EncoderTrainConfig::default()
        };
        let (defense, asv, _) = train_extractors(&corpus, &enc).unwrap();
        let q = QualityTrainConfig {
            epochs: 1,
            draws_per_family: 1,
            ..QualityTrainConfig::default()
        };
        let (quality, _) = train_quality_proxy(&corpus, &q).unwrap();
        let enrollments = EnrollmentStore::from_corpus(&asv, &corpus).unwrap();
        Setup {
            corpus,
            bundle: ModelBundle {
                model,
                defense,
                asv,
                quality,
                enrollments,
            },
        }
    })
}

fn pgd() -> PgdConfig {
    PgdConfig {
        iterations: 3,
        grad_repeats: 2,
        ..PgdConfig::default()
    }
}

fn eval() -> EvalSettings {
    EvalSettings {
        inference_steps: 4,
        ..EvalSettings::default()
    }
}

#[test]
fn protected_trial_stays_in_budget_and_scores() {
    let s = setup();
    let trial = &make_trials(&s.corpus, 1, 0).unwrap()[0];
    let state = protect_trial(&s.bundle, &s.corpus, trial, &pgd()).unwrap();
    assert_eq!(state.trace.len(), 3);
    assert!(state.trace.iter().all(|r| r.max_abs_delta <= 0.002 + 1e-9));
    assert_eq!(state.x_adv.len(), trial.x_ref.len());

    let evaluator = s.bundle.evaluator(&eval());
    let out = evaluate_trial(&evaluator, &s.bundle.enrollments, trial, &state.x_adv).unwrap();
    let m = &out.metrics;
    assert!((-1.0..=1.0).contains(&m.asv_score));
    assert!((1.0..=5.0).contains(&m.quality));
    assert!(m.dtw >= 0.0 && m.mcd >= 0.0 && m.ssim <= 1.0);
    assert!(matches!(m.snr, Snr::Db(v) if v > 0.0));

    // scoring the clean reference against itself is the undefended row
    let clean = evaluate_trial(&evaluator, &s.bundle.enrollments, trial, &trial.x_ref).unwrap();
    assert_eq!(clean.metrics.dtw, 0.0);
    assert!((clean.metrics.ssim - 1.0).abs() < 1e-12);
    assert_eq!(clean.metrics.snr, Snr::Clean);
}

#[test]
fn protection_is_deterministic() {
    let s = setup();
    let trial = &make_trials(&s.corpus, 1, 3).unwrap()[0];
    let a = protect_trial(&s.bundle, &s.corpus, trial, &pgd()).unwrap();
    let b = protect_trial(&s.bundle, &s.corpus, trial, &pgd()).unwrap();
    assert_eq!(a.x_adv, b.x_adv);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn ablation_rows_follow_the_axis_values() {
    let s = setup();
    let trials = make_trials(&s.corpus, 2, 1).unwrap();
    let rows = run_ablation(&s.bundle, &s.corpus, &trials, SweepAxis::Epsilon, &[0.001, 0.004], &pgd(), &eval(), 1).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].value, 0.001);
    assert!(rows.iter().all(|r| r.failures.is_empty() && r.samples == 2));
    // a larger budget is a louder perturbation
    assert!(rows[1].snr.unwrap() < rows[0].snr.unwrap());
}

#[test]
fn robustness_sweep_rows_and_csv() {
    let s = setup();
    let trials = make_trials(&s.corpus, 2, 2).unwrap();
    let samples: Vec<ProtectedSample> = trials
        .iter()
        .map(|t| ProtectedSample {
            id: t.id.clone(),
            speaker_id: t.speaker_id.clone(),
            x_ref: t.x_ref.clone(),
            x_adv: protect_trial(&s.bundle, &s.corpus, t, &pgd()).unwrap().x_adv,
            x_src: t.x_src.clone(),
            clone_seed: t.seed,
        })
        .collect();
    let evaluator = s.bundle.evaluator(&eval());
    let cfg = SweepConfig::default();

    let only = robustness_sweep(&samples, &[], &evaluator, &s.bundle.enrollments, &cfg).unwrap();
    assert_eq!(only.len(), 1);
    assert!(only[0].transform.is_none());

    let transforms = [
        LossyTransform {
            kind: TransformKind::GaussianNoise,
            level: 20.0,
        },
        LossyTransform {
            kind: TransformKind::Compression,
            level: 64.0,
        },
    ];
    let rows = robustness_sweep(&samples, &transforms, &evaluator, &s.bundle.enrollments, &cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].proxy);
    assert!(rows.iter().all(|r| r.failures.is_empty() && r.protected.is_some()));
    let again = robustness_sweep(&samples, &transforms, &evaluator, &s.bundle.enrollments, &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&rows).unwrap(),
        serde_json::to_string(&again).unwrap()
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().starts_with("lossy_type,level"));

    let no_cfg = SweepConfig {
        allow_proxy: false,
        ..cfg
    };
    let rows = robustness_sweep(&samples, &transforms[1..], &evaluator, &s.bundle.enrollments, &no_cfg).unwrap();
    assert!(!rows[1].failures.is_empty(), "compression without a codec or the proxy must fail the cell");
}

#[test]
fn report_round_trips_through_json() {
    let s = setup();
    let trial = &make_trials(&s.corpus, 1, 5).unwrap()[0];
    let x_adv = protect_trial(&s.bundle, &s.corpus, trial, &pgd()).unwrap().x_adv;
    let evaluator = s.bundle.evaluator(&eval());
    let m = evaluate_trial(&evaluator, &s.bundle.enrollments, trial, &x_adv).unwrap().metrics;
    let report = DefenseReport::new(vec![m], eval().thresholds, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    report.write_json(&path).unwrap();
    let back: DefenseReport = voxshield::io::read_json(&path).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.aggregates.samples, 1);
}
