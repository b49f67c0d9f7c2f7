//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use voxshield::audio::corpus::{load_corpus, roster, synth_corpus, CorpusConfig, Gender, Manifest, Utterance};
use voxshield::audio::vocoder::GriffinLim;
use voxshield::audio::{ingest, write_wav, Waveform, SAMPLE_RATE};
use voxshield::defense::{quantize_within_ball, random_noise_baseline, write_trace};
use voxshield::diffusion::{build_triples, train_score, DiffVc};
use voxshield::experiment::{
    make_trials, protect_trial, run_ablation, AblationRow, ModelBundle, SweepAxis, ASV_FILE, DEFENSE_FILE, ENROLLMENT_DIR,
    MODEL_FILE, QUALITY_FILE,
};
use voxshield::identity::{train_extractors, Encoder, EnrollmentStore};
use voxshield::io::{csv_writer, write_json};
use voxshield::metrics::quality::train_quality_proxy;
use voxshield::metrics::{snr_db, DefenseReport, QualityProxy, SampleMetrics};
use voxshield::pipeline::{par_map, ProtectedSample};
use voxshield::robustness::transform::LossyTransform;
use voxshield::robustness::{robustness_sweep, write_sweep_csv, SweepConfig};
use voxshield::{Error, Result};

use crate::config::ExperimentConfig;
use crate::{plot, Failure, Overrides};

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// `<dir>/<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_timing(enabled: bool, path: &Path, seconds: &BTreeMap<&str, f64>) -> Result<()> {
    if enabled {
        write_json(&sibling(path, "timing.json"), seconds)?;
    }
    Ok(())
}

fn read_corpus(cfg: &ExperimentConfig) -> Result<(Manifest, Vec<Utterance>)> {
    let path = cfg.paths.manifest();
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "corpus manifest {} not found; run gen-corpus first",
            path.display()
        )));
    }
    let manifest = Manifest::read(&path)?;
    let corpus = load_corpus(&manifest)?;
    Ok((manifest, corpus))
}

fn read_audio(path: &Path) -> Result<Waveform> {
    Ok(ingest(path, SAMPLE_RATE)?.0)
}

pub fn gen_corpus(o: &Overrides) -> CmdResult {
    let cfg = &o.resolve()?;
    let specs = roster(cfg.corpus.speakers_per_class, cfg.corpus.roster_seed);
    let corpus_cfg = CorpusConfig {
        content_seed: cfg.corpus.content_seed,
        ..CorpusConfig::new(&cfg.paths.corpus, cfg.corpus.utterances_per_speaker)
    };
    let manifest = synth_corpus(&specs, &corpus_cfg)?;
    write_json(
        &cfg.paths.corpus.join("corpus.json"),
        &json!({ "config": cfg.to_value(), "speakers": specs, "utterances": manifest.entries.len() }),
    )?;
    println!("wrote {} utterances to {}", manifest.entries.len(), cfg.paths.corpus.display());
    Ok(())
}

pub fn train_model(o: &Overrides) -> CmdResult {
    let cfg = &o.resolve()?;
    let (_, corpus) = read_corpus(cfg)?;
    let triples = build_triples(&corpus, cfg.seed)?;
    let start = Instant::now();
    let (model, report) = train_score(&triples, cfg.sde, cfg.unet, &cfg.score_training)?;
    let seconds = start.elapsed().as_secs_f64();
    let path = cfg.paths.checkpoints.join(MODEL_FILE);
    model.save(&path)?;
    let summary = cfg.paths.checkpoints.join("train_model.json");
    write_json(&summary, &json!({ "config": cfg.to_value(), "report": report }))?;
    write_timing(o.timing, &summary, &BTreeMap::from([("train", seconds)]))?;
    println!(
        "score model: validation loss {:.4} -> {:.4} over {} steps; saved {}",
        report.val_initial,
        report.val_final,
        report.steps,
        path.display()
    );
    Ok(())
}

pub fn train_encoders(o: &Overrides) -> CmdResult {
    let cfg = &o.resolve()?;
    let (_, corpus) = read_corpus(cfg)?;
    let (defense, asv, report) = train_extractors(&corpus, &cfg.encoder_training)?;
    let dir = &cfg.paths.checkpoints;
    defense.save(&dir.join(DEFENSE_FILE))?;
    asv.save(&dir.join(ASV_FILE))?;
    let enrollments = EnrollmentStore::from_corpus(&asv, &corpus)?;
    enrollments.save(&dir.join(ENROLLMENT_DIR))?;
    let (quality, quality_report) = train_quality_proxy(&corpus, &cfg.quality_training)?;
    quality.save(&dir.join(QUALITY_FILE))?;
    write_json(
        &dir.join("train_encoders.json"),
        &json!({ "config": cfg.to_value(), "encoders": report, "quality": quality_report }),
    )?;
    println!(
        "defense accuracy {:.3}, ASV accuracy {:.3}, quality validation MSE {:.3} (clean mean {:.2})",
        report.defense.held_out_accuracy,
        report.asv.held_out_accuracy,
        quality_report.validation_mse,
        quality_report.validation_clean_mean
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProtectArgs {
    /// Reference utterance to protect.
    #[arg(long)]
    input: PathBuf,
    /// Protected output WAV; defaults to `<output-dir>/protected.wav`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Corpus speaker of the reference (sets its class).
    #[arg(long)]
    speaker: Option<String>,
    /// Class of the reference speaker when it is not in the corpus.
    #[arg(long)]
    gender: Option<Gender>,
    /// Source utterance for the surrogate conversion; a seeded corpus
    /// utterance of another speaker by default.
    #[arg(long)]
    source: Option<PathBuf>,
    #[command(flatten)]
    common: Overrides,
}

pub fn protect(args: &ProtectArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let (manifest, corpus) = read_corpus(&cfg)?;
    let gender = match (&args.speaker, args.gender) {
        (_, Some(g)) => g,
        (Some(s), None) => *manifest
            .speakers()
            .get(s)
            .ok_or_else(|| usage(format!("speaker {s} is not in the corpus")))?,
        (None, None) => return Err(usage("protect needs --speaker or --gender")),
    };
    let x_ref = read_audio(&args.input)?;
    let (x_src, source_name) = match &args.source {
        Some(p) => (read_audio(p)?, p.display().to_string()),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pool: Vec<(&Utterance, &voxshield::audio::corpus::ManifestEntry)> = corpus
                .iter()
                .zip(&manifest.entries)
                .filter(|(u, _)| Some(&u.speaker_id) != args.speaker.as_ref())
                .collect();
            let (u, e) = pool.choose(&mut rng).ok_or_else(|| usage("no source utterance available"))?;
            (u.waveform.clone(), e.path.display().to_string())
        }
    };
    let ckpt = &cfg.paths.checkpoints;
    let model = DiffVc::load(&checkpoint(ckpt, MODEL_FILE)?)?;
    let defense = Encoder::load(&checkpoint(ckpt, DEFENSE_FILE)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (opposite, c_opp) = voxshield::identity::opposite_gender_centroid(&defense, &corpus, gender, &mut rng)?;
    let start = Instant::now();
    let state = voxshield::defense::protect(&x_ref, &x_src, &model, &defense, &c_opp, &cfg.pgd)?;
    let seconds = start.elapsed().as_secs_f64();
    let x_out = quantize_within_ball(&state.x_adv, &x_ref, cfg.pgd.epsilon)?;
    let output = args.output.clone().unwrap_or_else(|| cfg.paths.output.join("protected.wav"));
    voxshield::io::ensure_parent(&output)?;
    write_wav(&output, &x_out)?;
    write_trace(&sibling(&output, "trace.jsonl"), &state.trace)?;
    let first = &state.trace[0].loss;
    let last = &state.trace[state.trace.len() - 1].loss;
    let max_delta = x_out
        .samples
        .iter()
        .zip(&x_ref.samples)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    write_json(
        &sibling(&output, "json"),
        &json!({
            "config": cfg.to_value(),
            "input": args.input.display().to_string(),
            "source": source_name,
            "gender": gender,
            "opposite_speaker": opposite,
            "iterations": state.iteration,
            "max_abs_delta": max_delta,
            "snr_db": snr_db(&x_ref.samples, &x_out.samples)?,
            "first_loss": first,
            "final_loss": last,
        }),
    )?;
    write_timing(args.common.timing, &output, &BTreeMap::from([("protect", seconds)]))?;
    println!(
        "protected {} -> {} in {} iterations: L_total {:.4} -> {:.4} (id {:.4}, ctx {:.4}, score {:.4}, sem {:.4}); max |δ| {:.6}",
        args.input.display(),
        output.display(),
        state.iteration,
        first.l_total,
        last.l_total,
        last.l_id,
        last.l_ctx,
        last.l_score,
        last.l_sem,
        max_delta
    );
    Ok(())
}

fn checkpoint(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::Checkpoint(format!("missing checkpoint {}", p.display())));
    }
    Ok(p)
}

#[derive(Debug, Args)]
pub struct CloneArgs {
    /// Utterance providing the content.
    #[arg(long)]
    source: PathBuf,
    /// Utterance providing the voice.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    common: Overrides,
}

pub fn clone(args: &CloneArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let model = DiffVc::load(&checkpoint(&cfg.paths.checkpoints, MODEL_FILE)?)?;
    let x_src = read_audio(&args.source)?;
    let x_ref = read_audio(&args.reference)?;
    let result = model.synthesize(&x_src, &x_ref, cfg.eval.inference_steps, cfg.seed, &GriffinLim::default())?;
    voxshield::io::ensure_parent(&args.output)?;
    write_wav(&args.output, &result.waveform_out)?;
    write_json(
        &sibling(&args.output, "json"),
        &json!({
            "config": cfg.to_value(),
            "source": args.source.display().to_string(),
            "reference": args.reference.display().to_string(),
            "inference_steps": result.inference_steps,
            "seed": result.rng_seed,
        }),
    )?;
    write_timing(args.common.timing, &args.output, &BTreeMap::from([("reverse_diffusion", result.seconds)]))?;
    println!("cloned {} with {} steps -> {}", args.source.display(), result.inference_steps, args.output.display());
    Ok(())
}

/// Row of an evaluation manifest; paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub speaker_id: String,
    pub x_ref: PathBuf,
    pub x_adv: PathBuf,
    pub y: PathBuf,
    pub y_adv: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with columns id,speaker_id,x_ref,x_adv,y,y_adv.
    #[arg(long)]
    manifest: PathBuf,
    /// Report prefix; defaults to `<output-dir>/report`.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    common: Overrides,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let rows: Vec<EvalRow> = read_rows(&args.manifest)?;
    if rows.is_empty() {
        return Err(usage("no samples"));
    }
    let ckpt = &cfg.paths.checkpoints;
    let asv = Encoder::load(&checkpoint(ckpt, ASV_FILE)?)?;
    let quality = QualityProxy::load(&checkpoint(ckpt, QUALITY_FILE)?)?;
    let enrollments = EnrollmentStore::load(&checkpoint(ckpt, ENROLLMENT_DIR)?)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let scored: Vec<Result<SampleMetrics>> = par_map(cfg.jobs, &rows, |_, row| {
        let load = |p: &Path| -> Result<Waveform> {
            let full = resolve(base, p);
            if !full.exists() {
                return Err(Error::invalid(format!("missing file {}", full.display())));
            }
            read_audio(&full)
        };
        let (x_ref, x_adv, y, y_adv) = (load(&row.x_ref)?, load(&row.x_adv)?, load(&row.y)?, load(&row.y_adv)?);
        score_pair(&asv, &quality, &cfg, &enrollments, row, &x_ref, &x_adv, &y, &y_adv)
    });
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (row, s) in rows.iter().zip(scored) {
        match s {
            Ok(m) => samples.push(m),
            Err(e) => {
                log::warn!("skipping {}: {e}", row.id);
                skipped += 1;
            }
        }
    }
    if samples.is_empty() {
        return Err(Failure::Runtime(Error::invalid(format!("no samples could be evaluated ({skipped} skipped)"))));
    }
    let report = DefenseReport::new(samples, cfg.eval.thresholds, skipped)?.with_config(cfg.to_value());
    let prefix = args.output.clone().unwrap_or_else(|| cfg.paths.output.join("report"));
    report.write_json(&sibling(&prefix, "json"))?;
    report.write_samples_csv(&sibling(&prefix, "samples.csv"))?;
    report.write_aggregate_csv(&sibling(&prefix, "csv"))?;
    let a = &report.aggregates;
    println!(
        "{} samples ({} skipped): ASV rate {:.3}, DSR {:.3}, quality {:.3}, DTW {:.3}, SSIM {:.3}, MCD {:.3}",
        a.samples, skipped, a.asv_rate, a.dsr, a.mean_quality, a.mean_dtw, a.mean_ssim, a.mean_mcd
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn score_pair(
    asv: &Encoder,
    quality: &QualityProxy,
    cfg: &ExperimentConfig,
    enrollments: &EnrollmentStore,
    row: &EvalRow,
    x_ref: &Waveform,
    x_adv: &Waveform,
    y: &Waveform,
    y_adv: &Waveform,
) -> Result<SampleMetrics> {
    use voxshield::audio::mel::mel_spectrogram;
    use voxshield::metrics::{dtw_distance, mcd, spectrogram_ssim};
    let decision = voxshield::identity::asv_accept(asv, y_adv, enrollments.get(&row.speaker_id)?, cfg.eval.thresholds.tau_asv)?;
    let q = quality.score(y_adv)?;
    let n = x_ref.len().min(x_adv.len());
    Ok(SampleMetrics {
        id: row.id.clone(),
        asv_score: decision.score,
        quality: q,
        dtw: dtw_distance(&mel_spectrogram(y)?, &mel_spectrogram(y_adv)?)?,
        ssim: spectrogram_ssim(y, y_adv, &cfg.eval.ssim)?,
        mcd: mcd(y, y_adv)?,
        snr: snr_db(&x_ref.samples[..n], &x_adv.samples[..n])?,
        success: cfg.eval.thresholds.success(decision.score, q),
    })
}

/// Row of a robustness manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtectedRow {
    pub id: String,
    pub speaker_id: String,
    pub x_ref: PathBuf,
    pub x_adv: PathBuf,
    pub x_src: PathBuf,
    pub clone_seed: u64,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    /// CSV with columns id,speaker_id,x_ref,x_adv,x_src,clone_seed. Without
    /// it, corpus trials are protected first.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated `kind:level` list, e.g. `gaussian_noise:30,lowpass:7000`.
    #[arg(long)]
    transforms: Option<String>,
    #[command(flatten)]
    common: Overrides,
}

fn parse_transforms(spec: &str) -> Result<Vec<LossyTransform>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (kind, level) = item
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("transform `{item}` is not kind:level")))?;
            let level: f64 = level
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad level in `{item}`")))?;
            Ok(LossyTransform::new(kind.trim().parse()?, level))
        })
        .collect()
}

/// Protects the configured corpus trials and writes them with a manifest.
fn protect_trials(cfg: &ExperimentConfig, bundle: &ModelBundle, corpus: &[Utterance], dir: &Path) -> Result<Vec<ProtectedSample>> {
    let trials = make_trials(corpus, cfg.trials.count, cfg.trials.seed)?;
    let states = par_map(cfg.jobs, &trials, |_, t| protect_trial(bundle, corpus, t, &cfg.pgd));
    let mut samples = Vec::new();
    let mut rows = Vec::new();
    for (t, s) in trials.iter().zip(states) {
        let s = s?;
        let x_adv = quantize_within_ball(&s.x_adv, &t.x_ref, cfg.pgd.epsilon)?;
        let names = ["x_ref", "x_adv", "x_src"].map(|k| PathBuf::from(format!("{}_{k}.wav", t.id)));
        voxshield::io::ensure_parent(&dir.join(&names[0]))?;
        for (name, w) in names.iter().zip([&t.x_ref, &x_adv, &t.x_src]) {
            write_wav(&dir.join(name), w)?;
        }
        rows.push(ProtectedRow {
            id: t.id.clone(),
            speaker_id: t.speaker_id.clone(),
            x_ref: names[0].clone(),
            x_adv: names[1].clone(),
            x_src: names[2].clone(),
            clone_seed: t.seed,
        });
        samples.push(ProtectedSample {
            id: t.id.clone(),
            speaker_id: t.speaker_id.clone(),
            x_ref: t.x_ref.clone(),
            x_adv,
            x_src: t.x_src.clone(),
            clone_seed: t.seed,
        });
    }
    let mut w = csv_writer(&dir.join("protected.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(samples)
}

pub fn robustness(args: &RobustnessArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let transforms = match &args.transforms {
        Some(s) => parse_transforms(s)?,
        None => cfg.robustness.resolved(),
    };
    let bundle = ModelBundle::load(&cfg.paths.checkpoints)?;
    let out_dir = cfg.paths.output.join("robustness");
    let samples = match &args.manifest {
        Some(m) => {
            let base = m.parent().unwrap_or(Path::new("."));
            read_rows::<ProtectedRow>(m)?
                .into_iter()
                .map(|r| {
                    Ok(ProtectedSample {
                        id: r.id,
                        speaker_id: r.speaker_id,
                        x_ref: read_audio(&resolve(base, &r.x_ref))?,
                        x_adv: read_audio(&resolve(base, &r.x_adv))?,
                        x_src: read_audio(&resolve(base, &r.x_src))?,
                        clone_seed: r.clone_seed,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let (_, corpus) = read_corpus(&cfg)?;
            protect_trials(&cfg, &bundle, &corpus, &out_dir.join("protected"))?
        }
    };
    let evaluator = bundle.evaluator(&cfg.eval);
    let sweep = SweepConfig {
        seed: cfg.seed,
        allow_proxy: cfg.robustness.allow_proxy,
        jobs: cfg.jobs,
    };
    let rows = robustness_sweep(&samples, &transforms, &evaluator, &bundle.enrollments, &sweep)?;
    write_sweep_csv(&out_dir.join("robustness.csv"), &rows)?;
    write_json(&out_dir.join("robustness.json"), &json!({ "config": cfg.to_value(), "rows": rows }))?;
    for r in &rows {
        let label = r.transform.map_or("none".to_string(), |t| t.to_string());
        match (&r.protected, &r.undefended) {
            (Some(p), Some(u)) => println!(
                "{label:>20}: protected ASV {:.3} DSR {:.3} | undefended ASV {:.3}{}",
                p.aggregates.asv_rate,
                p.aggregates.dsr,
                u.aggregates.asv_rate,
                if r.proxy { " (proxy)" } else { "" }
            ),
            _ => println!("{label:>20}: all {} cells failed", r.failures.len()),
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// epsilon, inference_steps or pgd_iters.
    #[arg(long)]
    axis: Option<SweepAxis>,
    /// Comma-separated axis values; the axis defaults otherwise.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    common: Overrides,
}

pub fn ablate(args: &AblateArgs) -> CmdResult {
    let mut cfg = args.common.resolve()?;
    if let Some(a) = args.axis {
        cfg.sweep.axis = a;
    }
    if let Some(v) = &args.values {
        cfg.sweep.values = v.clone();
    }
    let axis = cfg.sweep.axis;
    let values = if cfg.sweep.values.is_empty() {
        axis.default_values()
    } else {
        cfg.sweep.values.clone()
    };
    // Reject bad values before any work starts.
    for &v in &values {
        axis.apply(v, &cfg.pgd, &cfg.eval)?;
    }
    let bundle = ModelBundle::load(&cfg.paths.checkpoints)?;
    let (_, corpus) = read_corpus(&cfg)?;
    let trials = make_trials(&corpus, cfg.trials.count, cfg.trials.seed)?;
    let rows = run_ablation(&bundle, &corpus, &trials, axis, &values, &cfg.pgd, &cfg.eval, cfg.jobs)?;
    let dir = cfg.paths.output.join("ablate");
    let stem = format!("ablate_{}", axis.name());
    let timing = args.common.timing;
    write_ablation_csv(&dir.join(format!("{stem}.csv")), &rows, timing)?;
    write_json(&dir.join(format!("{stem}.json")), &json!({ "config": cfg.to_value(), "rows": rows }))?;
    plot::ablation_plots(&dir, &stem, axis.name(), &rows, timing)?;
    if timing {
        let seconds: Vec<_> = rows
            .iter()
            .map(|r| json!({ "value": r.value, "protect_seconds": r.protect_seconds, "clone_seconds": r.clone_seconds }))
            .collect();
        write_json(&dir.join(format!("{stem}.timing.json")), &seconds)?;
    }
    for r in &rows {
        println!(
            "{} = {}: ASV rate {:.3}, quality {:.3}, DSR {:.3}, SNR {}, protect {:.2}s, clone {:.3}s{}",
            axis.name(),
            r.value,
            r.asv_rate,
            r.quality,
            r.dsr,
            r.snr.map_or("clean".into(), |v| format!("{v:.2}")),
            r.protect_seconds,
            r.clone_seconds,
            if r.failures.is_empty() { String::new() } else { format!(" ({} failed)", r.failures.len()) }
        );
    }
    Ok(())
}

/// Wall-clock columns are written only with `timing`, so the default file
/// is deterministic.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], timing: bool) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec![
        "axis", "value", "samples", "failures", "asv_rate", "mean_asv_score", "quality", "dsr", "snr", "dtw", "ssim", "mcd",
    ];
    if timing {
        header.extend(["protect_seconds", "clone_seconds"]);
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.axis.name().to_string(),
            r.value.to_string(),
            r.samples.to_string(),
            r.failures.len().to_string(),
            r.asv_rate.to_string(),
            r.mean_asv_score.to_string(),
            r.quality.to_string(),
            r.dsr.to_string(),
            r.snr.map_or("clean".into(), |v| v.to_string()),
            r.dtw.to_string(),
            r.ssim.to_string(),
            r.mcd.to_string(),
        ];
        if timing {
            rec.extend([r.protect_seconds.to_string(), r.clone_seconds.to_string()]);
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    common: Overrides,
}

pub fn baseline_noise(args: &BaselineArgs) -> CmdResult {
    let cfg = args.common.resolve()?;
    let x_ref = read_audio(&args.input)?;
    let noisy = random_noise_baseline(&x_ref, cfg.pgd.epsilon, cfg.seed)?;
    let out = quantize_within_ball(&noisy, &x_ref, cfg.pgd.epsilon)?;
    voxshield::io::ensure_parent(&args.output)?;
    write_wav(&args.output, &out)?;
    write_json(
        &sibling(&args.output, "json"),
        &json!({
            "config": cfg.to_value(),
            "input": args.input.display().to_string(),
            "epsilon": cfg.pgd.epsilon,
            "snr_db": snr_db(&x_ref.samples, &out.samples)?,
        }),
    )?;
    println!("noise baseline at ε = {} -> {}", cfg.pgd.epsilon, args.output.display());
    Ok(())
}

