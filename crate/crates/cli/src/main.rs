mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

/// Adversarial protection of reference speech against diffusion voice cloning.
#[derive(Debug, Parser)]
#[command(name = "voxshield", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON experiment configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent samples.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    #[arg(long = "output-dir", global = true)]
    output_dir: Option<PathBuf>,
    /// L∞ perturbation budget.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// PGD step size.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// PGD iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Reverse steps attacked by the objective.
    #[arg(long = "t-adv", global = true)]
    t_adv: Option<usize>,
    /// Inference steps of the cloning model.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long = "tau-asv", global = true)]
    tau_asv: Option<f64>,
    #[arg(long = "tau-q", global = true)]
    tau_q: Option<f64>,
    /// Number of corpus trials for sweeps.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Training epochs of the model being trained.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Also write wall-clock timings to `*.timing.json` sidecars.
    #[arg(long, global = true)]
    timing: bool,
}

impl Overrides {
    fn resolve(&self) -> voxshield::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
            c.pgd.seed = v;
            c.trials.seed = v;
        }
        if let Some(v) = self.jobs {
            c.jobs = v;
        }
        if let Some(v) = &self.corpus {
            c.paths.corpus = v.clone();
        }
        if let Some(v) = &self.checkpoints {
            c.paths.checkpoints = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.paths.output = v.clone();
        }
        if let Some(v) = self.epsilon {
            c.pgd.epsilon = v;
        }
        if let Some(v) = self.alpha {
            c.pgd.alpha = v;
        }
        if let Some(v) = self.iterations {
            c.pgd.iterations = v;
        }
        if let Some(v) = self.t_adv {
            c.pgd.t_adv = v;
        }
        if let Some(v) = self.steps {
            c.eval.inference_steps = v;
        }
        if let Some(v) = self.tau_asv {
            c.eval.thresholds.tau_asv = v;
        }
        if let Some(v) = self.tau_q {
            c.eval.thresholds.tau_q = v;
        }
        if let Some(v) = self.trials {
            c.trials.count = v;
        }
        if let Some(v) = self.epochs {
            c.score_training.epochs = v;
            c.encoder_training.epochs = v;
            c.quality_training.epochs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise the toy multi-speaker corpus.
    GenCorpus(Overrides),
    /// Train the diffusion conversion model.
    TrainModel(Overrides),
    /// Train the identity encoders and the quality proxy, and enroll speakers.
    TrainEncoders(Overrides),
    /// Protect one reference utterance.
    Protect(commands::ProtectArgs),
    /// Convert a source utterance to the voice of a reference.
    Clone(commands::CloneArgs),
    /// Score clone pairs listed in a manifest.
    Evaluate(commands::EvaluateArgs),
    /// Sweep lossy transforms over a protected set.
    Robustness(commands::RobustnessArgs),
    /// Sweep ε, inference steps or PGD iterations.
    Ablate(commands::AblateArgs),
    /// Perturb a reference with Gaussian noise at the same budget.
    BaselineNoise(commands::BaselineArgs),
    /// Print the resolved configuration, optionally saving it.
    ShowConfig(ShowConfigArgs),
}

#[derive(Debug, Args)]
struct ShowConfigArgs {
    /// Also write the resolved configuration to this file.
    #[arg(long)]
    save: Option<PathBuf>,
    #[command(flatten)]
    common: Overrides,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit code 1).
    Usage(String),
    /// The command could not complete (exit code 2).
    Runtime(voxshield::Error),
}

impl From<voxshield::Error> for Failure {
    fn from(e: voxshield::Error) -> Self {
        match e {
            voxshield::Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenCorpus(o) => commands::gen_corpus(&o),
        Command::TrainModel(o) => commands::train_model(&o),
        Command::TrainEncoders(o) => commands::train_encoders(&o),
        Command::Protect(a) => commands::protect(&a),
        Command::Clone(a) => commands::clone(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Robustness(a) => commands::robustness(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::BaselineNoise(a) => commands::baseline_noise(&a),
        Command::ShowConfig(a) => {
            let cfg = a.common.resolve()?;
            if let Some(p) = &a.save {
                cfg.save(p)?;
            }
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serialises"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
