use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avfd::error::Error;
use avfd::gradcheck::{model_suite, op_suite};
use avfd::harness::{self, checkpoint_path, evaluate_checkpoint, read_config_file, score, MetricsReport, RunConfig};
use avfd::model::Profile;
use avfd::synth::{self, read_dataset, SynthConfig, MANIFEST_NAME};
use avfd::{Model, ModelConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avfd", version, about = "Audio-visual deepfake detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (train/ and test/ splits)
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train a model; writes per-epoch and final checkpoints
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a test split with a checkpoint and report AUC and F1
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// also write the machine-readable lines here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the fake probability of every sample in a dataset directory
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// dataset directory holding a manifest
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of every differentiable operation and the micro model
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// random instances per check
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

/// Run-configuration flags; each overrides the same key from `--config`.
#[derive(Args)]
struct RunArgs {
    /// `key = value` file, `#` comments
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    deterministic: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<String>,
}

impl RunArgs {
    fn flag_pairs(&self) -> Vec<(String, String)> {
        [
            ("profile", &self.profile),
            ("data", &self.data),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("optimizer", &self.optimizer),
            ("seed", &self.seed),
            ("mode", &self.mode),
            ("deterministic", &self.deterministic),
            ("checkpoint_dir", &self.checkpoint_dir),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect()
    }

    /// The merged pairs and whether `mode` was given anywhere.
    fn resolve(&self) -> Result<(RunConfig, bool), Error> {
        let mut pairs = match &self.config {
            Some(path) => read_config_file(path)?,
            None => Vec::new(),
        };
        pairs.extend(self.flag_pairs());
        let mode_given = pairs.iter().any(|(k, _)| k == "mode");
        Ok((RunConfig::from_pairs(&pairs)?, mode_given))
    }
}

fn synth_config(profile: Profile) -> Result<SynthConfig, Error> {
    match profile {
        Profile::Desk => Ok(SynthConfig::desk()),
        _ => Err(Error::Config(format!("synthetic data is generated for the desk profile only, not `{profile:?}`"))),
    }
}

/// `dir/<split>` when it holds a manifest, otherwise `dir` itself.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    let sub = dir.join(split);
    if sub.join(MANIFEST_NAME).exists() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn write_report(report: &MetricsReport, extra: Option<&Path>) -> Result<(), Error> {
    eprint!("{}", report.human_table());
    let lines = report.machine_lines();
    print!("{lines}{}", report.score_lines());
    if let Some(path) = extra {
        std::fs::write(path, &lines).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// A run config whose mode follows the checkpoint unless one was requested.
fn run_for_checkpoint(args: &RunArgs, ckpt: &Path) -> Result<(RunConfig, ModelConfig, Model), Error> {
    let (mut run, mode_given) = args.resolve()?;
    let model_cfg = ModelConfig::for_profile(run.profile)?;
    let model = Model::load(ckpt, model_cfg.clone())?;
    if !mode_given {
        if let Some(&m) = model.supported_modes().first() {
            run.mode = m;
        }
    }
    model.require_mode(run.mode)?;
    Ok((run, model_cfg, model))
}

fn execute(cmd: Command) -> Result<bool, Error> {
    match cmd {
        Command::Synth { run, out, n_train, n_test } => {
            let (cfg, _) = run.resolve()?;
            let mut synth = synth_config(cfg.profile)?;
            synth.seed = cfg.seed;
            synth.n_train = n_train.unwrap_or(synth.n_train);
            synth.n_test = n_test.unwrap_or(synth.n_test);
            let prep = ModelConfig::for_profile(cfg.profile)?.prep_profile();
            synth::synthesize(&synth, &prep, &out)?;
            eprintln!("wrote {} train and {} test samples to {}", synth.n_train, synth.n_test, out.display());
        }
        Command::Train { run } => {
            let (mut cfg, _) = run.resolve()?;
            cfg.validate_training()?;
            let model_cfg = ModelConfig::for_profile(cfg.profile)?;
            let dir = cfg.checkpoint_dir.get_or_insert_with(|| PathBuf::from("checkpoints")).clone();
            let (_, items) = read_dataset(&split_dir(&cfg.data_dir, "train"))?;
            harness::train(&cfg, &model_cfg, &items, |e| {
                println!("metric\tepoch_loss.{}\t{}", e.epoch, e.loss);
                println!("metric\tepoch_accuracy.{}\t{}", e.epoch, e.accuracy);
            })?;
            eprintln!("final checkpoint {}", checkpoint_path(&dir, None).display());
        }
        Command::Eval { run, ckpt, report } => {
            let (cfg, model_cfg, _) = run_for_checkpoint(&run, &ckpt)?;
            let (_, items) = read_dataset(&split_dir(&cfg.data_dir, "test"))?;
            let rep = evaluate_checkpoint(&cfg, &model_cfg, &ckpt, &items)?;
            write_report(&rep, report.as_deref())?;
        }
        Command::Infer { run, ckpt, input } => {
            let (cfg, _, model) = run_for_checkpoint(&run, &ckpt)?;
            let (_, items) = read_dataset(&input)?;
            for r in score(&model, cfg.mode, &items, !cfg.deterministic)? {
                println!("score\t{}\t{}", r.id, r.fake_probability);
            }
        }
        Command::Gradcheck { seed, seeds } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be >= 1".into()));
            }
            let mut results = op_suite(seed, seeds)?;
            results.extend(model_suite(seed, seeds)?);
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("gradcheck\t{}\t{:.3e}\t{:.0e}\t{verdict}", r.name, r.worst, r.tolerance());
            }
            return Ok(results.iter().all(|r| r.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("run `avfd --help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
