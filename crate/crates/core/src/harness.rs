//! Run configuration, the training loop, evaluation and the ablation runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{auc, epoch_accuracy, f1};
use crate::model::{Mode, Model, ModelConfig, Profile};
use crate::synth::{DatasetItem, Kind};
use crate::train::{train_step, Optimizer, OptimizerKind};

pub const RUN_KEYS: [&str; 10] = [
    "profile",
    "data",
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "seed",
    "mode",
    "deterministic",
    "checkpoint_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub mode: Mode,
    pub deterministic: bool,
    /// where per-epoch and final checkpoints go; none disables them
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Batch 8 and SGD at 1e-6.
    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            data_dir: PathBuf::from("data"),
            epochs: 20,
            batch_size: 8,
            lr: 1e-6,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            mode: Mode::Multimodal,
            deterministic: true,
            checkpoint_dir: None,
        }
    }

    /// Batch 4 and Adam at 3e-4 for 16 epochs.
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            epochs: 16,
            batch_size: 4,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            ..Self::paper()
        }
    }

    pub fn for_profile(p: Profile) -> Result<Self> {
        match p {
            Profile::Paper => Ok(Self::paper()),
            Profile::Desk => Ok(Self::desk()),
            Profile::Custom => Err(Error::Config("custom profiles have no preset".into())),
        }
    }

    /// Checks the configuration as read from a file or command line.
    pub fn validate(&self) -> Result<()> {
        self.validate_training()?;
        if self.lr == 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }

    /// Like [`RunConfig::validate`] but admits `lr = 0`, which freezes the model.
    pub fn validate_training(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what} `{value}` for key `{key}`"));
        match key {
            "profile" => self.profile = value.parse()?,
            "data" => self.data_dir = PathBuf::from(value),
            "epochs" => self.epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("number"))?,
            "optimizer" => self.optimizer = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("integer"))?,
            "mode" => self.mode = value.parse()?,
            "deterministic" => self.deterministic = value.parse().map_err(|_| bad("boolean"))?,
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Builds a configuration from `key = value` pairs. A `profile` entry picks
    /// the defaults the other entries modify, wherever it appears.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Profile::Desk);
        let mut cfg = Self::for_profile(profile)?;
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Parses the line-oriented `key = value` format; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), i + 1));
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if !RUN_KEYS.contains(&k) {
            return Err(err(format!("unknown key `{k}`")));
        }
        if v.is_empty() {
            return Err(err(format!("key `{k}` has no value")));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// mean of the batch losses
    pub loss: f64,
    pub batch_accuracies: Vec<f64>,
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
}

fn check_items(model: &Model, items: &[DatasetItem], mode: Mode, what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} set is empty")));
    }
    for it in items {
        model
            .check_sample(&it.sample, mode)
            .map_err(|e| Error::InvalidArgument(format!("{what} sample `{}`: {e}", it.id)))?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("epoch-{e:03}.mmck")),
        None => dir.join("final.mmck"),
    }
}

/// Trains a freshly initialised model. The data order of each epoch is a
/// seeded permutation; `on_epoch` sees every finished epoch.
pub fn train(
    run: &RunConfig,
    model_cfg: &ModelConfig,
    items: &[DatasetItem],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run.validate_training()?;
    let mut model = Model::init(model_cfg.clone(), run.seed)?;
    check_items(&model, items, run.mode, "training")?;
    if let Some(dir) = &run.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = Optimizer::new(run.optimizer, run.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epochs = Vec::with_capacity(run.epochs);
    for epoch in 1..=run.epochs {
        order.shuffle(&mut rng);
        let (mut losses, mut accs) = (Vec::new(), Vec::new());
        for (b, chunk) in order.chunks(run.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| (&items[i].sample, items[i].label)).collect();
            let stats = train_step(&mut model, &mut opt, &batch, run.mode, !run.deterministic).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} batch {}: {msg}", b + 1)),
                other => other,
            })?;
            losses.push(stats.loss);
            accs.push(stats.accuracy);
        }
        let rec = EpochRecord {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            accuracy: epoch_accuracy(&accs)?,
            batch_accuracies: accs,
        };
        on_epoch(&rec);
        if let Some(dir) = &run.checkpoint_dir {
            model.save(&checkpoint_path(dir, Some(epoch)), run.mode)?;
        }
        epochs.push(rec);
    }
    if let Some(dir) = &run.checkpoint_dir {
        model.save(&checkpoint_path(dir, None), run.mode)?;
    }
    Ok(TrainOutcome { model, epochs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub id: String,
    pub fake_probability: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: Mode,
    pub auc: f64,
    pub f1: f64,
    pub epoch_accuracies: Vec<f64>,
    pub scores: Vec<ScoreRecord>,
}

impl MetricsReport {
    /// `metric\t<name>\t<value>` lines.
    pub fn machine_lines(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "metric\tauc\t{}", self.auc);
        let _ = writeln!(s, "metric\tf1\t{}", self.f1);
        let _ = writeln!(s, "metric\tsamples\t{}", self.scores.len());
        for (i, a) in self.epoch_accuracies.iter().enumerate() {
            let _ = writeln!(s, "metric\tepoch_accuracy.{}\t{a}", i + 1);
        }
        s
    }

    pub fn human_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode     {}", self.mode);
        let _ = writeln!(s, "samples  {}", self.scores.len());
        let _ = writeln!(s, "AUC      {:.4}", self.auc);
        let _ = writeln!(s, "F1       {:.4}", self.f1);
        if !self.epoch_accuracies.is_empty() {
            let _ = writeln!(s, "epoch  accuracy");
            for (i, a) in self.epoch_accuracies.iter().enumerate() {
                let _ = writeln!(s, "{:>5}  {a:.4}", i + 1);
            }
        }
        s
    }

    /// `score\t<id>\t<fake probability>\t<label>` lines in dataset order.
    pub fn score_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.scores {
            let _ = writeln!(s, "score\t{}\t{}\t{}", r.id, r.fake_probability, r.label);
        }
        s
    }
}

/// Fake probabilities in dataset order.
pub fn score(model: &Model, mode: Mode, items: &[DatasetItem], parallel: bool) -> Result<Vec<ScoreRecord>> {
    check_items(model, items, mode, "evaluation")?;
    let one = |it: &DatasetItem| -> Result<ScoreRecord> {
        let p = model.predict(&it.sample, mode)?;
        Ok(ScoreRecord {
            id: it.id.clone(),
            fake_probability: p[crate::model::FAKE],
            label: it.label,
        })
    };
    if parallel {
        items.par_iter().map(one).collect()
    } else {
        items.iter().map(one).collect()
    }
}

pub fn evaluate(model: &Model, mode: Mode, items: &[DatasetItem], parallel: bool) -> Result<MetricsReport> {
    let scores = score(model, mode, items, parallel)?;
    let pairs: Vec<(f64, usize)> = scores.iter().map(|r| (r.fake_probability, r.label)).collect();
    Ok(MetricsReport {
        mode,
        auc: auc(&pairs)?,
        f1: f1(&pairs, 0.5),
        epoch_accuracies: Vec::new(),
        scores,
    })
}

/// Loads a checkpoint and evaluates it in `run.mode`.
pub fn evaluate_checkpoint(run: &RunConfig, model_cfg: &ModelConfig, ckpt: &Path, items: &[DatasetItem]) -> Result<MetricsReport> {
    let model = Model::load(ckpt, model_cfg.clone())?;
    model.require_mode(run.mode)?;
    evaluate(&model, run.mode, items, !run.deterministic)
}

/// Test subsets used by the ablation comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// real and desync samples
    Desync,
    /// real and artifact samples
    Artifact,
    Mixed,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Desync, Split::Artifact, Split::Mixed];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Desync => "desync",
            Split::Artifact => "artifact",
            Split::Mixed => "mixed",
        }
    }

    pub fn contains(&self, kind: Kind) -> bool {
        match self {
            Split::Desync => kind != Kind::Artifact,
            Split::Artifact => kind != Kind::Desync,
            Split::Mixed => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub mode: Mode,
    pub split: Split,
    pub seed: u64,
    pub auc: f64,
    /// wall-clock time of the training run behind this cell
    pub train_seconds: f64,
}

/// Trains every mode on `train` for each seed and scores each test split.
pub fn run_ablation(
    base: &RunConfig,
    model_cfg: &ModelConfig,
    train_items: &[DatasetItem],
    test_items: &[DatasetItem],
    seeds: &[u64],
    mut log: impl FnMut(&str),
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &seed in seeds {
        for mode in Mode::ALL {
            let run = RunConfig {
                seed,
                mode,
                checkpoint_dir: None,
                ..base.clone()
            };
            let started = std::time::Instant::now();
            let out = train(&run, model_cfg, train_items, |_| {})?;
            let train_seconds = started.elapsed().as_secs_f64();
            let scores = score(&out.model, mode, test_items, !run.deterministic)?;
            for split in Split::ALL {
                let pairs: Vec<(f64, usize)> = scores
                    .iter()
                    .zip(test_items)
                    .filter(|(_, it)| split.contains(it.kind))
                    .map(|(r, _)| (r.fake_probability, r.label))
                    .collect();
                let a = auc(&pairs)?;
                log(&format!("seed {seed} {mode} {} auc {a:.4}", split.as_str()));
                cells.push(AblationCell { mode, split, seed, auc: a, train_seconds });
            }
        }
    }
    Ok(cells)
}

/// Mean AUC of one (mode, split) over the seeds present in `cells`.
pub fn mean_auc(cells: &[AblationCell], mode: Mode, split: Split) -> f64 {
    let v: Vec<f64> = cells.iter().filter(|c| c.mode == mode && c.split == split).map(|c| c.auc).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
