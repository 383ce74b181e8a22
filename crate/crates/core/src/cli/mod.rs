//! Command-line orchestration: `generate`, `mine`, `train`, `index`,
//! `localize`, `evaluate` and `ablate`, all driven by one [`RunConfig`].

mod config;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::{AblationConfig, ConfigError, EvaluationConfig, RunConfig};

use crate::evaluation::{
    emit_report, random_pose_baseline, read_predictions, write_predictions, EvalError, EvalReport, RunMeta,
};
use crate::mining::{build_training_tuples, MiningError, TrainingTuple};
use crate::model::{Model, ModelError};
use crate::retrieval::{read_index, write_index, RetrievalError};
use crate::synthworld::{generate_dataset, load_dataset, save_dataset, Dataset, Split, WorldError};
use crate::training::{load_checkpoint, save_checkpoint, write_loss_csv, TrainError, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {what} `{path}`; run `cloc {producer}` first")]
    MissingArtifact {
        what: &'static str,
        path: String,
        producer: &'static str,
    },
    #[error("{artifact} was produced with config hash {found}, current config hashes to {expected} (use --force to override)")]
    HashMismatch {
        artifact: String,
        found: String,
        expected: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Parser)]
#[command(name = "cloc", version, about = "Condition-routed retrieval localization on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Accept artifacts whose config hash differs from the current config.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    Generate,
    /// Dump the first epoch's training tuples.
    Mine,
    /// Train the routed network; writes a checkpoint and the loss CSV.
    Train {
        /// Continue from an existing checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Describe the reference split and write the retrieval index.
    Index,
    /// Localize every query image by retrieval.
    Localize,
    /// Score the predictions and write the report.
    Evaluate,
    /// Train and evaluate every (N_S, multi-scale) combination.
    Ablate,
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn tuples(&self) -> PathBuf {
        self.root.join("tuples.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn loss(&self) -> PathBuf {
        self.root.join("loss.csv")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.cidx")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
    pub fn ablation_csv(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }
}

/// Effective configuration after applying the command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn require(path: &Path, what: &'static str, producer: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            what,
            path: path.display().to_string(),
            producer,
        })
    }
}

fn check_hash(artifact: &Path, found: Option<&str>, expected: &str, force: bool) -> Result<(), CliError> {
    match found {
        Some(h) if h == expected => Ok(()),
        _ if force => {
            log::warn!("{}: config hash differs, continuing because of --force", artifact.display());
            Ok(())
        }
        other => Err(CliError::HashMismatch {
            artifact: artifact.display().to_string(),
            found: other.unwrap_or("(none)").to_string(),
            expected: expected.to_string(),
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct TupleDump {
    config_hash: String,
    epoch: u64,
    tuples: Vec<TrainingTuple>,
    skipped: Vec<u32>,
}

/// Shared state of one invocation.
pub struct Session {
    pub config: RunConfig,
    pub layout: Layout,
    pub hash: String,
    pub force: bool,
}

impl Session {
    pub fn new(config: RunConfig, force: bool) -> Self {
        let hash = config.hash();
        let layout = Layout::new(&config.output_dir);
        Self {
            config,
            layout,
            hash,
            force,
        }
    }

    fn load_dataset(&self) -> Result<Dataset, CliError> {
        let dir = self.layout.dataset();
        require(&dir.join(crate::synthworld::MANIFEST_FILE), "dataset manifest", "generate")?;
        let (dataset, manifest) = load_dataset(&dir)?;
        check_hash(&dir, Some(&manifest.config_hash), &self.hash, self.force)?;
        Ok(dataset)
    }

    fn load_model(&self, dataset: &Dataset) -> Result<Model, CliError> {
        let path = self.layout.checkpoint();
        require(&path, "checkpoint", "train")?;
        let ckpt = load_checkpoint(&path)?;
        check_hash(&path, Some(&ckpt.config_hash), &self.hash, self.force)?;
        Ok(Model::new(ckpt.network, ckpt.params, &dataset.condition_names)?)
    }

    pub fn generate(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.layout.root).map_err(|e| io_err(&self.layout.root, e))?;
        let (_, dataset) = generate_dataset(&self.config.dataset)?;
        save_dataset(&dataset, &self.layout.dataset(), &self.hash)?;
        std::fs::write(self.layout.config(), self.config.to_json()).map_err(|e| io_err(&self.layout.config(), e))?;
        log::info!(
            "generated {} reference, {} mixed, {} query images",
            dataset.count(Split::Reference),
            dataset.count(Split::Mixed),
            dataset.count(Split::Query)
        );
        Ok(())
    }

    pub fn mine(&self) -> Result<(), CliError> {
        let dataset = self.load_dataset()?;
        let set = build_training_tuples(&dataset, None, &self.config.mining, self.config.seed, 0)?;
        let dump = TupleDump {
            config_hash: self.hash.clone(),
            epoch: set.epoch,
            tuples: set.tuples,
            skipped: set.skipped,
        };
        let path = self.layout.tuples();
        let text = serde_json::to_string_pretty(&dump).map_err(|e| io_err(&path, e))? + "\n";
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn train(&self, resume: bool) -> Result<(), CliError> {
        let dataset = self.load_dataset()?;
        let cfg = &self.config;
        let path = self.layout.checkpoint();
        let mut trainer = if resume {
            require(&path, "checkpoint", "train")?;
            let ckpt = load_checkpoint(&path)?;
            check_hash(&path, Some(&ckpt.config_hash), &self.hash, self.force)?;
            Trainer::resume(&dataset, ckpt, cfg.training.clone(), cfg.mining.clone())?
        } else {
            Trainer::new(
                &dataset,
                cfg.network.clone(),
                cfg.training.clone(),
                cfg.mining.clone(),
                cfg.seed,
            )?
        };
        while !trainer.is_done() {
            trainer.run_epoch()?;
            let every = cfg.training.snapshot_every as u64;
            if every > 0 && trainer.epoch() % every == 0 {
                save_checkpoint(&trainer.checkpoint(&self.hash), &path)?;
            }
        }
        save_checkpoint(&trainer.checkpoint(&self.hash), &path)?;
        write_loss_csv(&self.layout.loss(), trainer.history(), &self.hash)?;
        Ok(())
    }

    pub fn index(&self) -> Result<(), CliError> {
        let dataset = self.load_dataset()?;
        let model = self.load_model(&dataset)?;
        let cfg = &self.config;
        let index = pipeline::index_reference(&model, &dataset, &cfg.mining, &cfg.retrieval, cfg.seed)?;
        write_index(&self.layout.index(), &index, &cfg.retrieval, &self.hash)?;
        Ok(())
    }

    pub fn localize(&self) -> Result<(), CliError> {
        let index_path = self.layout.index();
        require(&index_path, "index", "index")?;
        let dataset = self.load_dataset()?;
        let model = self.load_model(&dataset)?;
        let (index, options, hash) = read_index(&index_path)?;
        check_hash(&index_path, Some(&hash), &self.hash, self.force)?;
        let predictions = pipeline::localize_queries(&index, &model, &dataset, &options)?;
        write_predictions(&self.layout.predictions(), &predictions, &self.hash)?;
        Ok(())
    }

    fn meta(&self, run_id: &str, config: &RunConfig, hash: &str) -> RunMeta {
        RunMeta {
            run_id: run_id.to_string(),
            config_hash: hash.to_string(),
            seed: config.seed,
            specific_blocks: config.network.specific_blocks,
            multiscale: config.retrieval.multiscale,
        }
    }

    pub fn evaluate(&self) -> Result<(), CliError> {
        let path = self.layout.predictions();
        require(&path, "predictions", "localize")?;
        let dataset = self.load_dataset()?;
        let (predictions, hash) = read_predictions(&path)?;
        check_hash(&path, hash.as_deref(), &self.hash, self.force)?;
        let report = pipeline::evaluate_predictions(
            &dataset,
            &predictions,
            &self.config.evaluation.bins,
            self.meta("main", &self.config, &self.hash),
        )?;
        emit_report(&[report], &self.layout.report())?;
        Ok(())
    }

    pub fn ablate(&self) -> Result<(), CliError> {
        let dataset = self.load_dataset()?;
        let root = self.layout.ablation();
        let mut reports: Vec<EvalReport> = Vec::new();
        for &ns in &self.config.ablation.specific_blocks {
            let mut cfg = self.config.clone();
            cfg.network.specific_blocks = ns;
            let (model, history) = crate::training::train(
                &dataset,
                cfg.network.clone(),
                &cfg.training,
                &cfg.mining,
                cfg.seed,
            )?;
            let dir = root.join(format!("NS{ns}"));
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            write_loss_csv(&dir.join("loss.csv"), &history, &cfg.hash())?;
            for &ms in &self.config.ablation.multiscale {
                cfg.retrieval.multiscale = ms;
                let hash = cfg.hash();
                let index = pipeline::index_reference(&model, &dataset, &cfg.mining, &cfg.retrieval, cfg.seed)?;
                let predictions = pipeline::localize_queries(&index, &model, &dataset, &cfg.retrieval)?;
                let run_id = format!("NS{ns}-{}", if ms { "multiscale" } else { "singlescale" });
                write_predictions(&dir.join(format!("{run_id}-predictions.csv")), &predictions, &hash)?;
                reports.push(pipeline::evaluate_predictions(
                    &dataset,
                    &predictions,
                    &cfg.evaluation.bins,
                    self.meta(&run_id, &cfg, &hash),
                )?);
            }
        }
        emit_report(&reports, &root)?;
        let csv = ablation_csv(&dataset, &reports, &self.config, &self.hash)?;
        let path = self.layout.ablation_csv();
        std::fs::write(&path, csv).map_err(|e| io_err(&path, e))
    }
}

/// Comparison table over ablation runs plus the random-pose baseline.
fn ablation_csv(dataset: &Dataset, reports: &[EvalReport], cfg: &RunConfig, hash: &str) -> Result<String, CliError> {
    use std::fmt::Write as _;
    let mut out = format!("# config_hash={hash}\nrun_id,N_S,multiscale,condition,bin_t,bin_r,accuracy_pct\n");
    for r in reports {
        for c in &r.conditions {
            for (b, a) in r.bins.iter().zip(&c.accuracy) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:.4}",
                    r.meta.run_id, r.meta.specific_blocks, r.meta.multiscale, c.condition, b.t_m, b.r_deg, a
                )
                .expect("write to string");
            }
        }
    }
    let queries: Vec<_> = dataset.split(Split::Query).map(|q| q.pose).collect();
    let reference: Vec<_> = dataset.split(Split::Reference).map(|r| r.pose).collect();
    let baseline = random_pose_baseline(&queries, &reference, &cfg.evaluation.bins)?;
    for (b, a) in cfg.evaluation.bins.iter().zip(baseline) {
        writeln!(
            out,
            "random-pose,,,{},{},{},{:.4}",
            pipeline::ALL_QUERIES,
            b.t_m,
            b.r_deg,
            a
        )
        .expect("write to string");
    }
    Ok(out)
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    let session = Session::new(config, cli.force);
    match &cli.command {
        Command::Generate => session.generate(),
        Command::Mine => session.mine(),
        Command::Train { resume } => session.train(*resume),
        Command::Index => session.index(),
        Command::Localize => session.localize(),
        Command::Evaluate => session.evaluate(),
        Command::Ablate => session.ablate(),
    }
}
