//! Contrastive training of the routed network over mined tuples.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::mining::{build_training_tuples, MiningConfig, MiningError, TrainingTuple};
use crate::model::{Model, ModelError, ModelParams, NetworkConfig};
use crate::numerics::{ops, optimizer_step, Graph, NumericsError, OptimizerConfig, OptimizerState, PairLabel, Tensor};
use crate::seeding::{derive_seed, rng_for};
use crate::synthworld::Dataset;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("pair label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("image {0} is not in the dataset")]
    UnknownImage(u32),
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint does not match the run: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Contrastive margin `m`.
    pub margin: f64,
    pub optimizer: OptimizerConfig,
    /// Mine negatives with the current model; uniform draws otherwise.
    pub hard_negatives: bool,
    /// Tuples whose summed gradients feed one optimizer step.
    pub batch_size: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            margin: 0.7,
            optimizer: OptimizerConfig::default(),
            hard_negatives: true,
            batch_size: 8,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig {
                field: "epochs",
                message: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig {
                field: "batch_size",
                message: "must be at least 1".into(),
            });
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(TrainError::InvalidConfig {
                field: "margin",
                message: format!("must be positive, got {}", self.margin),
            });
        }
        self.optimizer.validate().map_err(|e| TrainError::InvalidConfig {
            field: "optimizer",
            message: e.to_string(),
        })
    }
}

/// Contrastive loss of one descriptor pair: `‖d_i − d_j‖²` for label 1,
/// `max(0, m − ‖d_i − d_j‖)²` for label 0.
pub fn contrastive_loss(d_i: &[f64], d_j: &[f64], label: u8, margin: f64) -> Result<f64, TrainError> {
    let label = PairLabel::try_from(label).map_err(|_| TrainError::BadLabel(label))?;
    if d_i.len() != d_j.len() {
        return Err(TrainError::DimensionMismatch(d_i.len(), d_j.len()));
    }
    if !(margin > 0.0) {
        return Err(TrainError::InvalidConfig {
            field: "margin",
            message: format!("must be positive, got {margin}"),
        });
    }
    Ok(ops::pair_loss(d_i, d_j, label, margin))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: u64,
    pub mean_loss: f64,
    pub tuples: usize,
}

/// Loss of one tuple and its gradient with respect to every parameter.
/// Branches that none of the tuple's images route to get exact zeros.
pub fn tuple_gradients(
    model: &Model,
    dataset: &Dataset,
    tuple: &TrainingTuple,
    margin: f64,
) -> Result<(f64, ModelParams), TrainError> {
    let ids: Vec<u32> = std::iter::once(tuple.query)
        .chain(tuple.positives.iter().copied())
        .chain(tuple.negatives.iter().copied())
        .collect();
    for id in &ids {
        if dataset.get(*id).is_none() {
            return Err(TrainError::UnknownImage(*id));
        }
    }

    // One graph per image; they share the parameter tensors by reference.
    let graphs: Vec<(Graph, crate::model::ParamLeaves, crate::numerics::NodeId)> = ids
        .par_iter()
        .map(|&id| {
            let img = &dataset.images[id as usize];
            let mut g = Graph::new();
            let leaves = model.register_params(&mut g);
            let x = g.leaf(img.pixels.clone(), false);
            let d = model.descriptor_node(&mut g, &leaves, x, img.condition)?;
            g.forward()?;
            Ok((g, leaves, d))
        })
        .collect::<Result<_, TrainError>>()?;

    let desc: Vec<&[f64]> = graphs
        .iter()
        .map(|(g, _, d)| g.value(*d).map(|t| t.data()))
        .collect::<Result<_, _>>()?;
    let dim = desc[0].len();
    let mut seeds = vec![vec![0.0; dim]; ids.len()];
    let mut loss = 0.0;
    let n_pos = tuple.positives.len();
    for j in 1..ids.len() {
        let label = if j <= n_pos { PairLabel::Positive } else { PairLabel::Negative };
        loss += ops::pair_loss(desc[0], desc[j], label, margin);
        let ga = ops::pair_loss_grad_a(desc[0], desc[j], label, margin);
        for k in 0..dim {
            seeds[0][k] += ga[k];
            seeds[j][k] -= ga[k];
        }
    }

    let per_image: Vec<ModelParams> = graphs
        .into_par_iter()
        .zip(seeds)
        .map(|((g, leaves, d), seed)| {
            let mut grads = g.backward_with_seed(d, Tensor::vector(seed))?;
            Ok(model.collect_grads(&leaves, &mut grads))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut iter = per_image.into_iter();
    let mut total = iter.next().expect("tuple has a query");
    for g in iter {
        total.add_assign(&g)?;
    }
    Ok((loss, total))
}

/// Epoch-loop state. Everything random in an epoch is derived from
/// `(seed, epoch)`, so resuming from a checkpoint reproduces the
/// uninterrupted run exactly.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    mining: MiningConfig,
    seed: u64,
    model: Model,
    optimizer: OptimizerState,
    epoch: u64,
    history: Vec<EpochLoss>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        network: NetworkConfig,
        config: TrainConfig,
        mining: MiningConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        mining.validate()?;
        network.check_covers(&dataset.condition_names)?;
        let model = Model::init(network, &dataset.condition_names, derive_seed("init", &[seed]))?;
        Ok(Self {
            dataset,
            config,
            mining,
            seed,
            model,
            optimizer: OptimizerState::new(),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn resume(
        dataset: &'a Dataset,
        checkpoint: Checkpoint,
        config: TrainConfig,
        mining: MiningConfig,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        mining.validate()?;
        if checkpoint.condition_names != dataset.condition_names {
            return Err(TrainError::IncompatibleCheckpoint(
                "condition list differs from the dataset".into(),
            ));
        }
        let model = Model::new(checkpoint.network, checkpoint.params, &dataset.condition_names)?;
        Ok(Self {
            dataset,
            config,
            mining,
            seed: checkpoint.seed,
            model,
            optimizer: checkpoint.optimizer,
            epoch: checkpoint.epoch,
            history: checkpoint.loss_history,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn history(&self) -> &[EpochLoss] {
        &self.history
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs as u64
    }

    pub fn checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            network: self.model.config.clone(),
            condition_names: self.model.condition_names().to_vec(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            seed: self.seed,
            loss_history: self.history.clone(),
            config_hash: config_hash.to_string(),
        }
    }

    /// Mines this epoch's tuples and takes one optimizer step per tuple.
    pub fn run_epoch(&mut self) -> Result<EpochLoss, TrainError> {
        let epoch = self.epoch;
        let miner = self.config.hard_negatives.then_some(&self.model);
        let mut tuples = build_training_tuples(self.dataset, miner, &self.mining, self.seed, epoch)?.tuples;
        tuples.shuffle(&mut rng_for("tuple-order", &[self.seed, epoch]));

        let mut total = 0.0;
        for batch in tuples.chunks(self.config.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|t| tuple_gradients(&self.model, self.dataset, t, self.config.margin))
                .collect();
            let mut grads: Option<ModelParams> = None;
            for r in results {
                let (loss, g) = r?;
                total += loss;
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads = Some(g),
                }
            }
            let grads = grads.expect("chunks are non-empty");
            let grad_tensors: Vec<Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            let mut params = self.model.params.named_params_mut();
            optimizer_step(&mut params, &grad_refs, &mut self.optimizer, &self.config.optimizer)?;
        }
        let record = EpochLoss {
            epoch,
            mean_loss: total / tuples.len() as f64,
            tuples: tuples.len(),
        };
        log::info!("epoch {epoch}: mean loss {:.6} over {} tuples", record.mean_loss, record.tuples);
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(
    dataset: &Dataset,
    network: NetworkConfig,
    config: &TrainConfig,
    mining: &MiningConfig,
    seed: u64,
) -> Result<(Model, Vec<EpochLoss>), TrainError> {
    let mut trainer = Trainer::new(dataset, network, config.clone(), mining.clone(), seed)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    let history = trainer.history().to_vec();
    Ok((trainer.into_model(), history))
}

/// Writes `epoch,mean_loss` rows after a `# config_hash=` comment line.
pub fn write_loss_csv(path: &Path, history: &[EpochLoss], config_hash: &str) -> Result<(), TrainError> {
    let mut out = format!("# config_hash={config_hash}\nepoch,mean_loss\n");
    for h in history {
        out.push_str(&format!("{},{}\n", h.epoch, h.mean_loss));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}
