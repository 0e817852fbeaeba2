//! Patch-based optimization with a stepwise learning-rate schedule,
//! per-epoch checkpoints and a CSV training log.

pub mod config;
pub mod data;
mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use hdan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{compute_class_weights, weighted_cross_entropy_logits, ClassWeights};
use crate::network::{
    read_container, write_container, Container, Mode, Network, NetworkConfig, NORM_MOMENTUM,
};
use crate::patching::{extract_labels, extract_volume, plan_patches, Origin, PatchSpec};

pub use config::{DataConfig, ExperimentConfig};
pub use data::{load_dataset, read_manifest, write_manifest, ManifestEntry, Sample};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETAS, ADAM_EPS};

/// Checkpoint rewritten at the end of every epoch.
pub const CHECKPOINT_FILE: &str = "latest.ckpt";
/// Per-epoch log with columns `epoch,lr,mean_loss,wall_seconds`.
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Epochs between learning-rate drops.
    pub lr_drop_interval: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patches_per_volume_per_epoch: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Used by `sgd_momentum` only.
    pub momentum: f64,
    pub patch: PatchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_drop_interval: 50,
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            max_epochs: 150,
            batch_size: 2,
            patches_per_volume_per_epoch: 8,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            patch: PatchSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return fail(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            ));
        }
        if !(self.lr_drop_factor > 1.0 && self.lr_drop_factor.is_finite()) {
            return fail(format!(
                "lr_drop_factor must exceed 1, got {}",
                self.lr_drop_factor
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [
            ("lr_drop_interval", self.lr_drop_interval),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
            (
                "patches_per_volume_per_epoch",
                self.patches_per_volume_per_epoch,
            ),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        self.patch.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self, epoch)
    }
}

/// `initial_lr / lr_drop_factor^floor(epoch / lr_drop_interval)`.
///
/// ```
/// use hdan::training::{lr_at, TrainConfig};
/// let cfg = TrainConfig::default();
/// assert_eq!(lr_at(&cfg, 49), 1e-3);
/// assert_eq!(lr_at(&cfg, 50), 1e-4);
/// assert_eq!(lr_at(&cfg, 120), 1e-5);
/// ```
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = epoch / cfg.lr_drop_interval.max(1);
    cfg.initial_lr / cfg.lr_drop_factor.powi(drops as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub wall_seconds: f64,
}

/// Complete training state after `epoch` finished epochs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub network: Network,
    pub optimizer: Optimizer,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub class_weights: ClassWeights,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    epoch: usize,
    network: NetworkConfig,
    training: TrainConfig,
    optimizer_steps: u64,
    class_weights: ClassWeights,
    history: Vec<EpochRecord>,
}

const TRAINING_KIND: &str = "training";

impl Checkpoint {
    /// Fresh state before the first epoch.
    pub fn start(network: Network, config: TrainConfig, class_weights: ClassWeights) -> Self {
        let optimizer = Optimizer::new(
            config.optimizer,
            config.weight_decay,
            config.momentum,
            network.params(),
        );
        Self {
            epoch: 0,
            network,
            optimizer,
            history: Vec::new(),
            config,
            class_weights,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: TRAINING_KIND.into(),
            epoch: self.epoch,
            network: self.network.config().clone(),
            training: self.config.clone(),
            optimizer_steps: self.optimizer.steps(),
            class_weights: self.class_weights.clone(),
            history: self.history.clone(),
        };
        let mut tensors = self.network.named_tensors();
        tensors.extend(self.optimizer.named_state(self.network.params()));
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_container(path, &Container { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some(TRAINING_KIND) {
            return Err(Error::Checkpoint(format!(
                "{} is not a training checkpoint",
                path.display()
            )));
        }
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (optim, params): (Vec<_>, Vec<_>) = c
            .tensors
            .into_iter()
            .partition(|(n, _)| n.starts_with("optim."));
        let network = Network::from_named_tensors(meta.network, &params)?;
        let t = &meta.training;
        let optimizer = Optimizer::restore(
            t.optimizer,
            t.weight_decay,
            t.momentum,
            meta.optimizer_steps,
            network.params(),
            &optim,
        )?;
        Ok(Self {
            epoch: meta.epoch,
            network,
            optimizer,
            history: meta.history,
            config: meta.training,
            class_weights: meta.class_weights,
        })
    }
}

/// A stacked group of patches with sample-major labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N, M, D, H, W]`
    pub input: Tensor,
    pub labels: Vec<u8>,
}

/// Patch picks for `epoch`, grouped into batches: a pure function of the
/// configuration, the dataset shapes and the epoch.
pub fn epoch_plan(
    dataset: &[Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<(usize, Origin)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    let per = cfg.patches_per_volume_per_epoch;
    let mut picks = Vec::with_capacity(dataset.len() * per);
    for (i, s) in dataset.iter().enumerate() {
        let mut origins = plan_patches(s.volume.dims(), cfg.patch)?.origins;
        origins.shuffle(&mut rng);
        picks.extend((0..per).map(|j| (i, origins[j % origins.len()])));
    }
    picks.shuffle(&mut rng);
    Ok(picks
        .chunks(cfg.batch_size.max(1))
        .map(<[_]>::to_vec)
        .collect())
}

pub fn make_batch(
    dataset: &[Sample],
    picks: &[(usize, Origin)],
    patch: [usize; 3],
) -> Result<Batch> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut modalities = 0;
    for &(i, origin) in picks {
        let s = dataset
            .get(i)
            .ok_or_else(|| Error::InvalidConfig(format!("pick refers to subject {i}")))?;
        modalities = s.volume.modalities();
        data.extend_from_slice(extract_volume(&s.volume, origin, patch)?.data());
        labels.extend(extract_labels(&s.labels, origin, patch)?.labels);
    }
    let [d, h, w] = patch;
    let input = Tensor::from_vec(&[picks.len(), modalities, d, h, w], data)?;
    Ok(Batch { input, labels })
}

/// Training-mode loss of `batch` without updating anything.
pub fn batch_loss(net: &Network, batch: &Batch, cw: &ClassWeights) -> Result<f64> {
    let rec = net.record(batch.input.clone(), Mode::Train, false)?;
    Ok(weighted_cross_entropy_logits(rec.logits(), &batch.labels, cw)?.0)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    batch: &Batch,
    cw: &ClassWeights,
    lr: f64,
) -> Result<f64> {
    let rec = net.record(batch.input.clone(), Mode::Train, true)?;
    let (loss, seed) = weighted_cross_entropy_logits(rec.logits(), &batch.labels, cw)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = rec.backward(seed)?;
    let stats = rec.into_stats();
    opt.step(net.params_mut(), &grads, lr)?;
    net.update_running_stats(&stats, NORM_MOMENTUM);
    Ok(loss)
}

fn check_dataset(net: &Network, dataset: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    for s in dataset {
        let mut shape = vec![1, s.volume.modalities()];
        shape.extend_from_slice(&cfg.patch.patch_size);
        net.check_input(&shape)?;
        if s.labels.dims != s.volume.dims() {
            return Err(Error::ShapeMismatch(format!(
                "subject {}: labels {:?} vs image {:?}",
                s.volume.subject_id,
                s.labels.dims,
                s.volume.dims()
            )));
        }
        if s.labels.num_classes() != net.config().num_classes {
            return Err(Error::InvalidConfig(format!(
                "subject {} has {} classes, network predicts {}",
                s.volume.subject_id,
                s.labels.num_classes(),
                net.config().num_classes
            )));
        }
    }
    Ok(())
}

/// Class weights from the label histogram of the whole training set.
pub fn training_class_weights(dataset: &[Sample]) -> Result<ClassWeights> {
    let classes = dataset
        .iter()
        .map(|s| s.labels.num_classes())
        .max()
        .unwrap_or(0);
    let mut hist = vec![0u64; classes];
    for s in dataset {
        for (h, c) in hist.iter_mut().zip(s.labels.histogram()) {
            *h += c;
        }
    }
    compute_class_weights(&hist)
}

/// Train from scratch for `cfg.max_epochs` epochs. With `out_dir`, the
/// checkpoint and log are written there after every epoch.
pub fn train(
    net: Network,
    dataset: &[Sample],
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_dataset(&net, dataset, &cfg)?;
    let cw = training_class_weights(dataset)?;
    resume(Checkpoint::start(net, cfg, cw), dataset, out_dir)
}

/// Continue `ckpt` up to `ckpt.config.max_epochs`.
pub fn resume(
    mut ckpt: Checkpoint,
    dataset: &[Sample],
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    ckpt.config.validate()?;
    check_dataset(&ckpt.network, dataset, &ckpt.config)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if ckpt.epoch == 0 {
            let path = dir.join(LOG_FILE);
            std::fs::write(&path, "epoch,lr,mean_loss,wall_seconds\n")
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    while ckpt.epoch < ckpt.config.max_epochs {
        let last_good = ckpt.clone();
        let record = run_epoch(&mut ckpt, dataset).map_err(|e| match e {
            Error::DivergenceDetected { epoch, .. } => Error::DivergenceDetected {
                epoch,
                last_good: Some(Box::new(last_good)),
            },
            e => e,
        })?;
        log::info!(
            "epoch {} lr {:e} loss {:.6} ({} steps, {:.1}s)",
            record.epoch,
            record.lr,
            record.mean_loss,
            record.steps,
            record.wall_seconds
        );
        ckpt.history.push(record.clone());
        ckpt.epoch += 1;
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            append_log(&dir.join(LOG_FILE), &record)?;
        }
    }
    Ok(ckpt)
}

fn run_epoch(ckpt: &mut Checkpoint, dataset: &[Sample]) -> Result<EpochRecord> {
    let started = Instant::now();
    let epoch = ckpt.epoch;
    let lr = ckpt.config.lr_at(epoch);
    let plan = epoch_plan(dataset, &ckpt.config, epoch)?;
    let mut total = 0.0;
    for picks in &plan {
        let batch = make_batch(dataset, picks, ckpt.config.patch.patch_size)?;
        let loss = train_step(
            &mut ckpt.network,
            &mut ckpt.optimizer,
            &batch,
            &ckpt.class_weights,
            lr,
        )?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected {
                epoch,
                last_good: None,
            });
        }
        total += loss;
    }
    Ok(EpochRecord {
        epoch,
        lr,
        mean_loss: total / plan.len() as f64,
        steps: plan.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn append_log(path: &Path, r: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(
        f,
        "{},{:e},{},{:.3}",
        r.epoch, r.lr, r.mean_loss, r.wall_seconds
    )
    .map_err(|e| Error::io(path, e))
}
