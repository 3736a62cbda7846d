use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::NormalImageSet;
use crate::patchgrid::sample_mask;
use crate::pipeline::augment::random_resized_crop;
use crate::pipeline::checkpoint::{Checkpoint, RngState};
use crate::pipeline::config::{ModelConfig, TrainConfig};
use crate::pipeline::model::MaskedAutoencoder;
use crate::pipeline::optim::AdamW;
use crate::pipeline::schedule::WarmupCosine;

/// One optimizer step of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    /// 0-based global step index.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// State captured when the loss stops being finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// First parameter tensor holding a non-finite value, if any.
    pub non_finite_param: Option<String>,
    pub recent_losses: Vec<f64>,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss {} at epoch {} step {} (lr {:.3e})",
            self.loss, self.epoch, self.step, self.lr
        )?;
        if let Some(p) = &self.non_finite_param {
            write!(f, ", first bad parameter {p}")?;
        }
        Ok(())
    }
}

/// Hooks invoked while training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` epochs.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _mean_loss: f64) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<LossRecord>,
}

pub fn train(dataset: &NormalImageSet, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(dataset, model_cfg, train_cfg, &mut ())
}

pub fn train_with_observer(
    dataset: &NormalImageSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let model = MaskedAutoencoder::<f32>::new(model_cfg.clone())?;
    let optimizer = AdamW::new(
        model.store(),
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.eps,
        train_cfg.weight_decay,
    );
    let checkpoint = Checkpoint {
        model,
        train_config: train_cfg.clone(),
        epoch: 0,
        step: 0,
        optimizer,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(train_cfg.seed)),
    };
    resume(checkpoint, dataset, observer)
}

/// Continues training from `checkpoint` until its configured epoch count.
pub fn resume(
    mut checkpoint: Checkpoint,
    dataset: &NormalImageSet,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    let cfg = checkpoint.train_config.clone();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let model_cfg = checkpoint.model.config().clone();
    for (id, img) in dataset.ids.iter().zip(&dataset.images) {
        if img.height() != model_cfg.image_size
            || img.width() != model_cfg.image_size
            || img.channels() != model_cfg.channels
        {
            return Err(Error::Dataset(format!("image {id} does not match the model input size")));
        }
    }

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = WarmupCosine::new(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch);
    let mut rng = checkpoint.rng.restore();
    let num_patches = model_cfg.num_patches();
    let mut curve = Vec::with_capacity((cfg.epochs - checkpoint.epoch.min(cfg.epochs)) * steps_per_epoch);

    while checkpoint.epoch < cfg.epochs {
        let epoch = checkpoint.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = schedule.lr(checkpoint.step);
            let model = &checkpoint.model;
            let mut grads: Vec<Array2<f32>> = model.store().iter().map(|p| Array2::zeros(p.value.dim())).collect();
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let image = if cfg.augmentation.random_resized_crop {
                    random_resized_crop(&dataset.images[i], &cfg.augmentation, &mut rng)
                } else {
                    dataset.images[i].clone()
                };
                let partition = sample_mask(num_patches, model_cfg.mask_ratio, rng.random())?;
                let patches = model.patchify(&image)?.to_real::<f32>();
                let (loss, g) = model.loss_and_grads(&patches, &partition)?;
                batch_loss += loss as f64;
                for (acc, g) in grads.iter_mut().zip(g) {
                    *acc += &g;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
            let loss = batch_loss / batch.len() as f64;
            if !loss.is_finite() {
                return Err(divergence(&checkpoint, &curve, epoch, lr, loss));
            }
            checkpoint.optimizer.step(checkpoint.model.store_mut(), &grads, lr);
            let record = LossRecord {
                epoch,
                step: checkpoint.step,
                loss,
                lr,
            };
            observer.on_step(&record)?;
            curve.push(record);
            epoch_loss += loss * batch.len() as f64;
            checkpoint.step += 1;
        }
        checkpoint.epoch = epoch;
        checkpoint.rng = RngState::capture(&rng);
        if let Some(bad) = checkpoint.model.store().first_non_finite() {
            let bad = bad.to_string();
            let mut report = divergence(&checkpoint, &curve, epoch, schedule.lr(checkpoint.step), f64::NAN);
            if let Error::Diverged(r) = &mut report {
                r.non_finite_param = Some(bad);
            }
            return Err(report);
        }
        observer.on_epoch_end(epoch, epoch_loss / n as f64);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(&checkpoint)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        loss_curve: curve,
    })
}

fn divergence(checkpoint: &Checkpoint, curve: &[LossRecord], epoch: usize, lr: f64, loss: f64) -> Error {
    let recent = curve.iter().rev().take(10).rev().map(|r| r.loss).collect();
    Error::Diverged(Box::new(DivergenceReport {
        epoch,
        step: checkpoint.step,
        lr,
        loss,
        non_finite_param: checkpoint.model.store().first_non_finite().map(str::to_string),
        recent_losses: recent,
    }))
}
