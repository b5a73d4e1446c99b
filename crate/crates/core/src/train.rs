//! Mini-batch training, evaluation-loss passes and score prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, center_crop, channel_means, ten_crop, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::eval::{MetricReport, ScoreMatrix};
use crate::network::{DualHeadNet, Head};
use crate::objective::{joint_loss, softmax_activations, sigmoid_activations, LossBreakdown, ObjectiveConfig, TaskMode};
use crate::optimizer::SgdState;
use crate::tensor::{Graph, Tensor};

/// Images per forward pass when scoring.
const EVAL_CHUNK: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Pretrain,
    Train,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Base learning rate used during the epoch.
    pub lr: f64,
    /// Mean over the epoch's mini-batches; for the initial entry, the loss
    /// of the untrained network on evaluation views of the training set.
    pub train: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<LossBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation_metrics: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Checkpoint with the lowest monitored loss (validation total, or the
    /// training total without a validation set).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub logs: Vec<EpochLog>,
}

fn frozen_head(mode: TaskMode) -> Option<Head> {
    match mode {
        TaskMode::Mtl => None,
        TaskMode::LesionOnly => Some(Head::Location),
        TaskMode::LocationOnly => Some(Head::Lesion),
    }
}

/// Network initialised from the config seed, with multipliers and head
/// freezing applied for the config's mode.
pub fn initial_net(cfg: &RunConfig, lesions: usize, locations: usize) -> Result<DualHeadNet> {
    let mut net = DualHeadNet::build(cfg.net.clone(), lesions, locations, cfg.seed)?;
    net.set_lr_multipliers(cfg.multipliers);
    net.freeze_head(frozen_head(cfg.mode));
    Ok(net)
}

/// Splits `ds` into `(fit, validation)`, holding out `round(fraction·N)`
/// samples chosen by `seed` (always leaving at least one to fit).
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let n_val = ((ds.len() as f64 * fraction).round() as usize).min(ds.len().saturating_sub(1));
    let (val, fit) = idx.split_at(n_val);
    (ds.subset(fit), ds.subset(val))
}

/// Mean objective over evaluation views of `ds`, without gradients.
pub fn evaluation_loss(
    net: &DualHeadNet,
    ds: &Dataset,
    means: &[f64],
    aug: &AugmentConfig,
    obj: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let mut parts = Vec::new();
    for chunk in ds.samples.chunks(EVAL_CHUNK) {
        let views = chunk
            .iter()
            .map(|s| center_crop(&s.image, aug, means))
            .collect::<Result<Vec<_>>>()?;
        let u: Vec<Vec<u8>> = chunk.iter().map(|s| s.lesions.clone()).collect();
        let v: Vec<usize> = chunk.iter().map(|s| s.location).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::stack(&views)?);
        parts.push((joint_loss(net, &mut g, x, &u, &v, obj)?.breakdown, chunk.len()));
    }
    Ok(LossBreakdown::weighted_mean(&parts))
}

struct Trainer<'a> {
    data: &'a Dataset,
    cfg: &'a RunConfig,
    means: Vec<f64>,
    net: DualHeadNet,
    opt: SgdState,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn epoch(&mut self, obj: &ObjectiveConfig, epoch: usize) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut parts = Vec::with_capacity(order.len() / self.cfg.batch_size + 1);
        for batch in order.chunks(self.cfg.batch_size) {
            let mut views = Vec::with_capacity(batch.len());
            for &i in batch {
                views.push(augment(&self.data.samples[i].image, &mut self.rng, &self.cfg.augment, &self.means)?);
            }
            let u: Vec<Vec<u8>> = batch.iter().map(|&i| self.data.samples[i].lesions.clone()).collect();
            let v: Vec<usize> = batch.iter().map(|&i| self.data.samples[i].location).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::stack(&views)?);
            let j = joint_loss(&self.net, &mut g, x, &u, &v, obj)?;
            if !j.breakdown.total.is_finite() {
                return Err(Error::BadConfig(format!(
                    "non-finite training loss in epoch {epoch}; lower the learning rate"
                )));
            }
            g.backward(j.root)?;
            self.net.absorb_grads(&g, &j.forward)?;
            self.opt.step(self.net.params_mut())?;
            parts.push((j.breakdown, batch.len()));
        }
        Ok(LossBreakdown::weighted_mean(&parts))
    }

    fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            channel_means: self.means.clone(),
            optimizer: Some(self.opt.clone()),
            epoch,
        }
    }
}

/// Trains on `data`, monitoring `validation` (if any) for the plateau
/// schedule and best-checkpoint selection. `on_epoch` sees each log entry as
/// it is produced.
pub fn train(
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(Error::BadConfig("training set is empty".into()));
    }
    let means = channel_means(data.samples.iter().map(|s| &s.image))?;
    if means.len() != cfg.net.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "images have {} channels, network expects {}",
            means.len(),
            cfg.net.in_channels
        )));
    }
    let net = initial_net(cfg, data.num_lesions(), data.num_locations())?;
    let opt = SgdState::new(&cfg.optimizer, net.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut t = Trainer {
        data,
        cfg,
        means,
        net,
        opt,
        rng,
    };
    let obj = cfg.objective();
    let mut logs = Vec::new();
    let mut emit = |log: EpochLog, logs: &mut Vec<EpochLog>| -> Result<()> {
        on_epoch(&log)?;
        logs.push(log);
        Ok(())
    };

    let validate = |t: &Trainer| -> Result<Option<(LossBreakdown, MetricReport)>> {
        let Some(val) = validation.filter(|v| !v.is_empty()) else {
            return Ok(None);
        };
        let loss = evaluation_loss(&t.net, val, &t.means, &cfg.augment, &obj)?;
        let preds = predict(&t.net, val, &t.means, &cfg.augment, false)?;
        let report = MetricReport::from_scores(
            cfg.mode.trains_lesions().then_some(&preds.lesion),
            cfg.mode.trains_locations().then_some(&preds.location),
            val,
        )?;
        Ok(Some((loss, report)))
    };

    if cfg.log_initial {
        let train_loss = evaluation_loss(&t.net, data, &t.means, &cfg.augment, &obj)?;
        let val = validate(&t)?;
        emit(
            EpochLog {
                epoch: 0,
                phase: Phase::Init,
                lr: t.opt.base_lr,
                train: train_loss,
                validation: val.as_ref().map(|v| v.0),
                validation_metrics: val.map(|v| v.1),
            },
            &mut logs,
        )?;
    }

    if cfg.pretrain_epochs > 0 {
        let pre = ObjectiveConfig {
            mode: TaskMode::LocationOnly,
            ..obj
        };
        t.net.freeze_head(Some(Head::Lesion));
        for e in 1..=cfg.pretrain_epochs {
            let lr = t.opt.base_lr;
            let loss = t.epoch(&pre, e)?;
            emit(
                EpochLog {
                    epoch: e,
                    phase: Phase::Pretrain,
                    lr,
                    train: loss,
                    validation: None,
                    validation_metrics: None,
                },
                &mut logs,
            )?;
        }
        t.net.freeze_head(frozen_head(cfg.mode));
    }

    let mut best = t.checkpoint(0);
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    for e in 1..=cfg.epochs {
        let lr = t.opt.base_lr;
        let loss = t.epoch(&obj, e)?;
        let val = validate(&t)?;
        let monitored = val.as_ref().map_or(loss.total, |v| v.0.total);
        t.opt.plateau_update(monitored);
        if monitored < best_loss {
            best_loss = monitored;
            best_epoch = e;
            best = t.checkpoint(e);
        }
        emit(
            EpochLog {
                epoch: e,
                phase: Phase::Train,
                lr,
                train: loss,
                validation: val.as_ref().map(|v| v.0),
                validation_metrics: val.map(|v| v.1),
            },
            &mut logs,
        )?;
    }
    Ok(TrainOutcome {
        last: t.checkpoint(cfg.epochs),
        best,
        best_epoch,
        logs,
    })
}

/// Post-activation scores for every sample of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// Sigmoid activations.
    pub lesion: ScoreMatrix,
    /// Softmax activations.
    pub location: ScoreMatrix,
}

/// Sigmoid and softmax rows for raw `[C, H, W]` images, from center-crop
/// views or averaged over the ten views.
pub fn score_images(
    net: &DualHeadNet,
    images: &[&Tensor],
    means: &[f64],
    aug: &AugmentConfig,
    use_ten_crop: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let views_per = if use_ten_crop { 10 } else { 1 };
    let (p, q) = (net.num_lesions(), net.num_locations());
    let mut lesion_rows = Vec::with_capacity(images.len());
    let mut location_rows = Vec::with_capacity(images.len());
    let per_chunk = (EVAL_CHUNK / views_per).max(1);
    for chunk in images.chunks(per_chunk) {
        let mut views = Vec::with_capacity(chunk.len() * views_per);
        for img in chunk {
            if use_ten_crop {
                views.extend(ten_crop(img, aug, means)?);
            } else {
                views.push(center_crop(img, aug, means)?);
            }
        }
        let out = net.infer(&Tensor::stack(&views)?)?;
        let a = sigmoid_activations(&out.lesion_logits);
        let b = softmax_activations(&out.location_logits);
        for k in 0..chunk.len() {
            let mean_rows = |t: &Tensor, width: usize| -> Vec<f64> {
                let block = &t.values()[k * views_per * width..][..views_per * width];
                (0..width)
                    .map(|j| (0..views_per).map(|r| block[r * width + j]).sum::<f64>() / views_per as f64)
                    .collect()
            };
            lesion_rows.push(mean_rows(&a, p));
            location_rows.push(mean_rows(&b, q));
        }
    }
    Ok((lesion_rows, location_rows))
}

/// Scores `ds` on center-crop views, or with `use_ten_crop` the mean of the
/// activations over the ten views.
pub fn predict(
    net: &DualHeadNet,
    ds: &Dataset,
    means: &[f64],
    aug: &AugmentConfig,
    use_ten_crop: bool,
) -> Result<Predictions> {
    if ds.num_lesions() != net.num_lesions() || ds.num_locations() != net.num_locations() {
        return Err(Error::DimensionMismatch(format!(
            "network has {}x{} outputs, dataset {}x{} labels",
            net.num_lesions(),
            net.num_locations(),
            ds.num_lesions(),
            ds.num_locations()
        )));
    }
    let images: Vec<&Tensor> = ds.samples.iter().map(|s| &s.image).collect();
    let (lesion_rows, location_rows) = score_images(net, &images, means, aug, use_ten_crop)?;
    let ids = ds.ids();
    Ok(Predictions {
        lesion: ScoreMatrix::new(Head::Lesion, ids.clone(), ds.lesion_names.clone(), lesion_rows)?,
        location: ScoreMatrix::new(Head::Location, ids, ds.location_names.clone(), location_rows)?,
    })
}

/// Scores and metrics for a checkpoint on a dataset. Single-task
/// checkpoints still produce both score matrices; the report covers the
/// heads trained under `mode`.
pub fn evaluate(
    ck: &Checkpoint,
    ds: &Dataset,
    aug: &AugmentConfig,
    use_ten_crop: bool,
    mode: TaskMode,
) -> Result<(Predictions, MetricReport)> {
    let preds = predict(&ck.net, ds, &ck.channel_means, aug, use_ten_crop)?;
    let report = MetricReport::from_scores(
        mode.trains_lesions().then_some(&preds.lesion),
        mode.trains_locations().then_some(&preds.location),
        ds,
    )?;
    Ok((preds, report))
}
