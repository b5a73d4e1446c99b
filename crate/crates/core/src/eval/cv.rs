//! K-fold cross-validation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::MetricReport;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::objective::TaskMode;
use crate::train::{evaluate, holdout_split, train};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Epoch of the checkpoint that was evaluated.
    pub best_epoch: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_class: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_image: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub mode: TaskMode,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains one model per held-out fold and evaluates it there.
///
/// Folds come from `ds.folds` when assigned, otherwise from
/// `cfg.folds`/`cfg.seed`. Fold `f` trains with seed `cfg.seed + f`; a
/// `validation_fraction` share of its training samples is held out to drive
/// the plateau schedule and pick the evaluated checkpoint. Folds may run in
/// parallel; results are assembled in fold order.
pub fn cross_validate(ds: &Dataset, cfg: &RunConfig, mode: TaskMode) -> Result<CvReport> {
    cfg.validate()?;
    let mut ds = ds.clone();
    if ds.folds.is_none() {
        ds.assign_folds(cfg.folds, cfg.seed)?;
    }
    let folds = ds.fold_count();
    let run_fold = |fold: usize| -> Result<FoldResult> {
        let seed = cfg.seed.wrapping_add(fold as u64);
        let fold_cfg = RunConfig {
            mode,
            seed,
            log_initial: false,
            ..cfg.clone()
        };
        let (train_idx, test_idx) = ds.fold_split(fold)?;
        let (fit, val) = holdout_split(&ds.subset(&train_idx), cfg.validation_fraction, seed);
        let test = ds.subset(&test_idx);
        let outcome = train(&fit, (!val.is_empty()).then_some(&val), &fold_cfg, &mut |_| Ok(()))?;
        let (_, report) = evaluate(&outcome.best, &test, &cfg.augment, cfg.ten_crop, mode)?;
        Ok(FoldResult {
            fold,
            seed,
            train_size: fit.len(),
            validation_size: val.len(),
            test_size: test.len(),
            best_epoch: outcome.best_epoch,
            report,
        })
    };
    let results = (0..folds).into_par_iter().map(run_fold).collect::<Result<Vec<_>>>()?;
    let mean = MeanMetrics {
        map_class: mean_of(results.iter().map(|r| r.report.lesion.as_ref().map(|l| l.map_class))),
        map_image: mean_of(results.iter().map(|r| r.report.lesion.as_ref().map(|l| l.map_image))),
        top1: mean_of(results.iter().map(|r| r.report.location.as_ref().map(|l| l.top1))),
        top3: mean_of(results.iter().map(|r| r.report.location.as_ref().and_then(|l| l.top3))),
    };
    Ok(CvReport {
        mode,
        seed: cfg.seed,
        folds: results,
        mean,
    })
}
