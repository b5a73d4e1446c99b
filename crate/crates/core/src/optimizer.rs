//! SGD with momentum, coupled weight decay, per-parameter learning-rate
//! multipliers and a reduce-on-plateau schedule.
//!
//! Update for a parameter `p` with multiplier `m`:
//!
//! ```text
//! v <- μ·v - (lr·m)·(g + wd·p)
//! p <- p + v
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without improvement before the rate is cut.
    pub patience: usize,
    /// Relative improvement required to reset patience.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 5,
            threshold: 1e-3,
            min_lr: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau: PlateauConfig,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            plateau: PlateauConfig::default(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.plateau;
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && p.factor > 0.0
            && p.factor < 1.0
            && p.threshold >= 0.0
            && p.min_lr >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub buffers: Vec<Vec<f64>>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_cfg: PlateauConfig,
    pub plateau: PlateauState,
}

impl SgdState {
    /// Fresh state with zero momentum buffers shaped like `params`.
    pub fn new(cfg: &SgdConfig, params: &[Param]) -> Result<Self> {
        cfg.validate()?;
        Ok(SgdState {
            buffers: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            base_lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            plateau_cfg: cfg.plateau,
            plateau: PlateauState {
                best: None,
                epochs_since_improvement: 0,
            },
        })
    }

    /// Applies one update to every non-frozen parameter and clears the
    /// consumed gradients.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.len() != self.buffers.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.buffers.len(),
                params.len()
            )));
        }
        for (p, buf) in params.iter().zip(&self.buffers) {
            if buf.len() != p.tensor.len() {
                return Err(Error::DimensionMismatch(format!("momentum buffer for {}", p.name)));
            }
            if !p.frozen && p.tensor.grad().is_none() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            if p.frozen {
                p.tensor.clear_grad();
                continue;
            }
            let grad = p.tensor.take_grad().expect("checked above");
            let lr = self.base_lr * p.lr_mult;
            for ((w, v), g) in p.tensor.values_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *v = self.momentum * *v - lr * (g + self.weight_decay * *w);
                *w += *v;
            }
        }
        Ok(())
    }

    /// Feeds one epoch's monitored loss to the plateau schedule and returns
    /// the (possibly reduced) base learning rate.
    pub fn plateau_update(&mut self, monitored: f64) -> f64 {
        let cfg = self.plateau_cfg;
        let improved = match self.plateau.best {
            None => true,
            Some(best) => monitored < best - cfg.threshold * best.abs(),
        };
        if improved {
            self.plateau.best = Some(monitored);
            self.plateau.epochs_since_improvement = 0;
        } else {
            self.plateau.epochs_since_improvement += 1;
            if self.plateau.epochs_since_improvement >= cfg.patience {
                self.base_lr = (self.base_lr * cfg.factor).max(cfg.min_lr);
                self.plateau.epochs_since_improvement = 0;
            }
        }
        self.base_lr
    }
}
