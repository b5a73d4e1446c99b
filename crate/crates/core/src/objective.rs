//! Multi-task objective: sigmoid cross-entropy over lesions plus softmax
//! cross-entropy over locations plus an L2 penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DualHeadNet, ForwardNodes};
use crate::tensor::{Graph, NodeId, OpKind, Tensor};

/// Which losses drive training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Mtl,
    LesionOnly,
    LocationOnly,
}

impl TaskMode {
    pub fn trains_lesions(self) -> bool {
        self != TaskMode::LocationOnly
    }

    pub fn trains_locations(self) -> bool {
        self != TaskMode::LesionOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Mtl => "mtl",
            TaskMode::LesionOnly => "lesion_only",
            TaskMode::LocationOnly => "location_only",
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(TaskMode::Mtl),
            "lesion_only" => Ok(TaskMode::LesionOnly),
            "location_only" => Ok(TaskMode::LocationOnly),
            other => Err(Error::BadConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub mode: TaskMode,
    /// Regularization strength γ.
    pub gamma: f64,
    /// Weight on the location loss. 1.0 is the plain unweighted sum.
    pub aux_weight: f64,
    /// When set, the penalty is applied by the optimizer as weight decay and
    /// only reported here; otherwise `γ·‖W‖²` is part of the graph.
    pub decoupled_reg: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: TaskMode::Mtl,
            gamma: 1e-4,
            aux_weight: 1.0,
            decoupled_reg: true,
        }
    }
}

/// Batch-mean loss components. Absent components were not part of the
/// objective for the active [`TaskMode`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lesion_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location_loss: Option<f64>,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Averages breakdowns weighted by batch size.
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let mut acc = 0.0;
            for (b, w) in items {
                acc += f(b)? * *w as f64;
            }
            Some(acc / n as f64)
        };
        LossBreakdown {
            lesion_loss: avg(&|b| b.lesion_loss),
            location_loss: avg(&|b| b.location_loss),
            reg: avg(&|b| Some(b.reg)).unwrap_or(0.0),
            total: avg(&|b| Some(b.total)).unwrap_or(0.0),
        }
    }
}

/// Elementwise logistic function.
pub fn sigmoid_activations(lesion_logits: &Tensor) -> Tensor {
    Tensor::new(
        lesion_logits.shape().to_vec(),
        lesion_logits.values().iter().map(|&s| sigmoid(s)).collect(),
    )
    .expect("same shape")
}

/// Row-wise softmax over the last axis.
pub fn softmax_activations(location_logits: &Tensor) -> Tensor {
    let q = *location_logits.shape().last().expect("non-empty shape");
    let mut out = Vec::with_capacity(location_logits.len());
    for row in location_logits.values().chunks_exact(q) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|t| (t - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(location_logits.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Batch-mean sigmoid cross-entropy. `u` holds one binary row per sample.
pub fn lesion_loss(g: &mut Graph, lesion_logits: NodeId, u: &[Vec<u8>]) -> Result<NodeId> {
    let shape = g.value(lesion_logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != u.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, P] logits", u.len()),
            got: format!("{shape:?}"),
        });
    }
    let mut targets = Vec::with_capacity(shape[0] * shape[1]);
    for (i, row) in u.iter().enumerate() {
        if row.len() != shape[1] {
            return Err(Error::ShapeMismatch {
                expected: format!("{} lesion labels", shape[1]),
                got: format!("{} in row {i}", row.len()),
            });
        }
        for &x in row {
            if x > 1 {
                return Err(Error::BadLabel(format!("lesion label {x} in row {i} is not 0/1")));
            }
            targets.push(f64::from(x));
        }
    }
    g.apply(OpKind::SigmoidCrossEntropy { targets }, &[lesion_logits])
}

/// Batch-mean softmax cross-entropy. Locations in `v` are 1-based.
pub fn location_loss(g: &mut Graph, location_logits: NodeId, v: &[usize]) -> Result<NodeId> {
    let shape = g.value(location_logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != v.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, Q] logits", v.len()),
            got: format!("{shape:?}"),
        });
    }
    let q = shape[1];
    let classes = v
        .iter()
        .map(|&vi| {
            if (1..=q).contains(&vi) {
                Ok(vi - 1)
            } else {
                Err(Error::BadLabel(format!("location {vi} outside 1..={q}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.apply(OpKind::SoftmaxCrossEntropy { classes }, &[location_logits])
}

/// Result of [`joint_loss`]: the differentiable root plus the forward handles.
#[derive(Clone, Debug)]
pub struct JointLoss {
    pub breakdown: LossBreakdown,
    /// Root to call `backward` on.
    pub root: NodeId,
    pub forward: ForwardNodes,
}

/// Records the forward pass and the objective for one mini-batch.
pub fn joint_loss(
    net: &DualHeadNet,
    g: &mut Graph,
    batch: NodeId,
    u: &[Vec<u8>],
    v: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<JointLoss> {
    if !(cfg.gamma >= 0.0) || !cfg.aux_weight.is_finite() {
        return Err(Error::BadConfig(format!(
            "gamma must be >= 0 and aux_weight finite, got {} / {}",
            cfg.gamma, cfg.aux_weight
        )));
    }
    let forward = net.forward(g, batch)?;
    let mut terms = Vec::new();
    let mut breakdown = LossBreakdown::default();

    if cfg.mode.trains_lesions() {
        let l = lesion_loss(g, forward.lesion_logits, u)?;
        breakdown.lesion_loss = g.value(l).item();
        terms.push(l);
    }
    if cfg.mode.trains_locations() {
        let l = location_loss(g, forward.location_logits, v)?;
        breakdown.location_loss = g.value(l).item();
        terms.push(if cfg.aux_weight == 1.0 || cfg.mode == TaskMode::LocationOnly {
            l
        } else {
            g.scale(l, cfg.aux_weight)?
        });
    }

    if cfg.decoupled_reg {
        breakdown.reg = cfg.gamma * net.squared_norm();
    } else if cfg.gamma > 0.0 {
        let mut acc: Option<NodeId> = None;
        for &p in &forward.params {
            let sq = g.sum_squares(p)?;
            acc = Some(match acc {
                Some(a) => g.add(a, sq)?,
                None => sq,
            });
        }
        let reg = g.scale(acc.expect("net has parameters"), cfg.gamma)?;
        breakdown.reg = g.value(reg).item().unwrap_or(0.0);
        terms.push(reg);
    }

    let mut root = terms[0];
    for &t in &terms[1..] {
        root = g.add(root, t)?;
    }
    let aux = if cfg.mode == TaskMode::LocationOnly { 1.0 } else { cfg.aux_weight };
    breakdown.total = breakdown.lesion_loss.unwrap_or(0.0)
        + aux * breakdown.location_loss.unwrap_or(0.0)
        + breakdown.reg;
    Ok(JointLoss {
        breakdown,
        root,
        forward,
    })
}
