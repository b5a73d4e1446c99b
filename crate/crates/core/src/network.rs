//! Shared residual trunk with two sibling linear heads.
//!
//! ```text
//! image ─ conv ─ relu ─ maxpool ─ [residual block] x n ─┬─ conv_maps
//!                                                       └─ global avg pool ─ features (K)
//!                                                              ├─ lesion head   (K x P) ─ s
//!                                                              └─ location head (K x Q) ─ t
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Height and width of the (square) network input.
    pub input_size: usize,
    /// Trunk channel count; also the pooled feature length K.
    pub width: usize,
    pub stem_kernel: usize,
    /// Max-pool window and stride after the stem.
    pub pool: usize,
    pub residual_blocks: usize,
    pub block_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            input_size: 28,
            width: 8,
            stem_kernel: 3,
            pool: 2,
            residual_blocks: 2,
            block_kernel: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(m.to_string()));
        if self.in_channels == 0 || self.width == 0 || self.pool == 0 {
            return bad("channels, width and pool must be positive");
        }
        if self.stem_kernel % 2 == 0 || self.block_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if self.input_size < self.pool || self.input_size < self.stem_kernel / 2 + 1 {
            return bad("input_size too small for the stem");
        }
        Ok(())
    }

    /// Spatial size of `conv_maps`.
    pub fn map_size(&self) -> usize {
        (self.input_size - self.pool) / self.pool + 1
    }
}

/// Which sibling head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Lesion,
    Location,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Lesion => "lesion",
            Head::Location => "location",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(Head::Lesion),
            "location" => Ok(Head::Location),
            other => Err(Error::BadConfig(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    TrunkWeight,
    TrunkBias,
    HeadWeight(Head),
    HeadBias(Head),
}

impl ParamRole {
    pub fn head(self) -> Option<Head> {
        match self {
            ParamRole::HeadWeight(h) | ParamRole::HeadBias(h) => Some(h),
            _ => None,
        }
    }
}

/// Learning-rate multipliers by parameter role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrMultipliers {
    pub trunk: f64,
    pub head_weight: f64,
    pub head_bias: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        LrMultipliers {
            trunk: 1.0,
            head_weight: 10.0,
            head_bias: 20.0,
        }
    }
}

impl LrMultipliers {
    pub fn for_role(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::TrunkWeight | ParamRole::TrunkBias => self.trunk,
            ParamRole::HeadWeight(_) => self.head_weight,
            ParamRole::HeadBias(_) => self.head_bias,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
    pub lr_mult: f64,
    /// Frozen parameters are skipped by the optimizer.
    pub frozen: bool,
}

/// Graph handles produced by [`DualHeadNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub lesion_logits: NodeId,
    pub location_logits: NodeId,
    pub features: NodeId,
    pub conv_maps: NodeId,
    /// One leaf per parameter, in [`DualHeadNet::params`] order.
    pub params: Vec<NodeId>,
}

/// Plain tensors from a forward pass without gradient bookkeeping.
#[derive(Clone, Debug)]
pub struct Inference {
    pub lesion_logits: Tensor,
    pub location_logits: Tensor,
    pub features: Tensor,
    pub conv_maps: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualHeadNet {
    config: NetConfig,
    lesions: usize,
    locations: usize,
    params: Vec<Param>,
}

impl DualHeadNet {
    /// Builds a net with Glorot-uniform weights and zero biases.
    pub fn build(config: NetConfig, lesions: usize, locations: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if lesions < 1 {
            return Err(Error::BadConfig("need at least one lesion class".into()));
        }
        if locations < 2 {
            return Err(Error::BadConfig("need at least two location classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mult = LrMultipliers::default();
        let mut params = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role: ParamRole, fans: Option<(usize, usize)>| {
            let tensor = match fans {
                Some((fan_in, fan_out)) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-a..a))
                }
                None => Tensor::zeros(&shape),
            };
            params.push(Param {
                name,
                tensor,
                role,
                lr_mult: mult.for_role(role),
                frozen: false,
            });
        };

        let (c, k) = (config.width, config.stem_kernel);
        let conv_fans = |cin: usize, cout: usize, k: usize| Some((cin * k * k, cout * k * k));
        push(
            "stem.weight".into(),
            vec![c, config.in_channels, k, k],
            ParamRole::TrunkWeight,
            conv_fans(config.in_channels, c, k),
        );
        push("stem.bias".into(), vec![c], ParamRole::TrunkBias, None);
        let bk = config.block_kernel;
        for b in 0..config.residual_blocks {
            for j in 1..=2 {
                push(
                    format!("block{b}.conv{j}.weight"),
                    vec![c, c, bk, bk],
                    ParamRole::TrunkWeight,
                    conv_fans(c, c, bk),
                );
                push(format!("block{b}.conv{j}.bias"), vec![c], ParamRole::TrunkBias, None);
            }
        }
        for (head, name, n) in [(Head::Lesion, "lesion", lesions), (Head::Location, "location", locations)] {
            push(
                format!("{name}_head.weight"),
                vec![c, n],
                ParamRole::HeadWeight(head),
                Some((c, n)),
            );
            push(format!("{name}_head.bias"), vec![n], ParamRole::HeadBias(head), None);
        }
        Ok(DualHeadNet {
            config,
            lesions,
            locations,
            params,
        })
    }

    /// Reassembles a net from stored parameter tensors, checking every shape.
    pub fn from_parts(config: NetConfig, lesions: usize, locations: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let mut net = Self::build(config, lesions, locations, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameter tensors, got {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in net.params.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.shape()
                )));
            }
            p.tensor = t;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_lesions(&self) -> usize {
        self.lesions
    }

    pub fn num_locations(&self) -> usize {
        self.locations
    }

    pub fn num_classes(&self, head: Head) -> usize {
        match head {
            Head::Lesion => self.lesions,
            Head::Location => self.locations,
        }
    }

    /// Pooled feature length K.
    pub fn feature_dim(&self) -> usize {
        self.config.width
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn head_index(&self, head: Head) -> usize {
        let base = 2 + 4 * self.config.residual_blocks;
        match head {
            Head::Lesion => base,
            Head::Location => base + 2,
        }
    }

    /// `K x classes` weight matrix of a head.
    pub fn head_weight(&self, head: Head) -> &Tensor {
        &self.params[self.head_index(head)].tensor
    }

    pub fn head_bias(&self, head: Head) -> &Tensor {
        &self.params[self.head_index(head) + 1].tensor
    }

    pub fn head_params_mut(&mut self, head: Head) -> (&mut Tensor, &mut Tensor) {
        let i = self.head_index(head);
        let (w, b) = self.params[i..i + 2].split_at_mut(1);
        (&mut w[0].tensor, &mut b[0].tensor)
    }

    pub fn set_lr_multipliers(&mut self, mult: LrMultipliers) {
        for p in &mut self.params {
            p.lr_mult = mult.for_role(p.role);
        }
    }

    /// Freezes every parameter that belongs to `head`, or unfreezes all.
    pub fn freeze_head(&mut self, head: Option<Head>) {
        for p in &mut self.params {
            p.frozen = head.is_some() && p.role.head() == head;
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Sum of squared parameter values.
    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.tensor.values())
            .map(|v| v * v)
            .sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(Error::ShapeMismatch {
                expected: format!("[B,{},{},{}]", c.in_channels, c.input_size, c.input_size),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Records the full forward pass on `g` for a `[B,C,H,W]` batch node.
    pub fn forward(&self, g: &mut Graph, batch: NodeId) -> Result<ForwardNodes> {
        self.check_input(g.value(batch).shape())?;
        let params: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.tensor.clone())).collect();
        let sp = self.config.stem_kernel / 2;
        let bp = self.config.block_kernel / 2;

        let mut x = g.conv2d(batch, params[0], 1, sp)?;
        x = g.bias_add(x, params[1])?;
        x = g.relu(x)?;
        x = g.maxpool2d(x, self.config.pool, self.config.pool)?;
        for b in 0..self.config.residual_blocks {
            let i = 2 + 4 * b;
            let mut h = g.conv2d(x, params[i], 1, bp)?;
            h = g.bias_add(h, params[i + 1])?;
            h = g.relu(h)?;
            h = g.conv2d(h, params[i + 2], 1, bp)?;
            h = g.bias_add(h, params[i + 3])?;
            let sum = g.add(x, h)?;
            x = g.relu(sum)?;
        }
        let conv_maps = x;
        let features = g.global_avg_pool(conv_maps)?;

        let li = self.head_index(Head::Lesion);
        let s = g.matmul(features, params[li])?;
        let lesion_logits = g.bias_add(s, params[li + 1])?;
        let oi = self.head_index(Head::Location);
        let t = g.matmul(features, params[oi])?;
        let location_logits = g.bias_add(t, params[oi + 1])?;

        Ok(ForwardNodes {
            lesion_logits,
            location_logits,
            features,
            conv_maps,
            params,
        })
    }

    pub fn infer(&self, batch: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, x)?;
        Ok(Inference {
            lesion_logits: g.value(f.lesion_logits).clone(),
            location_logits: g.value(f.location_logits).clone(),
            features: g.value(f.features).clone(),
            conv_maps: g.value(f.conv_maps).clone(),
        })
    }

    /// Adds the gradients from the last backward pass on `g` into the
    /// parameter gradient buffers.
    pub fn absorb_grads(&mut self, g: &Graph, nodes: &ForwardNodes) -> Result<()> {
        for (p, &id) in self.params.iter_mut().zip(&nodes.params) {
            if let Some(grad) = g.grad(id) {
                p.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}
