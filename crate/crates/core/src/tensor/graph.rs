use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds and their static parameters.
///
/// Input arity and shape rules:
/// - `MatMul`: `[m,k] x [k,n] -> [m,n]`
/// - `Conv2d`: input `[B,Ci,H,W]`, weight `[Co,Ci,kh,kw]` -> `[B,Co,Ho,Wo]`
/// - `MaxPool2d`: `[B,C,H,W]` -> `[B,C,Ho,Wo]`, no padding
/// - `GlobalAvgPool`: `[B,C,H,W]` -> `[B,C]`
/// - `Relu`, `Scale`: any shape, elementwise
/// - `Add`, `Mul`: two inputs of identical shape
/// - `BiasAdd`: input of rank >= 2 plus a bias of length `shape[1]`
/// - `Flatten`: `[B,...]` -> `[B, rest]`
/// - `Sum`, `SumSquares`: any shape -> `[1]`
/// - `SigmoidCrossEntropy`: logits `[B,P]`, targets in {0,1} -> batch mean `[1]`
/// - `SoftmaxCrossEntropy`: logits `[B,Q]`, zero-based classes -> batch mean `[1]`
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { size: usize, stride: usize },
    GlobalAvgPool,
    Relu,
    Add,
    Mul,
    Scale(f64),
    BiasAdd,
    Flatten,
    Sum,
    SumSquares,
    SigmoidCrossEntropy { targets: Vec<f64> },
    SoftmaxCrossEntropy { classes: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    /// Source index per output element, for max pooling.
    argmax: Vec<usize>,
}

/// Append-only record of operations. Nodes are stored in creation order, so
/// the sequence is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(None, vec![], value, true, vec![])
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(None, vec![], value, false, vec![])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`.
    ///
    /// Leaves that require gradients but were not reached get zeros.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        kind: Option<OpKind>,
        inputs: Vec<NodeId>,
        value: Tensor,
        requires_grad: bool,
        argmax: Vec<usize>,
    ) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
            argmax,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_ids(&self, ids: &[NodeId]) -> Result<()> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(Error::shape(
                format!("node id < {}", self.nodes.len()),
                id.0,
            )),
            None => Ok(()),
        }
    }

    /// Computes `kind` on `inputs` and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_ids(inputs)?;
        let arity = match kind {
            OpKind::MatMul | OpKind::Conv2d { .. } | OpKind::Add | OpKind::Mul | OpKind::BiasAdd => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(format!("{arity} inputs"), inputs.len()));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let mut argmax = Vec::new();
        let out = match &kind {
            OpKind::MatMul => {
                let (a, b) = (vals[0], vals[1]);
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        expected: "[m,k] x [k,n]".into(),
                        got: format!("{:?} x {:?}", a.shape(), b.shape()),
                    });
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], kernels::matmul(a.values(), b.values(), m, k, n))?
            }
            OpKind::Conv2d { stride, padding } => {
                let g = conv_geom(vals[0], vals[1], *stride, *padding)?;
                let out = kernels::conv2d_forward(&g, vals[0].values(), vals[1].values());
                Tensor::new(vec![g.batch, g.out_ch, g.out_h(), g.out_w()], out)?
            }
            OpKind::MaxPool2d { size, stride } => {
                let x = vals[0];
                if x.ndim() != 4 || *size == 0 || *stride == 0 {
                    return Err(Error::shape("[B,C,H,W] with positive window", x.shape()));
                }
                if x.shape()[2] < *size || x.shape()[3] < *size {
                    return Err(Error::shape(format!("spatial dims >= {size}"), x.shape()));
                }
                let (v, arg, [oh, ow]) = kernels::maxpool_forward(x.shape(), x.values(), *size, *stride);
                argmax = arg;
                Tensor::new(vec![x.shape()[0], x.shape()[1], oh, ow], v)?
            }
            OpKind::GlobalAvgPool => {
                let x = vals[0];
                if x.ndim() != 4 {
                    return Err(Error::shape("[B,C,H,W]", x.shape()));
                }
                let hw = x.shape()[2] * x.shape()[3];
                let v = x
                    .values()
                    .chunks_exact(hw)
                    .map(|p| p.iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::new(vec![x.shape()[0], x.shape()[1]], v)?
            }
            OpKind::Relu => map(vals[0], |v| if v > 0.0 { v } else { 0.0 }),
            OpKind::Scale(f) => map(vals[0], |v| v * f),
            OpKind::Add | OpKind::Mul => {
                let (a, b) = (vals[0], vals[1]);
                if a.shape() != b.shape() {
                    return Err(Error::shape(format!("{:?}", a.shape()), b.shape()));
                }
                let v = a.values().iter().zip(b.values());
                let v = if kind == OpKind::Add {
                    v.map(|(x, y)| x + y).collect()
                } else {
                    v.map(|(x, y)| x * y).collect()
                };
                Tensor::new(a.shape().to_vec(), v)?
            }
            OpKind::BiasAdd => {
                let (x, b) = (vals[0], vals[1]);
                if x.ndim() < 2 || b.len() != x.shape()[1] {
                    return Err(Error::ShapeMismatch {
                        expected: "rank>=2 input with bias over axis 1".into(),
                        got: format!("{:?} + {:?}", x.shape(), b.shape()),
                    });
                }
                let (c, inner) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
                let mut v = x.values().to_vec();
                for (i, chunk) in v.chunks_exact_mut(inner).enumerate() {
                    let bv = b.values()[i % c];
                    chunk.iter_mut().for_each(|e| *e += bv);
                }
                Tensor::new(x.shape().to_vec(), v)?
            }
            OpKind::Flatten => {
                let x = vals[0];
                let rest = x.shape()[1..].iter().product::<usize>().max(1);
                Tensor::new(vec![x.shape()[0], rest], x.values().to_vec())?
            }
            OpKind::Sum => Tensor::scalar(vals[0].values().iter().sum()),
            OpKind::SumSquares => Tensor::scalar(vals[0].values().iter().map(|v| v * v).sum()),
            OpKind::SigmoidCrossEntropy { targets } => {
                let s = vals[0];
                if s.ndim() != 2 || targets.len() != s.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("[B,P] logits with {} targets", targets.len()),
                        got: format!("{:?}", s.shape()),
                    });
                }
                let total: f64 = s
                    .values()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &u)| kernels::softplus(x) - u * x)
                    .sum();
                Tensor::scalar(total / s.shape()[0] as f64)
            }
            OpKind::SoftmaxCrossEntropy { classes } => {
                let t = vals[0];
                if t.ndim() != 2 || classes.len() != t.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        expected: format!("[{},Q] logits", classes.len()),
                        got: format!("{:?}", t.shape()),
                    });
                }
                let q = t.shape()[1];
                if let Some(&c) = classes.iter().find(|&&c| c >= q) {
                    return Err(Error::BadLabel(format!("class {c} out of range for {q} logits")));
                }
                let total: f64 = t
                    .values()
                    .chunks_exact(q)
                    .zip(classes)
                    .map(|(row, &c)| kernels::log_sum_exp(row) - row[c])
                    .sum();
                Tensor::scalar(total / classes.len() as f64)
            }
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Some(kind), inputs.to_vec(), out, requires_grad, argmax))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.apply(OpKind::Conv2d { stride, padding }, &[x, w])
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.apply(OpKind::MaxPool2d { size, stride }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::GlobalAvgPool, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(factor), &[x])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(OpKind::BiasAdd, &[x, bias])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Flatten, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumSquares, &[x])
    }

    /// Reverse sweep from a scalar root. Previous gradients are discarded;
    /// fan-out contributions are summed.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check_ids(&[root])?;
        let root_len = self.nodes[root.0].value.len();
        if root_len != 1 {
            return Err(Error::NonScalarRoot { len: root_len });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(kind) = &node.kind {
                let contributions = self.local_grads(node, kind, &dy);
                for (input, g) in node.inputs.iter().zip(contributions) {
                    if let (Some(g), true) = (g, self.nodes[input.0].requires_grad) {
                        accumulate(&mut grads[input.0], g);
                    }
                }
            }
            grads[idx] = Some(dy);
        }

        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && node.kind.is_none() && g.is_none() {
                *g = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Vector-Jacobian products for each input of `node`. `None` where the
    /// input does not require a gradient.
    fn local_grads(&self, node: &Node, kind: &OpKind, dy: &[f64]) -> Vec<Option<Vec<f64>>> {
        let want = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        match kind {
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                vec![
                    want(0).then(|| kernels::matmul_grad_a(dy, b.values(), m, k, n)),
                    want(1).then(|| kernels::matmul_grad_b(a.values(), dy, m, k, n)),
                ]
            }
            OpKind::Conv2d { stride, padding } => {
                let (x, w) = (val(0), val(1));
                let geom = conv_geom(x, w, *stride, *padding).expect("validated in forward");
                let (dx, dw) =
                    kernels::conv2d_backward(&geom, x.values(), w.values(), dy, want(0), want(1));
                vec![dx, dw]
            }
            OpKind::MaxPool2d { .. } => {
                let mut dx = vec![0.0; val(0).len()];
                for (&src, &d) in node.argmax.iter().zip(dy) {
                    dx[src] += d;
                }
                vec![Some(dx)]
            }
            OpKind::GlobalAvgPool => {
                let x = val(0);
                let hw = x.shape()[2] * x.shape()[3];
                let inv = 1.0 / hw as f64;
                let dx = dy.iter().flat_map(|&d| std::iter::repeat(d * inv).take(hw)).collect();
                vec![Some(dx)]
            }
            OpKind::Relu => {
                let dx = val(0)
                    .values()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            OpKind::Scale(f) => vec![Some(dy.iter().map(|d| d * f).collect())],
            OpKind::Add => vec![want(0).then(|| dy.to_vec()), want(1).then(|| dy.to_vec())],
            OpKind::Mul => {
                let (a, b) = (val(0).values(), val(1).values());
                vec![
                    want(0).then(|| dy.iter().zip(b).map(|(d, y)| d * y).collect()),
                    want(1).then(|| dy.iter().zip(a).map(|(d, x)| d * x).collect()),
                ]
            }
            OpKind::BiasAdd => {
                let x = val(0);
                let (c, inner) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
                let db = want(1).then(|| {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in dy.chunks_exact(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    db
                });
                vec![want(0).then(|| dy.to_vec()), db]
            }
            OpKind::Flatten => vec![Some(dy.to_vec())],
            OpKind::Sum => vec![Some(vec![dy[0]; val(0).len()])],
            OpKind::SumSquares => {
                vec![Some(val(0).values().iter().map(|v| 2.0 * v * dy[0]).collect())]
            }
            OpKind::SigmoidCrossEntropy { targets } => {
                let s = val(0);
                let scale = dy[0] / s.shape()[0] as f64;
                let dx = s
                    .values()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &u)| (kernels::sigmoid(x) - u) * scale)
                    .collect();
                vec![Some(dx)]
            }
            OpKind::SoftmaxCrossEntropy { classes } => {
                let t = val(0);
                let q = t.shape()[1];
                let scale = dy[0] / classes.len() as f64;
                let mut dx = Vec::with_capacity(t.len());
                for (row, &c) in t.values().chunks_exact(q).zip(classes) {
                    let lse = kernels::log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        dx.push((p - if j == c { 1.0 } else { 0.0 }) * scale);
                    }
                }
                vec![Some(dx)]
            }
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.values().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
        return Err(Error::ShapeMismatch {
            expected: "[B,C,H,W] input with [Co,C,kh,kw] weight".into(),
            got: format!("{:?} * {:?}", x.shape(), w.shape()),
        });
    }
    let g = ConvGeom {
        batch: x.shape()[0],
        in_ch: x.shape()[1],
        height: x.shape()[2],
        width: x.shape()[3],
        out_ch: w.shape()[0],
        kh: w.shape()[2],
        kw: w.shape()[3],
        stride,
        padding,
    };
    if g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw {
        return Err(Error::ShapeMismatch {
            expected: format!("padded input at least {}x{}", g.kh, g.kw),
            got: format!("{:?}", x.shape()),
        });
    }
    Ok(g)
}
