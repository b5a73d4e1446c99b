mod common;

use common::{fd_check, net_fd_error, rng, uniform, FD_TOL};
use mtlkit::network::{DualHeadNet, NetConfig};
use mtlkit::objective::{joint_loss, ObjectiveConfig, TaskMode};
use mtlkit::tensor::{Graph, NodeId, OpKind, Tensor};

/// Reduces a tensor node to a scalar via a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let r = g.constant(uniform(&mut rng(seed), &shape));
    let m = g.mul(x, r).unwrap();
    g.sum(m).unwrap()
}

fn check(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let err = fd_check(&inputs, build);
    assert!(err < FD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul() {
    let mut r = rng(1);
    let inputs = vec![uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 2])];
    check("matmul", inputs, |g, x| {
        let y = g.matmul(x[0], x[1]).unwrap();
        project(g, y, 100)
    });
}

#[test]
fn conv2d_variants() {
    for (i, &(stride, padding)) in [(1, 0), (1, 1), (2, 1)].iter().enumerate() {
        let mut r = rng(10 + i as u64);
        let inputs = vec![uniform(&mut r, &[2, 2, 5, 5]), uniform(&mut r, &[3, 2, 3, 3])];
        check("conv2d", inputs, |g, x| {
            let y = g.conv2d(x[0], x[1], stride, padding).unwrap();
            project(g, y, 101)
        });
    }
}

#[test]
fn maxpool2d() {
    let mut r = rng(2);
    let inputs = vec![uniform(&mut r, &[2, 2, 4, 6])];
    check("maxpool2d", inputs, |g, x| {
        let y = g.maxpool2d(x[0], 2, 2).unwrap();
        project(g, y, 102)
    });
}

#[test]
fn global_avg_pool() {
    let inputs = vec![uniform(&mut rng(3), &[2, 3, 4, 4])];
    check("global_avg_pool", inputs, |g, x| {
        let y = g.global_avg_pool(x[0]).unwrap();
        project(g, y, 103)
    });
}

#[test]
fn relu() {
    let inputs = vec![uniform(&mut rng(4), &[5, 7])];
    check("relu", inputs, |g, x| {
        let y = g.relu(x[0]).unwrap();
        project(g, y, 104)
    });
}

#[test]
fn add_scale_mul() {
    let mut r = rng(5);
    let inputs = vec![uniform(&mut r, &[3, 3]), uniform(&mut r, &[3, 3])];
    check("add", inputs.clone(), |g, x| {
        let y = g.add(x[0], x[1]).unwrap();
        project(g, y, 105)
    });
    check("scale", inputs.clone(), |g, x| {
        let y = g.scale(x[0], -2.5).unwrap();
        project(g, y, 106)
    });
    check("mul", inputs, |g, x| {
        let y = g.mul(x[0], x[1]).unwrap();
        project(g, y, 107)
    });
}

#[test]
fn bias_add_and_flatten() {
    let mut r = rng(6);
    let inputs = vec![uniform(&mut r, &[2, 3, 2, 2]), uniform(&mut r, &[3])];
    check("bias_add", inputs, |g, x| {
        let y = g.bias_add(x[0], x[1]).unwrap();
        let f = g.flatten(y).unwrap();
        project(g, f, 108)
    });
}

#[test]
fn sum_squares() {
    let inputs = vec![uniform(&mut rng(7), &[4, 2])];
    check("sum_squares", inputs, |g, x| g.sum_squares(x[0]).unwrap());
}

#[test]
fn loss_ops() {
    let mut r = rng(8);
    let logits = uniform(&mut r, &[3, 4]);
    let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
    check("sigmoid_ce", vec![logits.clone()], |g, x| {
        g.apply(OpKind::SigmoidCrossEntropy { targets: targets.clone() }, &[x[0]]).unwrap()
    });
    check("softmax_ce", vec![logits], |g, x| {
        g.apply(OpKind::SoftmaxCrossEntropy { classes: vec![0, 3, 2] }, &[x[0]]).unwrap()
    });
}

fn small_config() -> NetConfig {
    NetConfig {
        input_size: 8,
        ..NetConfig::default()
    }
}

#[test]
fn full_network_joint_loss() {
    for cfg in [
        ObjectiveConfig { gamma: 0.0, ..ObjectiveConfig::default() },
        ObjectiveConfig { gamma: 0.05, decoupled_reg: false, ..ObjectiveConfig::default() },
        ObjectiveConfig { mode: TaskMode::LesionOnly, gamma: 0.0, aux_weight: 0.5, ..ObjectiveConfig::default() },
    ] {
        let err = net_fd_error(&small_config(), &cfg);
        assert!(err < FD_TOL, "{cfg:?}: relative error {err:e}");
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let net = DualHeadNet::build(small_config(), 6, 5, 3).unwrap();
    let batch = uniform(&mut rng(4), &[2, 3, 8, 8]);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let j = joint_loss(&net, &mut g, x, &[vec![1, 0, 0, 0, 0, 0], vec![0, 1, 1, 0, 0, 0]], &[2, 4], &ObjectiveConfig::default()).unwrap();
        g.backward(j.root).unwrap();
        let grads: Vec<Vec<u64>> = j
            .forward
            .params
            .iter()
            .map(|&p| g.grad(p).unwrap().iter().map(|v| v.to_bits()).collect())
            .collect();
        (g.value(j.root).item().unwrap().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
