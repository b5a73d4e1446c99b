//! Test-only oracles. Nothing here calls into the code paths it checks
//! beyond building the function being differentiated.
#![allow(dead_code)]

use mtlkit::tensor::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Compares reverse-mode gradients of a scalar-valued graph builder with
/// central finite differences. Returns the worst
/// `|g_auto - g_fd| / max(1, |g_fd|)` over every input coordinate.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.value(root).item().expect("scalar root")
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &ids);
    g.backward(root).expect("backward");
    let auto: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let err = (auto[i][j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Brute-force average precision straight from the definition: walk every
/// cutoff of the descending ranking, recompute precision and recall from
/// scratch, and sum precision times the recall increment.
pub fn brute_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return None;
    }
    // rank position of each item: count of items strictly ahead of it
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut remaining: Vec<usize> = (0..n).collect();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (a, b) = (remaining[k], remaining[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                best = k;
            }
        }
        order.push(remaining.remove(best));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for cut in 1..=n {
        let hits = order[..cut].iter().filter(|&&i| labels[i] == 1).count();
        let precision = hits as f64 / cut as f64;
        let recall = hits as f64 / total_pos as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(ap)
}

/// Brute-force class-wise mAP over columns of an N x P score matrix.
pub fn brute_map_class(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> f64 {
    let p = scores[0].len();
    let aps: Vec<f64> = (0..p)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            brute_ap(&s, &l)
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Brute-force image-wise mAP over rows.
pub fn brute_map_image(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> f64 {
    let aps: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(s, l)| brute_ap(s, l))
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Worst relative error between backward-pass gradients of the joint loss and
/// central differences taken by perturbing each network parameter in turn.
/// Uses a fixed 4-sample batch.
pub fn net_fd_error(
    net_cfg: &mtlkit::network::NetConfig,
    cfg: &mtlkit::objective::ObjectiveConfig,
) -> f64 {
    use mtlkit::network::DualHeadNet;
    use mtlkit::objective::joint_loss;

    let s = net_cfg.input_size;
    let base = DualHeadNet::build(net_cfg.clone(), 6, 5, 21).unwrap();
    let batch = uniform(&mut rng(22), &[4, net_cfg.in_channels, s, s]);
    let u = vec![
        vec![1, 0, 0, 1, 0, 0],
        vec![0, 1, 0, 0, 0, 0],
        vec![0, 0, 1, 1, 1, 0],
        vec![0, 0, 0, 0, 0, 1],
    ];
    let v = vec![1, 5, 3, 2];
    let loss = |net: &DualHeadNet| -> f64 {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let j = joint_loss(net, &mut g, x, &u, &v, cfg).unwrap();
        g.value(j.root).item().unwrap()
    };

    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let j = joint_loss(&base, &mut g, x, &u, &v, cfg).unwrap();
    g.backward(j.root).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, &leaf) in j.forward.params.iter().enumerate() {
        let auto = g.grad(leaf).unwrap();
        for k in 0..auto.len() {
            let mut plus = base.clone();
            plus.params_mut()[pi].tensor.values_mut()[k] += FD_STEP;
            let mut minus = base.clone();
            minus.params_mut()[pi].tensor.values_mut()[k] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max((auto[k] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}
