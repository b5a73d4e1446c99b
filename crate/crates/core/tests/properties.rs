use mtlkit::checkpoint::Checkpoint;
use mtlkit::config::RunConfig;
use mtlkit::data::{Dataset, Sample};
use mtlkit::eval::{
    average_precision, correlation_matrix, ensemble_max, ensemble_mean, map_class, map_image, top_k_accuracy,
    ScoreMatrix,
};
use mtlkit::network::Head;
use mtlkit::objective::softmax_activations;
use mtlkit::tensor::Tensor;
use mtlkit::train::initial_net;
use proptest::prelude::*;

// precision at each positive, ties broken toward the lower index
fn brute_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
    let q = rows[0].len();
    ScoreMatrix::new(
        Head::Lesion,
        (0..rows.len()).map(|i| format!("i{i}")).collect(),
        (0..q).map(|j| format!("c{j}")).collect(),
        rows,
    )
    .unwrap()
}

fn scored_labels() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<u8>>)> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, p), n),
            prop::collection::vec(prop::collection::vec(0u8..2, p), n),
        )
    })
}

fn dataset(lesions: Vec<Vec<u8>>, locations: Vec<usize>, q: usize) -> Dataset {
    let p = lesions[0].len();
    Dataset {
        samples: lesions
            .into_iter()
            .zip(locations)
            .enumerate()
            .map(|(i, (u, v))| Sample {
                id: format!("s{i}"),
                image: Tensor::zeros(&[1, 2, 2]),
                lesions: u,
                location: v,
            })
            .collect(),
        lesion_names: (0..p).map(|i| format!("l{i}")).collect(),
        location_names: (0..q).map(|j| format!("b{j}")).collect(),
        folds: None,
    }
}

proptest! {
    #[test]
    fn ap_matches_brute_force(scores in prop::collection::vec(0i32..4, 1..20), bits in prop::collection::vec(0u8..2, 20)) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 * 0.25).collect();
        let labels = &bits[..scores.len()];
        match brute_ap(&scores, labels) {
            Some(want) => {
                let got = average_precision(&scores, labels).unwrap();
                prop_assert!((got - want).abs() < 1e-12);
                prop_assert!(got > 0.0 && got <= 1.0);
            }
            None => prop_assert!(average_precision(&scores, labels).is_err()),
        }
    }

    #[test]
    fn ap_ignores_strictly_increasing_transforms(scores in prop::collection::vec(-5.0f64..5.0, 1..25), bits in prop::collection::vec(0u8..2, 25)) {
        let labels = &bits[..scores.len()];
        prop_assume!(labels.contains(&1));
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        let a = average_precision(&scores, labels).unwrap();
        let b = average_precision(&moved, labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mean_ap_averages_the_non_excluded_items((rows, u) in scored_labels()) {
        let s = matrix(rows.clone());
        if let Ok(m) = map_class(&s, &u) {
            let aps: Vec<f64> = (0..u[0].len())
                .filter_map(|j| brute_ap(&s.column(j), &u.iter().map(|r| r[j]).collect::<Vec<_>>()))
                .collect();
            prop_assert!((m.mean - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12);
            prop_assert_eq!(m.per_item.len() - m.excluded.len(), aps.len());
        }
        if let Ok(m) = map_image(&s, &u) {
            let aps: Vec<f64> = rows.iter().zip(&u).filter_map(|(r, l)| brute_ap(r, l)).collect();
            prop_assert!((m.mean - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn ensembles_are_commutative_and_idempotent((a, _) in scored_labels(), seed in 0u64..1000) {
        let b: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v * ((seed + (i * 7 + j) as u64) % 5) as f64 - 1.0).collect())
            .collect();
        let (sa, sb) = (matrix(a), matrix(b));
        prop_assert_eq!(ensemble_max(&sa, &sb).unwrap(), ensemble_max(&sb, &sa).unwrap());
        prop_assert_eq!(ensemble_max(&sa, &sa).unwrap(), sa.clone());
        prop_assert_eq!(ensemble_mean(&sa, &sa).unwrap(), sa.clone());
        let m = ensemble_max(&sa, &sb).unwrap();
        for ((rm, ra), rb) in m.rows.iter().zip(&sa.rows).zip(&sb.rows) {
            for ((x, y), z) in rm.iter().zip(ra).zip(rb) {
                prop_assert!(x >= y && x >= z);
            }
        }
    }

    #[test]
    fn top_k_accuracy_grows_with_k(rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 1..15), locs in prop::collection::vec(0usize..5, 15)) {
        let v: Vec<usize> = locs[..rows.len()].iter().map(|l| l + 1).collect();
        let s = matrix(rows);
        let acc: Vec<f64> = (1..=5).map(|k| top_k_accuracy(&s, &v, k).unwrap()).collect();
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(acc[4], 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12), shift in -1e3f64..1e3) {
        let t = Tensor::new(vec![3, 4], values.clone()).unwrap();
        let shifted = Tensor::new(vec![3, 4], values.iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (softmax_activations(&t), softmax_activations(&shifted));
        for row in a.values().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn folds_partition_the_samples(n in 2usize..60, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let mut ds = dataset(vec![vec![1]; n], vec![1; n], 1);
        ds.assign_folds(k, seed).unwrap();
        let mut seen = vec![0; n];
        let mut sizes = Vec::new();
        for f in 0..k {
            let (train, test) = ds.fold_split(f).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            for i in test {
                seen[i] += 1;
            }
            sizes.push(n - train.len());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn correlation_rows_are_distributions(n in 1usize..40, p in 1usize..5, q in 1usize..5, seed in any::<u64>()) {
        let bit = |i: usize, j: usize| ((seed >> ((i * 3 + j) % 60)) & 1) as u8;
        let lesions: Vec<Vec<u8>> = (0..n)
            .map(|i| {
                let mut u: Vec<u8> = (0..p).map(|j| bit(i, j)).collect();
                u[i % p] = 1;
                u
            })
            .collect();
        let locations: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize % 11) % q + 1).collect();
        let c = correlation_matrix(&dataset(lesions, locations, q));
        for (i, row) in c.r.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if c.empty_rows.contains(&i) {
                prop_assert_eq!(sum, 0.0);
            } else {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), epoch in 0usize..100, means in prop::collection::vec(0.0f64..1.0, 3)) {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let ck = Checkpoint { net: initial_net(&cfg, 3, 2).unwrap(), channel_means: means, optimizer: None, epoch };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
