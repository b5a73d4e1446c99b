//! Pooled-feature nearest-neighbour retrieval and class activation maps.

use serde::{Deserialize, Serialize};

use crate::data::{center_crop, resize_bilinear, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::network::{DualHeadNet, Head};
use crate::tensor::Tensor;

const INDEX_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    /// Lesion names carried by each indexed image.
    pub lesions: Vec<Vec<String>>,
}

impl FeatureIndex {
    pub fn new(dim: usize, features: Vec<Vec<f64>>, ids: Vec<String>, lesions: Vec<Vec<String>>) -> Result<Self> {
        if features.len() != ids.len() || lesions.len() != ids.len() {
            return Err(Error::DimensionMismatch("features, ids and labels differ in length".into()));
        }
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch(format!("every feature row needs {dim} values")));
        }
        Ok(FeatureIndex { dim, features, ids, lesions })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pooled trunk features of every sample, from its center-crop view.
pub fn build_index(net: &DualHeadNet, ds: &Dataset, means: &[f64], aug: &AugmentConfig) -> Result<FeatureIndex> {
    let dim = net.feature_dim();
    let mut features = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(INDEX_CHUNK) {
        let views = chunk
            .iter()
            .map(|s| center_crop(&s.image, aug, means))
            .collect::<Result<Vec<_>>>()?;
        let out = net.infer(&Tensor::stack(&views)?)?;
        features.extend(out.features.values().chunks_exact(dim).map(<[f64]>::to_vec));
    }
    let lesions = ds
        .samples
        .iter()
        .map(|s| {
            s.lesions
                .iter()
                .zip(&ds.lesion_names)
                .filter(|(&b, _)| b == 1)
                .map(|(_, n)| n.clone())
                .collect()
        })
        .collect();
    FeatureIndex::new(dim, features, ds.ids(), lesions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The `k` indexed images closest to `query`, nearest first, ties by
/// ascending id.
pub fn retrieve(index: &FeatureIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 || k > index.len() {
        return Err(Error::BadK { k, max: index.len() });
    }
    if query.len() != index.dim {
        return Err(Error::DimensionMismatch(format!(
            "query has {} values, index {}",
            query.len(),
            index.dim
        )));
    }
    let mut all: Vec<Neighbor> = index
        .features
        .iter()
        .zip(&index.ids)
        .map(|(f, id)| Neighbor {
            id: id.clone(),
            distance: euclidean(f, query),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    all.truncate(k);
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedNeighbor {
    pub id: String,
    pub distance: f64,
    /// Whether the neighbour shares at least one lesion with the query.
    pub shares_lesion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub lesions: Vec<String>,
    pub neighbors: Vec<RetrievedNeighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub queries: Vec<QueryResult>,
    /// Share of all returned neighbours that share a lesion with their query.
    pub match_rate: f64,
}

/// Retrieves `k` neighbours (at most the index size) for every query row
/// and flags each by lesion overlap.
pub fn retrieval_report(index: &FeatureIndex, queries: &FeatureIndex, k: usize) -> Result<RetrievalReport> {
    let k = k.min(index.len());
    let mut out = Vec::with_capacity(queries.len());
    let (mut matched, mut total) = (0usize, 0usize);
    let by_id: std::collections::HashMap<&str, usize> =
        index.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    for ((q, id), labels) in queries.features.iter().zip(&queries.ids).zip(&queries.lesions) {
        let neighbors = if k == 0 { Vec::new() } else { retrieve(index, q, k)? };
        let neighbors: Vec<RetrievedNeighbor> = neighbors
            .into_iter()
            .map(|n| {
                let theirs = &index.lesions[by_id[n.id.as_str()]];
                let shares_lesion = labels.iter().any(|l| theirs.contains(l));
                RetrievedNeighbor {
                    id: n.id,
                    distance: n.distance,
                    shares_lesion,
                }
            })
            .collect();
        matched += neighbors.iter().filter(|n| n.shares_lesion).count();
        total += neighbors.len();
        out.push(QueryResult {
            id: id.clone(),
            lesions: labels.clone(),
            neighbors,
        });
    }
    Ok(RetrievalReport {
        k,
        queries: out,
        match_rate: if total == 0 { 0.0 } else { matched as f64 / total as f64 },
    })
}

/// `Σ_k weights[k]·maps[k]` over a `[K, h, w]` activation tensor.
pub fn class_activation(conv_maps: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    let &[k, h, w] = conv_maps.shape() else {
        return Err(Error::shape("[K,h,w] activation maps", conv_maps.shape()));
    };
    if weights.len() != k {
        return Err(Error::shape(format!("{k} channel weights"), weights.len()));
    }
    let mut out = vec![0.0; h * w];
    for (plane, &wk) in conv_maps.values().chunks_exact(h * w).zip(weights) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += wk * v;
        }
    }
    Ok(out)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all 0.5.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub head: Head,
    pub class_index: usize,
    pub height: usize,
    pub width: usize,
    /// Normalized map, row-major.
    pub map: Vec<f64>,
    /// Bilinear upsampling of `map` to the network input size, when asked.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub upsampled: Option<Vec<f64>>,
}

/// Class activation map of `class_index` on `head` for one preprocessed
/// `[C, H, W]` network input. Head biases are ignored.
pub fn attention(net: &DualHeadNet, view: &Tensor, head: Head, class_index: usize, upsample: bool) -> Result<AttentionMap> {
    let count = net.num_classes(head);
    if class_index >= count {
        return Err(Error::BadClass {
            index: class_index,
            count,
        });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(view.shape());
    let out = net.infer(&view.clone().reshape(shape)?)?;
    let maps = out.conv_maps;
    let (k, h, w) = (maps.shape()[1], maps.shape()[2], maps.shape()[3]);
    let maps = maps.reshape(vec![k, h, w])?;
    let weights = net.head_weight(head);
    let column: Vec<f64> = (0..k).map(|i| weights.values()[i * count + class_index]).collect();
    let map = normalize_map(&class_activation(&maps, &column)?);
    let upsampled = if upsample {
        let input = net.config().input_size;
        let t = Tensor::new(vec![1, h, w], map.clone())?;
        Some(resize_bilinear(&t, input, input)?.into_values())
    } else {
        None
    };
    Ok(AttentionMap {
        head,
        class_index,
        height: h,
        width: w,
        map,
        upsampled,
    })
}
