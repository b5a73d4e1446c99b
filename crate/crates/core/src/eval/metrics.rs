//! Ranking metrics, the lesion/location co-occurrence matrix and score
//! ensembling.
//!
//! Every ranking is a stable descending sort: equal scores keep ascending
//! original index order.

use serde::Serialize;

use super::scores::ScoreMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Indices of `scores` from highest to lowest, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// `Σ_j p(j)·Δr(j)` over the ranking: the mean of the precision at each
/// positive's rank.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn check_labels(s: &ScoreMatrix, u: &[Vec<u8>]) -> Result<()> {
    if u.len() != s.len() || u.iter().any(|row| row.len() != s.num_classes()) {
        return Err(Error::DimensionMismatch(format!(
            "labels must be {}x{}",
            s.len(),
            s.num_classes()
        )));
    }
    Ok(())
}

/// Mean AP plus the per-item values; `None` marks an item excluded for
/// having no positive labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanAp {
    pub mean: f64,
    pub per_item: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn mean_ap(items: impl Iterator<Item = (Vec<f64>, Vec<u8>)>) -> Result<MeanAp> {
    let mut per_item = Vec::new();
    let mut excluded = Vec::new();
    for (k, (scores, labels)) in items.enumerate() {
        match average_precision(&scores, &labels) {
            Ok(ap) => per_item.push(Some(ap)),
            Err(Error::NoPositives) => {
                per_item.push(None);
                excluded.push(k);
            }
            Err(e) => return Err(e),
        }
    }
    let kept: Vec<f64> = per_item.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(MeanAp {
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        per_item,
        excluded,
    })
}

/// Class-wise mAP: for each class, rank all images by that class's score.
/// Classes without positives are excluded and listed.
pub fn map_class(s: &ScoreMatrix, u: &[Vec<u8>]) -> Result<MeanAp> {
    check_labels(s, u)?;
    mean_ap((0..s.num_classes()).map(|j| (s.column(j), u.iter().map(|r| r[j]).collect())))
}

/// Image-wise mAP: for each image, rank all classes by that image's scores.
/// Images without positives are excluded and listed.
pub fn map_image(s: &ScoreMatrix, u: &[Vec<u8>]) -> Result<MeanAp> {
    check_labels(s, u)?;
    mean_ap(s.rows.iter().cloned().zip(u.iter().cloned()))
}

/// Fraction of images whose true location (1-based `v`) is among the `k`
/// highest-scoring classes.
pub fn top_k_accuracy(s: &ScoreMatrix, v: &[usize], k: usize) -> Result<f64> {
    let q = s.num_classes();
    if k == 0 || k > q {
        return Err(Error::BadK { k, max: q });
    }
    if v.len() != s.len() {
        return Err(Error::DimensionMismatch(format!("{} locations for {} rows", v.len(), s.len())));
    }
    if s.is_empty() {
        return Err(Error::DimensionMismatch("no images to score".into()));
    }
    let mut hits = 0usize;
    for (row, &loc) in s.rows.iter().zip(v) {
        if !(1..=q).contains(&loc) {
            return Err(Error::BadLabel(format!("location {loc} outside 1..={q}")));
        }
        let t = loc - 1;
        let ahead = (0..q)
            .filter(|&j| row[j] > row[t] || (row[j] == row[t] && j < t))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    /// `r[i][j]` = images with lesion i at location j, over images with
    /// lesion i.
    pub r: Vec<Vec<f64>>,
    /// Images carrying each lesion.
    pub lesion_counts: Vec<usize>,
    /// Images at each location.
    pub location_counts: Vec<usize>,
    /// Lesions with no images; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

pub fn correlation_matrix(ds: &Dataset) -> CorrelationMatrix {
    let (p, q) = (ds.num_lesions(), ds.num_locations());
    let mut joint = vec![vec![0usize; q]; p];
    let mut lesion_counts = vec![0usize; p];
    let mut location_counts = vec![0usize; q];
    for s in &ds.samples {
        let j = s.location - 1;
        location_counts[j] += 1;
        for (i, _) in s.lesions.iter().enumerate().filter(|(_, &b)| b == 1) {
            lesion_counts[i] += 1;
            joint[i][j] += 1;
        }
    }
    let r = joint
        .iter()
        .zip(&lesion_counts)
        .map(|(row, &n)| {
            row.iter()
                .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                .collect()
        })
        .collect();
    let empty_rows = (0..p).filter(|&i| lesion_counts[i] == 0).collect();
    CorrelationMatrix {
        r,
        lesion_counts,
        location_counts,
        empty_rows,
    }
}

impl CorrelationMatrix {
    /// CSV with header `lesion,<location names>` and one row per lesion.
    pub fn to_csv(&self, lesion_names: &[String], location_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("lesion").chain(location_names.iter().map(String::as_str));
        let err = |e: csv::Error| Error::Csv { line: 0, reason: e.to_string() };
        w.write_record(header).map_err(err)?;
        for (name, row) in lesion_names.iter().zip(&self.r) {
            w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|v| format!("{v}"))))
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv { line: 0, reason: e.to_string() })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn check_compatible(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<()> {
    if a.kind != b.kind {
        return Err(Error::MatrixMismatch(format!("{:?} vs {:?} scores", a.kind, b.kind)));
    }
    if a.classes != b.classes {
        return Err(Error::MatrixMismatch("class lists differ".into()));
    }
    if a.ids != b.ids {
        return Err(Error::MatrixMismatch("image ids differ".into()));
    }
    Ok(())
}

fn combine(a: &ScoreMatrix, b: &ScoreMatrix, f: impl Fn(f64, f64) -> f64) -> Result<ScoreMatrix> {
    check_compatible(a, b)?;
    let rows = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
        .collect();
    ScoreMatrix::new(a.kind, a.ids.clone(), a.classes.clone(), rows)
}

/// Element-wise maximum of two score matrices over the same images.
pub fn ensemble_max(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<ScoreMatrix> {
    combine(a, b, f64::max)
}

/// Element-wise arithmetic mean, for comparison with [`ensemble_max`].
pub fn ensemble_mean(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<ScoreMatrix> {
    combine(a, b, |x, y| 0.5 * (x + y))
}
