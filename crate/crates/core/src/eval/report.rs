//! JSON metric reports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::metrics::{map_class, map_image, top_k_accuracy};
use super::scores::ScoreMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// `None` when the class has no positives in the evaluated set.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionReport {
    pub map_class: f64,
    pub map_image: f64,
    pub per_class: Vec<ClassAp>,
    pub excluded_classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    pub top1: f64,
    /// Absent with fewer than three locations.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top3: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lesion: Option<LesionReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub location: Option<LocationReport>,
}

/// Labels of the dataset samples named by `ids`, in that order.
fn align<'a>(ds: &'a Dataset, ids: &[String]) -> Result<Vec<&'a crate::data::Sample>> {
    let by_id: HashMap<&str, usize> = ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&i| &ds.samples[i])
                .ok_or_else(|| Error::DimensionMismatch(format!("scored id `{id}` not in dataset")))
        })
        .collect()
}

pub fn lesion_report(s: &ScoreMatrix, ds: &Dataset) -> Result<LesionReport> {
    if s.classes != ds.lesion_names {
        return Err(Error::DimensionMismatch("score columns differ from lesion names".into()));
    }
    let u: Vec<Vec<u8>> = align(ds, &s.ids)?.iter().map(|x| x.lesions.clone()).collect();
    let by_class = map_class(s, &u)?;
    let by_image = map_image(s, &u)?;
    Ok(LesionReport {
        map_class: by_class.mean,
        map_image: by_image.mean,
        per_class: s
            .classes
            .iter()
            .zip(&by_class.per_item)
            .map(|(c, ap)| ClassAp { class: c.clone(), ap: *ap })
            .collect(),
        excluded_classes: by_class.excluded.iter().map(|&j| s.classes[j].clone()).collect(),
    })
}

pub fn location_report(s: &ScoreMatrix, ds: &Dataset) -> Result<LocationReport> {
    if s.classes != ds.location_names {
        return Err(Error::DimensionMismatch("score columns differ from location names".into()));
    }
    let v: Vec<usize> = align(ds, &s.ids)?.iter().map(|x| x.location).collect();
    Ok(LocationReport {
        top1: top_k_accuracy(s, &v, 1)?,
        top3: if s.num_classes() >= 3 { Some(top_k_accuracy(s, &v, 3)?) } else { None },
    })
}

impl MetricReport {
    pub fn from_scores(lesion: Option<&ScoreMatrix>, location: Option<&ScoreMatrix>, ds: &Dataset) -> Result<Self> {
        let samples = lesion.or(location).map_or(0, ScoreMatrix::len);
        Ok(MetricReport {
            samples,
            lesion: lesion.map(|s| lesion_report(s, ds)).transpose()?,
            location: location.map(|s| location_report(s, ds)).transpose()?,
        })
    }
}
