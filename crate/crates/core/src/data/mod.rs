//! Samples, datasets, fold assignment, file formats, the synthetic generator
//! and image preprocessing.

mod augment;
mod manifest;
mod ppm;
mod synth;

pub use augment::{
    augment, center_crop, channel_means, crop, flip_horizontal, resize_bilinear, resize_shorter,
    subtract_means, ten_crop, AugmentConfig,
};
pub use manifest::{load_manifest, write_manifest, MANIFEST_FILE};
pub use ppm::{read_ppm, write_pgm, write_ppm};
pub use synth::{strong_correlation, synthesize, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`, values nominally in `[0, 1]`.
    pub image: Tensor,
    /// Binary lesion indicators, length P, at least one set.
    pub lesions: Vec<u8>,
    /// Body location, 1-based.
    pub location: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub lesion_names: Vec<String>,
    pub location_names: Vec<String>,
    /// Fold index per sample, when assigned.
    pub folds: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_lesions(&self) -> usize {
        self.lesion_names.len()
    }

    pub fn num_locations(&self) -> usize {
        self.location_names.len()
    }

    /// Checks every sample against the label vocabularies.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.num_lesions(), self.num_locations());
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::BadLabel(format!("duplicate sample id `{}`", s.id)));
            }
            if s.lesions.len() != p || s.lesions.iter().any(|&b| b > 1) {
                return Err(Error::BadLabel(format!("sample `{}` needs {p} binary lesion flags", s.id)));
            }
            if !s.lesions.contains(&1) {
                return Err(Error::BadLabel(format!("sample `{}` has no lesion", s.id)));
            }
            if !(1..=q).contains(&s.location) {
                return Err(Error::BadLabel(format!("sample `{}` location {} outside 1..={q}", s.id, s.location)));
            }
            if s.image.ndim() != 3 {
                return Err(Error::shape("[C,H,W] image", s.image.shape()));
            }
        }
        if let Some(f) = &self.folds {
            if f.len() != self.len() {
                return Err(Error::BadConfig("fold assignment length differs from sample count".into()));
            }
        }
        Ok(())
    }

    /// Shuffles sample positions with `seed` and deals them round-robin into
    /// `count` folds, so fold sizes differ by at most one.
    pub fn assign_folds(&mut self, count: usize, seed: u64) -> Result<()> {
        if count < 2 || count > self.len() {
            return Err(Error::BadConfig(format!(
                "fold count {count} must be in 2..={}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut folds = vec![0; self.len()];
        for (pos, &i) in order.iter().enumerate() {
            folds[i] = pos % count;
        }
        self.folds = Some(folds);
        Ok(())
    }

    pub fn fold_count(&self) -> usize {
        self.folds
            .as_ref()
            .and_then(|f| f.iter().max())
            .map_or(0, |m| m + 1)
    }

    /// `(train, test)` sample indices for held-out fold `fold`.
    pub fn fold_split(&self, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let folds = self
            .folds
            .as_ref()
            .ok_or_else(|| Error::BadConfig("folds not assigned".into()))?;
        if fold >= self.fold_count() {
            return Err(Error::BadConfig(format!("fold {fold} out of range")));
        }
        Ok((0..self.len()).partition(|&i| folds[i] != fold))
    }

    /// New dataset holding the given samples in the given order, same
    /// vocabularies, no folds.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            lesion_names: self.lesion_names.clone(),
            location_names: self.location_names.clone(),
            folds: None,
        }
    }

    pub fn lesion_matrix(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.lesions.clone()).collect()
    }

    pub fn locations(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.location).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}
