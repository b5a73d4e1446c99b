//! Synthetic dataset with a planted lesion/location correlation.
//!
//! Each sample gets a primary lesion (balanced over lesions) and a location.
//! Locations are dealt per primary lesion by largest-remainder quotas of the
//! planted row `R*[lesion]`, so the empirical matrix tracks the plant closely
//! even at small N. Secondary lesions are dealt the same way: lesion `k`
//! appears as a secondary on about `secondary_rate * count_k` samples, split
//! over locations by the quotas of `R*[k]` and placed on samples at that
//! location whose primary lesion differs. Every lesion's location histogram
//! therefore follows its planted row, primaries and secondaries alike. When a
//! location has too few eligible samples (an identity-like plant leaves none)
//! the lesion's secondary count shrinks until the quotas fit.
//!
//! Images: a location-specific tinted stripe background (random phase), the
//! lesions' glyphs stamped at random positions, Gaussian pixel noise, then
//! clamping and 8-bit quantization so the PPM round trip is exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub lesions: usize,
    pub locations: usize,
    pub samples: usize,
    /// Planted row-stochastic `lesions x locations` matrix; defaults to
    /// [`strong_correlation`] with strength 0.8.
    pub correlation: Option<Vec<Vec<f64>>>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Secondary appearances of each lesion per primary appearance.
    pub secondary_rate: f64,
    pub glyph_contrast: f64,
    pub background_contrast: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            lesions: 6,
            locations: 5,
            samples: 2000,
            correlation: None,
            noise: 0.1,
            image_size: 32,
            seed: 0,
            secondary_rate: 0.3,
            glyph_contrast: 0.25,
            background_contrast: 0.15,
        }
    }
}

/// Lesion `i` prefers location `i mod Q` with mass `strength`; the rest is
/// spread evenly.
pub fn strong_correlation(lesions: usize, locations: usize, strength: f64) -> Vec<Vec<f64>> {
    let rest = if locations > 1 { (1.0 - strength) / (locations - 1) as f64 } else { 0.0 };
    (0..lesions)
        .map(|i| {
            (0..locations)
                .map(|j| if j == i % locations { strength } else { rest })
                .collect()
        })
        .collect()
}

impl SynthSpec {
    pub fn planted(&self) -> Vec<Vec<f64>> {
        self.correlation
            .clone()
            .unwrap_or_else(|| strong_correlation(self.lesions, self.locations, 0.8))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadSpec(m));
        if self.lesions == 0 || self.locations < 2 || self.samples == 0 {
            return bad("need lesions >= 1, locations >= 2, samples >= 1".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.noise) || !finite_nonneg(self.glyph_contrast) || !finite_nonneg(self.background_contrast) {
            return bad("noise and contrasts must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.secondary_rate) {
            return bad(format!("secondary_rate {} outside [0, 1]", self.secondary_rate));
        }
        let r = self.planted();
        if r.len() != self.lesions || r.iter().any(|row| row.len() != self.locations) {
            return bad(format!("correlation must be {}x{}", self.lesions, self.locations));
        }
        for (i, row) in r.iter().enumerate() {
            if row.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return bad(format!("row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("row {i} sums to {s}, not 1"));
            }
        }
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights` (which sum
/// to 1), assigning leftovers by largest remainder, ties to the lower index.
fn quotas(total: usize, weights: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = q.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - q[a] as f64, exact[b] - q[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().take(total.saturating_sub(assigned)) {
        q[j] += 1;
    }
    q
}

const GLYPHS: [[&str; 5]; 8] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    [".....", ".###.", ".###.", ".###.", "....."],
    [".....", ".....", "#####", "#####", "....."],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
];

const COLORS: [[f64; 3]; 6] = [
    [1.0, -0.6, -0.6],
    [-0.6, 1.0, -0.6],
    [-0.6, -0.6, 1.0],
    [1.0, 1.0, -0.8],
    [-0.8, 1.0, 1.0],
    [1.0, -0.8, 1.0],
];

struct Painter<'a> {
    spec: &'a SynthSpec,
}

impl Painter<'_> {
    fn background(&self, location: usize, rng: &mut ChaCha8Rng, px: &mut [f64]) {
        let s = self.spec.image_size;
        let q = self.spec.locations as f64;
        let theta = std::f64::consts::PI * location as f64 / q;
        let freq = 2.0 + (location % 3) as f64;
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let tint = [
            0.5 + 0.1 * (theta * 2.0).cos(),
            0.5 + 0.1 * (theta * 3.0 + 1.0).sin(),
            0.5 - 0.1 * (theta * 2.0).sin(),
        ];
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..s {
            for x in 0..s {
                let t = (x as f64 * ct + y as f64 * st) / s as f64;
                let wave = (std::f64::consts::TAU * freq * t + phase).sin();
                for c in 0..3 {
                    px[(c * s + y) * s + x] = tint[c] + self.spec.background_contrast * wave;
                }
            }
        }
    }

    fn glyph(&self, lesion: usize, rng: &mut ChaCha8Rng, px: &mut [f64]) {
        let s = self.spec.image_size;
        let mask = GLYPHS[lesion % GLYPHS.len()];
        let color = COLORS[(lesion + lesion / GLYPHS.len()) % COLORS.len()];
        let top = rng.gen_range(0..=s - 5);
        let left = rng.gen_range(0..=s - 5);
        for (dy, row) in mask.iter().enumerate() {
            for (dx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    for c in 0..3 {
                        px[(c * s + top + dy) * s + left + dx] += self.spec.glyph_contrast * color[c];
                    }
                }
            }
        }
    }
}

pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let r = spec.planted();
    let (p, q, n) = (spec.lesions, spec.locations, spec.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut pairs = Vec::with_capacity(n);
    for (i, row) in r.iter().enumerate() {
        let count = n / p + usize::from(i < n % p);
        for (j, &k) in quotas(count, row).iter().enumerate() {
            pairs.extend(std::iter::repeat((i, j)).take(k));
        }
    }
    pairs.shuffle(&mut rng);

    let mut labels: Vec<Vec<u8>> = pairs
        .iter()
        .map(|&(i, _)| {
            let mut u = vec![0u8; p];
            u[i] = 1;
            u
        })
        .collect();
    let mut at_location: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (idx, &(_, j)) in pairs.iter().enumerate() {
        at_location[j].push(idx);
    }
    for (k, row) in r.iter().enumerate() {
        let primaries = n / p + usize::from(k < n % p);
        let own = quotas(primaries, row);
        let mut target = (spec.secondary_rate * primaries as f64).round() as usize;
        for (j, &w) in row.iter().enumerate() {
            if w > 0.0 {
                let room = at_location[j].len() - own[j];
                target = target.min((room as f64 / w).floor() as usize);
            }
        }
        for (j, &want) in quotas(target, row).iter().enumerate() {
            let eligible: Vec<usize> = at_location[j].iter().copied().filter(|&idx| pairs[idx].0 != k).collect();
            for &idx in eligible.choose_multiple(&mut rng, want.min(eligible.len())) {
                labels[idx][k] = 1;
            }
        }
    }

    let painter = Painter { spec };
    let s = spec.image_size;
    let width = n.to_string().len().max(4);
    let mut samples = Vec::with_capacity(n);
    for (idx, (&(_, loc), u)) in pairs.iter().zip(labels).enumerate() {
        let mut px = vec![0.0; 3 * s * s];
        painter.background(loc, &mut rng, &mut px);
        for (lesion, _) in u.iter().enumerate().filter(|(_, &b)| b == 1) {
            painter.glyph(lesion, &mut rng, &mut px);
        }
        for v in &mut px {
            let e: f64 = rng.sample(StandardNormal);
            *v = ((*v + spec.noise * e).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        samples.push(Sample {
            id: format!("s{idx:0width$}"),
            image: Tensor::new(vec![3, s, s], px)?,
            lesions: u,
            location: loc + 1,
        });
    }
    Ok(Dataset {
        samples,
        lesion_names: (0..p).map(|i| format!("lesion_{i}")).collect(),
        location_names: (0..q).map(|j| format!("location_{j}")).collect(),
        folds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_sum_and_track_weights() {
        assert_eq!(quotas(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(quotas(7, &[1.0, 0.0]), vec![7, 0]);
        let q = quotas(333, &[0.2; 5]);
        assert_eq!(q.iter().sum::<usize>(), 333);
        assert!(q.iter().all(|&k| k == 66 || k == 67));
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let bad_row = SynthSpec {
            lesions: 2,
            locations: 2,
            correlation: Some(vec![vec![0.5, 0.5], vec![0.9, 0.2]]),
            ..SynthSpec::default()
        };
        assert_eq!(synthesize(&bad_row).unwrap_err().kind(), "BadSpec");
        let one_loc = SynthSpec {
            locations: 1,
            ..SynthSpec::default()
        };
        assert!(one_loc.validate().is_err());
    }

    fn max_deviation(spec: &SynthSpec) -> f64 {
        let ds = synthesize(spec).unwrap();
        let (p, q) = (spec.lesions, spec.locations);
        let mut counts = vec![vec![0usize; q]; p];
        for s in &ds.samples {
            for (i, _) in s.lesions.iter().enumerate().filter(|(_, &b)| b == 1) {
                counts[i][s.location - 1] += 1;
            }
        }
        let plant = spec.planted();
        let mut worst: f64 = 0.0;
        for (row, want) in counts.iter().zip(&plant) {
            let total: usize = row.iter().sum();
            for (&c, &w) in row.iter().zip(want) {
                worst = worst.max((c as f64 / total as f64 - w).abs());
            }
        }
        worst
    }

    #[test]
    fn planted_rows_are_recovered() {
        assert!(max_deviation(&SynthSpec::default()) < 0.01);
        let uniform = SynthSpec {
            correlation: Some(vec![vec![0.2; 5]; 6]),
            ..SynthSpec::default()
        };
        assert!(max_deviation(&uniform) < 0.01);
        let identity = SynthSpec {
            lesions: 4,
            locations: 4,
            samples: 400,
            correlation: Some((0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect()),
            ..SynthSpec::default()
        };
        assert_eq!(max_deviation(&identity), 0.0);
    }

    #[test]
    fn secondaries_are_added() {
        let ds = synthesize(&SynthSpec::default()).unwrap();
        let multi = ds.samples.iter().filter(|s| s.lesions.iter().filter(|&&b| b == 1).count() > 1).count();
        assert!(multi > 400, "{multi} multi-lesion samples");
    }

    #[test]
    fn deterministic_and_well_formed() {
        let spec = SynthSpec {
            samples: 40,
            noise: 0.0,
            ..SynthSpec::default()
        };
        let a = synthesize(&spec).unwrap();
        assert_eq!(a, synthesize(&spec).unwrap());
        a.validate().unwrap();
        assert_eq!(a.len(), 40);
        assert!(a.samples.iter().all(|s| s.image.shape() == [3, 32, 32]));
        let other = synthesize(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, other);
    }
}
