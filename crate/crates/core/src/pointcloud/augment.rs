use std::f64::consts::TAU;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

/// Parameters of the weak/strong augmentation pair.
///
/// Weak: rotation about the vertical (z) axis plus clipped Gaussian jitter.
/// Strong: weak, then per-axis scaling, random point dropout, and a random
/// translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRecipe {
    pub rotate: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub max_drop_ratio: f64,
    pub min_points: usize,
    pub max_translation: f64,
}

impl Default for AugmentRecipe {
    fn default() -> Self {
        AugmentRecipe {
            rotate: true,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            scale_low: 0.7,
            scale_high: 1.3,
            max_drop_ratio: 0.3,
            min_points: 8,
            max_translation: 0.1,
        }
    }
}

pub fn augment(cloud: &PointCloud, strength: Strength, seed: u64) -> Result<PointCloud> {
    augment_with(cloud, &AugmentRecipe::default(), strength, seed)
}

pub fn augment_with(
    cloud: &PointCloud,
    recipe: &AugmentRecipe,
    strength: Strength,
    seed: u64,
) -> Result<PointCloud> {
    cloud.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = cloud.points.clone();

    if recipe.rotate {
        let (s, c) = rng.random_range(0.0..TAU).sin_cos();
        for mut p in points.rows_mut() {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if recipe.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, recipe.jitter_sigma).expect("positive sigma");
        let clip = recipe.jitter_clip;
        points.mapv_inplace(|v| v + normal.sample(&mut rng).clamp(-clip, clip));
    }

    if strength == Strength::Strong {
        let scale: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(recipe.scale_low..=recipe.scale_high));
        for mut p in points.rows_mut() {
            for d in 0..3 {
                p[d] *= scale[d];
            }
        }
        points = drop_points(points, recipe.max_drop_ratio, recipe.min_points, &mut rng);
        let shift: [f64; 3] =
            [0, 1, 2].map(|_| rng.random_range(-recipe.max_translation..=recipe.max_translation));
        for mut p in points.rows_mut() {
            for d in 0..3 {
                p[d] += shift[d];
            }
        }
    }

    Ok(PointCloud {
        points,
        label: cloud.label,
        id: cloud.id.clone(),
    })
}

/// Removes `floor(ratio * M)` random points with the ratio drawn uniformly
/// from `[0, max_ratio]`, keeping at least `min(min_points, M)` of them.
/// Survivors keep their original order.
pub(crate) fn drop_points(points: Array2<f64>, max_ratio: f64, min_points: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let ratio = if max_ratio > 0.0 { rng.random_range(0.0..=max_ratio) } else { 0.0 };
    let dropped = (ratio * n as f64).floor() as usize;
    let keep = n.saturating_sub(dropped).max(min_points.min(n));
    if keep == n {
        return points;
    }
    let mut kept = index::sample(rng, n, keep).into_vec();
    kept.sort_unstable();
    points.select(Axis(0), &kept)
}
