//! Fixtures shared by the unit tests.

use ndarray::Array2;

use crate::encoder::{EncoderConfig, EncoderState, ParamMap, PatchBatch};
use crate::pointcloud::{generate_dataset, patchify, PatchSet, PointCloud, SyntheticSpec};

pub fn tiny() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_ratio: 2,
        patch_points: 4,
        num_patches: 4,
        num_classes: 3,
        embed_hidden: 6,
    }
}

/// Small three-class encoder with more layers, for pruning and freezing.
pub fn small() -> EncoderConfig {
    EncoderConfig {
        num_layers: 4,
        ..tiny()
    }
}

/// `per_class` labeled clouds of sphere, cube and torus.
pub fn clouds(per_class: usize, seed: u64) -> Vec<PointCloud> {
    let spec = SyntheticSpec {
        class_catalog: vec!["sphere".into(), "cube".into(), "torus".into()],
        points_per_cloud: 64,
        seed,
        ..Default::default()
    };
    generate_dataset(&spec, per_class).unwrap()
}

pub fn patches(config: &EncoderConfig, n: usize) -> Vec<PatchSet> {
    clouds(n.div_ceil(3), 0)
        .iter()
        .take(n)
        .map(|c| patchify(c, config.num_patches, config.patch_points, 0).unwrap())
        .collect()
}

pub fn batch(config: &EncoderConfig, sets: &[PatchSet]) -> PatchBatch<f64> {
    let refs: Vec<&PatchSet> = sets.iter().collect();
    PatchBatch::new(config, &refs).unwrap()
}

fn lcg(i: &mut u64) -> f64 {
    *i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*i >> 33) as f64 / (1u64 << 31) as f64 - 0.5
}

/// Spreads weights so activations are far from degenerate.
pub fn spread(state: &mut EncoderState<f64>, seed: u64) {
    let mut i = seed;
    for (_, t) in state.params.iter_mut() {
        t.mapv_inplace(|v| v * 4.0 + lcg(&mut i) * 0.2);
    }
}

/// Adds uniform noise of the given width to every tensor.
pub fn jitter(params: &mut ParamMap<f64>, width: f64, seed: u64) {
    let mut i = seed;
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|v| v + lcg(&mut i) * width);
    }
}

/// Winning row of every max-pooled column.
fn pool_argmax(state: &EncoderState<f64>, batch: &PatchBatch<f64>) -> Vec<usize> {
    let p = |n: &str| state.params.get(n).unwrap();
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let h = (batch.points.dot(p("patch_embed.fc1.weight")) + p("patch_embed.fc1.bias")).mapv(gelu);
    let out = h.dot(p("patch_embed.fc2.weight")) + p("patch_embed.fc2.bias");
    let k = state.config.patch_points;
    let mut winners = Vec::new();
    for g in 0..out.nrows() / k {
        for c in 0..out.ncols() {
            winners.push((0..k).max_by(|&a, &b| out[[g * k + a, c]].total_cmp(&out[[g * k + b, c]])).unwrap());
        }
    }
    winners
}

/// Finite differences are only meaningful away from the pooling kinks: no
/// `±h` step of a patch-embedding parameter may change a pooled winner.
pub fn smooth_at(state: &EncoderState<f64>, batches: &[&PatchBatch<f64>], h: f64) -> bool {
    let base: Vec<Vec<usize>> = batches.iter().map(|b| pool_argmax(state, b)).collect();
    let names: Vec<String> = state.params.names().filter(|n| n.starts_with("patch_embed")).map(String::from).collect();
    names.iter().all(|name| {
        let n = state.params.get(name).unwrap().len();
        (0..n).all(|i| {
            [h, -h].iter().all(|&d| {
                let mut s = state.clone();
                let t = s.params.get_mut(name).unwrap();
                let c = t.ncols();
                t[[i / c, i % c]] += d;
                batches.iter().zip(&base).all(|(b, w)| pool_argmax(&s, b) == *w)
            })
        })
    })
}

/// Largest per-tensor relative error between `analytic` gradients and
/// central differences of `loss`, which perturbs `(tensor, row, col)` by
/// the given delta.
pub fn fd_max_rel_error(
    analytic: &[(String, Array2<f64>)],
    h: f64,
    loss: impl Fn(&str, usize, usize, f64) -> f64,
) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (name, a) in analytic {
        let mut numeric = Array2::zeros(a.dim());
        for idx in 0..a.len() {
            let (r, c) = (idx / a.ncols(), idx % a.ncols());
            numeric[[r, c]] = (loss(name, r, c, h) - loss(name, r, c, -h)) / (2.0 * h);
        }
        let diff = (a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
        let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}
