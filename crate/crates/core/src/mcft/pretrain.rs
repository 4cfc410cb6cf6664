//! Masked patch reconstruction used to manufacture pre-trained encoders.
//!
//! A random subset of patch tokens is replaced by a learned mask token (the
//! positional terms stay), the sequence runs through the encoder, and a small
//! MLP decodes each masked position into the `k` relative points of its
//! group, scored by Chamfer distance. A second MLP decodes the final CLS
//! embedding into the cloud's patch centers so the class token has to
//! summarize global shape. Only the encoder is kept.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix, view_patches};
use crate::autograd::Graph;
use crate::encoder::graph::{bind_encoder, embed, transform, PatchBatch};
use crate::encoder::{init_tensor, EncoderConfig, EncoderState, ParamMap};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimConfig};
use crate::pointcloud::{AugmentRecipe, PatchSet, PointCloud, Strength};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub decoder_hidden: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub augment: bool,
    pub recipe: AugmentRecipe,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            batch_size: 16,
            mask_ratio: 0.6,
            decoder_hidden: 128,
            optim: OptimConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            seed: 0,
            augment: true,
            recipe: AugmentRecipe::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::validation(format!(
                "mask_ratio {} must lie in the open interval (0, 1)",
                self.mask_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decoder_hidden == 0 {
            return Err(Error::config("epochs, batch_size and decoder_hidden must be >= 1"));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-group Chamfer loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-cloud Chamfer loss of the CLS center decoder.
    pub global_losses: Vec<f64>,
}

fn pretext_params<T: Scalar>(encoder: &EncoderConfig, hidden: usize, seed: u64) -> ParamMap<T> {
    let d = encoder.embed_dim;
    let out = 3 * encoder.patch_points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamMap::new();
    for (name, r, c) in [
        ("mask_token", 1, d),
        ("decoder.fc1.weight", d, hidden),
        ("decoder.fc1.bias", 1, hidden),
        ("decoder.fc2.weight", hidden, out),
        ("decoder.fc2.bias", 1, out),
        ("global.fc1.weight", d, hidden),
        ("global.fc1.bias", 1, hidden),
        ("global.fc2.weight", hidden, 3 * encoder.num_patches),
        ("global.fc2.bias", 1, 3 * encoder.num_patches),
    ] {
        let t = init_tensor(name, r, c, &mut rng);
        p.insert(name, t);
    }
    p
}

/// Trains a fresh encoder on `clouds` and returns it with the loss curve.
pub fn pretrain_masked<T: Scalar>(
    encoder: &EncoderConfig,
    config: &PretrainConfig,
    clouds: &[PointCloud],
) -> Result<(EncoderState<T>, PretrainReport)> {
    config.validate()?;
    if clouds.is_empty() {
        return Err(Error::EmptyInput("no pretraining clouds".into()));
    }
    let (m, k) = (encoder.num_patches, encoder.patch_points);
    if m < 2 {
        return Err(Error::config("masked pretraining needs num_patches >= 2"));
    }
    let mut state = EncoderState::<T>::new(encoder.clone(), mix(&[config.seed, 10]))?;
    let mut extra = pretext_params::<T>(encoder, config.decoder_hidden, mix(&[config.seed, 11]));
    let mut opt = AdamW::new(config.optim.clone());
    let masked_per_sample = ((config.mask_ratio * m as f64).round() as usize).clamp(1, m - 1);
    let seq = encoder.seq_len();
    let mut report = PretrainReport::default();

    for epoch in 0..config.epochs {
        let lr = config.optim.lr_at(epoch, config.epochs);
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[config.seed, 12, epoch as u64])));
        let (mut loss_sum, mut groups, mut global_sum) = (0.0, 0usize, 0.0);

        for chunk in order.chunks(config.batch_size) {
            let mut sets: Vec<PatchSet> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let aug = config.augment.then_some((&config.recipe, Strength::Weak));
                sets.push(view_patches(encoder, &clouds[i], aug, mix(&[config.seed, 13, epoch as u64, i as u64]))?);
            }
            let refs: Vec<&PatchSet> = sets.iter().collect();
            let batch = PatchBatch::<T>::new(encoder, &refs)?;

            let mut flags = vec![false; chunk.len() * m];
            let mut seq_rows = Vec::with_capacity(chunk.len() * masked_per_sample);
            let mut target = Array2::zeros((chunk.len() * masked_per_sample, 3 * k));
            let mut centers = Array2::zeros((chunk.len(), 3 * m));
            for b in 0..chunk.len() {
                for j in 0..m {
                    for d in 0..3 {
                        centers[[b, 3 * j + d]] = batch.centers[[b * m + j, d]];
                    }
                }
            }
            for (b, &i) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 14, epoch as u64, i as u64]));
                let mut picks = index::sample(&mut rng, m, masked_per_sample).into_vec();
                picks.sort_unstable();
                for j in picks {
                    flags[b * m + j] = true;
                    let r = seq_rows.len();
                    seq_rows.push(b * seq + 1 + j);
                    for p in 0..k {
                        for d in 0..3 {
                            target[[r, 3 * p + d]] = batch.points[[(b * m + j) * k + p, d]];
                        }
                    }
                }
            }

            let mut g = Graph::new();
            let vars = bind_encoder(&mut g, &state, &|_| true);
            let leaf = |g: &mut Graph<T>, n: &str| g.leaf(extra.get(n).expect("pretext tensor").clone(), true);
            let mask_token = leaf(&mut g, "mask_token");
            let fc1 = (leaf(&mut g, "decoder.fc1.weight"), leaf(&mut g, "decoder.fc1.bias"));
            let fc2 = (leaf(&mut g, "decoder.fc2.weight"), leaf(&mut g, "decoder.fc2.bias"));
            let gl1 = (leaf(&mut g, "global.fc1.weight"), leaf(&mut g, "global.fc1.bias"));
            let gl2 = (leaf(&mut g, "global.fc2.weight"), leaf(&mut g, "global.fc2.bias"));
            let e0 = embed(&mut g, &vars, encoder, &batch, Some((mask_token, flags)))?;
            let enc = transform(&mut g, &vars, encoder, &state.layer_mask, e0)?;
            let picked = g.gather_rows(enc.tokens, seq_rows);
            let (gn, bn) = vars.norm();
            let normed = g.layer_norm(picked, gn, bn);
            let h = g.linear(normed, fc1.0, fc1.1);
            let h = g.gelu(h);
            let pred = g.linear(h, fc2.0, fc2.1);
            let n_groups = target.nrows();
            let local = g.chamfer(pred, target, k, T::c(1.0 / n_groups as f64));
            let h = g.linear(enc.cls, gl1.0, gl1.1);
            let h = g.gelu(h);
            let shape = g.linear(h, gl2.0, gl2.1);
            let global = g.chamfer(shape, centers, m, T::c(1.0 / chunk.len() as f64));
            let loss = g.add(local, global);
            let value = g.scalar(local).as_f64();
            let global_value = g.scalar(global).as_f64();
            if !(value.is_finite() && global_value.is_finite()) {
                return Err(Error::Numeric {
                    layer: None,
                    message: format!("non-finite reconstruction loss at epoch {epoch}"),
                });
            }
            let mut grads = g.backward(loss);
            let mut named = Vec::with_capacity(vars.all.len() + 9);
            for (name, v) in &vars.all {
                if let Some(gr) = grads.take(*v) {
                    named.push((name.clone(), gr));
                }
            }
            let extra_vars = [
                ("mask_token", mask_token),
                ("decoder.fc1.weight", fc1.0),
                ("decoder.fc1.bias", fc1.1),
                ("decoder.fc2.weight", fc2.0),
                ("decoder.fc2.bias", fc2.1),
                ("global.fc1.weight", gl1.0),
                ("global.fc1.bias", gl1.1),
                ("global.fc2.weight", gl2.0),
                ("global.fc2.bias", gl2.1),
            ];
            for (name, v) in extra_vars {
                if let Some(gr) = grads.take(v) {
                    named.push((name.to_string(), gr));
                }
            }
            opt.step(&mut [&mut state.params, &mut extra], &named, lr)?;
            loss_sum += value * n_groups as f64;
            groups += n_groups;
            global_sum += global_value * chunk.len() as f64;
        }
        let mean = loss_sum / groups as f64;
        let global_mean = global_sum / clouds.len() as f64;
        log::debug!("pretrain epoch {epoch}: chamfer {mean:.5}, global {global_mean:.5}");
        report.epoch_losses.push(mean);
        report.global_losses.push(global_mean);
    }
    Ok((state, report))
}
