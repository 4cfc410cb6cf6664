//! Gradient-salience layer pruning.
//!
//! A layer's raw salience is the mean absolute gradient of the training loss
//! with respect to its output tokens, averaged over a few fresh batches.
//! Scores are standardized over the active layers and the lowest ones are
//! masked off, every `interval` epochs from `start_epoch` until the budget is
//! spent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoder::{count_costs, Costs, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::mcft::{labeled_objective, mix, student_pass, view_patches, LabeledBatch, MCFTConfig, TrainState, TAG_SALIENCE};
use crate::pointcloud::{PatchSet, PointCloud, Strength};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Layers to remove over the run.
    pub budget: usize,
    /// Epochs between pruning events.
    pub interval: usize,
    pub layers_per_event: usize,
    /// First event epoch; `None` means the end of warmup.
    pub start_epoch: Option<usize>,
    pub epsilon: f64,
    pub salience_batches: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            budget: 1,
            interval: 10,
            layers_per_event: 1,
            start_epoch: None,
            epsilon: 1e-8,
            salience_batches: 4,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.budget >= encoder.num_layers {
            return Err(Error::config(format!(
                "pruning budget {} must be below num_layers {}",
                self.budget, encoder.num_layers
            )));
        }
        if self.interval == 0 || self.layers_per_event == 0 || self.salience_batches == 0 {
            return Err(Error::config(
                "interval, layers_per_event and salience_batches must be >= 1",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn start(&self, config: &MCFTConfig) -> usize {
        self.start_epoch.unwrap_or(config.warmup_epochs)
    }

    /// Epochs at which events fire when every event removes
    /// `layers_per_event` layers and the run is long enough.
    pub fn schedule(&self, config: &MCFTConfig) -> Vec<usize> {
        let events = self.budget.div_ceil(self.layers_per_event);
        (0..events)
            .map(|j| self.start(config) + j * self.interval)
            .filter(|&e| e < config.total_epochs)
            .collect()
    }
}

/// Scores and outcome of one pruning event; one line of `prune_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub epoch: usize,
    /// Raw scores; `None` for layers that were already inactive.
    pub raw: Vec<Option<f64>>,
    pub normalized: Vec<Option<f64>>,
    pub batches: usize,
    pub removed: Vec<usize>,
    pub costs: Costs,
}

/// Mean `|∂L/∂E_i|` over batches, tokens and features for each active layer.
pub fn layer_salience<T: Scalar>(
    state: &TrainState<T>,
    batches: &[LabeledBatch<T>],
    lambda: f64,
) -> Result<Vec<Option<f64>>> {
    if state.student.active_layers() == 0 {
        return Err(Error::State("every layer is masked; nothing to score".into()));
    }
    if batches.is_empty() {
        return Err(Error::EmptyInput("salience needs at least one batch".into()));
    }
    let mask = &state.student.layer_mask;
    let mut sums = vec![0.0; mask.len()];
    for batch in batches {
        let mut g = Graph::new();
        let pass = student_pass(&mut g, state, &batch.patches, true)?;
        let (loss, _) = labeled_objective(&mut g, state, &pass, batch, lambda)?;
        let grads = g.backward(loss);
        for (i, &active) in mask.iter().enumerate() {
            if !active {
                continue;
            }
            if let Some(gr) = grads.get(pass.enc.layers[i]) {
                sums[i] += gr.iter().map(|v| v.as_f64().abs()).sum::<f64>() / gr.len() as f64;
            }
        }
    }
    let n = batches.len() as f64;
    Ok(mask
        .iter()
        .zip(sums)
        .map(|(&active, s)| active.then_some(s / n))
        .collect())
}

/// `(s − μ)/(σ + ε)` over the scored layers, with the population σ.
pub fn normalize_salience(raw: &[Option<f64>], epsilon: f64) -> Vec<Option<f64>> {
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![None; raw.len()];
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let std = (present.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    raw.iter().map(|s| s.map(|v| (v - mean) / (std + epsilon))).collect()
}

/// Deactivates up to `min(layers_per_event, budget_remaining)` active layers
/// with the lowest normalized score, lowest index first on ties, always
/// leaving one layer active.
pub fn update_mask(
    normalized: &[Option<f64>],
    mask: &[bool],
    layers_per_event: usize,
    budget_remaining: usize,
) -> (Vec<bool>, Vec<usize>) {
    let mut ranked: Vec<(usize, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .map(|(i, _)| (i, normalized.get(i).copied().flatten().unwrap_or(f64::INFINITY)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let active = ranked.len();
    let take = layers_per_event.min(budget_remaining).min(active.saturating_sub(1));
    let mut out = mask.to_vec();
    let mut removed: Vec<usize> = ranked.iter().take(take).map(|&(i, _)| i).collect();
    for &i in &removed {
        out[i] = false;
    }
    removed.sort_unstable();
    (out, removed)
}

pub fn budget_remaining<T>(config: &PruneConfig, state: &TrainState<T>) -> usize {
    let spent: usize = state.prune_log.iter().map(|r| r.removed.len()).sum();
    config.budget.saturating_sub(spent)
}

pub(crate) fn event_due<T: Scalar>(p: &PruneConfig, config: &MCFTConfig, state: &TrainState<T>, epoch: usize) -> bool {
    let start = p.start(config);
    epoch >= start && (epoch - start) % p.interval == 0 && budget_remaining(p, state) > 0
}

fn salience_batches<T: Scalar>(
    config: &MCFTConfig,
    encoder: &EncoderConfig,
    p: &PruneConfig,
    labeled: &[PointCloud],
    labels: &[usize],
    epoch: usize,
) -> Result<Vec<LabeledBatch<T>>> {
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[config.seed, TAG_SALIENCE, epoch as u64])));
    let size = config.batch_size.min(labeled.len());
    let mut out = Vec::with_capacity(p.salience_batches);
    for j in 0..p.salience_batches {
        let picks: Vec<usize> = (0..size).map(|r| order[(j * size + r) % order.len()]).collect();
        let mut sets: Vec<PatchSet> = Vec::with_capacity(size);
        for (r, &i) in picks.iter().enumerate() {
            let aug = config.augment_labeled.then_some((&config.augment, Strength::Weak));
            let seed = mix(&[config.seed, TAG_SALIENCE, epoch as u64, j as u64, r as u64]);
            sets.push(view_patches(encoder, &labeled[i], aug, seed)?);
        }
        out.push(LabeledBatch::new(encoder, &sets, picks.iter().map(|&i| labels[i]).collect())?);
    }
    Ok(out)
}

/// Scores the layers on fresh batches and masks student and teacher alike.
pub(crate) fn prune_event<T: Scalar>(
    state: &mut TrainState<T>,
    config: &MCFTConfig,
    p: &PruneConfig,
    labeled: &[PointCloud],
    labels: &[usize],
    epoch: usize,
) -> Result<SalienceReport> {
    let encoder = state.student.config.clone();
    let batches = salience_batches::<T>(config, &encoder, p, labeled, labels, epoch)?;
    let raw = layer_salience(state, &batches, config.lambda)?;
    let normalized = normalize_salience(&raw, p.epsilon);
    let (mask, removed) = update_mask(&normalized, &state.student.layer_mask, p.layers_per_event, budget_remaining(p, state));
    state.student.layer_mask = mask.clone();
    if let Some(t) = state.teacher.as_mut() {
        t.layer_mask = mask;
    }
    let costs = count_costs(&state.student, Some(&state.head));
    log::info!("epoch {epoch}: pruned layer(s) {removed:?}; {} params remain", costs.param_count);
    Ok(SalienceReport {
        epoch,
        raw,
        normalized,
        batches: batches.len(),
        removed,
        costs,
    })
}

/// Physically drops the masked layers of `state`.
pub fn compact<T: Scalar>(state: &EncoderState<T>) -> Result<EncoderState<T>> {
    state.compact()
}
