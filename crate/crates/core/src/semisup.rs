//! Semi-supervised MCFT.
//!
//! Unlabeled samples are seen as a weak and a strong view. Confident student
//! predictions on the weak view become hard pseudo-labels for the strong view,
//! and three simplified "AllMatch-lite" terms add to that:
//!
//! - inverse learning: `−Σ_{c: p_w[c] < low} log(1 − p_s[c])` per sample;
//! - contrastive: InfoNCE over normalized class embeddings, each weak view
//!   against the strong views of the whole batch (its own one is the
//!   positive), at a fixed temperature;
//! - adaptive hard augmentation: samples whose strong view was predicted as
//!   their pseudo-label with confidence `≥ τ` during the previous epoch get an
//!   extra, harder view (the strong view plus another point-dropout stage)
//!   trained against the pseudo-label.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::encoder::{EncoderState, PatchBatch};
use crate::error::{Error, Result};
use crate::mcft::{
    add_scaled, apply_update, bind_student, check_loss, collect_grads, labeled_objective, mix, run_student,
    teacher_cls, train, view_patches, LabeledBatch, MCFTConfig, StepLosses, TrainMode, TrainOptions, TrainState,
};
use crate::pointcloud::{augment_with, drop_points, patchify, AugmentRecipe, PatchSet, PointCloud, Strength};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiConfig {
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Unlabeled samples per labeled sample in a step.
    pub mu: usize,
    /// Weight of the unlabeled objective.
    pub omega: f64,
    pub temperature: f64,
    /// Classes below this weak-view probability count as negatives.
    pub low_threshold: f64,
    pub enable_aha: bool,
    pub enable_inverse: bool,
    pub enable_contrastive: bool,
    pub strong: AugmentRecipe,
    /// Maximum extra drop ratio of the hard view.
    pub hard_drop_ratio: f64,
}

impl Default for SemiConfig {
    fn default() -> Self {
        SemiConfig {
            tau: 0.95,
            mu: 4,
            omega: 1.0,
            temperature: 0.1,
            low_threshold: 0.05,
            enable_aha: true,
            enable_inverse: true,
            enable_contrastive: true,
            strong: AugmentRecipe::default(),
            hard_drop_ratio: 0.4,
        }
    }
}

impl SemiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.mu == 0 {
            return Err(Error::config("mu must be >= 1"));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::config("omega must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.hard_drop_ratio) {
            return Err(Error::config("hard_drop_ratio must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-sample difficulty flags of the unlabeled pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiState {
    /// Flags observed in the previous epoch; these select hard views now.
    pub flags: Vec<bool>,
    pending: Vec<bool>,
}

impl SemiState {
    pub fn new(pool: usize) -> Self {
        SemiState {
            flags: vec![false; pool],
            pending: vec![false; pool],
        }
    }

    pub(crate) fn observe(&mut self, index: usize, easy: bool) {
        self.pending[index] |= easy;
    }

    pub fn end_epoch(&mut self) {
        self.flags = std::mem::replace(&mut self.pending, vec![false; self.flags.len()]);
    }
}

/// Pseudo-labels, confidences and gate of a weak-view probability matrix.
pub fn pseudo_labels<T: Scalar>(weak_probs: &Array2<T>, tau: f64) -> (Vec<usize>, Vec<bool>) {
    let mut labels = Vec::with_capacity(weak_probs.nrows());
    let mut gate = Vec::with_capacity(weak_probs.nrows());
    for row in weak_probs.rows() {
        let (arg, conf) = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        labels.push(arg);
        gate.push(conf.as_f64() >= tau);
    }
    (labels, gate)
}

/// `(1/n)·Σ gate_i · CE(pseudo_i, strong_i)` where `n` counts all rows.
fn em_node<T: Scalar>(g: &mut Graph<T>, strong_logits: Var, pseudo: &[usize], gate: &[bool]) -> Var {
    let n = T::c(pseudo.len() as f64);
    let w = gate.iter().map(|&on| if on { T::one() / n } else { T::zero() }).collect();
    g.cross_entropy(strong_logits, pseudo.to_vec(), w)
}

fn inverse_node<T: Scalar>(g: &mut Graph<T>, strong_logits: Var, weak_probs: &Array2<T>, low: f64) -> Var {
    let n = weak_probs.nrows();
    let mask = weak_probs.mapv(|p| p.as_f64() < low);
    g.negative_label(strong_logits, mask, vec![T::c(1.0 / n as f64); n])
}

fn contrastive_node<T: Scalar>(g: &mut Graph<T>, weak_emb: Var, strong_emb: Var, temperature: f64) -> Var {
    let n = g.value(weak_emb).nrows();
    let a = g.normalize_rows(weak_emb);
    let b = g.normalize_rows(strong_emb);
    let sim = g.matmul_t(a, b);
    let sim = g.scale(sim, T::c(1.0 / temperature));
    g.cross_entropy(sim, (0..n).collect(), vec![T::c(1.0 / n as f64); n])
}

/// Entropy-minimization loss on fixed views and the fraction of samples that
/// pass the confidence gate. The weak-view forward records no gradients.
pub fn pseudo_label_loss_views<T: Scalar>(
    state: &TrainState<T>,
    tau: f64,
    weak: &PatchBatch<T>,
    strong: &PatchBatch<T>,
) -> Result<(f64, f64)> {
    let (loss, mask_rate, _) = pseudo_label_loss_and_grads(state, tau, weak, strong)?;
    Ok((loss, mask_rate))
}

/// As [`pseudo_label_loss_views`], also returning the gradient of every
/// trainable student tensor.
pub fn pseudo_label_loss_and_grads<T: Scalar>(
    state: &TrainState<T>,
    tau: f64,
    weak: &PatchBatch<T>,
    strong: &PatchBatch<T>,
) -> Result<(f64, f64, Vec<(String, Array2<T>)>)> {
    if weak.batch == 0 || weak.batch != strong.batch {
        return Err(Error::validation("weak and strong batches must be non-empty and equal in size"));
    }
    let weak_out = crate::encoder::graph::infer_batch(&state.student, Some(&state.head), weak, false)?;
    let p_w = softmax_rows(weak_out.logits.as_ref().expect("head given").view());
    let (pseudo, gate) = pseudo_labels(&p_w, tau);

    let mut g = Graph::new();
    let (vars, head) = bind_student(&mut g, state, false);
    let (_, z) = run_student(&mut g, state, &vars, &head, strong)?;
    let loss = em_node(&mut g, z, &pseudo, &gate);
    let value = g.scalar(loss).as_f64();
    let mut grads = g.backward(loss);
    let mask_rate = gate.iter().filter(|&&x| x).count() as f64 / gate.len() as f64;
    Ok((value, mask_rate, collect_grads(&g, &mut grads, &vars, &head)))
}

/// Pseudo-label loss of an unlabeled batch under fresh weak and strong views.
pub fn pseudo_label_loss<T: Scalar>(
    state: &TrainState<T>,
    semi: &SemiConfig,
    weak_recipe: &AugmentRecipe,
    clouds: &[PointCloud],
    seed: u64,
) -> Result<(f64, f64)> {
    if clouds.is_empty() {
        return Err(Error::EmptyInput("empty unlabeled batch".into()));
    }
    let config = &state.student.config;
    let mut weak = Vec::with_capacity(clouds.len());
    let mut strong = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        weak.push(view_patches(config, c, Some((weak_recipe, Strength::Weak)), mix(&[seed, i as u64, 0]))?);
        strong.push(view_patches(config, c, Some((&semi.strong, Strength::Strong)), mix(&[seed, i as u64, 1]))?);
    }
    let wr: Vec<&PatchSet> = weak.iter().collect();
    let sr: Vec<&PatchSet> = strong.iter().collect();
    pseudo_label_loss_views(
        state,
        semi.tau,
        &PatchBatch::new(config, &wr)?,
        &PatchBatch::new(config, &sr)?,
    )
}

/// Individual AllMatch-lite terms; disabled terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AllMatchTerms {
    pub inverse: f64,
    pub contrastive: f64,
    pub aha: f64,
}

impl AllMatchTerms {
    pub fn total(&self) -> f64 {
        self.inverse + self.contrastive + self.aha
    }
}

/// Negative-label loss from weak-view probabilities and strong-view logits,
/// averaged over rows.
pub fn inverse_loss<T: Scalar>(weak_probs: &Array2<T>, strong_logits: &Array2<T>, low: f64) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(strong_logits.clone());
    let v = inverse_node(&mut g, z, weak_probs, low);
    g.scalar(v).as_f64()
}

/// InfoNCE of weak against strong embeddings; `None` below two rows.
pub fn contrastive_loss<T: Scalar>(weak_emb: &Array2<T>, strong_emb: &Array2<T>, temperature: f64) -> Option<f64> {
    if weak_emb.nrows() < 2 {
        log::warn!("contrastive term skipped: a batch of one has no negatives");
        return None;
    }
    let mut g = Graph::new();
    let a = g.constant(weak_emb.clone());
    let b = g.constant(strong_emb.clone());
    let v = contrastive_node(&mut g, a, b, temperature);
    Some(g.scalar(v).as_f64())
}

/// AllMatch-lite terms on fixed views. `hard` holds extra views and the
/// batch rows they belong to.
pub fn allmatch_lite_loss<T: Scalar>(
    state: &TrainState<T>,
    semi: &SemiConfig,
    weak: &PatchBatch<T>,
    strong: &PatchBatch<T>,
    hard: Option<(&PatchBatch<T>, &[usize])>,
) -> Result<AllMatchTerms> {
    if weak.batch == 0 {
        return Err(Error::EmptyInput("empty unlabeled batch".into()));
    }
    let head = Some(&state.head);
    let w = crate::encoder::graph::infer_batch(&state.student, head, weak, false)?;
    let s = crate::encoder::graph::infer_batch(&state.student, head, strong, false)?;
    let p_w = softmax_rows(w.logits.as_ref().expect("head given").view());
    let mut terms = AllMatchTerms::default();
    if semi.enable_inverse {
        terms.inverse = inverse_loss(&p_w, s.logits.as_ref().expect("head given"), semi.low_threshold);
    }
    if semi.enable_contrastive {
        terms.contrastive = contrastive_loss(&w.cls, &s.cls, semi.temperature).unwrap_or(0.0);
    }
    if let (true, Some((hb, rows))) = (semi.enable_aha, hard) {
        let (pseudo, gate) = pseudo_labels(&p_w, semi.tau);
        let h = crate::encoder::graph::infer_batch(&state.student, head, hb, false)?;
        let mut g = Graph::new();
        let z = g.constant(h.logits.expect("head given"));
        let v = aha_node(&mut g, z, rows, &pseudo, &gate, weak.batch);
        terms.aha = g.scalar(v).as_f64();
    }
    Ok(terms)
}

fn aha_node<T: Scalar>(g: &mut Graph<T>, hard_logits: Var, rows: &[usize], pseudo: &[usize], gate: &[bool], n: usize) -> Var {
    let targets = rows.iter().map(|&r| pseudo[r]).collect();
    let w = rows
        .iter()
        .map(|&r| if gate[r] { T::c(1.0 / n as f64) } else { T::zero() })
        .collect();
    g.cross_entropy(hard_logits, targets, w)
}

fn hard_view(
    config: &crate::encoder::EncoderConfig,
    cloud: &PointCloud,
    semi: &SemiConfig,
    seed: u64,
) -> Result<PatchSet> {
    let strong = augment_with(cloud, &semi.strong, Strength::Strong, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0xAA]));
    let floor = semi.strong.min_points.max(config.num_patches).max(config.patch_points);
    let points = drop_points(strong.points, semi.hard_drop_ratio, floor, &mut rng);
    let view = PointCloud::new(points, strong.label, strong.id)?;
    patchify(&view, config.num_patches, config.patch_points, 0)
}

/// One optimization step over a labeled batch and the unlabeled samples
/// `picks` of `pool`.
pub(crate) fn semi_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &MCFTConfig,
    semi: &SemiConfig,
    batch: &LabeledBatch<T>,
    pool: &[PointCloud],
    picks: &[usize],
    lr: f64,
) -> Result<StepLosses> {
    let encoder = state.student.config.clone();
    let epoch = state.epoch as u64;
    let flags = state.semi.as_ref().map(|s| s.flags.clone()).unwrap_or_default();
    let u = picks.len();

    let mut weak = Vec::with_capacity(u);
    let mut strong = Vec::with_capacity(u);
    let mut hard = Vec::new();
    let mut hard_rows = Vec::new();
    for (r, &i) in picks.iter().enumerate() {
        let base = mix(&[config.seed, crate::mcft::TAG_UNLABELED, epoch, i as u64]);
        weak.push(view_patches(&encoder, &pool[i], Some((&config.augment, Strength::Weak)), mix(&[base, 0]))?);
        strong.push(view_patches(&encoder, &pool[i], Some((&semi.strong, Strength::Strong)), mix(&[base, 1]))?);
        if semi.enable_aha && flags.get(i).copied().unwrap_or(false) {
            hard.push(hard_view(&encoder, &pool[i], semi, mix(&[base, 2]))?);
            hard_rows.push(r);
        }
    }
    let all: Vec<&PatchSet> = weak.iter().chain(strong.iter()).chain(hard.iter()).collect();
    let unl = PatchBatch::new(&encoder, &all)?;
    let weak_only = PatchBatch::new(&encoder, &all[..u])?;

    let mut g = Graph::new();
    let (vars, head) = bind_student(&mut g, state, false);
    let (enc, logits) = run_student(&mut g, state, &vars, &head, &batch.patches)?;
    let pass = crate::mcft::StudentPass {
        vars,
        head,
        enc,
        logits,
    };
    let (lab_total, mut losses) = labeled_objective(&mut g, state, &pass, batch, config.lambda)?;

    let (uenc, ulogits) = run_student(&mut g, state, &pass.vars, &pass.head, &unl)?;
    let weak_rows: Vec<usize> = (0..u).collect();
    let strong_rows: Vec<usize> = (u..2 * u).collect();
    let zw = g.gather_rows(ulogits, weak_rows.clone());
    let zs = g.gather_rows(ulogits, strong_rows.clone());
    let cw = g.gather_rows(uenc.cls, weak_rows);
    let cs = g.gather_rows(uenc.cls, strong_rows);

    // Pseudo-labels read the weak logits' values only.
    let p_w = softmax_rows(g.value(zw).view());
    let (pseudo, gate) = pseudo_labels(&p_w, semi.tau);
    let mut unl_total = None;
    if let Some(target) = teacher_cls(state, &weak_only)? {
        let w = vec![T::c(1.0 / u as f64); u];
        let align = g.cosine_distance(cw, target, w);
        losses.align += semi.omega * g.scalar(align).as_f64();
        unl_total = Some(align);
    }
    let em = em_node(&mut g, zs, &pseudo, &gate);
    losses.em = g.scalar(em).as_f64();
    losses.mask_rate = gate.iter().filter(|&&x| x).count() as f64 / u as f64;
    unl_total = Some(add_scaled(&mut g, unl_total, em, 1.0));
    if semi.enable_inverse {
        let v = inverse_node(&mut g, zs, &p_w, semi.low_threshold);
        losses.inverse = g.scalar(v).as_f64();
        unl_total = Some(add_scaled(&mut g, unl_total, v, 1.0));
    }
    if semi.enable_contrastive {
        if u >= 2 {
            let v = contrastive_node(&mut g, cw, cs, semi.temperature);
            losses.contrastive = g.scalar(v).as_f64();
            unl_total = Some(add_scaled(&mut g, unl_total, v, 1.0));
        } else {
            log::warn!("contrastive term skipped: a batch of one has no negatives");
        }
    }
    if !hard_rows.is_empty() {
        let zh = g.gather_rows(ulogits, (2 * u..2 * u + hard_rows.len()).collect());
        let v = aha_node(&mut g, zh, &hard_rows, &pseudo, &gate, u);
        losses.aha = g.scalar(v).as_f64();
        unl_total = Some(add_scaled(&mut g, unl_total, v, 1.0));
    }

    // Difficulty flags for the next epoch.
    let p_s = softmax_rows(g.value(zs).view());
    if let Some(s) = state.semi.as_mut() {
        for (r, &i) in picks.iter().enumerate() {
            let row = p_s.index_axis(Axis(0), r);
            let conf = row[pseudo[r]].as_f64();
            let top = row.iter().all(|&p| p <= row[pseudo[r]]);
            s.observe(i, top && conf >= semi.tau);
        }
    }

    let unl = unl_total.expect("entropy term always present");
    let total = add_scaled(&mut g, Some(lab_total), unl, semi.omega);
    losses.total = g.scalar(total).as_f64();
    check_loss(&losses)?;
    let mut grads = g.backward(total);
    let named = collect_grads(&g, &mut grads, &pass.vars, &pass.head);
    apply_update(state, config, &named, lr)?;
    Ok(losses)
}

/// MCFT with the unlabeled objective over `unlabeled`.
pub fn semi_train<T: Scalar>(
    config: &MCFTConfig,
    semi: &SemiConfig,
    checkpoint: &EncoderState<T>,
    labeled: &[PointCloud],
    unlabeled: &[PointCloud],
) -> Result<TrainState<T>> {
    let opts = TrainOptions {
        semi: Some((semi, unlabeled)),
        ..Default::default()
    };
    train(TrainMode::Mcft, config, checkpoint, labeled, opts)
}
