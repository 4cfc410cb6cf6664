//! Momentum-consistency fine-tuning: a student encoder with a classifier head
//! aligned to an EMA teacher, plus the full fine-tuning and linear-probe
//! baselines and a masked-reconstruction pretext for producing checkpoints.

mod pretrain;

use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::encoder::graph::{self, bind_encoder, bind_head, Encoded, EncoderVars, HeadVars};
use crate::encoder::{init_head, layer_of, EncoderConfig, EncoderState, ParamMap, PatchBatch};
use crate::error::{Error, Result};
use crate::eval;
use crate::optim::{AdamW, OptimConfig};
use crate::pointcloud::{augment_with, patchify, AugmentRecipe, PatchSet, PointCloud, Strength};
use crate::pruning::{self, PruneConfig, SalienceReport};
use crate::scalar::Scalar;
use crate::semisup::{self, SemiConfig, SemiState};

pub use pretrain::{pretrain_masked, PretrainConfig, PretrainReport};

const NORM_EPS: f64 = 1e-8;

/// SplitMix64 finalizer folded over `parts`; derives independent stream seeds.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

// Stream tags for `mix`.
pub(crate) const TAG_HEAD: u64 = 1;
pub(crate) const TAG_ORDER: u64 = 2;
pub(crate) const TAG_VIEW: u64 = 3;
pub(crate) const TAG_UNLABELED: u64 = 4;
pub(crate) const TAG_SALIENCE: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Ema,
    /// Baseline runs have no teacher and therefore no phases.
    Baseline,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Ema => "ema",
            Phase::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Mcft,
    Fft,
    LinearProbe,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mcft => "mcft",
            TrainMode::Fft => "fft",
            TrainMode::LinearProbe => "linear-probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MCFTConfig {
    /// EMA smoothing factor.
    pub alpha: f64,
    /// Weight of the supervised term.
    pub lambda: f64,
    pub warmup_epochs: usize,
    /// Student layers that train; `None` means the deepest third.
    pub trainable_layers: Option<Vec<usize>>,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Weak augmentation of labeled samples each epoch.
    pub augment_labeled: bool,
    pub augment: AugmentRecipe,
    /// Evaluate every this many epochs (0 = final epoch only).
    pub eval_every: usize,
}

impl Default for MCFTConfig {
    fn default() -> Self {
        MCFTConfig {
            alpha: 0.999,
            lambda: 1.0,
            warmup_epochs: 10,
            trainable_layers: None,
            total_epochs: 40,
            batch_size: 8,
            optim: OptimConfig {
                learning_rate: 2e-3,
                ..Default::default()
            },
            seed: 0,
            augment_labeled: true,
            augment: AugmentRecipe::default(),
            eval_every: 0,
        }
    }
}

/// Deepest `ceil(L/3)` layer indices.
pub fn default_trainable_layers(num_layers: usize) -> Vec<usize> {
    let n = num_layers.div_ceil(3);
    (num_layers - n..num_layers).collect()
}

impl MCFTConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.warmup_epochs >= 50 {
            return Err(Error::config("warmup_epochs must be < 50"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("total_epochs and batch_size must be >= 1"));
        }
        if let Some(layers) = &self.trainable_layers {
            if let Some(&bad) = layers.iter().find(|&&i| i >= encoder.num_layers) {
                return Err(Error::config(format!(
                    "trainable layer {bad} outside [0, {})",
                    encoder.num_layers
                )));
            }
        }
        self.optim.validate()
    }

    pub fn resolved_trainable_layers(&self, num_layers: usize) -> Vec<usize> {
        let mut layers = self
            .trainable_layers
            .clone()
            .unwrap_or_else(|| default_trainable_layers(num_layers));
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

/// `1 − cos(e_s, e_t)` with the denominator floored at 1e-8.
pub fn align_loss<T: Scalar>(student: ArrayView1<'_, T>, teacher: ArrayView1<'_, T>) -> T {
    let denom = student.dot(&student).sqrt() * teacher.dot(&teacher).sqrt();
    if denom < T::c(NORM_EPS) {
        log::warn!("alignment on a near-zero embedding; denominator clamped to {NORM_EPS:e}");
    }
    T::one() - student.dot(&teacher) / denom.max(T::c(NORM_EPS))
}

/// `−log softmax(logits)[label]`.
pub fn sup_loss<T: Scalar>(logits: ArrayView1<'_, T>, label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::validation(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    Ok(lse - logits[label])
}

/// `t ← α·t + (1−α)·s` for every tensor of `teacher`.
pub fn ema_update_params<T: Scalar>(teacher: &mut ParamMap<T>, student: &ParamMap<T>, alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Integrity(format!(
            "teacher has {} tensors, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let a = T::c(alpha);
    let b = T::c(1.0 - alpha);
    for (name, t) in teacher.iter_mut() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("student lacks tensor {name}")))?;
        if s.dim() != t.dim() {
            return Err(Error::Integrity(format!("shape mismatch in {name}")));
        }
        t.zip_mut_with(s, |tv, &sv| *tv = a * *tv + b * sv);
    }
    Ok(())
}

/// EMA update of a teacher encoder from the student encoder (heads excluded).
pub fn ema_update<T: Scalar>(teacher: &mut EncoderState<T>, student: &EncoderState<T>, alpha: f64) -> Result<()> {
    if teacher.config != student.config {
        return Err(Error::Integrity("teacher and student configs differ".into()));
    }
    ema_update_params(&mut teacher.params, &student.params, alpha)
}

/// Patch sets and class labels of one labeled batch.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub patches: PatchBatch<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(config: &EncoderConfig, sets: &[PatchSet], labels: Vec<usize>) -> Result<Self> {
        if sets.len() != labels.len() {
            return Err(Error::validation("one label per patch set required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
            return Err(Error::validation(format!(
                "label {bad} outside [0, {})",
                config.num_classes
            )));
        }
        let refs: Vec<&PatchSet> = sets.iter().collect();
        Ok(LabeledBatch {
            patches: PatchBatch::new(config, &refs)?,
            labels,
        })
    }
}

/// Tokenizes a cloud, optionally after augmenting it with `seed`.
pub fn view_patches(
    config: &EncoderConfig,
    cloud: &PointCloud,
    augment: Option<(&AugmentRecipe, Strength)>,
    seed: u64,
) -> Result<PatchSet> {
    match augment {
        Some((recipe, strength)) => {
            let view = augment_with(cloud, recipe, strength, seed)?;
            patchify(&view, config.num_patches, config.patch_points, 0)
        }
        None => patchify(cloud, config.num_patches, config.patch_points, 0),
    }
}

/// Per-step loss values. The unlabeled terms stay zero in supervised steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub align: f64,
    pub sup: f64,
    pub total: f64,
    pub em: f64,
    pub mask_rate: f64,
    pub inverse: f64,
    pub contrastive: f64,
    pub aha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslMetrics {
    pub loss_em: f64,
    pub mask_rate: f64,
    pub loss_inverse: f64,
    pub loss_contrastive: f64,
    pub loss_aha: f64,
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_align: f64,
    pub loss_sup: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub eval_acc: Option<f64>,
    pub ssl: Option<SslMetrics>,
    pub wall_ms: u64,
}

/// Everything that evolves during fine-tuning.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub mode: TrainMode,
    pub student: EncoderState<T>,
    pub head: ParamMap<T>,
    /// Momentum encoder; absent for baselines. Never touched by the optimizer.
    pub teacher: Option<EncoderState<T>>,
    pub optimizer: AdamW<T>,
    pub epoch: usize,
    pub phase: Phase,
    pub trainable_layers: Vec<usize>,
    pub history: Vec<EpochMetrics>,
    pub prune_log: Vec<SalienceReport>,
    pub semi: Option<SemiState>,
}

impl<T: Scalar> TrainState<T> {
    /// Student (and teacher, for MCFT) start from `checkpoint`; the head is fresh.
    pub fn new(mode: TrainMode, config: &MCFTConfig, checkpoint: &EncoderState<T>) -> Result<Self> {
        checkpoint.validate()?;
        config.validate(&checkpoint.config)?;
        let trainable_layers = match mode {
            TrainMode::Mcft => config.resolved_trainable_layers(checkpoint.config.num_layers),
            TrainMode::Fft => (0..checkpoint.config.num_layers).collect(),
            TrainMode::LinearProbe => Vec::new(),
        };
        Ok(TrainState {
            mode,
            student: checkpoint.clone(),
            head: init_head(&checkpoint.config, mix(&[config.seed, TAG_HEAD])),
            teacher: (mode == TrainMode::Mcft).then(|| checkpoint.clone()),
            optimizer: AdamW::new(config.optim.clone()),
            epoch: 0,
            phase: if mode == TrainMode::Mcft { Phase::Warmup } else { Phase::Baseline },
            trainable_layers,
            history: Vec::new(),
            prune_log: Vec::new(),
            semi: None,
        })
    }

    /// Whether the student encoder tensor `name` receives updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        match (self.mode, layer_of(name)) {
            (TrainMode::LinearProbe, _) => false,
            (_, Some(i)) => self.trainable_layers.contains(&i),
            (_, None) => true,
        }
    }

    pub fn head_trainable(&self) -> bool {
        true
    }
}

/// Student graph nodes for one batch.
pub(crate) struct StudentPass {
    pub vars: EncoderVars,
    pub head: HeadVars,
    pub enc: Encoded,
    pub logits: Var,
}

/// Binds the student and head and runs a batch through them. With
/// `all_grad`, every leaf tracks gradients regardless of freezing.
pub(crate) fn bind_student<T: Scalar>(g: &mut Graph<T>, state: &TrainState<T>, all_grad: bool) -> (EncoderVars, HeadVars) {
    let vars = if all_grad {
        bind_encoder(g, &state.student, &|_| true)
    } else {
        bind_encoder(g, &state.student, &|n| state.is_trainable(n))
    };
    let head = bind_head(g, &state.head, all_grad || state.head_trainable());
    (vars, head)
}

pub(crate) fn run_student<T: Scalar>(
    g: &mut Graph<T>,
    state: &TrainState<T>,
    vars: &EncoderVars,
    head: &HeadVars,
    batch: &PatchBatch<T>,
) -> Result<(Encoded, Var)> {
    let config = &state.student.config;
    let e0 = graph::embed(g, vars, config, batch, None)?;
    let enc = graph::transform(g, vars, config, &state.student.layer_mask, e0)?;
    let z = graph::logits(g, head, enc.cls)?;
    Ok((enc, z))
}

pub(crate) fn student_pass<T: Scalar>(
    g: &mut Graph<T>,
    state: &TrainState<T>,
    batch: &PatchBatch<T>,
    all_grad: bool,
) -> Result<StudentPass> {
    let (vars, head) = bind_student(g, state, all_grad);
    let (enc, logits) = run_student(g, state, &vars, &head, batch)?;
    Ok(StudentPass {
        vars,
        head,
        enc,
        logits,
    })
}

/// Teacher class embeddings, computed outside any gradient tape.
pub(crate) fn teacher_cls<T: Scalar>(state: &TrainState<T>, batch: &PatchBatch<T>) -> Result<Option<Array2<T>>> {
    match &state.teacher {
        Some(t) => Ok(Some(graph::infer_batch(t, None, batch, false)?.cls)),
        None => Ok(None),
    }
}

pub(crate) fn add_scaled<T: Scalar>(g: &mut Graph<T>, acc: Option<Var>, term: Var, weight: f64) -> Var {
    let term = if weight == 1.0 { term } else { g.scale(term, T::c(weight)) };
    match acc {
        Some(a) => g.add(a, term),
        None => term,
    }
}

/// Labeled objective `mean_B[align + λ·sup]`; baselines use `mean_B[sup]`.
pub(crate) fn labeled_objective<T: Scalar>(
    g: &mut Graph<T>,
    state: &TrainState<T>,
    pass: &StudentPass,
    batch: &LabeledBatch<T>,
    lambda: f64,
) -> Result<(Var, StepLosses)> {
    let n = batch.labels.len();
    let w = vec![T::c(1.0 / n as f64); n];
    let sup = g.cross_entropy(pass.logits, batch.labels.clone(), w.clone());
    let mut losses = StepLosses {
        sup: g.scalar(sup).as_f64(),
        ..Default::default()
    };
    let total = match teacher_cls(state, &batch.patches)? {
        Some(target) => {
            let align = g.cosine_distance(pass.enc.cls, target, w);
            losses.align = g.scalar(align).as_f64();
            add_scaled(g, Some(align), sup, lambda)
        }
        None => sup,
    };
    losses.total = g.scalar(total).as_f64();
    Ok((total, losses))
}

pub(crate) fn check_loss(losses: &StepLosses) -> Result<()> {
    if losses.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: None,
            message: format!("non-finite loss (align {}, sup {})", losses.align, losses.sup),
        })
    }
}

/// Gradients of the trainable student and head tensors, in schema order.
pub(crate) fn collect_grads<T: Scalar>(
    g: &Graph<T>,
    grads: &mut Gradients<T>,
    vars: &EncoderVars,
    head: &HeadVars,
) -> Vec<(String, Array2<T>)> {
    vars.all
        .iter()
        .chain(head.all.iter())
        .filter(|(_, v)| g.requires_grad(*v))
        .filter_map(|(name, v)| grads.take(*v).map(|gr| (name.clone(), gr)))
        .collect()
}

/// Labeled loss and its gradient for every trainable student tensor.
pub fn mcft_loss_and_grads<T: Scalar>(
    state: &TrainState<T>,
    lambda: f64,
    batch: &LabeledBatch<T>,
) -> Result<(StepLosses, Vec<(String, Array2<T>)>)> {
    let mut g = Graph::new();
    let pass = student_pass(&mut g, state, &batch.patches, false)?;
    let (total, losses) = labeled_objective(&mut g, state, &pass, batch, lambda)?;
    check_loss(&losses)?;
    let mut grads = g.backward(total);
    Ok((losses, collect_grads(&g, &mut grads, &pass.vars, &pass.head)))
}

/// Optimizer update on the student, followed by the EMA teacher update in
/// the EMA phase.
pub(crate) fn apply_update<T: Scalar>(
    state: &mut TrainState<T>,
    config: &MCFTConfig,
    grads: &[(String, Array2<T>)],
    lr: f64,
) -> Result<()> {
    state
        .optimizer
        .step(&mut [&mut state.student.params, &mut state.head], grads, lr)?;
    if state.phase == Phase::Ema {
        if let Some(teacher) = state.teacher.as_mut() {
            ema_update(teacher, &state.student, config.alpha)?;
        }
    }
    Ok(())
}

/// One supervised optimization step.
pub fn mcft_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &MCFTConfig,
    batch: &LabeledBatch<T>,
    lr: f64,
) -> Result<StepLosses> {
    if batch.labels.is_empty() {
        return Err(Error::EmptyInput("empty labeled batch".into()));
    }
    let (losses, grads) = mcft_loss_and_grads(state, config.lambda, batch)?;
    apply_update(state, config, &grads, lr)?;
    Ok(losses)
}

/// Optional extensions of the training loop.
pub struct TrainOptions<'a, T> {
    /// Evaluated on the schedule given by `eval_every`.
    pub eval_set: Option<&'a [PointCloud]>,
    /// Semi-supervised objective over an unlabeled pool.
    pub semi: Option<(&'a SemiConfig, &'a [PointCloud])>,
    pub prune: Option<&'a PruneConfig>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics, &TrainState<T>) -> Result<()>>,
}

impl<T> Default for TrainOptions<'_, T> {
    fn default() -> Self {
        TrainOptions {
            eval_set: None,
            semi: None,
            prune: None,
            on_epoch: None,
        }
    }
}

pub(crate) fn labels_of(clouds: &[PointCloud], num_classes: usize) -> Result<Vec<usize>> {
    clouds
        .iter()
        .map(|c| match c.label {
            Some(l) if l < num_classes => Ok(l),
            Some(l) => Err(Error::validation(format!(
                "{}: label {l} outside [0, {num_classes})",
                c.id
            ))),
            None => Err(Error::validation(format!("{} has no label", c.id))),
        })
        .collect()
}

/// Augmented (when configured) labeled batch for the given sample indices.
pub(crate) fn labeled_batch<T: Scalar>(
    config: &MCFTConfig,
    encoder: &EncoderConfig,
    clouds: &[PointCloud],
    labels: &[usize],
    indices: &[usize],
    epoch: usize,
) -> Result<LabeledBatch<T>> {
    let mut sets = Vec::with_capacity(indices.len());
    for &i in indices {
        let aug = config.augment_labeled.then_some((&config.augment, Strength::Weak));
        let seed = mix(&[config.seed, TAG_VIEW, epoch as u64, i as u64]);
        sets.push(view_patches(encoder, &clouds[i], aug, seed)?);
    }
    LabeledBatch::new(encoder, &sets, indices.iter().map(|&i| labels[i]).collect())
}

/// Fine-tunes from `checkpoint` on `labeled` with the given objective.
pub fn train<T: Scalar>(
    mode: TrainMode,
    config: &MCFTConfig,
    checkpoint: &EncoderState<T>,
    labeled: &[PointCloud],
    mut opts: TrainOptions<'_, T>,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(mode, config, checkpoint)?;
    let encoder = checkpoint.config.clone();
    if labeled.is_empty() {
        return Err(Error::EmptyInput("no labeled samples".into()));
    }
    let labels = labels_of(labeled, encoder.num_classes)?;
    if let Some(p) = opts.prune {
        p.validate(&encoder)?;
    }
    let semi = match opts.semi {
        Some((sc, pool)) if !pool.is_empty() => {
            sc.validate()?;
            state.semi = Some(SemiState::new(pool.len()));
            Some((sc, pool))
        }
        Some(_) => {
            log::info!("unlabeled pool is empty; training without the unlabeled objective");
            None
        }
        None => None,
    };

    for epoch in 0..config.total_epochs {
        let started = Instant::now();
        state.epoch = epoch;
        if mode == TrainMode::Mcft {
            state.phase = if epoch < config.warmup_epochs { Phase::Warmup } else { Phase::Ema };
        }
        if let Some(p) = opts.prune {
            if pruning::event_due(p, config, &state, epoch) {
                let report = pruning::prune_event(&mut state, config, p, labeled, &labels, epoch)?;
                state.prune_log.push(report);
            }
        }
        let lr = config.optim.lr_at(epoch, config.total_epochs);

        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[config.seed, TAG_ORDER, epoch as u64])));
        let mut pool_order = Vec::new();
        if let Some((_, pool)) = semi {
            pool_order = (0..pool.len()).collect();
            pool_order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[
                config.seed,
                TAG_UNLABELED,
                epoch as u64,
            ])));
        }

        let mut sums = StepLosses::default();
        let mut steps = 0usize;
        for (s, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = labeled_batch(config, &encoder, labeled, &labels, chunk, epoch)?;
            let losses = match semi {
                Some((sc, pool)) if sc.omega > 0.0 => {
                    let want = sc.mu * chunk.len();
                    let picks: Vec<usize> = (0..want)
                        .map(|j| pool_order[(s * sc.mu * config.batch_size + j) % pool.len()])
                        .collect();
                    semisup::semi_step(&mut state, config, sc, &batch, pool, &picks, lr)?
                }
                _ => mcft_step(&mut state, config, &batch, lr)?,
            };
            sums.align += losses.align;
            sums.sup += losses.sup;
            sums.total += losses.total;
            sums.em += losses.em;
            sums.mask_rate += losses.mask_rate;
            sums.inverse += losses.inverse;
            sums.contrastive += losses.contrastive;
            sums.aha += losses.aha;
            steps += 1;
        }
        if let Some(s) = state.semi.as_mut() {
            s.end_epoch();
        }

        let n = steps.max(1) as f64;
        let last = epoch + 1 == config.total_epochs;
        let eval_acc = match opts.eval_set {
            Some(set) if last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) => {
                Some(eval::evaluate(&state.student, &state.head, set)?.overall)
            }
            _ => None,
        };
        let metrics = EpochMetrics {
            epoch,
            phase: state.phase,
            loss_align: sums.align / n,
            loss_sup: sums.sup / n,
            loss_total: sums.total / n,
            lr,
            eval_acc,
            ssl: semi.map(|_| SslMetrics {
                loss_em: sums.em / n,
                mask_rate: sums.mask_rate / n,
                loss_inverse: sums.inverse / n,
                loss_contrastive: sums.contrastive / n,
                loss_aha: sums.aha / n,
            }),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::debug!(
            "epoch {epoch} [{}] total {:.4} align {:.4} sup {:.4}",
            metrics.phase.name(),
            metrics.loss_total,
            metrics.loss_align,
            metrics.loss_sup
        );
        state.history.push(metrics);
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(state.history.last().expect("just pushed"), &state)?;
        }
    }
    if let Some(p) = opts.prune {
        let remaining = pruning::budget_remaining(p, &state);
        if remaining > 0 {
            log::warn!("pruning budget not reached: {remaining} layer(s) left to remove");
        }
    }
    Ok(state)
}

pub fn train_mcft<T: Scalar>(
    config: &MCFTConfig,
    checkpoint: &EncoderState<T>,
    labeled: &[PointCloud],
) -> Result<TrainState<T>> {
    train(TrainMode::Mcft, config, checkpoint, labeled, TrainOptions::default())
}

pub fn train_baseline<T: Scalar>(
    config: &MCFTConfig,
    checkpoint: &EncoderState<T>,
    labeled: &[PointCloud],
    mode: TrainMode,
) -> Result<TrainState<T>> {
    if mode == TrainMode::Mcft {
        return Err(Error::config("train_baseline expects fft or linear-probe"));
    }
    train(mode, config, checkpoint, labeled, TrainOptions::default())
}
