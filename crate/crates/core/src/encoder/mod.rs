//! Transformer point-cloud encoder: patch and positional embeddings, a class
//! token, a stack of maskable pre-norm blocks, cost accounting, and
//! checkpoints.

mod checkpoint;
pub(crate) mod graph;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PatchSet;
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, load_model, save_checkpoint, save_model, SCHEMA_VERSION};
pub use graph::{ForwardOutput, LayerTrace, PatchBatch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// FFN hidden width is `ffn_ratio * embed_dim`.
    pub ffn_ratio: usize,
    pub patch_points: usize,
    pub num_patches: usize,
    pub num_classes: usize,
    /// Hidden width of the per-point and positional embedding MLPs.
    pub embed_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            ffn_ratio: 2,
            patch_points: 16,
            num_patches: 16,
            num_classes: 8,
            embed_hidden: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_ratio", self.ffn_ratio),
            ("patch_points", self.patch_points),
            ("num_patches", self.num_patches),
            ("num_classes", self.num_classes),
            ("embed_hidden", self.embed_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }

    /// Tokens per sample, class token included.
    pub fn seq_len(&self) -> usize {
        self.num_patches + 1
    }

    /// Names the first field that differs from `other`.
    pub fn first_difference(&self, other: &EncoderConfig) -> Option<(&'static str, usize, usize)> {
        let pairs = [
            ("embed_dim", self.embed_dim, other.embed_dim),
            ("num_layers", self.num_layers, other.num_layers),
            ("num_heads", self.num_heads, other.num_heads),
            ("ffn_ratio", self.ffn_ratio, other.ffn_ratio),
            ("patch_points", self.patch_points, other.patch_points),
            ("num_patches", self.num_patches, other.num_patches),
            ("num_classes", self.num_classes, other.num_classes),
            ("embed_hidden", self.embed_hidden, other.embed_hidden),
        ];
        pairs.into_iter().find(|(_, a, b)| a != b)
    }

    /// Ordered `(name, rows, cols)` parameter schema of the encoder.
    pub fn schema(&self) -> Vec<(String, usize, usize)> {
        let d = self.embed_dim;
        let ph = self.embed_hidden;
        let hd = self.ffn_hidden();
        let mut out = vec![
            ("patch_embed.fc1.weight".to_string(), 3, ph),
            ("patch_embed.fc1.bias".to_string(), 1, ph),
            ("patch_embed.fc2.weight".to_string(), ph, d),
            ("patch_embed.fc2.bias".to_string(), 1, d),
            ("pos_embed.fc1.weight".to_string(), 3, ph),
            ("pos_embed.fc1.bias".to_string(), 1, ph),
            ("pos_embed.fc2.weight".to_string(), ph, d),
            ("pos_embed.fc2.bias".to_string(), 1, d),
            ("cls_token".to_string(), 1, d),
        ];
        for i in 0..self.num_layers {
            out.extend(layer_schema(i, d, hd));
        }
        out.push(("norm.weight".to_string(), 1, d));
        out.push(("norm.bias".to_string(), 1, d));
        out
    }

    pub fn head_schema(&self) -> Vec<(String, usize, usize)> {
        vec![
            ("head.weight".to_string(), self.embed_dim, self.num_classes),
            ("head.bias".to_string(), 1, self.num_classes),
        ]
    }
}

fn layer_schema(i: usize, d: usize, hd: usize) -> Vec<(String, usize, usize)> {
    let p = |s: &str| format!("layers.{i}.{s}");
    vec![
        (p("norm1.weight"), 1, d),
        (p("norm1.bias"), 1, d),
        (p("attn.qkv.weight"), d, 3 * d),
        (p("attn.qkv.bias"), 1, 3 * d),
        (p("attn.proj.weight"), d, d),
        (p("attn.proj.bias"), 1, d),
        (p("norm2.weight"), 1, d),
        (p("norm2.bias"), 1, d),
        (p("ffn.fc1.weight"), d, hd),
        (p("ffn.fc1.bias"), 1, hd),
        (p("ffn.fc2.weight"), hd, d),
        (p("ffn.fc2.bias"), 1, d),
    ]
}

/// Block index encoded in a parameter name (`layers.<i>.…`).
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

/// Ordered named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap<T> {
    tensors: IndexMap<String, Array2<T>>,
}

impl<T: Scalar> ParamMap<T> {
    pub fn new() -> Self {
        ParamMap {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<T>> {
        self.tensors.shift_remove(name)
    }

    /// Elementwise image of every tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> ParamMap<T> {
        let mut out = ParamMap::new();
        for (name, t) in self.iter() {
            out.insert(name, t.mapv(&f));
        }
        out
    }

    /// True when both maps hold the same names and bit-identical values.
    pub fn bitwise_eq(&self, other: &ParamMap<T>) -> bool {
        self.len() == other.len()
            && self.iter().all(|(name, a)| {
                other.get(name).is_some_and(|b| {
                    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.bits() == y.bits())
                })
            })
    }

    pub fn max_abs_diff(&self, other: &ParamMap<T>) -> Option<T> {
        let mut worst = T::zero();
        for (name, a) in self.iter() {
            let b = other.get(name)?;
            if a.dim() != b.dim() {
                return None;
            }
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((*x - *y).abs());
            }
        }
        Some(worst)
    }
}

/// Samples from a normal distribution truncated to `±2σ`.
fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::c(z * std);
        }
    })
}

const INIT_STD: f64 = 0.02;

pub(crate) fn init_tensor<T: Scalar>(name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
        Array2::ones((rows, cols))
    } else if name.ends_with(".bias") {
        Array2::zeros((rows, cols))
    } else {
        trunc_normal(rng, rows, cols, INIT_STD)
    }
}

/// Freshly initialized classifier head.
pub fn init_head<T: Scalar>(config: &EncoderConfig, seed: u64) -> ParamMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = ParamMap::new();
    for (name, r, c) in config.head_schema() {
        let t = init_tensor(&name, r, c, &mut rng);
        head.insert(name, t);
    }
    head
}

/// Encoder parameters plus a per-layer activity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub config: EncoderConfig,
    pub params: ParamMap<T>,
    /// `true` = layer active; inactive layers pass their input through.
    pub layer_mask: Vec<bool>,
}

impl<T: Scalar> EncoderState<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for (name, r, c) in config.schema() {
            let t = init_tensor(&name, r, c, &mut rng);
            params.insert(name, t);
        }
        let layer_mask = vec![true; config.num_layers];
        Ok(EncoderState {
            config,
            params,
            layer_mask,
        })
    }

    /// Checks names, shapes, and mask length against the config schema.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layer_mask.len() != self.config.num_layers {
            return Err(Error::Integrity(format!(
                "layer mask has {} entries for {} layers",
                self.layer_mask.len(),
                self.config.num_layers
            )));
        }
        let schema = self.config.schema();
        if schema.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} tensors, found {}",
                schema.len(),
                self.params.len()
            )));
        }
        for (name, r, c) in schema {
            match self.params.get(&name) {
                None => return Err(Error::Integrity(format!("missing tensor {name}"))),
                Some(t) if t.dim() != (r, c) => {
                    return Err(Error::Config(format!(
                        "tensor {name} has shape {:?}, config implies {:?}",
                        t.dim(),
                        (r, c)
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn active_layers(&self) -> usize {
        self.layer_mask.iter().filter(|&&m| m).count()
    }

    /// Copy converted to another element type.
    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        let mut params = ParamMap::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.mapv(|v| U::c(v.as_f64())));
        }
        EncoderState {
            config: self.config.clone(),
            params,
            layer_mask: self.layer_mask.clone(),
        }
    }

    /// Token sequence `E_0` (`(m+1) x d`, class token first) of one patch set.
    pub fn embed(&self, patches: &PatchSet) -> Result<Array2<T>> {
        let batch = PatchBatch::new(&self.config, &[patches])?;
        graph::embed_values(self, &batch)
    }

    /// Runs the block stack from stacked token sequences `e0`
    /// (`B·(m+1) x d`). The head, when given, produces logits.
    pub fn forward(&self, head: Option<&ParamMap<T>>, e0: &Array2<T>, capture: bool) -> Result<ForwardOutput<T>> {
        graph::forward_values(self, head, e0, capture)
    }

    /// Embeds and runs a batch of patch sets.
    pub fn infer(&self, head: Option<&ParamMap<T>>, patches: &[&PatchSet], capture: bool) -> Result<ForwardOutput<T>> {
        let batch = PatchBatch::new(&self.config, patches)?;
        graph::infer_batch(self, head, &batch, capture)
    }

    /// Physically removes inactive layers.
    ///
    /// The result has `L'` = active-layer count, contiguous layer indices and
    /// an all-true mask; its outputs match the masked original.
    pub fn compact(&self) -> Result<EncoderState<T>> {
        let active: Vec<usize> = (0..self.config.num_layers)
            .filter(|&i| self.layer_mask[i])
            .collect();
        if active.is_empty() {
            return Err(Error::State("cannot compact an encoder with no active layers".into()));
        }
        let mut config = self.config.clone();
        config.num_layers = active.len();
        let mut params = ParamMap::new();
        for (name, r, c) in config.schema() {
            let source = match layer_of(&name) {
                Some(new_idx) => {
                    let old = active[new_idx];
                    name.replacen(&format!("layers.{new_idx}."), &format!("layers.{old}."), 1)
                }
                None => name.clone(),
            };
            let t = self
                .params
                .get(&source)
                .ok_or_else(|| Error::Integrity(format!("missing tensor {source}")))?;
            debug_assert_eq!(t.dim(), (r, c));
            params.insert(name, t.clone());
        }
        Ok(EncoderState {
            config,
            params,
            layer_mask: vec![true; active.len()],
        })
    }
}

/// Parameter and FLOP totals of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub param_count: usize,
    pub flops_per_forward: u64,
}

/// Analytic cost of one block on a sequence of `s` tokens:
/// attention `2·s²·d + 4·s·d²`, feed-forward `4·s·d·h` for hidden width `h`.
pub fn layer_flops(config: &EncoderConfig) -> u64 {
    let s = config.seq_len() as u64;
    let d = config.embed_dim as u64;
    let h = config.ffn_hidden() as u64;
    let attention = 2 * s * s * d + 4 * s * d * d;
    let ffn = 2 * 2 * s * d * h;
    attention + ffn
}

/// Embedding and head cost, two FLOPs per multiply-add.
pub fn embedding_flops(config: &EncoderConfig) -> u64 {
    let m = config.num_patches as u64;
    let k = config.patch_points as u64;
    let d = config.embed_dim as u64;
    let ph = config.embed_hidden as u64;
    let mlp = 3 * ph + ph * d;
    2 * m * k * mlp + 2 * m * mlp
}

pub fn head_flops(config: &EncoderConfig) -> u64 {
    2 * (config.embed_dim * config.num_classes) as u64
}

/// Parameters of active layers, embeddings, final norm and head; FLOPs of the
/// active blocks plus embedding and head.
pub fn count_costs<T: Scalar>(state: &EncoderState<T>, head: Option<&ParamMap<T>>) -> Costs {
    let mut param_count = 0;
    for (name, t) in state.params.iter() {
        match layer_of(name) {
            Some(i) if !state.layer_mask.get(i).copied().unwrap_or(false) => {}
            _ => param_count += t.len(),
        }
    }
    param_count += head.map_or(0, ParamMap::numel);
    let active = state.active_layers() as u64;
    let mut flops = active * layer_flops(&state.config) + embedding_flops(&state.config);
    if head.is_some() {
        flops += head_flops(&state.config);
    }
    Costs {
        param_count,
        flops_per_forward: flops,
    }
}

#[cfg(test)]
mod tests;
