//! Builds encoder computations on an autodiff [`Graph`].

use ndarray::{s, Array2};

use super::{EncoderConfig, EncoderState, ParamMap};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::pointcloud::PatchSet;
use crate::scalar::Scalar;

/// Patch sets of a batch packed into the row layouts the graph expects.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    /// `B·m·k x 3` center-relative neighbour coordinates.
    pub points: Array2<T>,
    /// `B·m x 3` absolute centers.
    pub centers: Array2<T>,
    pub batch: usize,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn new(config: &EncoderConfig, patches: &[&PatchSet]) -> Result<Self> {
        let (m, k) = (config.num_patches, config.patch_points);
        let b = patches.len();
        if b == 0 {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        let mut points = Array2::zeros((b * m * k, 3));
        let mut centers = Array2::zeros((b * m, 3));
        for (bi, p) in patches.iter().enumerate() {
            if p.num_patches() != m || p.patch_points() != k {
                return Err(Error::config(format!(
                    "patch set {} is {}x{} but the encoder expects num_patches={m}, patch_points={k}",
                    p.source_id,
                    p.num_patches(),
                    p.patch_points()
                )));
            }
            for (gi, group) in p.groups.outer_iter().enumerate() {
                for (j, pt) in group.rows().into_iter().enumerate() {
                    let r = (bi * m + gi) * k + j;
                    for d in 0..3 {
                        points[[r, d]] = T::c(pt[d]);
                    }
                }
                for d in 0..3 {
                    centers[[bi * m + gi, d]] = T::c(p.centers[[gi, d]]);
                }
            }
        }
        Ok(PatchBatch {
            points,
            centers,
            batch: b,
        })
    }

    /// Concatenates batches in order.
    pub fn concat(parts: &[&PatchBatch<T>]) -> PatchBatch<T> {
        let points: Vec<_> = parts.iter().map(|p| p.points.view()).collect();
        let centers: Vec<_> = parts.iter().map(|p| p.centers.view()).collect();
        PatchBatch {
            points: ndarray::concatenate(ndarray::Axis(0), &points).expect("matching widths"),
            centers: ndarray::concatenate(ndarray::Axis(0), &centers).expect("matching widths"),
            batch: parts.iter().map(|p| p.batch).sum(),
        }
    }
}

pub(crate) struct LayerVars {
    norm1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    norm2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

/// Graph leaves for every encoder parameter.
pub(crate) struct EncoderVars {
    patch_fc1: (Var, Var),
    patch_fc2: (Var, Var),
    pos_fc1: (Var, Var),
    pos_fc2: (Var, Var),
    cls: Var,
    layers: Vec<LayerVars>,
    norm: (Var, Var),
    /// `(name, leaf)` in schema order.
    pub all: Vec<(String, Var)>,
}

impl EncoderVars {
    /// Final norm gain and bias.
    pub(crate) fn norm(&self) -> (Var, Var) {
        self.norm
    }
}

pub(crate) struct HeadVars {
    weight: Var,
    bias: Var,
    pub all: Vec<(String, Var)>,
}

fn leaf<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamMap<T>,
    name: &str,
    trainable: &dyn Fn(&str) -> bool,
    all: &mut Vec<(String, Var)>,
) -> Var {
    let value = params
        .get(name)
        .unwrap_or_else(|| panic!("validated state lacks {name}"))
        .clone();
    let v = g.leaf(value, trainable(name));
    all.push((name.to_string(), v));
    v
}

pub(crate) fn bind_encoder<T: Scalar>(
    g: &mut Graph<T>,
    state: &EncoderState<T>,
    trainable: &dyn Fn(&str) -> bool,
) -> EncoderVars {
    let p = &state.params;
    let mut all = Vec::with_capacity(p.len());
    let pair = |g: &mut Graph<T>, prefix: &str, all: &mut Vec<(String, Var)>| {
        (
            leaf(g, p, &format!("{prefix}.weight"), trainable, all),
            leaf(g, p, &format!("{prefix}.bias"), trainable, all),
        )
    };
    let patch_fc1 = pair(g, "patch_embed.fc1", &mut all);
    let patch_fc2 = pair(g, "patch_embed.fc2", &mut all);
    let pos_fc1 = pair(g, "pos_embed.fc1", &mut all);
    let pos_fc2 = pair(g, "pos_embed.fc2", &mut all);
    let cls = leaf(g, p, "cls_token", trainable, &mut all);
    let mut layers = Vec::with_capacity(state.config.num_layers);
    for i in 0..state.config.num_layers {
        layers.push(LayerVars {
            norm1: pair(g, &format!("layers.{i}.norm1"), &mut all),
            qkv: pair(g, &format!("layers.{i}.attn.qkv"), &mut all),
            proj: pair(g, &format!("layers.{i}.attn.proj"), &mut all),
            norm2: pair(g, &format!("layers.{i}.norm2"), &mut all),
            fc1: pair(g, &format!("layers.{i}.ffn.fc1"), &mut all),
            fc2: pair(g, &format!("layers.{i}.ffn.fc2"), &mut all),
        });
    }
    let norm = pair(g, "norm", &mut all);
    EncoderVars {
        patch_fc1,
        patch_fc2,
        pos_fc1,
        pos_fc2,
        cls,
        layers,
        norm,
        all,
    }
}

pub(crate) fn bind_head<T: Scalar>(g: &mut Graph<T>, head: &ParamMap<T>, trainable: bool) -> HeadVars {
    let mut all = Vec::with_capacity(2);
    let t = |_: &str| trainable;
    let weight = leaf(g, head, "head.weight", &t, &mut all);
    let bias = leaf(g, head, "head.bias", &t, &mut all);
    HeadVars { weight, bias, all }
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, layer: Option<usize>) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            message: "non-finite activation".into(),
        })
    }
}

fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, fc1: (Var, Var), fc2: (Var, Var)) -> Var {
    let h = g.linear(x, fc1.0, fc1.1);
    let h = g.gelu(h);
    g.linear(h, fc2.0, fc2.1)
}

/// Patch tokens `B·m x d` before positional terms; rows flagged in
/// `replace` are swapped for the `1 x d` token given with them.
pub(crate) fn patch_tokens<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &PatchBatch<T>,
    replace: Option<(Var, Vec<bool>)>,
) -> Var {
    let pts = g.constant(batch.points.clone());
    let per_point = mlp(g, pts, vars.patch_fc1, vars.patch_fc2);
    let mut tokens = g.group_max(per_point, config.patch_points);
    if let Some((fill, rows)) = replace {
        tokens = g.fill_rows(tokens, fill, rows);
    }
    tokens
}

/// Token sequences `E_0` for the batch (`B·(m+1) x d`).
pub(crate) fn embed<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &PatchBatch<T>,
    replace: Option<(Var, Vec<bool>)>,
) -> Result<Var> {
    let tokens = patch_tokens(g, vars, config, batch, replace);
    let centers = g.constant(batch.centers.clone());
    let pos = mlp(g, centers, vars.pos_fc1, vars.pos_fc2);
    let tokens = g.add(tokens, pos);
    let e0 = g.prepend_cls(tokens, vars.cls, config.num_patches);
    check_finite(g, e0, None)?;
    Ok(e0)
}

fn block<T: Scalar>(g: &mut Graph<T>, lv: &LayerVars, config: &EncoderConfig, x: Var) -> Var {
    let h = g.layer_norm(x, lv.norm1.0, lv.norm1.1);
    let qkv = g.linear(h, lv.qkv.0, lv.qkv.1);
    let a = g.attention(qkv, config.seq_len(), config.num_heads);
    let a = g.linear(a, lv.proj.0, lv.proj.1);
    let x = g.add(x, a);
    let h = g.layer_norm(x, lv.norm2.0, lv.norm2.1);
    let f = mlp(g, h, lv.fc1, lv.fc2);
    g.add(x, f)
}

/// Nodes produced by the block stack.
pub(crate) struct Encoded {
    /// Output of every layer; inactive layers repeat their input node.
    pub layers: Vec<Var>,
    /// Final-normed class tokens, `B x d`.
    pub cls: Var,
    /// Last layer output before the final norm.
    pub tokens: Var,
}

pub(crate) fn transform<T: Scalar>(
    g: &mut Graph<T>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    mask: &[bool],
    e0: Var,
) -> Result<Encoded> {
    let mut x = e0;
    let mut layers = Vec::with_capacity(mask.len());
    for (i, lv) in vars.layers.iter().enumerate() {
        if mask[i] {
            x = block(g, lv, config, x);
            check_finite(g, x, Some(i))?;
        }
        layers.push(x);
    }
    let seq = config.seq_len();
    let rows = g.value(x).nrows();
    let cls_rows: Vec<usize> = (0..rows / seq).map(|b| b * seq).collect();
    let cls = g.gather_rows(x, cls_rows);
    let cls = g.layer_norm(cls, vars.norm.0, vars.norm.1);
    Ok(Encoded {
        layers,
        cls,
        tokens: x,
    })
}

pub(crate) fn logits<T: Scalar>(g: &mut Graph<T>, head: &HeadVars, cls: Var) -> Result<Var> {
    let z = g.linear(cls, head.weight, head.bias);
    check_finite(g, z, None)?;
    Ok(z)
}

/// Per-layer token outputs and final class embeddings of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// `L` entries of `B·(m+1) x d`; inactive layers record their input.
    pub layers: Vec<Array2<T>>,
    /// `B x d` final class embeddings.
    pub cls: Array2<T>,
    pub seq_len: usize,
}

impl<T: Scalar> LayerTrace<T> {
    /// Layer `layer`'s `(m+1) x d` tokens for sample `b`.
    pub fn sample(&self, layer: usize, b: usize) -> ndarray::ArrayView2<'_, T> {
        self.layers[layer].slice(s![b * self.seq_len..(b + 1) * self.seq_len, ..])
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `B x C`, present when a head was supplied.
    pub logits: Option<Array2<T>>,
    /// `B x d` final-normed class embeddings.
    pub cls: Array2<T>,
    pub trace: Option<LayerTrace<T>>,
}

fn frozen(_: &str) -> bool {
    false
}

pub(crate) fn embed_values<T: Scalar>(state: &EncoderState<T>, batch: &PatchBatch<T>) -> Result<Array2<T>> {
    state.validate()?;
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, state, &frozen);
    let e0 = embed(&mut g, &vars, &state.config, batch, None)?;
    Ok(g.value(e0).clone())
}

fn finish<T: Scalar>(
    g: &mut Graph<T>,
    state: &EncoderState<T>,
    head: Option<&ParamMap<T>>,
    vars: &EncoderVars,
    e0: Var,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    let enc = transform(g, vars, &state.config, &state.layer_mask, e0)?;
    let logits = match head {
        Some(h) => {
            let hv = bind_head(g, h, false);
            let z = logits(g, &hv, enc.cls)?;
            Some(g.value(z).clone())
        }
        None => None,
    };
    let cls = g.value(enc.cls).clone();
    let trace = capture.then(|| LayerTrace {
        layers: enc.layers.iter().map(|&v| g.value(v).clone()).collect(),
        cls: cls.clone(),
        seq_len: state.config.seq_len(),
    });
    Ok(ForwardOutput { logits, cls, trace })
}

pub(crate) fn forward_values<T: Scalar>(
    state: &EncoderState<T>,
    head: Option<&ParamMap<T>>,
    e0: &Array2<T>,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    state.validate()?;
    let seq = state.config.seq_len();
    if e0.ncols() != state.config.embed_dim || e0.nrows() == 0 || e0.nrows() % seq != 0 {
        return Err(Error::config(format!(
            "token input {:?} is not a stack of {seq} x {} sequences",
            e0.dim(),
            state.config.embed_dim
        )));
    }
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, state, &frozen);
    let x = g.constant(e0.clone());
    finish(&mut g, state, head, &vars, x, capture)
}

pub(crate) fn infer_batch<T: Scalar>(
    state: &EncoderState<T>,
    head: Option<&ParamMap<T>>,
    batch: &PatchBatch<T>,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    state.validate()?;
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, state, &frozen);
    let e0 = embed(&mut g, &vars, &state.config, batch, None)?;
    finish(&mut g, state, head, &vars, e0, capture)
}
