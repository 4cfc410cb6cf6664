use ndarray::{s, Array2};
use proptest::prelude::*;

use super::graph::{bind_encoder, bind_head, embed, logits, transform, PatchBatch};
use super::*;
use crate::autograd::Graph;
use crate::pointcloud::PatchSet;
use crate::testutil::{fd_max_rel_error, patches, smooth_at, spread, tiny};

#[test]
fn embed_prepends_class_token() {
    let config = EncoderConfig::default();
    let state = EncoderState::<f32>::new(config.clone(), 0).unwrap();
    let p = &patches(&config, 1)[0];
    let e0 = state.embed(p).unwrap();
    assert_eq!(e0.dim(), (config.num_patches + 1, config.embed_dim));
    assert_eq!(e0.row(0), state.params.get("cls_token").unwrap().row(0));
}

#[test]
fn embedding_is_per_patch() {
    let config = tiny();
    let state = EncoderState::<f64>::new(config.clone(), 1).unwrap();
    let p = patches(&config, 1).remove(0);
    let perm = [2, 0, 3, 1];
    let mut q = p.clone();
    for (new, &old) in perm.iter().enumerate() {
        q.centers.row_mut(new).assign(&p.centers.row(old));
        q.groups.slice_mut(s![new, .., ..]).assign(&p.groups.slice(s![old, .., ..]));
    }
    let (a, b) = (state.embed(&p).unwrap(), state.embed(&q).unwrap());
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(b.row(new + 1), a.row(old + 1));
    }
}

#[test]
fn zero_patch_weights_leave_positional_terms() {
    let config = tiny();
    let mut state = EncoderState::<f64>::new(config.clone(), 2).unwrap();
    for name in ["patch_embed.fc1.weight", "patch_embed.fc2.weight"] {
        state.params.get_mut(name).unwrap().fill(0.0);
    }
    let p = patches(&config, 1).remove(0);
    let e0 = state.embed(&p).unwrap();

    // Independent positional MLP on the centers.
    let w1 = state.params.get("pos_embed.fc1.weight").unwrap();
    let b1 = state.params.get("pos_embed.fc1.bias").unwrap();
    let w2 = state.params.get("pos_embed.fc2.weight").unwrap();
    let b2 = state.params.get("pos_embed.fc2.bias").unwrap();
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let h = (p.centers.dot(w1) + b1).mapv(gelu);
    let pos = h.dot(w2) + b2;
    for i in 0..config.num_patches {
        for j in 0..config.embed_dim {
            assert!((e0[[i + 1, j]] - pos[[i, j]]).abs() < 1e-12);
        }
    }
}

#[test]
fn embed_rejects_mismatched_patches() {
    let config = tiny();
    let state = EncoderState::<f64>::new(config.clone(), 0).unwrap();
    let mut other = config.clone();
    other.num_patches = 5;
    let p = patches(&other, 1).remove(0);
    assert!(matches!(state.embed(&p), Err(Error::Config(_))));
}

#[test]
fn all_masked_stack_is_identity() {
    let config = tiny();
    let mut state = EncoderState::<f64>::new(config.clone(), 3).unwrap();
    spread(&mut state, 3);
    state.layer_mask = vec![false; config.num_layers];
    let p = patches(&config, 1).remove(0);
    let e0 = state.embed(&p).unwrap();
    let out = state.forward(None, &e0, true).unwrap();

    let x = e0.row(0);
    let mean = x.sum() / x.len() as f64;
    let var = x.mapv(|v| (v - mean).powi(2)).sum() / x.len() as f64;
    let g = state.params.get("norm.weight").unwrap();
    let b = state.params.get("norm.bias").unwrap();
    for j in 0..config.embed_dim {
        let want = (x[j] - mean) / (var + 1e-5).sqrt() * g[[0, j]] + b[[0, j]];
        assert!((out.cls[[0, j]] - want).abs() < 1e-10);
    }
    let trace = out.trace.unwrap();
    assert_eq!(trace.layers.len(), config.num_layers);
    assert!(trace.layers.iter().all(|l| l == &e0));
}

#[test]
fn identical_batch_rows_give_identical_logits() {
    let config = EncoderConfig::default();
    let state = EncoderState::<f32>::new(config.clone(), 4).unwrap();
    let head = init_head(&config, 5);
    let p = patches(&config, 1).remove(0);
    let out = state.infer(Some(&head), &[&p, &p], false).unwrap();
    let z = out.logits.unwrap();
    assert_eq!(z.dim(), (2, config.num_classes));
    assert_eq!(z.row(0), z.row(1));
    let again = state.infer(Some(&head), &[&p, &p], false).unwrap();
    assert_eq!(again.logits.unwrap(), z);
}

#[test]
fn forward_flags_non_finite_layer() {
    let config = tiny();
    let mut state = EncoderState::<f64>::new(config.clone(), 0).unwrap();
    state.params.get_mut("layers.1.ffn.fc2.bias").unwrap()[[0, 0]] = f64::NAN;
    let p = patches(&config, 1).remove(0);
    match state.infer(None, &[&p], false) {
        Err(Error::Numeric { layer: Some(1), .. }) => {}
        other => panic!("expected numeric fault at layer 1, got {other:?}"),
    }
}

fn loss_and_grads(
    state: &EncoderState<f64>,
    head: &ParamMap<f64>,
    batch: &PatchBatch<f64>,
    labels: &[usize],
) -> (f64, ParamMap<f64>) {
    let mut g = Graph::new();
    let vars = bind_encoder(&mut g, state, &|_| true);
    let hv = bind_head(&mut g, head, true);
    let e0 = embed(&mut g, &vars, &state.config, batch, None).unwrap();
    let enc = transform(&mut g, &vars, &state.config, &state.layer_mask, e0).unwrap();
    let z = logits(&mut g, &hv, enc.cls).unwrap();
    let w = vec![1.0 / labels.len() as f64; labels.len()];
    let loss = g.cross_entropy(z, labels.to_vec(), w);
    let grads = g.backward(loss);
    let mut out = ParamMap::new();
    for (name, v) in vars.all.iter().chain(hv.all.iter()) {
        out.insert(name.clone(), grads.get(*v).cloned().unwrap_or_else(|| g.value(*v).mapv(|_| 0.0)));
    }
    (g.scalar(loss), out)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let config = tiny();
    let sets = patches(&config, 3);
    let refs: Vec<&PatchSet> = sets.iter().collect();
    let batch = PatchBatch::new(&config, &refs).unwrap();
    let state = (0..200)
        .map(|seed| {
            let mut s = EncoderState::<f64>::new(config.clone(), seed).unwrap();
            spread(&mut s, seed);
            s
        })
        .find(|s| smooth_at(s, &[&batch], 1e-3))
        .expect("a seed away from pooling ties");
    let head = init_head::<f64>(&config, 8).map(|v| v * 5.0);
    let labels = [0, 1, 2];
    let (_, grads) = loss_and_grads(&state, &head, &batch, &labels);
    let analytic: Vec<(String, Array2<f64>)> = grads.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let (rel, name) = fd_max_rel_error(&analytic, 1e-3, |name, r, c, delta| {
        let (mut s, mut hd) = (state.clone(), head.clone());
        match s.params.get_mut(name) {
            Some(t) => t[[r, c]] += delta,
            None => hd.get_mut(name).unwrap()[[r, c]] += delta,
        }
        loss_and_grads(&s, &hd, &batch, &labels).0
    });
    assert!(rel < 1e-4, "{name}: relative error {rel:e}");
}

#[test]
fn masking_a_layer_removes_exactly_its_cost() {
    let config = EncoderConfig::default();
    let mut state = EncoderState::<f32>::new(config.clone(), 0).unwrap();
    let head = init_head(&config, 0);
    let full = count_costs(&state, Some(&head));
    state.layer_mask[2] = false;
    let masked = count_costs(&state, Some(&head));
    assert_eq!(full.flops_per_forward - masked.flops_per_forward, layer_flops(&config));
    let per_layer: usize = config.schema().iter().filter(|(n, _, _)| layer_of(n) == Some(0)).map(|(_, r, c)| r * c).sum();
    assert_eq!(full.param_count - masked.param_count, per_layer);
}

#[test]
fn attention_quadratic_terms_scale_with_width() {
    let mut config = EncoderConfig {
        num_layers: 1,
        ..Default::default()
    };
    let attn = |c: &EncoderConfig| {
        let s = c.seq_len() as u64;
        let d = c.embed_dim as u64;
        4 * s * d * d
    };
    let ffn = |c: &EncoderConfig| 4 * c.seq_len() as u64 * c.embed_dim as u64 * c.ffn_hidden() as u64;
    let small = attn(&config);
    let s = config.seq_len() as u64;
    assert_eq!(layer_flops(&config), 2 * s * s * 64 + small + ffn(&config));
    config.embed_dim *= 2;
    assert_eq!(attn(&config), 4 * small);
    assert_eq!(layer_flops(&config), 2 * s * s * 128 + 4 * small + ffn(&config));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let mut state = EncoderState::<f32>::new(EncoderConfig::default(), 9).unwrap();
    state.layer_mask[4] = false;
    save_checkpoint(&state, &path).unwrap();
    let back: EncoderState<f32> = load_checkpoint(&path).unwrap();
    assert!(back.params.bitwise_eq(&state.params));
    assert_eq!(back.config, state.config);
    assert_eq!(back.layer_mask, state.layer_mask);

    let head = init_head(&state.config, 1);
    save_model(&state, Some(&head), &path).unwrap();
    let (s2, h2) = load_model::<f32>(&path).unwrap();
    assert!(s2.params.bitwise_eq(&state.params));
    assert!(h2.unwrap().bitwise_eq(&head));

    let wide: EncoderState<f64> = load_checkpoint(&path).unwrap();
    assert!(wide.cast::<f32>().params.bitwise_eq(&state.params));
}

#[test]
fn corrupted_tensor_block_fails_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let state = EncoderState::<f32>::new(tiny(), 0).unwrap();
    save_checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Integrity(_))));
}

fn rewrite_header(path: &std::path::Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let bytes = std::fs::read(path).unwrap();
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[12 + hlen..]);
    std::fs::write(path, out).unwrap();
}

#[test]
fn checkpoint_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let state = EncoderState::<f32>::new(tiny(), 0).unwrap();

    save_checkpoint(&state, &path).unwrap();
    let mut other = tiny();
    other.num_heads = 4;
    match load_checkpoint_for::<f32>(&path, &other) {
        Err(Error::Config(msg)) => assert!(msg.contains("num_heads"), "{msg}"),
        r => panic!("expected config error, got {r:?}"),
    }

    rewrite_header(&path, |h| h["schema_version"] = 7.into());
    assert!(matches!(
        load_checkpoint::<f32>(&path),
        Err(Error::Version { found: 7, expected: 1 })
    ));

    save_checkpoint(&state, &path).unwrap();
    rewrite_header(&path, |h| {
        h["tensors"].as_array_mut().unwrap().retain(|t| t["name"] != "norm.bias");
    });
    match load_checkpoint::<f32>(&path) {
        Err(Error::Integrity(msg)) => assert!(msg.contains("norm.bias")),
        r => panic!("expected integrity error, got {r:?}"),
    }

    save_checkpoint(&state, &path).unwrap();
    rewrite_header(&path, |h| h["config"]["embed_dim"] = 6.into());
    assert!(load_checkpoint::<f32>(&path).unwrap_err().is_config());
}

#[test]
fn compaction_matches_masked_forward() {
    let config = EncoderConfig::default();
    let mut state = EncoderState::<f32>::new(config.clone(), 11).unwrap();
    let head = init_head(&config, 12);
    let same = state.compact().unwrap();
    assert!(same.params.bitwise_eq(&state.params));

    state.layer_mask[1] = false;
    state.layer_mask[4] = false;
    let small = state.compact().unwrap();
    assert_eq!(small.config.num_layers, 4);
    assert_eq!(small.layer_mask, vec![true; 4]);
    let sets = patches(&config, 6);
    let refs: Vec<&PatchSet> = sets.iter().collect();
    let a = state.infer(Some(&head), &refs, false).unwrap().logits.unwrap();
    let b = small.infer(Some(&head), &refs, false).unwrap().logits.unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-5));
    let (full, reduced) = (count_costs(&state, Some(&head)), count_costs(&small, Some(&head)));
    assert_eq!(full, reduced);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn param_count_matches_enumeration(mask in proptest::collection::vec(any::<bool>(), 6), with_head in any::<bool>()) {
        let config = EncoderConfig::default();
        let mut state = EncoderState::<f32>::new(config.clone(), 0).unwrap();
        state.layer_mask = mask.clone();
        let head = init_head(&config, 0);
        let costs = count_costs(&state, with_head.then_some(&head));
        let mut n = 0;
        for (name, t) in state.params.iter() {
            let skip = name.starts_with("layers.") && !mask[name.split('.').nth(1).unwrap().parse::<usize>().unwrap()];
            if !skip {
                n += t.len();
            }
        }
        if with_head {
            n += config.embed_dim * config.num_classes + config.num_classes;
        }
        prop_assert_eq!(costs.param_count, n);
    }
}
