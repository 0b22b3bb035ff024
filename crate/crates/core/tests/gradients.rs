//! Central-difference checks of every differentiable path, parameters and
//! inputs alike.

mod common;

use std::collections::BTreeMap;

use common::*;
use mvanet::attention::{add_positional, pooled_tokens, CrossAttentionBlock, FeedForward, Mhca};
use mvanet::encoder::{Backbone, ConvResidualEncoder};
use mvanet::losses::{pixel_loss, total_loss, LossWeights, PixelLossConfig};
use mvanet::mclm::Mclm;
use mvanet::mcrm::Mcrm;
use mvanet::nn::{Conv2d, Norm, ParamStore};
use mvanet::tape::Var;
use mvanet::view_geometry::{assemble_var, split_var, split_var_resized, PatchGrid};
use mvanet::{ModelConfig, MvaNet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_close(errs: &BTreeMap<String, f64>) {
    assert!(!errs.is_empty());
    for (name, e) in errs {
        assert!(*e < TOL, "{name}: relative error {e:e}");
    }
}

fn with_input(mut store: ParamStore, name: &str, t: Tensor) -> ParamStore {
    store.insert(name, t);
    store
}

fn grid(rows: usize, side: usize) -> PatchGrid {
    PatchGrid {
        rows,
        cols: rows,
        patch_h: side,
        patch_w: side,
    }
}

#[test]
fn mhca_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Mhca::new("m", 8, 2).unwrap();
    let mut store = ParamStore::new();
    m.init(&mut store, &mut rng);
    let store = with_input(store, "q", random_tensor(&[3, 2, 8], &mut rng));
    let store = with_input(store, "k", random_tensor(&[5, 2, 8], &mut rng));
    let store = with_input(store, "v", random_tensor(&[5, 2, 8], &mut rng));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let o = m.forward(t, p, p.var("q"), p.var("k"), p.var("v")).unwrap();
            project(t, o, 9)
        },
        None,
        H,
    ));
}

#[test]
fn feed_forward_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = FeedForward::new("f", 4);
    let mut store = ParamStore::new();
    f.init(&mut store, &mut rng);
    let store = with_input(store, "x", random_tensor(&[3, 2, 4], &mut rng));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let o = f.forward(t, p, p.var("x"));
            project(t, o, 3)
        },
        None,
        H,
    ));
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = Norm::new("n", 4);
    let mut store = ParamStore::new();
    n.init(&mut store);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    let tokens = with_input(store.clone(), "x", random_tensor(&[5, 2, 4], &mut rng));
    assert_close(&grad_check(
        &tokens,
        &|t, p| {
            let o = n.layer(t, p, p.var("x"));
            project(t, o, 4)
        },
        None,
        H,
    ));
    let maps = with_input(store, "x", random_tensor(&[2, 4, 3, 3], &mut rng));
    assert_close(&grad_check(
        &maps,
        &|t, p| {
            let o = n.batch(t, p, p.var("x"));
            project(t, o, 5)
        },
        None,
        H,
    ));
}

#[test]
fn cross_attention_block_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = CrossAttentionBlock::new("b", 8, 2).unwrap();
    let mut store = ParamStore::new();
    b.init(&mut store, &mut rng);
    let store = with_input(store, "r", random_tensor(&[4, 1, 8], &mut rng));
    let store = with_input(store, "q", random_tensor(&[4, 1, 8], &mut rng));
    let store = with_input(store, "kv", random_tensor(&[3, 1, 8], &mut rng));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let o = b.forward(t, p, p.var("r"), p.var("q"), p.var("kv")).unwrap();
            project(t, o, 6)
        },
        None,
        H,
    ));
}

#[test]
fn pooled_token_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = with_input(ParamStore::new(), "x", random_tensor(&[2, 3, 7, 6], &mut rng));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let o = pooled_tokens(t, p.var("x"), &[1, 2, 4]).unwrap();
            project(t, o, 7)
        },
        None,
        H,
    ));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let o = add_positional(t, p.var("x")).unwrap_or_else(|_| p.var("x"));
            project(t, o, 8)
        },
        None,
        H,
    ));
}

#[test]
fn mclm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Mclm::new(4, 2, vec![2, 4]).unwrap();
    let mut store = ParamStore::new();
    m.init(&mut store, &mut rng);
    let g = grid(2, 4);
    let store = with_input(store, "global", random_tensor(&[1, 4, 4, 4], &mut rng));
    let store = (0..4).fold(store, |s, i| with_input(s, &format!("local{i}"), random_tensor(&[1, 4, 4, 4], &mut rng)));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let locals: Vec<Var> = (0..4).map(|i| p.var(&format!("local{i}"))).collect();
            let o = m.localize(t, p, p.var("global"), &locals, &g).unwrap();
            let mut parts = o.locals.clone();
            parts.push(o.global);
            let all = t.concat(&parts, 0);
            project(t, all, 10)
        },
        None,
        H,
    ));
}

#[test]
fn mcrm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = Mcrm::new(3, 4, 2, vec![2, 4]).unwrap();
    let mut store = ParamStore::new();
    m.init(&mut store, &mut rng);
    for g in [grid(2, 4), grid(3, 2)] {
        let s = with_input(store.clone(), "stacked", random_tensor(&[2 * (g.count() + 1), 4, g.patch_h, g.patch_w], &mut rng));
        assert_close(&grad_check(
            &s,
            &|t, p| {
                let o = m.refine(t, p, p.var("stacked"), &g, 2).unwrap();
                let a = project(t, o.refined, 11);
                let b = project(t, o.attention_map, 12);
                t.add(a, b)
            },
            None,
            H,
        ));
    }
}

#[test]
fn pixel_loss_gradients_on_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for weighted in [true, false] {
        let pred = Tensor::uniform(&[2, 1, 4, 4], 0.05, 0.95, &mut rng);
        let gt = Tensor::new(&[2, 1, 4, 4], (0..32).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect());
        let store = with_input(ParamStore::new(), "p", pred);
        let cfg = PixelLossConfig { weighted_iou: weighted };
        assert_close(&grad_check(&store, &|t, p| pixel_loss(t, p.var("p"), &gt, cfg).unwrap(), None, 1e-6));
    }
}

#[test]
fn geometry_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let store = with_input(ParamStore::new(), "x", random_tensor(&[1, 2, 6, 6], &mut rng));
    let g = grid(3, 2);
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let parts = split_var(t, p.var("x"), &g).unwrap();
            let doubled: Vec<Var> = parts.iter().map(|&v| t.mul(v, v)).collect();
            let back = assemble_var(t, &doubled, &g).unwrap();
            let resized = split_var_resized(t, back, &grid(2, 3));
            let all = t.concat(&resized, 0);
            project(t, all, 13)
        },
        None,
        H,
    ));
}

#[test]
fn convolution_and_resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let convs = [
        Conv2d::new("c1", 2, 3, 3, 1, 1),
        Conv2d::new("c2", 3, 2, 2, 2, 0),
        Conv2d::new("c3", 2, 2, 3, 2, 1),
    ];
    let mut store = ParamStore::new();
    for c in &convs {
        c.init(&mut store, &mut rng);
    }
    let store = with_input(store, "x", random_tensor(&[2, 2, 7, 8], &mut rng));
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let mut x = p.var("x");
            for c in &convs {
                x = c.forward(t, p, x);
                x = t.gelu(x);
            }
            let up = t.resize(x, 5, 9);
            let down = t.resize(up, 3, 2);
            let pooled = t.avg_pool(up, 3);
            let s = t.sigmoid(down);
            let a = project(t, s, 14);
            let b = project(t, pooled, 15);
            t.add(a, b)
        },
        None,
        H,
    ));
}

#[test]
fn encoder_input_and_parameter_gradients_at_32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let enc = ConvResidualEncoder::new([2, 3, 3, 4, 4], [4, 8, 16, 32, 32]).unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut store, &mut rng);
    let store = with_input(store, "x", random_tensor(&[1, 3, 32, 32], &mut rng));
    let mut entries = BTreeMap::new();
    for (name, t) in store.iter() {
        let n = t.numel();
        entries.insert(name.clone(), (0..6).map(|_| rng.gen_range(0..n)).collect::<Vec<_>>());
    }
    assert_close(&grad_check(
        &store,
        &|t, p| {
            let levels = enc.forward(t, p, p.var("x")).unwrap();
            let mut acc = project(t, levels[0], 20);
            for (i, &l) in levels.iter().enumerate().skip(1) {
                let s = project(t, l, 20 + i as u64);
                acc = t.add(acc, s);
            }
            acc
        },
        Some(&entries),
        H,
    ));
}

/// Finite-difference step for the whole-model check.
const MODEL_STEP: f64 = 1e-6;

fn tiny_model() -> MvaNet {
    MvaNet::new(ModelConfig {
        image_size: 128,
        encoder_widths: [4, 4, 8, 8, 8],
        dec_dim: 8,
        heads: 2,
        windows: vec![2, 4],
        fine_dim: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn whole_model_sampled_parameter_gradients() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = model.init(&mut rng);
    let image = Tensor::uniform(&[1, 3, 128, 128], 0.0, 1.0, &mut rng);
    let gt = Tensor::new(
        &[1, 1, 128, 128],
        (0..128 * 128).map(|i| f64::from(((i / 128) / 16 + (i % 128) / 16) % 3 == 0)).collect(),
    );
    let mut entries = BTreeMap::new();
    let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
    for prefix in ["encoder.stem", "encoder.block5", "decoder.lateral3", "mclm.global", "mclm.local", "mcrm1", "mcrm4", "vrm.conv1.weight", "vrm.bn2", "shallow.full", "head.out", "side5"] {
        let name = names.iter().find(|n| n.starts_with(prefix)).unwrap_or_else(|| panic!("{prefix}"));
        let n = params.get(name).unwrap().numel();
        entries.insert((*name).clone(), (0..2).map(|_| rng.gen_range(0..n)).collect::<Vec<_>>());
    }
    let weights = LossWeights::default();
    assert_close(&grad_check(
        &params,
        &|t, p| {
            let out = model.forward(t, p, &image).unwrap();
            total_loss(t, &out.supervision, &gt, weights, PixelLossConfig::default()).unwrap().0
        },
        Some(&entries),
        MODEL_STEP,
    ));
}

#[test]
fn bias_before_batch_norm_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let conv = Conv2d::same("c", 2, 3, 3);
    let norm = Norm::new("n", 3);
    let mut store = ParamStore::new();
    conv.init(&mut store, &mut rng);
    norm.init(&mut store);
    let x = random_tensor(&[2, 2, 4, 4], &mut rng);
    let mut tape = mvanet::tape::Tape::new();
    let p = store.bind(&mut tape, true);
    let xv = tape.constant(x);
    let h = conv.forward(&mut tape, &p, xv);
    let h = norm.batch(&mut tape, &p, h);
    let o = project(&mut tape, h, 1);
    let grads = p.gradients(&store, &tape.backward(o));
    assert!(grads["c.bias"].max_abs() < 1e-12);
    assert!(grads["c.weight"].max_abs() > 1e-3);
}
