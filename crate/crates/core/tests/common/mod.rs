//! Straight-line dense re-implementations used as test oracles, plus the
//! finite-difference gradient checker. Everything here works on plain nested
//! vectors with naive loops and never touches the tape.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mvanet::nn::ParamStore;
use mvanet::tape::{Tape, Var};
use mvanet::Tensor;
use rand::Rng;

pub mod modules;

/// `[c][y][x]` feature map of one batch item.
pub type Map = Vec<Vec<Vec<f64>>>;
/// `[n][c]` token list of one batch item.
pub type Tokens = Vec<Vec<f64>>;

pub fn map_of(t: &Tensor, b: usize) -> Map {
    let (_, c, h, w) = t.dims4();
    (0..c)
        .map(|ci| (0..h).map(|y| (0..w).map(|x| t.at4(b, ci, y, x)).collect()).collect())
        .collect()
}

pub fn dims(m: &Map) -> (usize, usize, usize) {
    (m.len(), m[0].len(), m[0][0].len())
}

pub fn tokens_of(m: &Map) -> Tokens {
    let (c, h, w) = dims(m);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push((0..c).map(|ci| m[ci][y][x]).collect());
        }
    }
    out
}

pub fn map_from_tokens(t: &Tokens, h: usize, w: usize) -> Map {
    let c = t[0].len();
    (0..c)
        .map(|ci| (0..h).map(|y| (0..w).map(|x| t[y * w + x][ci]).collect()).collect())
        .collect()
}

pub fn add_maps(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

/// Assembles row-major patches.
pub fn assemble(patches: &[Map], rows: usize, cols: usize) -> Map {
    let (c, ph, pw) = dims(&patches[0]);
    let mut out = vec![vec![vec![0.0; pw * cols]; ph * rows]; c];
    for (m, p) in patches.iter().enumerate() {
        let (r, q) = (m / cols, m % cols);
        for ci in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    out[ci][r * ph + y][q * pw + x] = p[ci][y][x];
                }
            }
        }
    }
    out
}

pub fn split(m: &Map, rows: usize, cols: usize) -> Vec<Map> {
    let (c, h, w) = dims(m);
    let (ph, pw) = (h / rows, w / cols);
    (0..rows * cols)
        .map(|k| {
            let (r, q) = (k / cols, k % cols);
            (0..c)
                .map(|ci| (0..ph).map(|y| (0..pw).map(|x| m[ci][r * ph + y][q * pw + x]).collect()).collect())
                .collect()
        })
        .collect()
}

/// Half-pixel-centre bilinear resize with edge clamping.
pub fn resize(m: &Map, oh: usize, ow: usize) -> Map {
    let (c, h, w) = dims(m);
    let coord = |o: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(inn - 1);
        let hi = (lo + 1).min(inn - 1);
        (lo, hi, s - lo as f64)
    };
    (0..c)
        .map(|ci| {
            (0..oh)
                .map(|y| {
                    let (y0, y1, fy) = coord(y, h, oh);
                    (0..ow)
                        .map(|x| {
                            let (x0, x1, fx) = coord(x, w, ow);
                            let p = &m[ci];
                            (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1]) + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn split_resized(m: &Map, rows: usize, cols: usize) -> Vec<Map> {
    let (_, h, w) = dims(m);
    let th = h.div_ceil(rows) * rows;
    let tw = w.div_ceil(cols) * cols;
    let r = if (th, tw) == (h, w) { m.clone() } else { resize(m, th, tw) };
    split(&r, rows, cols)
}

pub fn avg_pool(m: &Map, n: usize) -> Map {
    let (c, h, w) = dims(m);
    let (oh, ow) = (h.div_ceil(n), w.div_ceil(n));
    (0..c)
        .map(|ci| {
            (0..oh)
                .map(|cy| {
                    (0..ow)
                        .map(|cx| {
                            let mut s = 0.0;
                            let mut k = 0.0;
                            for y in cy * n..((cy + 1) * n).min(h) {
                                for x in cx * n..((cx + 1) * n).min(w) {
                                    s += m[ci][y][x];
                                    k += 1.0;
                                }
                            }
                            s / k
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn pooled(m: &Map, windows: &[usize]) -> Tokens {
    windows
        .iter()
        .flat_map(|&n| if n == 1 { tokens_of(m) } else { tokens_of(&avg_pool(m, n)) })
        .collect()
}

/// 2D sinusoidal encoding: rows in the first half of the channels, columns
/// in the second, sin/cos interleaved.
pub fn pos_enc(h: usize, w: usize, c: usize) -> Map {
    let half = c / 2;
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for ci in 0..c {
        let within = ci % half;
        let i = within / 2;
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
        for y in 0..h {
            for x in 0..w {
                let pos = if ci < half { y } else { x } as f64;
                out[ci][y][x] = if within.is_multiple_of(2) { (pos * freq).sin() } else { (pos * freq).cos() };
            }
        }
    }
    out
}

/// Patch `m` plus the encoding of its region in the assembled layout.
pub fn with_patch_pe(patch: &Map, m: usize, rows: usize, cols: usize) -> Map {
    let (c, ph, pw) = dims(patch);
    let full = pos_enc(ph * rows, pw * cols, c);
    let pieces = split(&full, rows, cols);
    add_maps(patch, &pieces[m])
}

pub fn param(p: &ParamStore, name: &str) -> Tensor {
    p.get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

pub fn linear(x: &Tokens, p: &ParamStore, name: &str) -> Tokens {
    let w = param(p, &format!("{name}.weight"));
    let b = param(p, &format!("{name}.bias"));
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..cout)
                .map(|o| b.data()[o] + (0..cin).map(|i| row[i] * w.data()[i * cout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Tokens, p: &ParamStore, name: &str) -> Tokens {
    let g = param(p, &format!("{name}.gamma"));
    let b = param(p, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-head scaled dot-product attention without projections.
pub fn dense_attention(q: &Tokens, k: &Tokens, v: &Tokens, heads: usize) -> Tokens {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| (0..d).map(|e| qi[h * d + e] * kj[h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for (j, vj) in v.iter().enumerate() {
                for e in 0..d {
                    out[i][h * d + e] += ex[j] / z * vj[h * d + e];
                }
            }
        }
    }
    out
}

pub fn add_tokens(a: &Tokens, b: &Tokens) -> Tokens {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Cross-attention block: `t = r + LN(MHCA(Wq q, Wk kv, Wv kv))`, then
/// `t + LN(FFN(t))`.
pub fn block(resid: &Tokens, q_src: &Tokens, kv_src: &Tokens, p: &ParamStore, name: &str, heads: usize) -> Tokens {
    let c = q_src[0].len();
    let q = linear(q_src, p, &format!("{name}.wq"));
    let kv = linear(kv_src, p, &format!("{name}.wkv"));
    let k: Tokens = kv.iter().map(|r| r[..c].to_vec()).collect();
    let v: Tokens = kv.iter().map(|r| r[c..].to_vec()).collect();
    let a = dense_attention(&q, &k, &v, heads);
    let a = linear(&a, p, &format!("{name}.mhca.out"));
    let t = add_tokens(resid, &layer_norm(&a, p, &format!("{name}.ln1")));
    let h = linear(&t, p, &format!("{name}.ffn.fc1"));
    let h: Tokens = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let f = linear(&h, p, &format!("{name}.ffn.fc2"));
    add_tokens(&t, &layer_norm(&f, p, &format!("{name}.ln2")))
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nn);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Compares tape gradients of the scalar `f` with central differences for
/// every tensor in `store` (or only the listed `entries` per tensor when
/// given). Returns the relative error per tensor name.
pub fn grad_check(
    store: &ParamStore,
    f: &dyn Fn(&mut Tape, &mvanet::nn::Bound) -> Var,
    entries: Option<&BTreeMap<String, Vec<usize>>>,
    h: f64,
) -> BTreeMap<String, f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let out = f(&mut tape, &bound);
    assert_eq!(tape.value(out).numel(), 1, "objective must be scalar");
    let grads = tape.backward(out);
    let analytic = bound.gradients(store, &grads);

    let eval = |s: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let o = f(&mut t, &b);
        t.value(o).data()[0]
    };
    let mut result = BTreeMap::new();
    for (name, t) in store.iter() {
        let idx: Vec<usize> = match entries {
            Some(e) => match e.get(name) {
                Some(v) => v.clone(),
                None => continue,
            },
            None => (0..t.numel()).collect(),
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut s = store.clone();
            let base = s.get(name).unwrap().data()[i];
            s.get_mut(name).unwrap().data_mut()[i] = base + h;
            let up = eval(&s);
            s.get_mut(name).unwrap().data_mut()[i] = base - h;
            let down = eval(&s);
            n.push((up - down) / (2.0 * h));
            a.push(analytic[name].data()[i]);
        }
        result.insert(name.clone(), rel_err(&a, &n));
    }
    result
}

/// `Σ x ⊙ r` for a fixed random `r`, making any tensor a scalar objective.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(tape.shape(x), &mut rng);
    let rv = tape.constant(r);
    let m = tape.mul(x, rv);
    tape.sum_all(m)
}
