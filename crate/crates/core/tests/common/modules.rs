//! Whole-module oracles: dense localization and refinement re-implementations,
//! the elementwise pixel loss and brute-force per-definition metrics.

use super::*;
use mvanet::mclm::Mclm;
use mvanet::mcrm::Mcrm;
use mvanet::nn::ParamStore;
use mvanet::tape::Tape;
use mvanet::view_geometry::PatchGrid;
use mvanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grid(rows: usize, cols: usize, side: usize) -> PatchGrid {
    PatchGrid {
        rows,
        cols,
        patch_h: side,
        patch_w: side,
    }
}

pub fn max_diff(a: &Map, b: &Map) -> f64 {
    let mut m = 0.0f64;
    for (pa, pb) in a.iter().zip(b) {
        for (ra, rb) in pa.iter().zip(pb) {
            for (x, y) in ra.iter().zip(rb) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}


pub fn mclm_oracle(
    store: &ParamStore,
    global: &Tensor,
    locals: &[Tensor],
    g: &PatchGrid,
    windows: &[usize],
    heads: usize,
) -> (Vec<Map>, Vec<Vec<Map>>) {
    let (b, _, s, _) = global.dims4();
    let mut globals = Vec::new();
    let mut locs = Vec::new();
    for bi in 0..b {
        let gm = map_of(global, bi);
        let lm: Vec<Map> = locals.iter().map(|l| map_of(l, bi)).collect();
        // step 1-3: global tokens query pooled assembled locals
        let unified = assemble(&lm, g.rows, g.cols);
        let kv = pooled(&unified, windows);
        let gt = tokens_of(&gm);
        let t = block(&gt, &gt, &kv, store, "mclm.global", heads);
        let tmap = map_from_tokens(&t, s, s);
        // step 4-7: each local queries its own slice
        let regions = split_resized(&tmap, g.rows, g.cols);
        let mut outs = Vec::new();
        for (m, l) in lm.iter().enumerate() {
            let q = linear(&tokens_of(&with_patch_pe(l, m, g.rows, g.cols)), store, "mclm.local.wq");
            let kvm = tokens_of(&regions[m]);
            let o = linear(&dense_attention(&q, &kvm, &kvm, heads), store, "mclm.local.mhca.out");
            outs.push(map_from_tokens(&o, s, s));
        }
        globals.push(tmap);
        locs.push(outs);
    }
    (globals, locs)
}

/// Largest deviation between the library module and the dense oracle.
pub fn check_mclm(rows: usize, b: usize, c: usize, s: usize, windows: &[usize], seed: u64) -> f64 {
    let heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Mclm::new(c, heads, windows.to_vec()).unwrap();
    let mut store = ParamStore::new();
    m.init(&mut store, &mut rng);
    // non-trivial normalization affine parameters
    for (name, t) in store.iter_mut() {
        if name.contains(".ln") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let g = grid(rows, rows, s);
    let global = random_tensor(&[b, c, s, s], &mut rng);
    let locals: Vec<Tensor> = (0..g.count()).map(|_| random_tensor(&[b, c, s, s], &mut rng)).collect();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let gv = tape.constant(global.clone());
    let lv: Vec<_> = locals.iter().map(|l| tape.constant(l.clone())).collect();
    let out = m.localize(&mut tape, &p, gv, &lv, &g).unwrap();

    let (eg, el) = mclm_oracle(&store, &global, &locals, &g, windows, heads);
    let mut worst = 0.0f64;
    for bi in 0..b {
        let d = max_diff(&map_of(tape.value(out.global), bi), &eg[bi]);
        worst = worst.max(d);
        for (mi, lvar) in out.locals.iter().enumerate() {
            let d = max_diff(&map_of(tape.value(*lvar), bi), &el[bi][mi]);
            worst = worst.max(d);
        }
    }
    worst
}

/// Largest deviation between the library module and the dense oracle.
pub fn check_mcrm(rows: usize, b: usize, c: usize, s: usize, windows: &[usize], seed: u64) -> f64 {
    let heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = Mcrm::new(2, c, heads, windows.to_vec()).unwrap();
    let mut store = ParamStore::new();
    module.init(&mut store, &mut rng);
    let g = grid(rows, rows, s);
    let mcount = g.count();
    let stacked = random_tensor(&[b * (mcount + 1), c, s, s], &mut rng);

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let sv = tape.constant(stacked.clone());
    let out = module.refine(&mut tape, &p, sv, &g, b).unwrap();
    let refined = tape.value(out.refined).clone();
    let amap = tape.value(out.attention_map).clone();

    let wconv = param(&store, "mcrm2.attn.weight");
    let mut worst = 0.0f64;
    let bconv = param(&store, "mcrm2.attn.bias");
    for bi in 0..b {
        let locals: Vec<Map> = (0..mcount).map(|m| map_of(&stacked, m * b + bi)).collect();
        let gm = map_of(&stacked, mcount * b + bi);
        // step 1-2: token attention map
        let a_small: Map = vec![(0..s)
            .map(|y| {
                (0..s)
                    .map(|x| sigmoid(bconv.data()[0] + (0..c).map(|ci| wconv.data()[ci] * gm[ci][y][x]).sum::<f64>()))
                    .collect()
            })
            .collect()];
        let a = resize(&a_small, s * rows, s * rows);
        worst = worst.max(max_diff(&map_of(&amap, bi), &a));
        // step 3: gate assembled locals
        let asm = assemble(&locals, rows, rows);
        let gated: Map = asm
            .iter()
            .map(|plane| {
                plane
                    .iter()
                    .enumerate()
                    .map(|(y, r)| r.iter().enumerate().map(|(x, v)| v * a[0][y][x]).collect())
                    .collect()
            })
            .collect();
        let gated_locals = split(&gated, rows, rows);
        // step 4-6: per-region cross attention
        let regions = split_resized(&gm, rows, rows);
        let side = regions[0][0].len().min(regions[0][0][0].len());
        let mut wins: Vec<usize> = windows.iter().copied().filter(|&n| n <= side).collect();
        if wins.is_empty() {
            wins = vec![1];
        }
        let mut refined_locals = Vec::new();
        for m in 0..mcount {
            let q = tokens_of(&with_patch_pe(&gated_locals[m], m, rows, rows));
            let resid = tokens_of(&gated_locals[m]);
            let kv = pooled(&regions[m], &wins);
            let t = block(&resid, &q, &kv, &store, "mcrm2.block", heads);
            let lm = map_from_tokens(&t, s, s);
            let d = max_diff(&map_of(&refined, m * b + bi), &lm);
            worst = worst.max(d);
            refined_locals.push(lm);
        }
        // step 7: fold back into the global stream
        let merged = resize(&assemble(&refined_locals, rows, rows), s, s);
        let expect_g = add_maps(&gm, &merged);
        let d = max_diff(&map_of(&refined, mcount * b + bi), &expect_g);
        worst = worst.max(d);
    }
    worst
}

pub fn loss_oracle(pred: &[f64], gt: &[f64], h: usize, w: usize, weighted: bool) -> f64 {
    let n = (h * w) as f64;
    let mut bce = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        bce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    bce /= n;
    let mut inter = 0.0;
    let mut union = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let omega = if weighted {
                // direct 31×31 zero-padded box mean
                let mut s = 0.0;
                for yy in y as isize - 15..=y as isize + 15 {
                    for xx in x as isize - 15..=x as isize + 15 {
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += gt[yy as usize * w + xx as usize];
                        }
                    }
                }
                1.0 + 5.0 * (s / 961.0 - gt[i]).abs()
            } else {
                1.0
            };
            let p = pred[i].clamp(1e-7, 1.0 - 1e-7);
            inter += omega * p * gt[i];
            union += omega * (p + gt[i] - p * gt[i]);
        }
    }
    bce + 1.0 - inter / union
}


pub struct Oracle {
    pub f_max: f64,
    pub f_w: f64,
    pub s: f64,
    pub e: f64,
    pub mae: f64,
}

pub fn oracle_metrics(pred: &[f64], gt: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
    let n = (h * w) as f64;
    let ts: Vec<f64> = (0..256).map(|k| (1.0 - 1e-10) * k as f64 / 255.0).collect();
    let gf: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mut fcurve = Vec::new();
    let mut ecurve = Vec::new();
    for &t in &ts {
        let bin: Vec<f64> = pred.iter().map(|&p| if p > t { 1.0 } else { 0.0 }).collect();
        let tp: f64 = bin.iter().zip(&gf).map(|(a, b)| a * b).sum();
        let pp: f64 = bin.iter().sum();
        let gp: f64 = gf.iter().sum();
        let prec = if pp > 0.0 { tp / pp } else { 0.0 };
        let rec = if gp > 0.0 { tp / gp } else { 0.0 };
        let f = if 0.3 * prec + rec > 0.0 { 1.3 * prec * rec / (0.3 * prec + rec) } else { 0.0 };
        fcurve.push(f);
        // enhanced alignment, pixel by pixel
        let e = if gp == 0.0 {
            bin.iter().map(|b| 1.0 - b).sum::<f64>() / n
        } else if gp == n {
            bin.iter().sum::<f64>() / n
        } else {
            let mb = pp / n;
            let mg = gp / n;
            let mut sum = 0.0;
            for (b, g) in bin.iter().zip(&gf) {
                let (x, y) = (b - mb, g - mg);
                let al = 2.0 * x * y / (x * x + y * y + f64::EPSILON);
                sum += (al + 1.0).powi(2) / 4.0;
            }
            sum / n
        };
        ecurve.push(e);
    }
    // weighted F with brute-force nearest-foreground search
    let f_w = if !gt.iter().any(|&g| g) {
        0.0
    } else {
        let mut dist = vec![0.0; h * w];
        let mut near = vec![0usize; h * w];
        for i in 0..h * w {
            if gt[i] {
                near[i] = i;
                continue;
            }
            let (y, x) = (i / w, i % w);
            let mut best = (usize::MAX, 0usize, 0usize);
            for j in 0..h * w {
                if gt[j] {
                    let (yy, xx) = (j / w, j % w);
                    let d2 = y.abs_diff(yy).pow(2) + x.abs_diff(xx).pow(2);
                    if (d2, yy, xx) < best {
                        best = (d2, yy, xx);
                    }
                }
            }
            dist[i] = (best.0 as f64).sqrt();
            near[i] = best.1 * w + best.2;
        }
        let err: Vec<f64> = pred.iter().zip(&gf).map(|(p, g)| (p - g).abs()).collect();
        let et: Vec<f64> = (0..h * w).map(|i| err[near[i]]).collect();
        let mut k = [[0.0f64; 7]; 7];
        let mut ks = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
                *v = (-(dy * dy + dx * dx) / 50.0).exp();
                ks += *v;
            }
        }
        let mut tw = 0.0;
        let mut ew_fg = 0.0;
        let mut ew_bg = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut ea = 0.0;
                for i in 0..7 {
                    for j in 0..7 {
                        let (yy, xx) = (y as isize + i as isize - 3, x as isize + j as isize - 3);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            ea += k[i][j] / ks * et[yy as usize * w + xx as usize];
                        }
                    }
                }
                let idx = y * w + x;
                if gt[idx] {
                    tw += 1.0;
                    ew_fg += ea.min(err[idx]);
                } else {
                    ew_bg += err[idx] * (2.0 - (0.5f64.ln() / 5.0 * dist[idx]).exp());
                }
            }
        }
        let r = 1.0 - ew_fg / tw;
        let tpw = tw - ew_fg;
        let p = tpw / (tpw + ew_bg + f64::EPSILON);
        2.0 * r * p / (r + p + f64::EPSILON)
    };
    let mae = pred.iter().zip(&gf).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    (fcurve, ecurve, f_w, s_oracle(pred, gt, h, w), mae)
}

pub fn s_oracle(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let fgc = gt.iter().filter(|&&g| g).count() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if fgc == 0.0 {
        return 1.0 - mean(pred);
    }
    if fgc == n {
        return mean(pred);
    }
    let sobj = |vals: Vec<f64>| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = mean(&vals);
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
    };
    let fgv: Vec<f64> = (0..h * w).filter(|&i| gt[i]).map(|i| pred[i]).collect();
    let bgv: Vec<f64> = (0..h * w).filter(|&i| !gt[i]).map(|i| 1.0 - pred[i]).collect();
    let u = fgc / n;
    let obj = u * sobj(fgv) + (1.0 - u) * sobj(bgv);

    let (mut sy, mut sx) = (0.0, 0.0);
    for i in 0..h * w {
        if gt[i] {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
        }
    }
    let cx = ((sx / fgc).round_ties_even() as usize + 1).min(w);
    let cy = ((sy / fgc).round_ties_even() as usize + 1).min(h);
    let ssim = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| -> f64 {
        let mut p = vec![];
        let mut g = vec![];
        for y in ys {
            for x in xs.clone() {
                p.push(pred[y * w + x]);
                g.push(if gt[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        let k = p.len();
        if k == 0 {
            return 0.0;
        }
        let (mx, my) = (mean(&p), mean(&g));
        let d = if k > 1 { (k - 1) as f64 } else { 1.0 };
        let vx = if k > 1 { p.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / d } else { 0.0 };
        let vy = if k > 1 { g.iter().map(|v| (v - my).powi(2)).sum::<f64>() / d } else { 0.0 };
        let cxy = if k > 1 {
            p.iter().zip(&g).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / d
        } else {
            0.0
        };
        let al = 4.0 * mx * my * cxy;
        let be = (mx * mx + my * my) * (vx + vy);
        if al != 0.0 {
            al / (be + f64::EPSILON)
        } else if be == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let w1 = (cx * cy) as f64 / n;
    let w2 = ((w - cx) * cy) as f64 / n;
    let w3 = (cx * (h - cy)) as f64 / n;
    let w4 = 1.0 - w1 - w2 - w3;
    let reg = w1 * ssim(0..cy, 0..cx) + w2 * ssim(0..cy, cx..w) + w3 * ssim(cy..h, 0..cx) + w4 * ssim(cy..h, cx..w);
    (0.5 * obj + 0.5 * reg).max(0.0)
}

pub fn oracle_report(preds: &[Vec<f64>], gts: &[Vec<bool>], h: usize, w: usize) -> Oracle {
    let per: Vec<_> = preds.iter().zip(gts).map(|(p, g)| oracle_metrics(p, g, h, w)).collect();
    let k = per.len() as f64;
    let f_max = (0..256)
        .map(|t| per.iter().map(|r| r.0[t]).sum::<f64>() / k)
        .fold(0.0, f64::max);
    Oracle {
        f_max,
        e: per.iter().map(|r| r.1.iter().sum::<f64>() / 256.0).sum::<f64>() / k,
        f_w: per.iter().map(|r| r.2).sum::<f64>() / k,
        s: per.iter().map(|r| r.3).sum::<f64>() / k,
        mae: per.iter().map(|r| r.4).sum::<f64>() / k,
    }
}

/// Worst absolute deviation of `compute_all` from the brute-force oracle over
/// random 4×4 cases, including all-background and all-foreground masks.
pub fn metrics_worst_diff(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n_img = 1 + case % 3;
        let mut preds = vec![];
        let mut gts = vec![];
        for _ in 0..n_img {
            let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let g: Vec<bool> = match case % 10 {
                0 => vec![false; 16],
                1 => vec![true; 16],
                _ => (0..16).map(|_| rng.gen_bool(0.4)).collect(),
            };
            preds.push(p);
            gts.push(g);
        }
        let pt: Vec<Tensor> = preds.iter().map(|p| Tensor::new(&[1, 1, 4, 4], p.clone())).collect();
        let gtt: Vec<Tensor> = gts
            .iter()
            .map(|g| Tensor::new(&[1, 1, 4, 4], g.iter().map(|&b| f64::from(b as u8)).collect()))
            .collect();
        let r = mvanet::metrics::compute_all(&pt, &gtt).unwrap();
        let o = oracle_report(&preds, &gts, 4, 4);
        for (a, b) in [
            (r.f_max, o.f_max),
            (r.f_weighted, o.f_w),
            (r.s_measure, o.s),
            (r.e_measure, o.e),
            (r.mae, o.mae),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
