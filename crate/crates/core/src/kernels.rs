//! Numeric kernels shared by the autodiff tape: convolution, bilinear
//! resampling, average pooling, multi-head attention and normalization, each
//! with its adjoint.

use crate::par;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let l = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * l];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    g: ConvGeom,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let l = ho * wo;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, g: ConvGeom) -> bool {
    kh == 1 && kw == 1 && g.stride == 1 && g.pad == 0
}

/// `x (B,Cin,H,W) * w (Cout,Cin,kh,kw) + bias` → `(B,Cout,Ho,Wo)`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (b, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d input channels {cin} vs weight {wcin}");
    let (ho, wo) = (g.out_len(h, kh), g.out_len(wd, kw));
    let k = cin * kh * kw;
    let l = ho * wo;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), cout * l, |bi, o| {
        let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        if is_pointwise(kh, kw, g) {
            gemm(cout, k, l, w.data(), false, img, false, o, false);
        } else {
            let cols = im2col(img, (cin, h, wd), (kh, kw), g, (ho, wo));
            gemm(cout, k, l, w.data(), false, &cols, false, o, false);
        }
        if let Some(bias) = bias {
            for (co, row) in o.chunks_mut(l).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Returns `(dx, dw, dbias)` for [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (b, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = dy.dims4();
    let k = cin * kh * kw;
    let l = ho * wo;
    let xs = x.data();
    let dys = dy.data();
    let per_image: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(b, |bi| {
        let img = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let dyi = &dys[bi * cout * l..(bi + 1) * cout * l];
        let mut dw = vec![0.0; cout * k];
        let mut dx = vec![0.0; cin * h * wd];
        if is_pointwise(kh, kw, g) {
            gemm(cout, l, k, dyi, false, img, true, &mut dw, false);
            gemm(k, cout, l, w.data(), true, dyi, false, &mut dx, false);
        } else {
            let cols = im2col(img, (cin, h, wd), (kh, kw), g, (ho, wo));
            gemm(cout, l, k, dyi, false, &cols, true, &mut dw, false);
            let mut dcols = vec![0.0; k * l];
            gemm(k, cout, l, w.data(), true, dyi, false, &mut dcols, false);
            col2im(&dcols, (cin, h, wd), (kh, kw), g, (ho, wo), &mut dx);
        }
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(x.numel());
    let mut dw = vec![0.0; w.numel()];
    for (dxi, dwi) in per_image {
        dx.extend_from_slice(&dxi);
        dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
    }
    let mut db = vec![0.0; cout];
    for bi in 0..b {
        for (co, acc) in db.iter_mut().enumerate() {
            let start = (bi * cout + co) * l;
            *acc += dys[start..start + l].iter().sum::<f64>();
        }
    }
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(w.shape(), dw),
        Tensor::new(&[cout], db),
    )
}

/// Per-axis bilinear sampling table (half-pixel centres, no corner alignment).
#[derive(Clone, Debug)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut t = AxisTable {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(src - lo as f64);
        }
        t
    }
}

/// Bilinear resize of the two trailing axes to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = AxisTable::new(h, out_h);
    let tx = AxisTable::new(w, out_w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), out_h * out_w, |plane, o| {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                o[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    out
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back onto an `(in_h, in_w)` grid.
pub fn resize_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (b, c, out_h, out_w) = dy.dims4();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let ty = AxisTable::new(in_h, out_h);
    let tx = AxisTable::new(in_w, out_w);
    let mut dx = Tensor::zeros(&[b, c, in_h, in_w]);
    let dys = dy.data();
    par::for_each_chunk_mut(dx.data_mut(), in_h * in_w, |plane, d| {
        let g = &dys[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * out_w + ox];
                d[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                d[y1 * in_w + x0] += v * fy * (1.0 - fx);
                d[y1 * in_w + x1] += v * fy * fx;
            }
        }
    });
    dx
}

/// Non-overlapping average pooling with kernel = stride = `window`. Extents
/// that `window` does not divide get a truncated last cell averaged over the
/// pixels it actually covers.
pub fn avg_pool(x: &Tensor, window: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xs = x.data();
    for plane in 0..b * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for cy in 0..oh {
            let (y0, y1) = (cy * window, ((cy + 1) * window).min(h));
            for cx in 0..ow {
                let (x0, x1) = (cx * window, ((cx + 1) * window).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.data_mut()[(plane * oh + cy) * ow + cx] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn avg_pool_backward(dy: &Tensor, window: usize, in_h: usize, in_w: usize) -> Tensor {
    let (b, c, oh, ow) = dy.dims4();
    let mut dx = Tensor::zeros(&[b, c, in_h, in_w]);
    for plane in 0..b * c {
        for cy in 0..oh {
            let (y0, y1) = (cy * window, ((cy + 1) * window).min(in_h));
            for cx in 0..ow {
                let (x0, x1) = (cx * window, ((cx + 1) * window).min(in_w));
                let g = dy.data()[(plane * oh + cy) * ow + cx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    let row = (plane * in_h + y) * in_w;
                    dx.data_mut()[row + x0..row + x1].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Gathers head `h` of batch `b` from a `(N, B, C)` token array into a
/// contiguous `N × d` matrix.
fn gather_head(t: &[f64], n: usize, batch: usize, c: usize, b: usize, h: usize, d: usize) -> Vec<f64> {
    let mut m = Vec::with_capacity(n * d);
    for i in 0..n {
        let off = (i * batch + b) * c + h * d;
        m.extend_from_slice(&t[off..off + d]);
    }
    m
}

fn scatter_head(dst: &mut [f64], m: &[f64], n: usize, batch: usize, c: usize, b: usize, h: usize, d: usize) {
    for i in 0..n {
        let off = (i * batch + b) * c + h * d;
        dst[off..off + d].copy_from_slice(&m[i * d..(i + 1) * d]);
    }
}

fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

/// Attention probabilities of one `(batch, head)` pair: `Nq × Nk`, row-major.
fn head_probs(q: &[f64], k: &[f64], nq: usize, nk: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; nq * nk];
    gemm(nq, d, nk, q, false, k, true, &mut s, false);
    let scale = 1.0 / (d as f64).sqrt();
    s.iter_mut().for_each(|v| *v *= scale);
    softmax_rows(&mut s, nk);
    s
}

/// Saved softmax probabilities, one `Nq × Nk` block per `(batch, head)`.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub probs: Vec<Vec<f64>>,
}

/// Scaled dot-product attention for every head; `q (Nq,B,C)`, `k`/`v`
/// `(Nk,B,C)`. Heads are concatenated back into `C` channels without an
/// output projection.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, AttentionCache) {
    let (nq, batch, c) = q.dims3();
    let (nk, _, _) = k.dims3();
    let d = c / heads;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let qm = gather_head(q.data(), nq, batch, c, b, h, d);
        let km = gather_head(k.data(), nk, batch, c, b, h, d);
        let vm = gather_head(v.data(), nk, batch, c, b, h, d);
        let p = head_probs(&qm, &km, nq, nk, d);
        let mut o = vec![0.0; nq * d];
        gemm(nq, nk, d, &p, false, &vm, false, &mut o, false);
        (p, o)
    });
    let mut out = Tensor::zeros(&[nq, batch, c]);
    let mut probs = Vec::with_capacity(blocks.len());
    for (bh, (p, o)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        scatter_head(out.data_mut(), &o, nq, batch, c, b, h, d);
        probs.push(p);
    }
    (out, AttentionCache { probs })
}

/// Softmax attention weights, shaped `(B, heads, Nq, Nk)`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Tensor {
    let (nq, batch, c) = q.dims3();
    let (nk, _, _) = k.dims3();
    let d = c / heads;
    let mut data = Vec::with_capacity(batch * heads * nq * nk);
    for b in 0..batch {
        for h in 0..heads {
            let qm = gather_head(q.data(), nq, batch, c, b, h, d);
            let km = gather_head(k.data(), nk, batch, c, b, h, d);
            data.extend(head_probs(&qm, &km, nq, nk, d));
        }
    }
    Tensor::new(&[batch, heads, nq, nk], data)
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    cache: &AttentionCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (nq, batch, c) = q.dims3();
    let (nk, _, _) = k.dims3();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = par::map_range(batch * heads, |bh| {
        let (b, h) = (bh / heads, bh % heads);
        let qm = gather_head(q.data(), nq, batch, c, b, h, d);
        let km = gather_head(k.data(), nk, batch, c, b, h, d);
        let vm = gather_head(v.data(), nk, batch, c, b, h, d);
        let dom = gather_head(dout.data(), nq, batch, c, b, h, d);
        let p = &cache.probs[bh];
        let mut dv = vec![0.0; nk * d];
        gemm(nk, nq, d, p, true, &dom, false, &mut dv, false);
        let mut dp = vec![0.0; nq * nk];
        gemm(nq, d, nk, &dom, false, &vm, true, &mut dp, false);
        // softmax adjoint, folded with the logit scale
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut dp[i * nk..(i + 1) * nk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        let mut dq = vec![0.0; nq * d];
        gemm(nq, nk, d, &dp, false, &km, false, &mut dq, false);
        let mut dk = vec![0.0; nk * d];
        gemm(nk, nq, d, &dp, true, &qm, false, &mut dk, false);
        (dq, dk, dv)
    });
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    for (bh, (gq, gk, gv)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        scatter_head(dq.data_mut(), &gq, nq, batch, c, b, h, d);
        scatter_head(dk.data_mut(), &gk, nk, batch, c, b, h, d);
        scatter_head(dv.data_mut(), &gv, nk, batch, c, b, h, d);
    }
    (dq, dk, dv)
}

/// Normalized values and inverse deviations of a grouped normalization.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the trailing axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, NormCache) {
    let c = *x.shape().last().expect("layer_norm on scalar");
    let rows = x.numel() / c;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            xhat.data_mut()[r * c + j] = xh;
            y.data_mut()[r * c + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(gamma: &Tensor, cache: &NormCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.numel();
    let rows = dy.numel() / c;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for r in 0..rows {
        let g = &dy.data()[r * c..(r + 1) * c];
        let xh = &cache.xhat.data()[r * c..(r + 1) * c];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            let d = g[j] * gamma.data()[j];
            mean_d += d;
            mean_dx += d * xh[j];
            dg[j] += g[j] * xh[j];
            db[j] += g[j];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for j in 0..c {
            let d = g[j] * gamma.data()[j];
            dx.data_mut()[r * c + j] = cache.inv_std[r] * (d - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, Tensor::new(&[c], dg), Tensor::new(&[c], db))
}

/// Batch normalization with statistics taken over `(batch, height, width)`
/// of the current input.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, NormCache) {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let mut mean = 0.0;
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            mean += x.data()[s..s + hw].iter().sum::<f64>();
        }
        mean /= n;
        let mut var = 0.0;
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            var += x.data()[s..s + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        var /= n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let (gv, bv) = (gamma.data()[ch], beta.data()[ch]);
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            for i in s..s + hw {
                let xh = (x.data()[i] - mean) * is;
                xhat.data_mut()[i] = xh;
                y.data_mut()[i] = xh * gv + bv;
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn batch_norm_backward(gamma: &Tensor, cache: &NormCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (b, c, h, w) = dy.dims4();
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for ch in 0..c {
        let gv = gamma.data()[ch];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            for i in s..s + hw {
                let g = dy.data()[i];
                let xh = cache.xhat.data()[i];
                dg[ch] += g * xh;
                db[ch] += g;
                sum_d += g * gv;
                sum_dx += g * gv * xh;
            }
        }
        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
        for bi in 0..b {
            let s = (bi * c + ch) * hw;
            for i in s..s + hw {
                let d = dy.data()[i] * gv;
                dx.data_mut()[i] = cache.inv_std[ch] * (d - mean_d - cache.xhat.data()[i] * mean_dx);
            }
        }
    }
    (dx, Tensor::new(&[c], dg), Tensor::new(&[c], db))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_halving() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_bilinear(&x, 2, 2), x);
        let big = Tensor::new(&[1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        let half = resize_bilinear(&big, 1, 2);
        assert_eq!(half.data(), &[2.0, 6.0]);
    }

    #[test]
    fn resize_adjoint_identity() {
        // <R x, y> == <x, R^T y>
        let x = Tensor::new(&[1, 2, 3, 5], (0..30).map(|i| (i as f64 * 0.37).sin()).collect());
        let y = Tensor::new(&[1, 2, 7, 4], (0..56).map(|i| (i as f64 * 0.11).cos()).collect());
        let rx = resize_bilinear(&x, 7, 4);
        let rty = resize_bilinear_backward(&y, 3, 5);
        let lhs: f64 = rx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(rty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_truncates_edges() {
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let p = avg_pool(&x, 2);
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert_eq!(p.data(), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = Tensor::new(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.3).sin()).collect());
        let w = Tensor::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.7).cos()).collect());
        let g = ConvGeom { stride: 2, pad: 1 };
        let y = conv2d(&x, &w, None, g);
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        for co in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    s += x.at4(0, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                    }
                    assert!((y.at4(0, co, oy, ox) - s).abs() < 1e-12);
                }
            }
        }
    }
}
