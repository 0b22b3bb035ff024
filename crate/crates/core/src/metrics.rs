//! Saliency-style evaluation: max F-measure, weighted F-measure, S-measure,
//! mean E-measure and MAE.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
/// Machine epsilon, the guard used by the common toolkits.
const EPS: f64 = f64::EPSILON;

/// `linspace(0, 1 − 1e-10, 256)`; a pixel is foreground when `pred > t`.
pub fn thresholds() -> Vec<f64> {
    let top = 1.0 - 1e-10;
    (0..THRESHOLDS)
        .map(|k| top * k as f64 / (THRESHOLDS - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub f_max: f64,
    pub f_weighted: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub mae: f64,
    pub images_evaluated: usize,
    /// Images per second, filled in by the caller that timed the run.
    pub throughput: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("f_max", format!("{:.6}", self.f_max)),
            ("f_weighted", format!("{:.6}", self.f_weighted)),
            ("s_measure", format!("{:.6}", self.s_measure)),
            ("e_measure", format!("{:.6}", self.e_measure)),
            ("mae", format!("{:.6}", self.mae)),
            ("images_evaluated", self.images_evaluated.to_string()),
            ("throughput", format!("{:.4}", self.throughput)),
        ]
    }

    pub fn to_key_value(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let f = self.fields();
        let header: Vec<&str> = f.iter().map(|(k, _)| *k).collect();
        let row: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", header.join("\t"), row.join("\t"))
    }
}

/// One prediction/ground-truth pair flattened to `h×w` planes.
#[derive(Clone, Copy, Debug)]
pub struct Plane<'a> {
    pub pred: &'a [f64],
    pub gt: &'a [bool],
    pub h: usize,
    pub w: usize,
}

/// Per-threshold F-measure of one image.
pub fn f_curve(pred: &[f64], gt: &[bool]) -> Vec<f64> {
    let (fg, bg) = threshold_histograms(pred, gt);
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut curve = vec![0.0; THRESHOLDS];
    // fg[c] counts pixels passing exactly thresholds 0..c
    for k in (0..THRESHOLDS).rev() {
        tp += fg[k + 1] as f64;
        fp += bg[k + 1] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if positives > 0.0 { tp / positives } else { 0.0 };
        let den = BETA2 * precision + recall;
        curve[k] = if den > 0.0 {
            (1.0 + BETA2) * precision * recall / den
        } else {
            0.0
        };
    }
    curve
}

/// Per-threshold E-measure of one image.
pub fn e_curve(pred: &[f64], gt: &[bool]) -> Vec<f64> {
    let (fg, bg) = threshold_histograms(pred, gt);
    let n = gt.len() as f64;
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut curve = vec![0.0; THRESHOLDS];
    for k in (0..THRESHOLDS).rev() {
        tp += fg[k + 1] as f64;
        fp += bg[k + 1] as f64;
        curve[k] = e_measure_from_counts(n, positives, tp, fp);
    }
    curve
}

fn e_measure_from_counts(n: f64, positives: f64, tp: f64, fp: f64) -> f64 {
    let predicted = tp + fp;
    let sum = if positives == 0.0 {
        n - predicted
    } else if positives == n {
        predicted
    } else {
        let mu_p = predicted / n;
        let mu_g = positives / n;
        let fn_ = positives - tp;
        let tn = n - positives - fp;
        let enhanced = |p: f64, g: f64| {
            let (a, b) = (p - mu_p, g - mu_g);
            let align = 2.0 * a * b / (a * a + b * b + EPS);
            (align + 1.0).powi(2) / 4.0
        };
        tp * enhanced(1.0, 1.0) + fp * enhanced(1.0, 0.0) + fn_ * enhanced(0.0, 1.0) + tn * enhanced(0.0, 0.0)
    };
    sum / n
}

/// Histograms of how many thresholds each pixel passes, split by label.
fn threshold_histograms(pred: &[f64], gt: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let t = thresholds();
    let step = t[1];
    let mut fg = vec![0usize; THRESHOLDS + 1];
    let mut bg = vec![0usize; THRESHOLDS + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        let mut c = ((p / step).floor().max(0.0) as usize).min(THRESHOLDS);
        while c < THRESHOLDS && t[c] < p {
            c += 1;
        }
        while c > 0 && t[c - 1] >= p {
            c -= 1;
        }
        if g {
            fg[c] += 1;
        } else {
            bg[c] += 1;
        }
    }
    (fg, bg)
}

pub fn mae(pred: &[f64], gt: &[bool]) -> f64 {
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .sum();
    s / pred.len() as f64
}

/// Exact Euclidean distance to the nearest foreground pixel plus the index
/// of that pixel; ties go to the smallest `(row, col)`.
pub fn distance_transform(gt: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    // nearest foreground row within each column
    let mut col_row: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt[y * w + x] {
                last = Some(y);
            }
            col_row[y * w + x] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if gt[y * w + x] {
                next = Some(y);
            }
            let up = col_row[y * w + x];
            col_row[y * w + x] = match (up, next) {
                (Some(u), Some(d)) => Some(if y - u <= d - y { u } else { d }),
                (u, d) => u.or(d),
            };
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, usize, usize)> = None;
            for xc in 0..w {
                if let Some(r) = col_row[y * w + xc] {
                    let d2 = r.abs_diff(y).pow(2) + xc.abs_diff(x).pow(2);
                    let key = (d2, r, xc);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            if let Some((d2, r, c)) = best {
                dist[y * w + x] = (d2 as f64).sqrt();
                idx[y * w + x] = r * w + c;
            }
        }
    }
    (dist, idx)
}

/// Normalized `7×7` Gaussian with σ = 5.
pub fn gaussian_kernel() -> [[f64; 7]; 7] {
    let sigma = 5.0f64;
    let mut k = [[0.0; 7]; 7];
    let mut max = 0.0f64;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for v in k.iter_mut().flatten() {
        if *v < EPS * max {
            *v = 0.0;
        }
        sum += *v;
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

/// Distance-weighted F-measure (β = 1); 0 when the mask has no foreground.
pub fn weighted_f(plane: Plane<'_>) -> f64 {
    let Plane { pred, gt, h, w } = plane;
    if !gt.iter().any(|&g| g) {
        return 0.0;
    }
    let (dst, nearest) = distance_transform(gt, h, w);
    let err: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .collect();
    let et: Vec<f64> = (0..h * w)
        .map(|i| if gt[i] { err[i] } else { err[nearest[i]] })
        .collect();
    let k = gaussian_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, row) in k.iter().enumerate() {
                let yy = y as isize + i as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (j, kv) in row.iter().enumerate() {
                    let xx = x as isize + j as isize - 3;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    s += kv * et[yy as usize * w + xx as usize];
                }
            }
            ea[y * w + x] = s;
        }
    }
    let (mut sum_gt, mut ew_fg, mut ew_bg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        let min_e = if gt[i] && ea[i] < err[i] { ea[i] } else { err[i] };
        if gt[i] {
            sum_gt += 1.0;
            ew_fg += min_e;
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * dst[i]).exp();
            ew_bg += min_e * b;
        }
    }
    let tpw = sum_gt - ew_fg;
    let recall = 1.0 - ew_fg / sum_gt;
    let precision = tpw / (tpw + ew_bg + EPS);
    2.0 * recall * precision / (recall + precision + EPS)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn s_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 {
        let var = values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pred: &[f64], gt: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / gt.len() as f64;
    u * s_object(&fg) + (1.0 - u) * s_object(&bg)
}

fn block_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let (x, y) = (mean(pred), mean(gt));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (p, g) in pred.iter().zip(gt) {
            sx += (p - x).powi(2);
            sy += (g - y).powi(2);
            sxy += (p - x) * (g - y);
        }
        let d = (n - 1) as f64;
        sx /= d;
        sy /= d;
        sxy /= d;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Centroid of the foreground, rounded half-to-even, then shifted by one.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let cx = (sx / n as f64).round_ties_even() as usize + 1;
    let cy = (sy / n as f64).round_ties_even() as usize + 1;
    (cx.min(w), cy.min(h))
}

fn region_score(plane: Plane<'_>) -> f64 {
    let Plane { pred, gt, h, w } = plane;
    let (cx, cy) = centroid(gt, h, w);
    let area = (h * w) as f64;
    let block = |y0: usize, y1: usize, x0: usize, x1: usize| {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                p.push(pred[y * w + x]);
                g.push(f64::from(u8::from(gt[y * w + x])));
            }
        }
        block_ssim(&p, &g)
    };
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block(0, cy, 0, cx) + w2 * block(0, cy, cx, w) + w3 * block(cy, h, 0, cx) + w4 * block(cy, h, cx, w)
}

/// Structure measure with α = 0.5.
pub fn s_measure(plane: Plane<'_>) -> f64 {
    let fg = plane.gt.iter().filter(|&&g| g).count();
    if fg == 0 {
        return 1.0 - mean(plane.pred);
    }
    if fg == plane.gt.len() {
        return mean(plane.pred);
    }
    let s = S_ALPHA * object_score(plane.pred, plane.gt) + (1.0 - S_ALPHA) * region_score(plane);
    s.max(0.0)
}

#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub f_curve: Vec<f64>,
    pub e_mean: f64,
    pub f_weighted: f64,
    pub s_measure: f64,
    pub mae: f64,
}

pub fn image_metrics(plane: Plane<'_>) -> ImageMetrics {
    let e = e_curve(plane.pred, plane.gt);
    ImageMetrics {
        f_curve: f_curve(plane.pred, plane.gt),
        e_mean: mean(&e),
        f_weighted: weighted_f(plane),
        s_measure: s_measure(plane),
        mae: mae(plane.pred, plane.gt),
    }
}

/// Order-independent mean: values are sorted before summation.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    mean(&v)
}

fn to_plane_data(pred: &Tensor, gt: &Tensor, i: usize) -> Result<(Vec<f64>, Vec<bool>, usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "image {i}: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let s = pred.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("image {i}: expected a single-channel map, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("image {i}: empty map")));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("image {i}: prediction value {v} outside [0,1]")));
    }
    let mut mask = Vec::with_capacity(h * w);
    for &v in gt.data() {
        if v == 0.0 {
            mask.push(false);
        } else if v == 1.0 {
            mask.push(true);
        } else {
            return Err(Error::Invalid(format!("image {i}: ground truth value {v} is not binary")));
        }
    }
    Ok((pred.data().to_vec(), mask, h, w))
}

/// All five metrics averaged over the dataset. `throughput` is left at 0.
pub fn compute_all(preds: &[Tensor], gts: &[Tensor]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Invalid("no images to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let planes = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| to_plane_data(p, g, i))
        .collect::<Result<Vec<_>>>()?;
    let per_image = par::map_range(planes.len(), |i| {
        let (p, g, h, w) = &planes[i];
        image_metrics(Plane { pred: p, gt: g, h: *h, w: *w })
    });
    let f_max = (0..THRESHOLDS)
        .map(|k| sorted_mean(per_image.iter().map(|m| m.f_curve[k]).collect()))
        .fold(0.0, f64::max);
    let collect = |f: fn(&ImageMetrics) -> f64| sorted_mean(per_image.iter().map(f).collect());
    Ok(MetricsReport {
        f_max,
        f_weighted: collect(|m| m.f_weighted),
        s_measure: collect(|m| m.s_measure),
        e_measure: collect(|m| m.e_mean),
        mae: collect(|m| m.mae),
        images_evaluated: per_image.len(),
        throughput: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, h, w], v.to_vec())
    }

    #[test]
    fn perfect_prediction() {
        let gt = map(3, 3, &[0., 1., 0., 1., 1., 1., 0., 1., 0.]);
        let r = compute_all(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap();
        assert!((r.f_max - 1.0).abs() < 1e-12);
        assert!((r.s_measure - 1.0).abs() < 1e-9);
        assert!((r.e_measure - 1.0).abs() < 1e-12);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn constant_offset_mae() {
        let r = compute_all(&[map(2, 2, &[0.5; 4])], &[map(2, 2, &[1.0; 4])]).unwrap();
        assert_eq!(r.mae, 0.5);
    }

    #[test]
    fn rejects_non_binary_and_empty() {
        assert!(compute_all(&[map(1, 2, &[0.5, 0.5])], &[map(1, 2, &[0.5, 1.0])]).is_err());
        assert!(compute_all(&[], &[]).is_err());
    }

    #[test]
    fn threshold_counts_match_direct_comparison() {
        let t = thresholds();
        let pred = [0.0, 1e-12, 0.5, 1.0 / 255.0, 254.0 / 255.0, 1.0];
        let gt = [true; 6];
        let (fg, _) = threshold_histograms(&pred, &gt);
        for (i, &p) in pred.iter().enumerate() {
            let direct = t.iter().filter(|&&tk| p > tk).count();
            let single = threshold_histograms(&[p], &[true]).0;
            assert_eq!(single[direct], 1, "pixel {i}");
        }
        assert_eq!(fg.iter().sum::<usize>(), 6);
    }

    #[test]
    fn distance_transform_prefers_upper_left() {
        let gt = [true, false, true, false, false, false, true, false, true];
        let (d, idx) = distance_transform(&gt, 3, 3);
        assert!((d[4] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(idx[4], 0);
        assert_eq!(idx[1], 0);
        assert_eq!(idx[5], 2);
    }
}
