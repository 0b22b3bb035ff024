//! Pixel loss (binary cross-entropy plus boundary-weighted IoU) and the
//! deep-supervised total over the final map and every decoder side output.

use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Side of the box filter used for boundary weights.
pub const BOX_SIZE: usize = 31;
/// Boundary emphasis factor in `1 + 5·|box(gt) - gt|`.
pub const BOUNDARY_GAIN: f64 = 5.0;

/// `31×31` mean filter with zero padding, normalized by the full window area.
pub fn box_filter(gt: &Tensor) -> Tensor {
    let (b, c, h, w) = gt.dims4();
    let r = (BOX_SIZE / 2) as isize;
    let area = (BOX_SIZE * BOX_SIZE) as f64;
    let mut out = Tensor::zeros(gt.shape());
    for plane in 0..b * c {
        let src = &gt.data()[plane * h * w..(plane + 1) * h * w];
        // summed-area table with a zero border row/column
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[y * w + x];
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        for y in 0..h {
            let (y0, y1) = (clampi(y as isize - r, h), clampi(y as isize + r + 1, h));
            for x in 0..w {
                let (x0, x1) = (clampi(x as isize - r, w), clampi(x as isize + r + 1, w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                out.data_mut()[plane * h * w + y * w + x] = s / area;
            }
        }
    }
    out
}

/// Per-pixel IoU weights `1 + 5·|box31(gt) − gt|`.
pub fn boundary_weights(gt: &Tensor) -> Tensor {
    let boxed = box_filter(gt);
    boxed.zip_map(gt, |m, g| 1.0 + BOUNDARY_GAIN * (m - g).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLossConfig {
    /// Boundary-weighted IoU when true, plain IoU otherwise.
    pub weighted_iou: bool,
}

impl Default for PixelLossConfig {
    fn default() -> Self {
        PixelLossConfig { weighted_iou: true }
    }
}

fn check_maps(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred != gt {
        return Err(Error::Shape(format!("prediction {pred:?} vs ground truth {gt:?}")));
    }
    if pred.len() != 4 || pred[1] != 1 {
        return Err(Error::Shape(format!("expected (B,1,H,W) maps, got {pred:?}")));
    }
    Ok(())
}

/// `mean BCE + mean_b(1 − Σωpg / Σω(p + g − pg))` on the tape.
pub fn pixel_loss(tape: &mut Tape, pred: Var, gt: &Tensor, cfg: PixelLossConfig) -> Result<Var> {
    check_maps(tape.shape(pred), gt.shape())?;
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let g = tape.constant(gt.clone());
    let one_minus_g = tape.constant(gt.map(|v| 1.0 - v));

    // binary cross-entropy
    let lp = tape.ln(p);
    let q = tape.affine(p, -1.0, 1.0);
    let lq = tape.ln(q);
    let a = tape.mul(g, lp);
    let b = tape.mul(one_minus_g, lq);
    let s = tape.add(a, b);
    let bce = tape.mean_all(s);
    let bce = tape.scale(bce, -1.0);

    // weighted IoU per image
    let weights = if cfg.weighted_iou {
        boundary_weights(gt)
    } else {
        Tensor::full(gt.shape(), 1.0)
    };
    let wv = tape.constant(weights.clone());
    let pg = tape.mul(p, g);
    let inter = tape.mul(pg, wv);
    let inter = tape.sum_per_batch(inter);
    // p + g - pg = p(1 - g) + g
    let wg = tape.constant(weights.zip_map(gt, |w, g| w * g));
    let w1g = tape.constant(weights.zip_map(gt, |w, g| w * (1.0 - g)));
    let u1 = tape.mul(p, w1g);
    let u1 = tape.add(u1, wg);
    let union = tape.sum_per_batch(u1);
    let ratio = tape.div(inter, union);
    let iou = tape.affine(ratio, -1.0, 1.0);
    let iou = tape.mean_all(iou);

    Ok(tape.add(bce, iou))
}

/// Convenience wrapper evaluating [`pixel_loss`] on plain tensors.
pub fn pixel_loss_value(pred: &Tensor, gt: &Tensor, cfg: PixelLossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = pixel_loss(&mut tape, p, gt, cfg)?;
    Ok(tape.value(l).data()[0])
}

/// Mean binary cross-entropy of clamped probabilities, the first term of
/// [`pixel_loss`].
pub fn binary_cross_entropy(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_maps(pred.shape(), gt.shape())?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            g * p.ln() + (1.0 - g) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / pred.numel() as f64)
}

/// Supervised maps of one decoder level, each a probability map at
/// ground-truth resolution.
#[derive(Clone, Debug, Default)]
pub struct LevelMaps {
    pub local: Option<Var>,
    pub global: Option<Var>,
    pub attention: Option<Var>,
}

/// Which per-level streams must be present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpectedStreams {
    pub local: bool,
    pub global: bool,
    pub attention: bool,
}

#[derive(Clone, Debug)]
pub struct SupervisionSet {
    /// Index 0 is decoder level 1.
    pub levels: Vec<LevelMaps>,
    pub final_pred: Var,
    pub expected: ExpectedStreams,
}

impl SupervisionSet {
    /// Number of supervised maps present, including the final prediction.
    pub fn map_count(&self) -> usize {
        1 + self
            .levels
            .iter()
            .map(|l| usize::from(l.local.is_some()) + usize::from(l.global.is_some()) + usize::from(l.attention.is_some()))
            .sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_g: 0.3,
            lambda_a: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelLoss {
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub attention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub final_loss: f64,
    /// Index 0 is level 1.
    pub levels: Vec<LevelLoss>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_f + Σ_i (l_l + λ_g·l_g + λ_a·l_a)`, absent streams skipped, summed
    /// in the same order as [`total_loss`] builds it on the tape.
    pub fn combine(final_loss: f64, levels: Vec<LevelLoss>, weights: LossWeights) -> Self {
        let mut total = final_loss;
        for l in &levels {
            let mut term: Option<f64> = None;
            let mut push = |v: f64| term = Some(term.map_or(v, |t| t + v));
            if let Some(v) = l.local {
                push(v);
            }
            if let Some(v) = l.global {
                push(v * weights.lambda_g + 0.0);
            }
            if let Some(v) = l.attention {
                push(v * weights.lambda_a + 0.0);
            }
            if let Some(t) = term {
                total += t;
            }
        }
        LossBreakdown {
            final_loss,
            levels,
            weights,
            total,
        }
    }

    /// Flat `name=value` pairs in a fixed order.
    pub fn components(&self) -> Vec<(String, f64)> {
        let mut v = vec![("l_f".to_string(), self.final_loss)];
        for (i, l) in self.levels.iter().enumerate() {
            let lvl = i + 1;
            if let Some(x) = l.local {
                v.push((format!("l_l{lvl}"), x));
            }
            if let Some(x) = l.global {
                v.push((format!("l_g{lvl}"), x));
            }
            if let Some(x) = l.attention {
                v.push((format!("l_a{lvl}"), x));
            }
        }
        v
    }
}

/// Deep-supervised total loss. Returns the differentiable total and the
/// per-component breakdown.
pub fn total_loss(
    tape: &mut Tape,
    sup: &SupervisionSet,
    gt: &Tensor,
    weights: LossWeights,
    cfg: PixelLossConfig,
) -> Result<(Var, LossBreakdown)> {
    if sup.levels.len() != LEVELS {
        return Err(Error::Invalid(format!(
            "supervision has {} levels, expected {LEVELS}",
            sup.levels.len()
        )));
    }
    for (i, l) in sup.levels.iter().enumerate() {
        let level = i + 1;
        if sup.expected.local && l.local.is_none() {
            return Err(Error::MissingSideOutput { level, stream: "local" });
        }
        if sup.expected.global && l.global.is_none() {
            return Err(Error::MissingSideOutput { level, stream: "global" });
        }
        if sup.expected.attention && l.attention.is_none() {
            return Err(Error::MissingSideOutput { level, stream: "attention" });
        }
    }
    let lf = pixel_loss(tape, sup.final_pred, gt, cfg)?;
    let mut acc = lf;
    let mut level_losses = Vec::with_capacity(LEVELS);
    for l in &sup.levels {
        let mut rec = LevelLoss::default();
        let mut term: Option<Var> = None;
        if let Some(m) = l.local {
            let v = pixel_loss(tape, m, gt, cfg)?;
            rec.local = Some(tape.value(v).data()[0]);
            term = Some(v);
        }
        if let Some(m) = l.global {
            let v = pixel_loss(tape, m, gt, cfg)?;
            rec.global = Some(tape.value(v).data()[0]);
            let s = tape.scale(v, weights.lambda_g);
            term = Some(match term {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
        if let Some(m) = l.attention {
            let v = pixel_loss(tape, m, gt, cfg)?;
            rec.attention = Some(tape.value(v).data()[0]);
            let s = tape.scale(v, weights.lambda_a);
            term = Some(match term {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
        if let Some(t) = term {
            acc = tape.add(acc, t);
        }
        level_losses.push(rec);
    }
    let breakdown = LossBreakdown::combine(tape.value(lf).data()[0], level_losses, weights);
    Ok((acc, breakdown))
}
