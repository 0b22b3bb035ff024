//! View rearrangement and the full-resolution prediction head.
//!
//! Refined close-up features are assembled into image layout, smoothed by a
//! three-layer convolution head (conv, batch norm, ReLU), added to the
//! upsampled global stream and to shallow image features, then lifted to
//! input resolution.

use rand::Rng;

use crate::decoder::Streams;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Norm, ParamStore, LINEAR_GAIN};
use crate::tape::{Tape, Var};
use crate::view_geometry::{assemble_var, PatchGrid};

#[derive(Clone, Debug)]
pub struct HeadConfig {
    pub dim: usize,
    /// Channel width of the full- and half-resolution shallow cues.
    pub fine_dim: usize,
    /// Seam-smoothing convolution head on/off.
    pub vrm: bool,
    /// Inject full- and half-resolution shallow features while upsampling;
    /// when off the quarter-resolution map is upsampled directly.
    pub fine_cues: bool,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Pre-sigmoid map at input resolution, `(B,1,H,W)`.
    pub logits: Var,
    pub prediction: Var,
}

#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub config: HeadConfig,
    smooth: Vec<(Conv2d, Norm)>,
    stem_full: Conv2d,
    stem_half: Conv2d,
    stem_quarter: Conv2d,
    reduce: Conv2d,
    out_fine: Conv2d,
    out_coarse: Conv2d,
}

impl PredictionHead {
    pub fn new(config: HeadConfig) -> Self {
        let (d, f) = (config.dim, config.fine_dim);
        let smooth = (1..=3)
            .map(|i| {
                (
                    Conv2d::same(format!("vrm.conv{i}"), d, d, 3),
                    Norm::new(format!("vrm.bn{i}"), d),
                )
            })
            .collect();
        PredictionHead {
            smooth,
            stem_full: Conv2d::new("shallow.full", 3, f, 3, 1, 1),
            stem_half: Conv2d::new("shallow.half", if config.fine_cues { f } else { 3 }, f, 3, 2, 1),
            stem_quarter: Conv2d::new("shallow.quarter", f, d, 3, 2, 1).with_gain(LINEAR_GAIN),
            reduce: Conv2d::same("head.reduce", d, f, 1).with_gain(LINEAR_GAIN),
            out_fine: Conv2d::same("head.out", f, 1, 1).with_gain(LINEAR_GAIN),
            out_coarse: Conv2d::same("head.out", d, 1, 1).with_gain(LINEAR_GAIN),
            config,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.config.vrm {
            for (c, n) in &self.smooth {
                c.init(store, rng);
                n.init(store);
            }
        }
        if self.config.fine_cues {
            self.stem_full.init(store, rng);
        }
        self.stem_half.init(store, rng);
        self.stem_quarter.init(store, rng);
        if self.config.fine_cues {
            self.reduce.init(store, rng);
            self.out_fine.init(store, rng);
        } else {
            self.out_coarse.init(store, rng);
        }
    }

    /// `d1`: level-1 features `[locals, global]` along batch; `image`: the
    /// full-resolution input `(B,3,H,W)`.
    pub fn predict(
        &self,
        tape: &mut Tape,
        p: &Bound,
        d1: Var,
        image: Var,
        streams: Streams,
        grid: &PatchGrid,
        batch: usize,
    ) -> Result<HeadOutput> {
        let (_, _, h, w) = tape.value(image).dims4();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::geometry(
                if h % 4 != 0 { "height" } else { "width" },
                format!("input {h}x{w} must be divisible by 4 for the shallow stem"),
            ));
        }
        let (qh, qw) = (h / 4, w / 4);

        let mut merged = None;
        if streams.locals > 0 {
            let parts: Vec<Var> = (0..streams.locals)
                .map(|i| tape.narrow(d1, 0, i * batch, batch))
                .collect();
            let mut x = assemble_var(tape, &parts, grid)?;
            if self.config.vrm {
                for (c, n) in &self.smooth {
                    x = c.forward(tape, p, x);
                    x = n.batch(tape, p, x);
                    x = tape.relu(x);
                }
            }
            merged = Some(x);
        }
        if streams.global {
            let g = tape.narrow(d1, 0, streams.locals * batch, batch);
            merged = Some(match merged {
                Some(m) => {
                    let (_, _, mh, mw) = tape.value(m).dims4();
                    let g = tape.resize(g, mh, mw);
                    tape.add(m, g)
                }
                None => g,
            });
        }
        let merged = merged.ok_or_else(|| Error::Config("no view stream reaches the head".into()))?;
        // a lone distant view sits below quarter resolution
        let merged = tape.resize(merged, qh, qw);

        let s_full = if self.config.fine_cues {
            let s = self.stem_full.forward(tape, p, image);
            tape.relu(s)
        } else {
            image
        };
        let s_half = self.stem_half.forward(tape, p, s_full);
        let s_half = tape.relu(s_half);
        let s_quarter = self.stem_quarter.forward(tape, p, s_half);
        let x = tape.add(merged, s_quarter);

        let logits = if self.config.fine_cues {
            let x = tape.relu(x);
            let x = self.reduce.forward(tape, p, x);
            let x = tape.resize(x, h / 2, w / 2);
            let x = tape.add(x, s_half);
            let x = tape.resize(x, h, w);
            let x = tape.add(x, s_full);
            let x = tape.relu(x);
            self.out_fine.forward(tape, p, x)
        } else {
            let x = tape.resize(x, h, w);
            self.out_coarse.forward(tape, p, x)
        };
        let prediction = tape.sigmoid(logits);
        Ok(HeadOutput { logits, prediction })
    }
}
