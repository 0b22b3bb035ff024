//! Top-down decoder: localization once at the top level, refinement at every
//! level, FPN-style skip fusion, and per-level side outputs.

use rand::Rng;

use crate::encoder::{PyramidFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::mclm::Mclm;
use crate::mcrm::Mcrm;
use crate::nn::{Bound, Conv2d, ParamStore, LINEAR_GAIN};
use crate::tape::{Tape, Var};
use crate::view_geometry::{assemble_var, PatchGrid};

/// Which view streams travel through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    /// Number of close-up views (0 when absent).
    pub locals: usize,
    pub global: bool,
}

impl Streams {
    pub fn views(&self) -> usize {
        self.locals + usize::from(self.global)
    }

    pub fn is_multi_view(&self) -> bool {
        self.locals > 0 && self.global
    }
}

/// Raw side outputs of one decoder level.
#[derive(Clone, Debug, Default)]
pub struct LevelSides {
    /// Logits of the assembled close-up stream.
    pub local: Option<Var>,
    /// Logits of the global stream.
    pub global: Option<Var>,
    /// Token attention map (already a probability).
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Refined level-1 features, `[locals, global]` along batch.
    pub d1: Var,
    /// Index 0 is level 1.
    pub sides: Vec<LevelSides>,
}

#[derive(Clone, Debug)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub windows: Vec<usize>,
    pub strides: [usize; LEVELS],
    pub encoder_channels: [usize; LEVELS],
    pub mclm: bool,
    pub mcrm: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    mclm: Mclm,
    mcrms: Vec<Mcrm>,
    side_local: Vec<Conv2d>,
    side_global: Vec<Conv2d>,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        for i in 1..LEVELS {
            let (lo, hi) = (config.strides[i - 1], config.strides[i]);
            if hi != lo && hi != 2 * lo {
                return Err(Error::Config(format!(
                    "stride ladder {:?} cannot be undone by x2 upsampling",
                    config.strides
                )));
            }
        }
        let d = config.dim;
        let laterals = (0..LEVELS)
            .map(|i| Conv2d::same(format!("decoder.lateral{}", i + 1), config.encoder_channels[i], d, 1).with_gain(LINEAR_GAIN))
            .collect();
        let smooth = (0..LEVELS - 1)
            .map(|i| Conv2d::same(format!("decoder.smooth{}", i + 1), d, d, 3))
            .collect();
        let mcrms = (1..=LEVELS)
            .map(|lvl| Mcrm::new(lvl, d, config.heads, config.windows.clone()))
            .collect::<Result<_>>()?;
        let side_local = (0..LEVELS)
            .map(|i| Conv2d::same(format!("side{}.local", i + 1), d, 1, 1).with_gain(LINEAR_GAIN))
            .collect();
        let side_global = (0..LEVELS)
            .map(|i| Conv2d::same(format!("side{}.global", i + 1), d, 1, 1).with_gain(LINEAR_GAIN))
            .collect();
        Ok(Decoder {
            mclm: Mclm::new(d, config.heads, config.windows.clone())?,
            config,
            laterals,
            smooth,
            mcrms,
            side_local,
            side_global,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in &self.laterals {
            c.init(store, rng);
        }
        for c in &self.smooth {
            c.init(store, rng);
        }
        if self.config.mclm {
            self.mclm.init(store, rng);
        }
        if self.config.mcrm {
            for m in &self.mcrms {
                m.init(store, rng);
            }
        }
        for (l, g) in self.side_local.iter().zip(&self.side_global) {
            l.init(store, rng);
            g.init(store, rng);
        }
    }

    /// `pyramid` levels are laid out `[locals, global]` along batch.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyramid: &PyramidFeatures,
        streams: Streams,
        grid: &PatchGrid,
        batch: usize,
    ) -> Result<DecoderOutput> {
        let expected = batch * streams.views();
        for &lvl in &pyramid.levels {
            let n = tape.shape(lvl)[0];
            if n != expected {
                return Err(Error::Partition { expected, found: n });
            }
        }
        if pyramid.strides != self.config.strides {
            return Err(Error::Config(format!(
                "pyramid strides {:?} differ from decoder plan {:?}",
                pyramid.strides, self.config.strides
            )));
        }
        let cross_view = streams.is_multi_view();

        let mut d = self.laterals[LEVELS - 1].forward(tape, p, pyramid.levels[LEVELS - 1]);
        if self.config.mclm && cross_view {
            let m = streams.locals;
            let locals: Vec<Var> = (0..m).map(|i| tape.narrow(d, 0, i * batch, batch)).collect();
            let global = tape.narrow(d, 0, m * batch, batch);
            let out = self.mclm.localize(tape, p, global, &locals, grid)?;
            let mut parts = out.locals;
            parts.push(out.global);
            d = tape.concat(&parts, 0);
        }

        let mut sides = vec![LevelSides::default(); LEVELS];
        for lvl in (1..=LEVELS).rev() {
            let mut attention = None;
            if self.config.mcrm && cross_view {
                let r = self.mcrms[lvl - 1].refine(tape, p, d, grid, batch)?;
                d = r.refined;
                attention = Some(r.attention_map);
            }
            let local = if streams.locals > 0 {
                let parts: Vec<Var> = (0..streams.locals)
                    .map(|i| tape.narrow(d, 0, i * batch, batch))
                    .collect();
                let asm = assemble_var(tape, &parts, grid)?;
                Some(self.side_local[lvl - 1].forward(tape, p, asm))
            } else {
                None
            };
            let global = if streams.global {
                let g = tape.narrow(d, 0, streams.locals * batch, batch);
                Some(self.side_global[lvl - 1].forward(tape, p, g))
            } else {
                None
            };
            sides[lvl - 1] = LevelSides { local, global, attention };

            if lvl > 1 {
                if self.config.strides[lvl - 2] < self.config.strides[lvl - 1] {
                    let (_, _, h, w) = tape.value(d).dims4();
                    d = tape.resize(d, 2 * h, 2 * w);
                }
                let lat = self.laterals[lvl - 2].forward(tape, p, pyramid.levels[lvl - 2]);
                if tape.shape(lat) != tape.shape(d) {
                    return Err(Error::Config(format!(
                        "skip at level {} has shape {:?}, upsampled path has {:?}",
                        lvl - 1,
                        tape.shape(lat),
                        tape.shape(d)
                    )));
                }
                let s = tape.add(d, lat);
                let s = self.smooth[lvl - 2].forward(tape, p, s);
                d = tape.relu(s);
            }
        }
        Ok(DecoderOutput { d1: d, sides })
    }
}
