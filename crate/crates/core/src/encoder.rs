//! Shared hierarchical feature extractor. All views travel through one set of
//! weights along the batch axis and come out as five pyramid levels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, LINEAR_GAIN};
use crate::tape::{Tape, Var};

pub const LEVELS: usize = 5;

/// Five feature levels `E_1..E_5` of a batch of views.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; LEVELS],
    pub strides: [usize; LEVELS],
    pub channels: [usize; LEVELS],
}

/// A feature extractor producing five levels from a `(N,3,h,w)` view batch.
pub trait Backbone {
    fn strides(&self) -> [usize; LEVELS];
    fn channels(&self) -> [usize; LEVELS];
    fn init(&self, store: &mut ParamStore, rng: &mut dyn rand::RngCore);
    fn forward(&self, tape: &mut Tape, p: &Bound, views: Var) -> Result<[Var; LEVELS]>;
}

/// `relu(x + conv(relu(conv(x))))`.
#[derive(Clone, Debug)]
struct ResidualBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResidualBlock {
    fn new(name: &str, ch: usize) -> Self {
        ResidualBlock {
            c1: Conv2d::same(format!("{name}.conv1"), ch, ch, 3),
            c2: Conv2d::same(format!("{name}.conv2"), ch, ch, 3).with_gain(LINEAR_GAIN / 3.0),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.c1.init(store, rng);
        self.c2.init(store, rng);
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.c1.forward(tape, p, x);
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h);
        let s = tape.add(x, h);
        tape.relu(s)
    }
}

/// Convolutional-residual encoder: a stride-4 patchifying stem, then one
/// transition + residual block per level. A transition halves resolution
/// (2×2, stride 2) when the stride ladder doubles and is a 3×3 convolution
/// when it repeats.
#[derive(Clone, Debug)]
pub struct ConvResidualEncoder {
    widths: [usize; LEVELS],
    strides: [usize; LEVELS],
    transitions: Vec<Conv2d>,
    blocks: Vec<ResidualBlock>,
}

impl ConvResidualEncoder {
    pub fn new(widths: [usize; LEVELS], strides: [usize; LEVELS]) -> Result<Self> {
        if strides[0] != 4 {
            return Err(Error::Config(format!(
                "encoder stride ladder must start at 4, got {}",
                strides[0]
            )));
        }
        let mut transitions = vec![Conv2d::new("encoder.stem", 3, widths[0], 4, 4, 0)];
        for i in 1..LEVELS {
            let name = format!("encoder.transition{}", i + 1);
            let t = match strides[i] / strides[i - 1] {
                2 if strides[i].is_multiple_of(strides[i - 1]) => Conv2d::new(name, widths[i - 1], widths[i], 2, 2, 0),
                1 if strides[i] == strides[i - 1] => Conv2d::same(name, widths[i - 1], widths[i], 3),
                _ => {
                    return Err(Error::Config(format!(
                        "stride ladder {strides:?} must repeat or double at every level"
                    )))
                }
            };
            transitions.push(t);
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths {widths:?} must be positive")));
        }
        let blocks = (0..LEVELS)
            .map(|i| ResidualBlock::new(&format!("encoder.block{}", i + 1), widths[i]))
            .collect();
        Ok(ConvResidualEncoder {
            widths,
            strides,
            transitions,
            blocks,
        })
    }

    /// Largest stride; view extents must be divisible by it.
    pub fn max_stride(&self) -> usize {
        self.strides[LEVELS - 1]
    }
}

impl Backbone for ConvResidualEncoder {
    fn strides(&self) -> [usize; LEVELS] {
        self.strides
    }

    fn channels(&self) -> [usize; LEVELS] {
        self.widths
    }

    fn init(&self, store: &mut ParamStore, rng: &mut dyn rand::RngCore) {
        for (t, b) in self.transitions.iter().zip(&self.blocks) {
            t.init(store, rng);
            b.init(store, rng);
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, views: Var) -> Result<[Var; LEVELS]> {
        let (_, c, h, w) = tape.value(views).dims4();
        if c != 3 {
            return Err(Error::Shape(format!("views must have 3 channels, got {c}")));
        }
        let s = self.max_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "view size {h}x{w} is not divisible by {s}"
            )));
        }
        let mut x = views;
        let mut out = Vec::with_capacity(LEVELS);
        for (t, b) in self.transitions.iter().zip(&self.blocks) {
            x = t.forward(tape, p, x);
            x = tape.relu(x);
            x = b.forward(tape, p, x);
            out.push(x);
        }
        Ok(out.try_into().expect("five levels"))
    }
}

/// Runs `backbone` over a stacked view batch.
pub fn encode(backbone: &dyn Backbone, tape: &mut Tape, p: &Bound, views: Var) -> Result<PyramidFeatures> {
    let levels = backbone.forward(tape, p, views)?;
    Ok(PyramidFeatures {
        levels,
        strides: backbone.strides(),
        channels: backbone.channels(),
    })
}
