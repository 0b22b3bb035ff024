//! The full network: view decomposition, shared encoder, localization and
//! refinement decoder, and the rearrangement head.

use rand::RngCore;

use crate::decoder::{Decoder, DecoderConfig, Streams};
use crate::encoder::{encode, Backbone, ConvResidualEncoder, PyramidFeatures, LEVELS};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, PredictionHead};
use crate::losses::{ExpectedStreams, LevelMaps, SupervisionSet};
use crate::nn::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view_geometry::{decompose, PatchGrid};

/// Which views feed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Distant view plus close-ups.
    Both,
    /// Only the downsampled distant view.
    Distant,
    /// Only the close-up crops.
    CloseUp,
    /// Only the original full-resolution image.
    Original,
}

impl ViewMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ViewMode::Both),
            "distant" => Ok(ViewMode::Distant),
            "closeup" => Ok(ViewMode::CloseUp),
            "original" => Ok(ViewMode::Original),
            other => Err(Error::Config(format!(
                "unknown view mode '{other}' (expected both, distant, closeup or original)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ViewMode::Both => "both",
            ViewMode::Distant => "distant",
            ViewMode::CloseUp => "closeup",
            ViewMode::Original => "original",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub encoder_widths: [usize; LEVELS],
    pub encoder_strides: [usize; LEVELS],
    pub dec_dim: usize,
    pub heads: usize,
    pub windows: Vec<usize>,
    pub fine_dim: usize,
    pub mclm: bool,
    pub mcrm: bool,
    pub vrm: bool,
    pub fine_cues: bool,
    pub views: ViewMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            grid_rows: 2,
            grid_cols: 2,
            encoder_widths: [16, 32, 64, 128, 128],
            encoder_strides: [4, 8, 16, 32, 32],
            dec_dim: 32,
            heads: 4,
            windows: vec![4, 8, 16],
            fine_dim: 8,
            mclm: true,
            mcrm: true,
            vrm: true,
            fine_cues: true,
            views: ViewMode::Both,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows != self.grid_cols || !(2..=4).contains(&self.grid_rows) {
            return Err(Error::Config(format!(
                "patch grid {}x{} must be one of 2x2, 3x3, 4x4",
                self.grid_rows, self.grid_cols
            )));
        }
        let unit = 64 * self.grid_rows;
        if self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {unit} (64 x grid rows)",
                self.image_size
            )));
        }
        if self.dec_dim == 0 || self.heads == 0 || !self.dec_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} must be a positive multiple of {} heads",
                self.dec_dim, self.heads
            )));
        }
        if !self.dec_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by 4 for 2D positional encoding",
                self.dec_dim
            )));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config(format!("pooling windows {:?} must be non-empty and positive", self.windows)));
        }
        if self.fine_cues && self.fine_dim == 0 {
            return Err(Error::Config("fine_dim must be positive when fine cues are on".into()));
        }
        if self.views != ViewMode::Both && (self.mclm || self.mcrm) {
            return Err(Error::Config(format!(
                "view mode '{}' has a single stream; disable mclm and mcrm",
                self.views.name()
            )));
        }
        Ok(())
    }

    pub fn streams(&self) -> Streams {
        let m = self.grid_rows * self.grid_cols;
        match self.views {
            ViewMode::Both => Streams { locals: m, global: true },
            ViewMode::CloseUp => Streams { locals: m, global: false },
            ViewMode::Distant | ViewMode::Original => Streams { locals: 0, global: true },
        }
    }
}

/// Per-level supervision maps at input resolution plus the final map.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub prediction: Var,
    pub supervision: SupervisionSet,
}

#[derive(Clone, Debug)]
pub struct MvaNet {
    pub config: ModelConfig,
    encoder: ConvResidualEncoder,
    decoder: Decoder,
    head: PredictionHead,
}

impl MvaNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ConvResidualEncoder::new(config.encoder_widths, config.encoder_strides)?;
        let decoder = Decoder::new(DecoderConfig {
            dim: config.dec_dim,
            heads: config.heads,
            windows: config.windows.clone(),
            strides: config.encoder_strides,
            encoder_channels: config.encoder_widths,
            mclm: config.mclm,
            mcrm: config.mcrm,
        })?;
        let head = PredictionHead::new(HeadConfig {
            dim: config.dec_dim,
            fine_dim: config.fine_dim,
            vrm: config.vrm,
            fine_cues: config.fine_cues,
        });
        Ok(MvaNet {
            config,
            encoder,
            decoder,
            head,
        })
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init(&self, rng: &mut dyn RngCore) -> ParamStore {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng);
        self.decoder.init(&mut store, rng);
        self.head.init(&mut store, rng);
        store
    }

    pub fn grid_for(&self, h: usize, w: usize) -> Result<PatchGrid> {
        PatchGrid::for_image(h, w, self.config.grid_rows, self.config.grid_cols)
    }

    /// Encoder input for `image` laid out `[locals, global]` along batch.
    fn encoder_input(&self, image: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
        match self.config.views {
            ViewMode::Original => Ok(image.clone()),
            mode => {
                let bundle = decompose(image, grid)?;
                let mut parts: Vec<&Tensor> = Vec::new();
                if mode != ViewMode::Distant {
                    parts.extend(bundle.local_views.iter());
                }
                if mode != ViewMode::CloseUp {
                    parts.push(&bundle.global_view);
                }
                Ok(Tensor::concat(&parts, 0))
            }
        }
    }

    /// Full forward pass on a `(B,3,H,W)` batch.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: &Tensor) -> Result<ForwardOutput> {
        if image.rank() != 4 || image.shape()[1] != 3 {
            return Err(Error::Shape(format!("expected a (B,3,H,W) image, got {:?}", image.shape())));
        }
        let (batch, _, h, w) = image.dims4();
        let grid = self.grid_for(h, w)?;
        let streams = self.config.streams();
        let need = self.encoder.max_stride();
        let view_extent = if self.config.views == ViewMode::Original { h.min(w) } else { grid.patch_h.min(grid.patch_w) };
        if view_extent % need != 0 {
            return Err(Error::geometry(
                if grid.patch_h % need != 0 { "height" } else { "width" },
                format!("views of {}x{} must be divisible by the encoder stride {need}", grid.patch_h, grid.patch_w),
            ));
        }

        let input = tape.constant(self.encoder_input(image, &grid)?);
        let pyramid: PyramidFeatures = encode(&self.encoder, tape, p, input)?;
        let dec = self.decoder.decode(tape, p, &pyramid, streams, &grid, batch)?;
        let image_var = tape.constant(image.clone());
        let head = self.head.predict(tape, p, dec.d1, image_var, streams, &grid, batch)?;

        let mut levels = Vec::with_capacity(LEVELS);
        for side in &dec.sides {
            let to_prob = |tape: &mut Tape, v: Option<Var>| {
                v.map(|x| {
                    let x = tape.resize(x, h, w);
                    tape.sigmoid(x)
                })
            };
            let local = to_prob(tape, side.local);
            let global = to_prob(tape, side.global);
            let attention = side.attention.map(|a| tape.resize(a, h, w));
            levels.push(LevelMaps { local, global, attention });
        }
        let expected = ExpectedStreams {
            local: streams.locals > 0,
            global: streams.global,
            attention: self.config.mcrm && streams.is_multi_view(),
        };
        Ok(ForwardOutput {
            logits: head.logits,
            prediction: head.prediction,
            supervision: SupervisionSet {
                levels,
                final_pred: head.prediction,
                expected,
            },
        })
    }

    /// Inference helper: prediction map `(B,1,H,W)` with no gradient graph.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, image)?;
        Ok(tape.value(out.prediction).clone())
    }
}
