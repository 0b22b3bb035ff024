//! Complementary localization at the top pyramid level.
//!
//! Global tokens query pooled tokens of the assembled close-up features;
//! each close-up view then queries the slice of updated global tokens that
//! covers its own region.

use rand::Rng;

use crate::attention::{pooled_tokens, tokenize, untokenize, CrossAttentionBlock, Mhca};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view_geometry::{assemble_var, split_var_resized, PatchGrid};

/// Adds to each patch the positional encoding of its region in the assembled
/// layout, so patches carry their absolute position.
pub(crate) fn add_patch_positional(tape: &mut Tape, patches: &[Var], grid: &PatchGrid) -> Result<Vec<Var>> {
    let (b, c, ph, pw) = tape.value(patches[0]).dims4();
    let full = crate::attention::positional_encoding(ph * grid.rows, pw * grid.cols, c)?;
    let pieces = crate::view_geometry::split(&full, grid)?;
    Ok(patches
        .iter()
        .zip(pieces)
        .map(|(&x, pe)| {
            let tiled = Tensor::concat(&vec![&pe; b], 0);
            let pv = tape.constant(tiled);
            tape.add(x, pv)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct MclmOutput {
    pub global: Var,
    pub locals: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Mclm {
    pub dim: usize,
    pub windows: Vec<usize>,
    pub global_block: CrossAttentionBlock,
    pub local_wq: Linear,
    pub local_mhca: Mhca,
}

impl Mclm {
    pub fn new(dim: usize, heads: usize, windows: Vec<usize>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Config("localization pooling windows must not be empty".into()));
        }
        Ok(Mclm {
            dim,
            windows,
            global_block: CrossAttentionBlock::new("mclm.global", dim, heads)?,
            local_wq: Linear::new("mclm.local.wq", dim, dim),
            local_mhca: Mhca::new("mclm.local.mhca", dim, heads)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.global_block.init(store, rng);
        self.local_wq.init(store, rng);
        self.local_mhca.init(store, rng);
    }

    /// `global`: `(B,C,s,s)`; `locals`: `M` maps of the same shape in grid order.
    pub fn localize(&self, tape: &mut Tape, p: &Bound, global: Var, locals: &[Var], grid: &PatchGrid) -> Result<MclmOutput> {
        if locals.len() != grid.count() {
            return Err(Error::geometry(
                "grid",
                format!("{} local maps for a {}x{} grid", locals.len(), grid.rows, grid.cols),
            ));
        }
        let gshape = tape.shape(global).to_vec();
        if let Some(bad) = locals.iter().position(|&l| tape.shape(l) != gshape.as_slice()) {
            return Err(Error::geometry(
                "spatial",
                format!(
                    "local map {bad} has shape {:?}, global has {gshape:?}",
                    tape.shape(locals[bad])
                ),
            ));
        }
        let (b, _, s_h, s_w) = tape.value(global).dims4();

        // global branch
        let unified = assemble_var(tape, locals, grid)?;
        let kv = pooled_tokens(tape, unified, &self.windows)?;
        let tg_in = tokenize(tape, global);
        let tg = self.global_block.forward(tape, p, tg_in, tg_in, kv)?;
        let global_out = untokenize(tape, tg, s_h, s_w);

        // per-patch slices of the updated global tokens, stacked along batch
        let regions = split_var_resized(tape, global_out, grid);
        let (_, _, r_h, r_w) = tape.value(regions[0]).dims4();
        let region_tokens: Vec<Var> = regions.iter().map(|&r| tokenize(tape, r)).collect();
        let kv_local = tape.concat(&region_tokens, 1);
        debug_assert_eq!(tape.shape(kv_local)[0], r_h * r_w);

        // local branch: bare attention, no residual
        let with_pe = add_patch_positional(tape, locals, grid)?;
        let q_tokens: Vec<Var> = with_pe.iter().map(|&l| tokenize(tape, l)).collect();
        let q_all = tape.concat(&q_tokens, 1);
        let q = self.local_wq.forward(tape, p, q_all);
        let out = self.local_mhca.forward(tape, p, q, kv_local, kv_local)?;
        let locals_out = (0..grid.count())
            .map(|m| {
                let t = tape.narrow(out, 1, m * b, b);
                untokenize(tape, t, s_h, s_w)
            })
            .collect();
        Ok(MclmOutput {
            global: global_out,
            locals: locals_out,
        })
    }
}
