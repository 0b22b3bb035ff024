//! Complementary refinement at one decoder level.
//!
//! A one-channel token attention map from the global stream gates the
//! assembled close-up features; each close-up view then queries pooled tokens
//! of its own region of the global stream, and the refined close-ups are
//! folded back into the global stream by addition.

use rand::Rng;

use crate::attention::{pooled_tokens, tokenize, untokenize, CrossAttentionBlock};
use crate::error::{Error, Result};
use crate::mclm::add_patch_positional;
use crate::nn::{Bound, Conv2d, ParamStore, LINEAR_GAIN};
use crate::tape::{Tape, Var};
use crate::view_geometry::{assemble_var, split_var, split_var_resized, PatchGrid};

#[derive(Clone, Debug)]
pub struct RefinementOutput {
    /// `[local_1 .. local_M, global]` along the batch axis.
    pub refined: Var,
    /// Token attention map at assembled-locals resolution, `(B,1,·,·)`.
    pub attention_map: Var,
}

/// Pooling windows usable on a region of side `side`: the base windows no
/// larger than the region, or un-pooled tokens when none fit.
pub fn windows_for_region(base: &[usize], side: usize) -> Vec<usize> {
    let w: Vec<usize> = base.iter().copied().filter(|&n| n <= side).collect();
    if w.is_empty() {
        vec![1]
    } else {
        w
    }
}

/// Pooled tokens of each global region, region `m` occupying batch slots
/// `m·B .. (m+1)·B` of the result.
pub fn region_kv(tape: &mut Tape, global: Var, grid: &PatchGrid, windows: &[usize]) -> Result<Var> {
    let regions = split_var_resized(tape, global, grid);
    let (_, _, rh, rw) = tape.value(regions[0]).dims4();
    let windows = windows_for_region(windows, rh.min(rw));
    let kv = regions
        .iter()
        .map(|&r| pooled_tokens(tape, r, &windows))
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.concat(&kv, 1))
}

#[derive(Clone, Debug)]
pub struct Mcrm {
    pub level: usize,
    pub dim: usize,
    pub windows: Vec<usize>,
    pub attn_conv: Conv2d,
    pub block: CrossAttentionBlock,
}

impl Mcrm {
    pub fn new(level: usize, dim: usize, heads: usize, windows: Vec<usize>) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::Config(format!("decoder level {level} outside 1..=5")));
        }
        let name = format!("mcrm{level}");
        Ok(Mcrm {
            level,
            dim,
            windows,
            attn_conv: Conv2d::same(format!("{name}.attn"), dim, 1, 1).with_gain(LINEAR_GAIN),
            block: CrossAttentionBlock::new(&format!("{name}.block"), dim, heads)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.attn_conv.init(store, rng);
        self.block.init(store, rng);
    }

    /// `stacked`: `(B·(M+1), C, p, p)` laid out `[local_1 .. local_M, global]`.
    pub fn refine(&self, tape: &mut Tape, p: &Bound, stacked: Var, grid: &PatchGrid, batch: usize) -> Result<RefinementOutput> {
        let m_count = grid.count();
        let (n, _, ph, pw) = tape.value(stacked).dims4();
        if n != batch * (m_count + 1) {
            return Err(Error::Partition {
                expected: batch * (m_count + 1),
                found: n,
            });
        }
        let locals: Vec<Var> = (0..m_count).map(|m| tape.narrow(stacked, 0, m * batch, batch)).collect();
        let global = tape.narrow(stacked, 0, m_count * batch, batch);

        // gate the assembled close-ups with the token attention map
        let logits = self.attn_conv.forward(tape, p, global);
        let a_small = tape.sigmoid(logits);
        let (ah, aw) = (ph * grid.rows, pw * grid.cols);
        let a = tape.resize(a_small, ah, aw);
        let assembled = assemble_var(tape, &locals, grid)?;
        let gated = tape.mul_channels(assembled, a);
        let gated_locals = split_var(tape, gated, grid)?;

        // queries: every close-up, stacked along batch
        let with_pe = add_patch_positional(tape, &gated_locals, grid)?;
        let q_src: Vec<Var> = with_pe.iter().map(|&l| tokenize(tape, l)).collect();
        let q_src = tape.concat(&q_src, 1);
        let resid: Vec<Var> = gated_locals.iter().map(|&l| tokenize(tape, l)).collect();
        let resid = tape.concat(&resid, 1);

        let kv = region_kv(tape, global, grid, &self.windows)?;

        let t = self.block.forward(tape, p, resid, q_src, kv)?;
        let refined_locals: Vec<Var> = (0..m_count)
            .map(|m| {
                let s = tape.narrow(t, 1, m * batch, batch);
                untokenize(tape, s, ph, pw)
            })
            .collect();

        let merged = assemble_var(tape, &refined_locals, grid)?;
        let merged = tape.resize(merged, ph, pw);
        let global_out = tape.add(global, merged);

        let mut parts = refined_locals;
        parts.push(global_out);
        let refined = tape.concat(&parts, 0);
        Ok(RefinementOutput {
            refined,
            attention_map: a,
        })
    }
}
