//! Attention building blocks: tokenization, multi-granularity pooled tokens,
//! 2D sinusoidal positional encoding, multi-head cross attention and the
//! cross-attention transformer block.
//!
//! The block applies normalization to each sublayer output before the
//! residual addition (`T = T + LN(MHCA(..))`, `T = T + LN(FFN(T))`), which is
//! not the usual pre-norm arrangement.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Norm, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Spatial layout a token sequence was flattened from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    /// Raster-order flattening of an `height × width` map.
    Map { height: usize, width: usize },
    /// Concatenated pooled cells; not invertible.
    Pooled,
}

/// Tokens laid out `(N, B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub origin: TokenOrigin,
}

impl TokenSequence {
    pub fn from_map(map: &Tensor) -> Self {
        let (b, c, h, w) = map.dims4();
        TokenSequence {
            tokens: map.permute(&[2, 3, 0, 1]).reshape(&[h * w, b, c]),
            origin: TokenOrigin::Map { height: h, width: w },
        }
    }

    pub fn to_map(&self) -> Result<Tensor> {
        let TokenOrigin::Map { height, width } = self.origin else {
            return Err(Error::Invalid("pooled tokens have no spatial layout".into()));
        };
        let (_, b, c) = self.tokens.dims3();
        Ok(self
            .tokens
            .clone()
            .reshape(&[height, width, b, c])
            .permute(&[2, 3, 0, 1]))
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `(B,C,H,W)` → `(H·W, B, C)` in raster order.
pub fn tokenize(tape: &mut Tape, x: Var) -> Var {
    let (b, c, h, w) = tape.value(x).dims4();
    let p = tape.permute(x, &[2, 3, 0, 1]);
    tape.reshape(p, &[h * w, b, c])
}

/// Inverse of [`tokenize`].
pub fn untokenize(tape: &mut Tape, t: Var, height: usize, width: usize) -> Var {
    let (n, b, c) = tape.value(t).dims3();
    assert_eq!(n, height * width, "token count {n} vs {height}x{width}");
    let r = tape.reshape(t, &[height, width, b, c]);
    tape.permute(r, &[2, 3, 0, 1])
}

/// Number of tokens [`pooled_tokens`] yields for an `h × w` source.
pub fn pooled_token_count(h: usize, w: usize, windows: &[usize]) -> usize {
    windows.iter().map(|&n| h.div_ceil(n) * w.div_ceil(n)).sum()
}

/// Average-pools `x` with kernel = stride = each window, tokenizes each
/// pyramid level and concatenates them in window order.
pub fn pooled_tokens(tape: &mut Tape, x: Var, windows: &[usize]) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::Config("pooling windows must not be empty".into()));
    }
    if let Some(&bad) = windows.iter().find(|&&n| n == 0) {
        return Err(Error::Config(format!("pooling window {bad} must be positive")));
    }
    let parts: Vec<Var> = windows
        .iter()
        .map(|&n| {
            let p = if n == 1 { x } else { tape.avg_pool(x, n) };
            tokenize(tape, p)
        })
        .collect();
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)
    })
}

/// Fixed 2D sinusoidal encoding, `(1, C, H, W)`. The first `C/2` channels
/// encode the row, the rest the column; each half interleaves `sin`/`cos`
/// pairs over geometrically spaced frequencies.
pub fn positional_encoding(height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let pairs = half / 2;
    let mut pe = Tensor::zeros(&[1, channels, height, width]);
    for i in 0..pairs {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
        for y in 0..height {
            for x in 0..width {
                let (ay, ax) = (y as f64 * freq, x as f64 * freq);
                pe.set4(0, 2 * i, y, x, ay.sin());
                pe.set4(0, 2 * i + 1, y, x, ay.cos());
                pe.set4(0, half + 2 * i, y, x, ax.sin());
                pe.set4(0, half + 2 * i + 1, y, x, ax.cos());
            }
        }
    }
    Ok(pe)
}

/// Adds the positional encoding of `x`'s spatial extent to every batch item.
pub fn add_positional(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).dims4();
    let pe = positional_encoding(h, w, c)?;
    let tiled = Tensor::concat(&vec![&pe; b], 0);
    let pv = tape.constant(tiled);
    Ok(tape.add(x, pv))
}

/// Multi-head cross attention over already projected `Q`, `K`, `V`, followed
/// by the output projection.
#[derive(Clone, Debug)]
pub struct Mhca {
    pub heads: usize,
    pub out_proj: Linear,
}

impl Mhca {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Mhca {
            heads,
            out_proj: Linear::new(format!("{name}.out"), dim, dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.out_proj.init(store, rng);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let (nq, bq, cq) = tape.value(q).dims3();
        let (nk, bk, ck) = tape.value(k).dims3();
        if nk == 0 {
            return Err(Error::Invalid("attention needs at least one key token".into()));
        }
        if tape.shape(v) != [nk, bk, ck] {
            return Err(Error::Shape(format!(
                "keys {:?} and values {:?} differ",
                tape.shape(k),
                tape.shape(v)
            )));
        }
        if bq != bk || cq != ck {
            return Err(Error::Shape(format!(
                "queries ({nq},{bq},{cq}) incompatible with keys ({nk},{bk},{ck})"
            )));
        }
        if cq % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {cq} is not divisible by {} heads",
                self.heads
            )));
        }
        let a = tape.attention(q, k, v, self.heads);
        Ok(self.out_proj.forward(tape, p, a))
    }
}

/// Linear → GELU → linear with a `4C` hidden width.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize) -> Self {
        FeedForward {
            fc1: Linear::new(format!("{name}.fc1"), dim, 4 * dim),
            fc2: Linear::new(format!("{name}.fc2"), 4 * dim, dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(tape, p, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Cross-attention transformer block: query projection, shared key/value
/// projection (`C → 2C`), attention, then post-sublayer normalized residuals
/// and a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub dim: usize,
    pub wq: Linear,
    pub wkv: Linear,
    pub mhca: Mhca,
    pub ln1: Norm,
    pub ffn: FeedForward,
    pub ln2: Norm,
}

impl CrossAttentionBlock {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossAttentionBlock {
            dim,
            wq: Linear::new(format!("{name}.wq"), dim, dim),
            wkv: Linear::new(format!("{name}.wkv"), dim, 2 * dim),
            mhca: Mhca::new(&format!("{name}.mhca"), dim, heads)?,
            ln1: Norm::new(format!("{name}.ln1"), dim),
            ffn: FeedForward::new(&format!("{name}.ffn"), dim),
            ln2: Norm::new(format!("{name}.ln2"), dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.wq.init(store, rng);
        self.wkv.init(store, rng);
        self.mhca.init(store, rng);
        self.ln1.init(store);
        self.ffn.init(store, rng);
        self.ln2.init(store);
    }

    /// `residual`, `query_src`: `(Nq,B,C)`; `kv_src`: `(Nk,B,C)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, residual: Var, query_src: Var, kv_src: Var) -> Result<Var> {
        let q = self.wq.forward(tape, p, query_src);
        let kv = self.wkv.forward(tape, p, kv_src);
        let k = tape.narrow(kv, 2, 0, self.dim);
        let v = tape.narrow(kv, 2, self.dim, self.dim);
        let a = self.mhca.forward(tape, p, q, k, v)?;
        let a = self.ln1.layer(tape, p, a);
        let t = tape.add(residual, a);
        let f = self.ffn.forward(tape, p, t);
        let f = self.ln2.layer(tape, p, f);
        Ok(tape.add(t, f))
    }
}
