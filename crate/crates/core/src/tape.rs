//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes built only
//! from constants carry no backward closure, so inference through a tape
//! costs little more than plain evaluation.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn unary_grad(dy: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    dy.zip_map(x, f)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: usize) -> bool {
        self.nodes[v].backward.is_some()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Backward) -> Var {
        let live = parents.iter().any(|&p| self.requires_grad(p));
        self.nodes.push(Node {
            value,
            parents,
            backward: if live { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: Some(Box::new(|_, _, _| Vec::new())),
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from `root`, seeding with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            if node.parents.is_empty() {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = backward(&dy, &parent_vals, &node.value);
            for (&p, g) in node.parents.iter().zip(pgrads) {
                let Some(g) = g else { continue };
                if !self.requires_grad(p) {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(y, vec![a.0, b.0], Box::new(|dy, _, _| vec![Some(dy.clone()), Some(dy.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|dy, _, _| vec![Some(dy.clone()), Some(dy.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|dy, p, _| {
                vec![
                    Some(dy.zip_map(p[1], |g, b| g * b)),
                    Some(dy.zip_map(p[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(
            y,
            vec![a.0, b.0],
            Box::new(|dy, p, y| {
                let da = dy.zip_map(p[1], |g, b| g / b);
                let t = dy.zip_map(y, |g, y| g * y);
                let db = t.zip_map(p[1], |t, b| -t / b);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let y = self.value(a).map(|x| scale * x + shift);
        self.push(y, vec![a.0], Box::new(move |dy, _, _| vec![Some(dy.map(|g| g * scale))]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| if x < 0.0 { 0.0 } else { x });
        self.push(
            y,
            vec![a.0],
            Box::new(|dy, p, _| vec![Some(unary_grad(dy, p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(kernels::gelu);
        self.push(
            y,
            vec![a.0],
            Box::new(|dy, p, _| vec![Some(unary_grad(dy, p[0], |g, x| g * kernels::gelu_grad(x)))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(kernels::sigmoid);
        self.push(
            y,
            vec![a.0],
            Box::new(|dy, _, y| vec![Some(dy.zip_map(y, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        self.push(y, vec![a.0], Box::new(|dy, p, _| vec![Some(unary_grad(dy, p[0], |g, x| g / x))]))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(
            y,
            vec![a.0],
            Box::new(move |dy, p, _| {
                vec![Some(unary_grad(dy, p[0], |g, x| if x >= lo && x <= hi { g } else { 0.0 }))]
            }),
        )
    }

    /// `x (B,C,H,W) ⊙ a (B,1,H,W)`, broadcasting `a` over channels.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(a).shape(), &[b, 1, h, w], "mul_channels mask shape");
        let hw = h * w;
        let mut y = self.value(x).clone();
        {
            let av = self.value(a).data().to_vec();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                let bi = i / (c * hw);
                *v *= av[bi * hw + i % hw];
            }
        }
        self.push(
            y,
            vec![x.0, a.0],
            Box::new(move |dy, p, _| {
                let (xv, av) = (p[0], p[1]);
                let mut dx = dy.clone();
                let mut da = Tensor::zeros(av.shape());
                for (i, g) in dx.data_mut().iter_mut().enumerate() {
                    let bi = i / (c * hw);
                    let ai = bi * hw + i % hw;
                    da.data_mut()[ai] += *g * xv.data()[i];
                    *g *= av.data()[ai];
                }
                vec![Some(dx), Some(da)]
            }),
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(
            y,
            vec![a.0],
            Box::new(move |dy, _, _| vec![Some(Tensor::full(&shape, dy.data()[0]))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums everything but the leading axis: `(B, ...)` → `(B)`.
    pub fn sum_per_batch(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let b = shape[0];
        let inner = self.value(a).numel() / b;
        let y = Tensor::new(
            &[b],
            self.value(a).data().chunks(inner).map(|c| c.iter().sum()).collect(),
        );
        self.push(
            y,
            vec![a.0],
            Box::new(move |dy, _, _| {
                let mut g = Tensor::zeros(&shape);
                for (bi, chunk) in g.data_mut().chunks_mut(inner).enumerate() {
                    chunk.fill(dy.data()[bi]);
                }
                vec![Some(g)]
            }),
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.shape(a).to_vec();
        let y = self.value(a).clone().reshape(shape);
        self.push(y, vec![a.0], Box::new(move |dy, _, _| vec![Some(dy.clone().reshape(&old))]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let y = self.value(a).permute(axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(y, vec![a.0], Box::new(move |dy, _, _| vec![Some(dy.permute(&inverse))]))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let y = self.value(a).narrow(axis, start, len);
        self.push(
            y,
            vec![a.0],
            Box::new(move |dy, _, _| {
                let mut before = shape.clone();
                before[axis] = start;
                let mut after = shape.clone();
                after[axis] = shape[axis] - start - len;
                let z0 = Tensor::zeros(&before);
                let z1 = Tensor::zeros(&after);
                vec![Some(Tensor::concat(&[&z0, dy, &z1], axis))]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let y = {
            let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&vals, axis)
        };
        let lens: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            y,
            parts.iter().map(|p| p.0).collect(),
            Box::new(move |dy, _, _| {
                let mut start = 0;
                lens.iter()
                    .map(|&l| {
                        let g = dy.narrow(axis, start, l);
                        start += l;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)` of a `(B,C,H,W)` map.
    pub fn crop(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let (b, c, ih, iw) = self.value(a).dims4();
        assert!(y0 + h <= ih && x0 + w <= iw, "crop out of bounds");
        let mut y = Tensor::zeros(&[b, c, h, w]);
        {
            let src = self.value(a).data();
            for (plane, out) in y.data_mut().chunks_mut(h * w).enumerate() {
                for r in 0..h {
                    let s = plane * ih * iw + (y0 + r) * iw + x0;
                    out[r * w..(r + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        self.push(
            y,
            vec![a.0],
            Box::new(move |dy, _, _| {
                let mut g = Tensor::zeros(&[b, c, ih, iw]);
                for (plane, src) in dy.data().chunks(h * w).enumerate() {
                    for r in 0..h {
                        let d = plane * ih * iw + (y0 + r) * iw + x0;
                        g.data_mut()[d..d + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Places `rows × cols` equally shaped tiles (row-major) into one map.
    pub fn tile(&mut self, tiles: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(tiles.len(), rows * cols, "tile count");
        let (b, c, th, tw) = self.value(tiles[0]).dims4();
        let (h, w) = (th * rows, tw * cols);
        let mut y = Tensor::zeros(&[b, c, h, w]);
        for (m, &t) in tiles.iter().enumerate() {
            assert_eq!(self.shape(t), &[b, c, th, tw], "tile shape mismatch");
            let (ty, tx) = ((m / cols) * th, (m % cols) * tw);
            let src = self.nodes[t.0].value.data();
            let dst = y.data_mut();
            for plane in 0..b * c {
                for r in 0..th {
                    let s = plane * th * tw + r * tw;
                    let d = plane * h * w + (ty + r) * w + tx;
                    dst[d..d + tw].copy_from_slice(&src[s..s + tw]);
                }
            }
        }
        self.push(
            y,
            tiles.iter().map(|t| t.0).collect(),
            Box::new(move |dy, _, _| {
                (0..rows * cols)
                    .map(|m| {
                        let (ty, tx) = ((m / cols) * th, (m % cols) * tw);
                        let mut g = Tensor::zeros(&[b, c, th, tw]);
                        for plane in 0..b * c {
                            for r in 0..th {
                                let s = plane * h * w + (ty + r) * w + tx;
                                let d = plane * th * tw + r * tw;
                                g.data_mut()[d..d + tw].copy_from_slice(&dy.data()[s..s + tw]);
                            }
                        }
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    // ---------------------------------------------------------------- layers

    /// `x (..., Cin) · w (Cin, Cout) + bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let cin = *xs.last().expect("linear on scalar");
        let (wi, cout) = (self.shape(w)[0], self.shape(w)[1]);
        assert_eq!(cin, wi, "linear input width {cin} vs weight {wi}");
        let rows = self.value(x).numel() / cin;
        let mut out = vec![0.0; rows * cout];
        crate::tensor::gemm(rows, cin, cout, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = cout;
        let y = Tensor::new(&oshape, out);
        let mut parents = vec![x.0, w.0];
        if let Some(bv) = bias {
            parents.push(bv.0);
        }
        let has_bias = bias.is_some();
        self.push(
            y,
            parents,
            Box::new(move |dy, p, _| {
                let mut dx = vec![0.0; rows * cin];
                crate::tensor::gemm(rows, cout, cin, dy.data(), false, p[1].data(), true, &mut dx, false);
                let mut dw = vec![0.0; cin * cout];
                crate::tensor::gemm(cin, rows, cout, p[0].data(), true, dy.data(), false, &mut dw, false);
                let mut g = vec![Some(Tensor::new(p[0].shape(), dx)), Some(Tensor::new(&[cin, cout], dw))];
                if has_bias {
                    let mut db = vec![0.0; cout];
                    for row in dy.data().chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    g.push(Some(Tensor::new(&[cout], db)));
                }
                g
            }),
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom { stride, pad };
        let y = kernels::conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), geom);
        let mut parents = vec![x.0, w.0];
        if let Some(b) = bias {
            parents.push(b.0);
        }
        let has_bias = bias.is_some();
        self.push(
            y,
            parents,
            Box::new(move |dy, p, _| {
                let (dx, dw, db) = kernels::conv2d_backward(p[0], p[1], dy, geom);
                let mut g = vec![Some(dx), Some(dw)];
                if has_bias {
                    g.push(Some(db));
                }
                g
            }),
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (y, cache) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(
            y,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |dy, p, _| {
                let (dx, dg, db) = kernels::layer_norm_backward(p[1], &cache, dy);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (y, cache) = kernels::batch_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(
            y,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |dy, p, _| {
                let (dx, dg, db) = kernels::batch_norm_backward(p[1], &cache, dy);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    /// Multi-head scaled dot-product attention without projections; see
    /// [`kernels::attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (y, cache) = kernels::attention(self.value(q), self.value(k), self.value(v), heads);
        self.push(
            y,
            vec![q.0, k.0, v.0],
            Box::new(move |dy, p, _| {
                let (dq, dk, dv) = kernels::attention_backward(p[0], p[1], p[2], heads, &cache, dy);
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }

    pub fn avg_pool(&mut self, x: Var, window: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let y = kernels::avg_pool(self.value(x), window);
        self.push(
            y,
            vec![x.0],
            Box::new(move |dy, _, _| vec![Some(kernels::avg_pool_backward(dy, window, h, w))]),
        )
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let y = kernels::resize_bilinear(self.value(x), out_h, out_w);
        self.push(
            y,
            vec![x.0],
            Box::new(move |dy, _, _| vec![Some(kernels::resize_bilinear_backward(dy, h, w))]),
        )
    }
}
