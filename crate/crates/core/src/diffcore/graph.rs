//! Tape-based reverse mode over the closed op set in [`super::ops`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every consumer before its producers.

use super::ops::{self, LayerNormCache};
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Softmax { x: Var },
    AttnScores { q: Var, k: Var, heads: usize, scale: f64 },
    AttnMix { p: Var, v: Var, heads: usize },
    Reshape { x: Var },
    Permute3 { x: Var, perm: [usize; 3] },
    ConcatRows { a: Var, b: Var },
    GatherRows { src: Var, idx: Vec<usize> },
    ReplaceRow { base: Var, row: Var, pos: usize },
    SelectLast { x: Var, index: usize },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    SumAll { x: Var },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient will be accumulated.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    /// `a + b`, with `b` broadcasting against `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add_broadcast(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(y, Op::Scale { x, c }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = ops::gelu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(y, Op::Gelu { x }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, cache }, ng))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax(self.value(x));
        let ng = self.ng(&[x]);
        self.push(y, Op::Softmax { x }, ng)
    }

    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let y = ops::attn_scores(self.value(q), self.value(k), heads, scale)?;
        let ng = self.ng(&[q, k]);
        Ok(self.push(y, Op::AttnScores { q, k, heads, scale }, ng))
    }

    pub fn attn_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let y = ops::attn_mix(self.value(p), self.value(v), heads)?;
        let ng = self.ng(&[p, v]);
        Ok(self.push(y, Op::AttnMix { p, v, heads }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let y = ops::permute3(self.value(x), perm)?;
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::Permute3 { x, perm }, ng))
    }

    /// Stacks two `[n, d]` / `[m, d]` matrices into `[n + m, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape("concat_rows", shape_str(ta.shape()), shape_str(tb.shape())));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let y = Tensor::from_parts(vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1]], data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::ConcatRows { a, b }, ng))
    }

    /// Rows `idx` of a `[n, d]` matrix, in order.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", "rank 2", shape_str(t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows needs at least one index"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("row index {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let y = Tensor::from_parts(vec![idx.len(), d], data);
        let ng = self.ng(&[src]);
        Ok(self.push(y, Op::GatherRows { src, idx: idx.to_vec() }, ng))
    }

    /// Copy of `base: [n, d]` with row `pos` replaced by `row: [d]` or `[1, d]`.
    pub fn replace_row(&mut self, base: Var, row: Var, pos: usize) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(row));
        if tb.rank() != 2 || tr.len() != tb.shape()[1] || pos >= tb.shape()[0] {
            return Err(Error::shape(
                "replace_row",
                format!("row of width {} at position < {}", tb.last_dim(), tb.shape()[0]),
                format!("{} at {pos}", shape_str(tr.shape())),
            ));
        }
        let d = tb.shape()[1];
        let mut data = tb.data().to_vec();
        data[pos * d..(pos + 1) * d].copy_from_slice(tr.data());
        let y = Tensor::from_parts(tb.shape().to_vec(), data);
        let ng = self.ng(&[base, row]);
        Ok(self.push(y, Op::ReplaceRow { base, row, pos }, ng))
    }

    /// Selects `index` along the trailing axis, dropping that axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if index >= n || t.rank() < 2 {
            return Err(Error::invalid(format!("select_last index {index} for shape {:?}", t.shape())));
        }
        let data: Vec<f64> = t.data().chunks_exact(n).map(|r| r[index]).collect();
        let y = Tensor::from_parts(t.shape()[..t.rank() - 1].to_vec(), data);
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::SelectLast { x, index }, ng))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.rank() < 2 {
            return Err(Error::invalid(format!("mean_axis {axis} for shape {:?}", t.shape())));
        }
        let s = t.shape();
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &t.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / mid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s.to_vec();
        shape.remove(axis);
        let y = Tensor::from_parts(shape, out);
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::MeanAxis { x, axis }, ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(&[x]);
        self.push(y, Op::MeanAll { x }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(y, Op::SumAll { x }, ng)
    }

    /// Scalar `sum_i w_i * x_i` against a constant weight tensor of equal size.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.len() != weights.len() {
            return Err(Error::shape("weighted_sum", shape_str(t.shape()), shape_str(weights.shape())));
        }
        let s: f64 = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng))
    }

    /// Reverse sweep from a scalar node. Gradients exist only for nodes that
    /// depend on at least one trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss", shape_str(self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled_(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let want = (self.needs_grad(*x), self.needs_grad(*w), b.map_or(false, |b| self.needs_grad(b)));
                let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), g, want);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add { a, b } => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.needs_grad(*b) {
                    let db = ops::reduce_to_shape(g, self.value(*b).shape())?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul { a, b } => {
                if self.needs_grad(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, g.map(|v| v * c))?,
            Op::Gelu { x } => self.accumulate(grads, *x, ops::gelu_backward(self.value(*x), g))?,
            Op::LayerNorm { x, gain, bias, cache } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gain), g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gain, dg)?;
                self.accumulate(grads, *bias, db)?;
            }
            Op::Softmax { x } => self.accumulate(grads, *x, ops::softmax_backward(out, g))?,
            Op::AttnScores { q, k, heads, scale } => {
                let want = (self.needs_grad(*q), self.needs_grad(*k));
                let (dq, dk) = ops::attn_scores_backward(self.value(*q), self.value(*k), *heads, *scale, g, want);
                if let Some(dq) = dq {
                    self.accumulate(grads, *q, dq)?;
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk)?;
                }
            }
            Op::AttnMix { p, v, heads } => {
                let want = (self.needs_grad(*p), self.needs_grad(*v));
                let (dp, dv) = ops::attn_mix_backward(self.value(*p), self.value(*v), *heads, g, want);
                if let Some(dp) = dp {
                    self.accumulate(grads, *p, dp)?;
                }
                if let Some(dv) = dv {
                    self.accumulate(grads, *v, dv)?;
                }
            }
            Op::Reshape { x } => {
                let dx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Permute3 { x, perm } => {
                let dx = ops::permute3(g, ops::inverse_perm(*perm))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows { a, b } => {
                let ta = self.value(*a);
                let split = ta.len();
                let da = Tensor::from_parts(ta.shape().to_vec(), g.data()[..split].to_vec());
                let db = Tensor::from_parts(self.value(*b).shape().to_vec(), g.data()[split..].to_vec());
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::GatherRows { src, idx } => {
                let ts = self.value(*src);
                let d = ts.shape()[1];
                let mut ds = vec![0.0; ts.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &v) in ds[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *src, Tensor::from_parts(ts.shape().to_vec(), ds))?;
            }
            Op::ReplaceRow { base, row, pos } => {
                let d = out.shape()[1];
                let mut db = g.data().to_vec();
                db[pos * d..(pos + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                self.accumulate(grads, *base, Tensor::from_parts(out.shape().to_vec(), db))?;
                let dr = g.data()[pos * d..(pos + 1) * d].to_vec();
                self.accumulate(grads, *row, Tensor::from_parts(self.value(*row).shape().to_vec(), dr))?;
            }
            Op::SelectLast { x, index } => {
                let tx = self.value(*x);
                let n = tx.last_dim();
                let mut dx = vec![0.0; tx.len()];
                for (r, &v) in g.data().iter().enumerate() {
                    dx[r * n + index] = v;
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), dx))?;
            }
            Op::MeanAxis { x, axis } => {
                let s = self.value(*x).shape();
                let outer: usize = s[..*axis].iter().product();
                let mid = s[*axis];
                let inner: usize = s[axis + 1..].iter().product();
                let inv = 1.0 / mid as f64;
                let mut dx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        for (d, &v) in dx[(o * mid + m) * inner..(o * mid + m + 1) * inner].iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), dx))?;
            }
            Op::MeanAll { x } => {
                let tx = self.value(*x);
                let v = g.item() / tx.len() as f64;
                self.accumulate(grads, *x, Tensor::full(tx.shape(), v))?;
            }
            Op::SumAll { x } => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), g.item()))?;
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                let dx = weights.map(|w| w * s).reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}
