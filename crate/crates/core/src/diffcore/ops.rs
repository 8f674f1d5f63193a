//! Forward kernels and their hand-derived backward rules.
//!
//! Every function here is pure. The tape in [`super::graph`] records which
//! kernel produced each node and calls the matching `*_backward` rule.

use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

/// GELU tanh-approximation constant `sqrt(2 / pi)`.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// GELU tanh-approximation cubic coefficient.
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// `c = alpha * a[m,k] * b[k,n] + beta * c[m,n]` over strided views.
///
/// Single-threaded and therefore bitwise reproducible for identical inputs.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.data.len() >= span(m, k, a.rs, a.cs), "gemm: lhs out of bounds");
    assert!(b.data.len() >= span(k, n, b.rs, b.cs), "gemm: rhs out of bounds");
    assert!(c.data.len() >= span(m, n, c.rs, c.cs), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y[..., j] = sum_i w[j, i] * x[..., i] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 || x.last_dim() != w.shape()[1] {
        return Err(Error::shape(
            "linear",
            format!("x[..., {}] for weight {}", w.shape().get(1).copied().unwrap_or(0), shape_str(w.shape())),
            shape_str(x.shape()),
        ));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [d_out] {
            return Err(Error::shape("linear bias", format!("[{d_out}]"), shape_str(b.shape())));
        }
    }
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    gemm(
        rows,
        d_in,
        d_out,
        1.0,
        View::new(x.data(), d_in, 1),
        View::new(w.data(), 1, d_in),
        0.0,
        ViewMut::new(&mut out, d_out, 1),
    );
    if let Some(b) = b {
        for row in out.chunks_exact_mut(d_out) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`linear`]; each output is computed only when requested.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / d_in;
    let dx = want.0.then(|| {
        let mut dx = vec![0.0; rows * d_in];
        gemm(
            rows,
            d_out,
            d_in,
            1.0,
            View::new(dy.data(), d_out, 1),
            View::new(w.data(), d_in, 1),
            0.0,
            ViewMut::new(&mut dx, d_in, 1),
        );
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    let dw = want.1.then(|| {
        let mut dw = vec![0.0; d_out * d_in];
        gemm(
            d_out,
            rows,
            d_in,
            1.0,
            View::new(dy.data(), 1, d_out),
            View::new(x.data(), d_in, 1),
            0.0,
            ViewMut::new(&mut dw, d_in, 1),
        );
        Tensor::from_parts(vec![d_out, d_in], dw)
    });
    let db = want.2.then(|| {
        let mut db = vec![0.0; d_out];
        for row in dy.data().chunks_exact(d_out) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        Tensor::from_parts(vec![d_out], db)
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

/// Softmax over the trailing axis, computed with max subtraction.
pub fn softmax(v: &Tensor) -> Tensor {
    let n = v.last_dim();
    let mut out = v.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Tensor::from_parts(v.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Given softmax output `y` and upstream `dy`, returns the input gradient.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(n)
        .zip(dy.data().chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yi), &gi) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yi * (gi - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let u = GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
        0.5 * v * (1.0 + u.tanh())
    })
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = GELU_SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
            let t = u.tanh();
            let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

/// Cached statistics from the forward pass of [`layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_cache(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias [{d}]"),
            format!("{} / {}", shape_str(gain.shape()), shape_str(bias.shape())),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for i in 0..d {
            let h = (xs[i] - mean) * inv;
            xhat[r * d + i] = h;
            out[r * d + i] = gain.data()[i] * h + bias.data()[i];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = gain.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let g = &dy.data()[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dg[i] += g[i] * xh[i];
            db[i] += g[i];
            dxhat[i] = g[i] * gain.data()[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let inv = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = inv * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dg),
        Tensor::from_parts(vec![d], db),
    )
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

/// Single-head scaled dot-product attention.
///
/// Returns `(out, weights)` where `weights = softmax(q k^T / sqrt(d))`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0] {
        return Err(Error::shape(
            "attention",
            "q[q,d], k[k,d], v[k,dv]",
            format!("{} {} {}", shape_str(q.shape()), shape_str(k.shape()), shape_str(v.shape())),
        ));
    }
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let q3 = q.reshape(&[1, nq, d])?;
    let k3 = k.reshape(&[1, nk, d])?;
    let v3 = v.reshape(&[1, nk, v.shape()[1]])?;
    let scores = attn_scores(&q3, &k3, 1, scale)?;
    let weights = softmax(&scores);
    let out = attn_mix(&weights, &v3, 1)?;
    Ok((out.reshape(&[nq, v.shape()[1]])?, weights.reshape(&[nq, nk])?))
}

fn check_heads(op: &'static str, width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape(op, format!("width divisible by {heads} heads"), format!("width {width}")));
    }
    Ok(width / heads)
}

/// Multi-head attention logits.
///
/// `q: [G, nq, H*dh]`, `k: [G, nk, H*dh]` → `[G, H, nq, nk]` scaled by `scale`.
pub fn attn_scores(q: &Tensor, k: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    if q.rank() != 3 || k.rank() != 3 || q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2] {
        return Err(Error::shape(
            "attn_scores",
            format!("k matching q {}", shape_str(q.shape())),
            shape_str(k.shape()),
        ));
    }
    let (g, nq, width) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    let dh = check_heads("attn_scores", width, heads)?;
    let mut out = vec![0.0; g * heads * nq * nk];
    for gi in 0..g {
        for h in 0..heads {
            let qo = gi * nq * width + h * dh;
            let ko = gi * nk * width + h * dh;
            let oo = (gi * heads + h) * nq * nk;
            gemm(
                nq,
                dh,
                nk,
                scale,
                View::new(&q.data()[qo..], width, 1),
                View::new(&k.data()[ko..], 1, width),
                0.0,
                ViewMut::new(&mut out[oo..], nk, 1),
            );
        }
    }
    Ok(Tensor::from_parts(vec![g, heads, nq, nk], out))
}

/// Returns `(dq, dk)` for [`attn_scores`].
pub fn attn_scores_backward(q: &Tensor, k: &Tensor, heads: usize, scale: f64, ds: &Tensor, want: (bool, bool)) -> (Option<Tensor>, Option<Tensor>) {
    let (g, nq, width) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nk = k.shape()[1];
    let dh = width / heads;
    let dq = want.0.then(|| {
        let mut dq = vec![0.0; q.len()];
        for gi in 0..g {
            for h in 0..heads {
                let so = (gi * heads + h) * nq * nk;
                let ko = gi * nk * width + h * dh;
                let qo = gi * nq * width + h * dh;
                gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    View::new(&ds.data()[so..], nk, 1),
                    View::new(&k.data()[ko..], width, 1),
                    0.0,
                    ViewMut::new(&mut dq[qo..], width, 1),
                );
            }
        }
        Tensor::from_parts(q.shape().to_vec(), dq)
    });
    let dk = want.1.then(|| {
        let mut dk = vec![0.0; k.len()];
        for gi in 0..g {
            for h in 0..heads {
                let so = (gi * heads + h) * nq * nk;
                let ko = gi * nk * width + h * dh;
                let qo = gi * nq * width + h * dh;
                gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    View::new(&ds.data()[so..], 1, nk),
                    View::new(&q.data()[qo..], width, 1),
                    0.0,
                    ViewMut::new(&mut dk[ko..], width, 1),
                );
            }
        }
        Tensor::from_parts(k.shape().to_vec(), dk)
    });
    (dq, dk)
}

/// Weighted value mix: `p: [G, H, nq, nk]`, `v: [G, nk, H*dv]` → `[G, nq, H*dv]`.
pub fn attn_mix(p: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    if p.rank() != 4 || v.rank() != 3 || p.shape()[0] != v.shape()[0] || p.shape()[1] != heads || p.shape()[3] != v.shape()[1] {
        return Err(Error::shape(
            "attn_mix",
            format!("v matching weights {}", shape_str(p.shape())),
            shape_str(v.shape()),
        ));
    }
    let (g, nq, nk) = (p.shape()[0], p.shape()[2], p.shape()[3]);
    let width = v.shape()[2];
    let dv = check_heads("attn_mix", width, heads)?;
    let mut out = vec![0.0; g * nq * width];
    for gi in 0..g {
        for h in 0..heads {
            let po = (gi * heads + h) * nq * nk;
            let vo = gi * nk * width + h * dv;
            let oo = gi * nq * width + h * dv;
            gemm(
                nq,
                nk,
                dv,
                1.0,
                View::new(&p.data()[po..], nk, 1),
                View::new(&v.data()[vo..], width, 1),
                0.0,
                ViewMut::new(&mut out[oo..], width, 1),
            );
        }
    }
    Ok(Tensor::from_parts(vec![g, nq, width], out))
}

/// Returns `(dp, dv)` for [`attn_mix`].
pub fn attn_mix_backward(p: &Tensor, v: &Tensor, heads: usize, dout: &Tensor, want: (bool, bool)) -> (Option<Tensor>, Option<Tensor>) {
    let (g, nq, nk) = (p.shape()[0], p.shape()[2], p.shape()[3]);
    let width = v.shape()[2];
    let dv_w = width / heads;
    let dp = want.0.then(|| {
        let mut dp = vec![0.0; p.len()];
        for gi in 0..g {
            for h in 0..heads {
                let po = (gi * heads + h) * nq * nk;
                let vo = gi * nk * width + h * dv_w;
                let oo = gi * nq * width + h * dv_w;
                gemm(
                    nq,
                    dv_w,
                    nk,
                    1.0,
                    View::new(&dout.data()[oo..], width, 1),
                    View::new(&v.data()[vo..], 1, width),
                    0.0,
                    ViewMut::new(&mut dp[po..], nk, 1),
                );
            }
        }
        Tensor::from_parts(p.shape().to_vec(), dp)
    });
    let dv = want.1.then(|| {
        let mut dv = vec![0.0; v.len()];
        for gi in 0..g {
            for h in 0..heads {
                let po = (gi * heads + h) * nq * nk;
                let vo = gi * nk * width + h * dv_w;
                let oo = gi * nq * width + h * dv_w;
                gemm(
                    nk,
                    nq,
                    dv_w,
                    1.0,
                    View::new(&p.data()[po..], 1, nk),
                    View::new(&dout.data()[oo..], width, 1),
                    0.0,
                    ViewMut::new(&mut dv[vo..], width, 1),
                );
            }
        }
        Tensor::from_parts(v.shape().to_vec(), dv)
    });
    (dp, dv)
}

// ---------------------------------------------------------------------------
// broadcasting add and layout ops
// ---------------------------------------------------------------------------

/// Strides of `b` over the index space of `a` (0 on broadcast axes).
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return Err(Error::shape("broadcast", shape_str(a), shape_str(b)));
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for i in (0..b.len()).rev() {
        let (da, db) = (a[offset + i], b[i]);
        if db == da {
            strides[offset + i] = stride;
        } else if db != 1 {
            return Err(Error::shape("broadcast", shape_str(a), shape_str(b)));
        }
        stride *= db;
    }
    Ok(strides)
}

fn broadcast_index_map(a: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..a.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < a[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// `a + b` where `b` broadcasts against `a` (right-aligned, extents equal or 1).
pub fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x + y);
    }
    let tail = &a.shape()[a.rank().saturating_sub(b.rank())..];
    let mut out = a.data().to_vec();
    if tail == b.shape() {
        for chunk in out.chunks_exact_mut(b.len()) {
            for (o, &bv) in chunk.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    } else {
        let strides = broadcast_strides(a.shape(), b.shape())?;
        for (o, off) in out.iter_mut().zip(broadcast_index_map(a.shape(), &strides)) {
            *o += b.data()[off];
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Sums `g` (shaped like the broadcast output) down to `b_shape`.
pub fn reduce_to_shape(g: &Tensor, b_shape: &[usize]) -> Result<Tensor> {
    if g.shape() == b_shape {
        return Ok(g.clone());
    }
    let b_len: usize = b_shape.iter().product();
    let mut out = vec![0.0; b_len];
    let tail = &g.shape()[g.rank().saturating_sub(b_shape.len())..];
    if tail == b_shape {
        for chunk in g.data().chunks_exact(b_len) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    } else {
        let strides = broadcast_strides(g.shape(), b_shape)?;
        for (&v, off) in g.data().iter().zip(broadcast_index_map(g.shape(), &strides)) {
            out[off] += v;
        }
    }
    Ok(Tensor::from_parts(b_shape.to_vec(), out))
}

/// Permutes the axes of a rank-3 tensor: `out.shape[i] = x.shape[perm[i]]`.
pub fn permute3(x: &Tensor, perm: [usize; 3]) -> Result<Tensor> {
    let mut seen = [false; 3];
    for &p in &perm {
        if p > 2 || seen[p] {
            return Err(Error::invalid(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    if x.rank() != 3 {
        return Err(Error::shape("permute3", "rank 3", shape_str(x.shape())));
    }
    let s = x.shape();
    let in_strides = [s[1] * s[2], s[2], 1];
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
    let mut out = Vec::with_capacity(x.len());
    let data = x.data();
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * st[0] + j * st[1];
            for k in 0..out_shape[2] {
                out.push(data[base + k * st[2]]);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape.to_vec(), out))
}

pub(crate) fn inverse_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let x = t(&[2], &[1.0, 2.0]);
        let y = linear(&x, &Tensor::identity(2), None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2]);
        let w = t(&[2, 2], &[5.0, -3.0, 2.0, 7.0]);
        assert_eq!(linear(&x, &w, None).unwrap().data(), &[0.0, 0.0]);
        let b = t(&[2], &[0.5, -1.5]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[0.5, -1.5]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let err = linear(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 2]), None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0])).data(), &[0.5, 0.5]);
        assert_eq!(softmax(&t(&[2], &[1000.0, 1000.0])).data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1f64.ln(), 3f64.ln()]));
        assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn attention_single_key_and_orthogonal_queries() {
        let q = t(&[2, 2], &[1.0, 0.0, 0.3, -2.0]);
        let k = t(&[1, 2], &[0.5, 0.5]);
        let v = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let (out, w) = attention(&q, &k, &v).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let q = t(&[1, 2], &[1.0, 0.0]);
        let k = t(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 5.0]);
        let v = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let (_, w) = attention(&q, &k, &v).unwrap();
        for &p in w.data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_two_by_two_hand_logits() {
        // d = 1 so logits are q_i * k_j: q = [ln 3, 0], k = [1, 0].
        let q = t(&[2, 1], &[3f64.ln(), 0.0]);
        let k = t(&[2, 1], &[1.0, 0.0]);
        let v = t(&[2, 1], &[4.0, 8.0]);
        let (out, w) = attention(&q, &k, &v).unwrap();
        let expected = [0.75, 0.25, 0.5, 0.5];
        for (a, e) in w.data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(out.data()[0], 0.75 * 4.0 + 0.25 * 8.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.data()[1], 6.0, epsilon = 1e-14);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::full(&[3], 4.2), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::ones(&[2]);
        let b2 = Tensor::zeros(&[2]);
        let y = layer_norm(&t(&[2], &[-1.0, 1.0]), &g2, &b2, 1e-12).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-10);

        let bias = t(&[3], &[0.1, 0.2, 0.3]);
        let y = layer_norm(&t(&[2, 3], &[1.0, 5.0, -2.0, 0.0, 3.0, 9.0]), &Tensor::zeros(&[3]), &bias, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn broadcast_add_middle_axis() {
        let a = Tensor::zeros(&[2, 3, 2]);
        let b = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = add_broadcast(&a, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let r = reduce_to_shape(&y, &[2, 1, 2]).unwrap();
        assert_eq!(r.data(), &[3.0, 6.0, 9.0, 12.0]);
        assert!(add_broadcast(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_vec((0..24).map(f64::from).collect()).reshape(&[2, 3, 4]).unwrap();
        for perm in [[1, 0, 2], [0, 2, 1], [2, 0, 1]] {
            let y = permute3(&x, perm).unwrap();
            let back = permute3(&y, inverse_perm(perm)).unwrap();
            assert_eq!(back, x);
        }
        let y = permute3(&x, [1, 0, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4]);
        assert_eq!(y.data()[4], 12.0);
    }
}
