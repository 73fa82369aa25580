//! Attention block with convolutional Q/K/V projections over 3D patch tokens.
//!
//! A feature map `(B, C, H, W, D)` is cut into `N = HWD / P^3` cubic patches.
//! Each patch becomes one token of length `P^3 * C` (channel-major inside the
//! patch), tokens are split into `k` heads, and scaled dot-product attention
//! runs per head. There is no position embedding, so attention is equivariant
//! to any permutation of the tokens.
//!
//! The block adds the attention output back onto its input, layer-normalizes,
//! and emits a second map at half (stride-2 conv) or double (transposed conv)
//! resolution.

use ndarray::{Array1, Array3, Array4, Array5, ArrayView3, ArrayView4, ArrayView5};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv;
use crate::nn::gemm::{gemm, Mat};
use crate::nn::tape::{Grads, Tape, Var};
use crate::par;

pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_HEADS: usize = 4;

/// Which resolution the block's second output lives at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    /// Stride-2 3x3x3 convolution: half resolution.
    Down,
    /// Stride-2 2x2x2 transposed convolution: double resolution.
    Up,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams {
    pub w_q: Array5<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array5<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array5<f64>,
    pub b_v: Array1<f64>,
    pub patch_size: usize,
    pub num_heads: usize,
    pub path_mode: PathMode,
    /// `(C, C, 3, 3, 3)` for [`PathMode::Down`], `(C, C, 2, 2, 2)` for [`PathMode::Up`].
    pub path_weight: Array5<f64>,
    pub path_bias: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// He-normal init for a conv kernel with the given fan-in.
pub(crate) fn he_kernel<R: Rng>(shape: [usize; 5], fan_in: usize, rng: &mut R) -> Array5<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Array5::from_shape_simple_fn(shape, || normal.sample(rng))
}

impl TransformerBlockParams {
    pub fn init<R: Rng>(
        channels: usize,
        patch_size: usize,
        num_heads: usize,
        path_mode: PathMode,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(patch_size, channels, num_heads)?;
        let c = channels;
        let qkv = [c, c, 3, 3, 3];
        let fan = c * 27;
        // Q/K/V start small so the initial block is close to LN(x).
        let small = |rng: &mut R| he_kernel(qkv, fan, rng).mapv(|v| v * 0.1);
        let (w_q, w_k, w_v) = (small(rng), small(rng), small(rng));
        let path_weight = match path_mode {
            PathMode::Down => he_kernel([c, c, 3, 3, 3], fan, rng),
            PathMode::Up => he_kernel([c, c, 2, 2, 2], c * 8, rng),
        };
        Ok(Self {
            w_q,
            b_q: Array1::zeros(c),
            w_k,
            b_k: Array1::zeros(c),
            w_v,
            b_v: Array1::zeros(c),
            patch_size,
            num_heads,
            path_mode,
            path_weight,
            path_bias: Array1::zeros(c),
            ln1_gamma: Array1::ones(c),
            ln1_beta: Array1::zeros(c),
            ln2_gamma: Array1::ones(c),
            ln2_beta: Array1::zeros(c),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Embedding channels per head.
    pub fn head_dim(&self) -> usize {
        self.patch_size.pow(3) * self.channels() / self.num_heads
    }

    /// Tensors in a fixed order, matching [`BlockVars`].
    pub fn tensors(&self) -> Vec<ndarray::ArrayD<f64>> {
        vec![
            self.w_q.clone().into_dyn(),
            self.b_q.clone().into_dyn(),
            self.w_k.clone().into_dyn(),
            self.b_k.clone().into_dyn(),
            self.w_v.clone().into_dyn(),
            self.b_v.clone().into_dyn(),
            self.path_weight.clone().into_dyn(),
            self.path_bias.clone().into_dyn(),
            self.ln1_gamma.clone().into_dyn(),
            self.ln1_beta.clone().into_dyn(),
            self.ln2_gamma.clone().into_dyn(),
            self.ln2_beta.clone().into_dyn(),
        ]
    }
}

pub const BLOCK_TENSOR_NAMES: [&str; 12] = [
    "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "path_w", "path_b", "ln1_g", "ln1_b", "ln2_g",
    "ln2_b",
];

fn check_heads(patch: usize, channels: usize, heads: usize) -> Result<()> {
    let len = patch.pow(3) * channels;
    if patch == 0 || heads == 0 || len % heads != 0 {
        return Err(Error::IndivisibleChannels { len, heads });
    }
    Ok(())
}

fn check_patch(shape: &[usize], patch: usize) -> Result<()> {
    let spatial = &shape[2..];
    if patch == 0 || spatial.iter().any(|&s| s % patch != 0) {
        return Err(Error::IndivisibleShape {
            shape: spatial.to_vec(),
            divisor: patch,
        });
    }
    Ok(())
}

/// Largest patch size not exceeding `preferred` that divides every spatial dim.
pub fn effective_patch(spatial: [usize; 3], preferred: usize) -> usize {
    (1..=preferred.max(1))
        .rev()
        .find(|p| spatial.iter().all(|s| s % p == 0))
        .unwrap_or(1)
}

/// Q, K and V as 3x3x3 stride-1 convolutions of `x`.
pub fn project_qkv(
    x: ArrayView5<'_, f64>,
    params: &TransformerBlockParams,
) -> Result<(Array5<f64>, Array5<f64>, Array5<f64>)> {
    let q = conv::conv3d(x, params.w_q.view(), Some(params.b_q.view()), 1, 1)?;
    let k = conv::conv3d(x, params.w_k.view(), Some(params.b_k.view()), 1, 1)?;
    let v = conv::conv3d(x, params.w_v.view(), Some(params.b_v.view()), 1, 1)?;
    Ok((q, k, v))
}

/// `(B, C, H, W, D)` to `(B, N, P^3 * C)`; tokens in row-major patch order.
pub fn patchify(x: ArrayView5<'_, f64>, patch: usize) -> Result<Array3<f64>> {
    check_patch(x.shape(), patch)?;
    let (b, c, h, w, d) = x.dim();
    let p = patch;
    let (gh, gw, gd) = (h / p, w / p, d / p);
    let n = gh * gw * gd;
    let p3 = p * p * p;
    let len = p3 * c;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let nv = h * w * d;
    let mut out = vec![0.0; b * n * len];
    for bi in 0..b {
        for t in 0..n {
            let (pi, pj, pk) = (t / (gw * gd), (t / gd) % gw, t % gd);
            let dst = &mut out[(bi * n + t) * len..(bi * n + t + 1) * len];
            for ch in 0..c {
                let src = (bi * c + ch) * nv;
                for a in 0..p {
                    for bb in 0..p {
                        let row = ((pi * p + a) * w + pj * p + bb) * d + pk * p;
                        let o = ch * p3 + (a * p + bb) * p;
                        dst[o..o + p].copy_from_slice(&xs[src + row..src + row + p]);
                    }
                }
            }
        }
    }
    Ok(Array3::from_shape_vec((b, n, len), out).expect("shape matches buffer"))
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: ArrayView3<'_, f64>, spatial: [usize; 3], patch: usize) -> Result<Array5<f64>> {
    let [h, w, d] = spatial;
    check_patch(&[0, 0, h, w, d], patch)?;
    let p = patch;
    let (gh, gw, gd) = (h / p, w / p, d / p);
    let (b, n, len) = seq.dim();
    let p3 = p * p * p;
    if n != gh * gw * gd || len % p3 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "sequence {:?} does not tile {spatial:?} with patch {p}",
            seq.shape()
        )));
    }
    let c = len / p3;
    let seq = seq.as_standard_layout();
    let ss = seq.as_slice().expect("standard layout");
    let nv = h * w * d;
    let mut out = vec![0.0; b * c * nv];
    for bi in 0..b {
        for t in 0..n {
            let (pi, pj, pk) = (t / (gw * gd), (t / gd) % gw, t % gd);
            let src = &ss[(bi * n + t) * len..(bi * n + t + 1) * len];
            for ch in 0..c {
                let dst = (bi * c + ch) * nv;
                for a in 0..p {
                    for bb in 0..p {
                        let row = ((pi * p + a) * w + pj * p + bb) * d + pk * p;
                        let o = ch * p3 + (a * p + bb) * p;
                        out[dst + row..dst + row + p].copy_from_slice(&src[o..o + p]);
                    }
                }
            }
        }
    }
    Ok(Array5::from_shape_vec((b, c, h, w, d), out).expect("shape matches buffer"))
}

/// `(B, N, L)` to `(B, k, N, L/k)`.
pub fn split_heads(seq: ArrayView3<'_, f64>, heads: usize) -> Result<Array4<f64>> {
    let (b, n, len) = seq.dim();
    if heads == 0 || len % heads != 0 {
        return Err(Error::IndivisibleChannels { len, heads });
    }
    let dk = len / heads;
    Ok(
        Array4::from_shape_fn((b, heads, n, dk), |(bi, h, t, e)| {
            seq[[bi, t, h * dk + e]]
        }),
    )
}

/// `(B, N, L)` to `(B, k, L/k, N)`: the key layout used in `Q K^T`.
pub fn split_heads_transposed(seq: ArrayView3<'_, f64>, heads: usize) -> Result<Array4<f64>> {
    let s = split_heads(seq, heads)?;
    Ok(s.permuted_axes([0, 1, 3, 2]).as_standard_layout().into_owned())
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: ArrayView4<'_, f64>) -> Array3<f64> {
    let (b, k, n, dk) = x.dim();
    Array3::from_shape_fn((b, n, k * dk), |(bi, t, e)| x[[bi, e / dk, t, e % dk]])
}

/// Numerically stable in-place row softmax of an `n x n` block.
fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

fn head_block(s: &[f64], off: usize, n: usize, dk: usize, len: usize) -> Mat<'_> {
    Mat {
        data: &s[off..],
        rows: n,
        cols: dk,
        row_stride: len,
        col_stride: 1,
    }
}

/// Attention over token matrices `(B, N, L)`, heads taken as column blocks.
/// Returns the output sequence and the attention weights `(B*k) x N x N`.
pub(crate) fn attention_tokens(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    n: usize,
    len: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dk = len / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let per = par::map_range(batch * heads, |bh| {
        let (bi, h) = (bh / heads, bh % heads);
        let off = bi * n * len + h * dk;
        let block = |s| head_block(s, off, n, dk, len);
        let mut probs = vec![0.0; n * n];
        gemm(scale, block(q), block(k).t(), 0.0, &mut probs);
        softmax_rows(&mut probs, n);
        let mut y = vec![0.0; n * dk];
        gemm(1.0, Mat::row_major(&probs, n, n), block(v), 0.0, &mut y);
        (y, probs)
    });
    let mut out = vec![0.0; batch * n * len];
    let mut probs = Vec::with_capacity(batch * heads * n * n);
    for (bh, (y, p)) in per.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for t in 0..n {
            let dst = bi * n * len + t * len + h * dk;
            out[dst..dst + dk].copy_from_slice(&y[t * dk..(t + 1) * dk]);
        }
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

/// Backward of [`attention_tokens`]: returns `(dq, dk, dv)` in token layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_tokens_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dy: &[f64],
    batch: usize,
    n: usize,
    len: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dk = len / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let per = par::map_range(batch * heads, |bh| {
        let bi = bh / heads;
        let h = bh % heads;
        let off = bi * n * len + h * dk;
        let block = |s| head_block(s, off, n, dk, len);
        let a = &probs[bh * n * n..(bh + 1) * n * n];
        let amat = Mat::row_major(a, n, n);
        let mut dv = vec![0.0; n * dk];
        gemm(1.0, amat.t(), block(dy), 0.0, &mut dv);
        let mut ds = vec![0.0; n * n];
        gemm(1.0, block(dy), block(v).t(), 0.0, &mut ds);
        for r in 0..n {
            let row = &mut ds[r * n..(r + 1) * n];
            let arow = &a[r * n..(r + 1) * n];
            let dot: f64 = row.iter().zip(arow).map(|(g, p)| g * p).sum();
            for (g, p) in row.iter_mut().zip(arow) {
                *g = p * (*g - dot);
            }
        }
        let mut dq = vec![0.0; n * dk];
        gemm(scale, Mat::row_major(&ds, n, n), block(k), 0.0, &mut dq);
        let mut dkk = vec![0.0; n * dk];
        gemm(scale, Mat::row_major(&ds, n, n).t(), block(q), 0.0, &mut dkk);
        (dq, dkk, dv)
    });
    let mut dq = vec![0.0; batch * n * len];
    let mut dkey = vec![0.0; batch * n * len];
    let mut dv = vec![0.0; batch * n * len];
    for (bh, (pq, pk, pv)) in per.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for t in 0..n {
            let dst = bi * n * len + t * len + h * dk;
            dq[dst..dst + dk].copy_from_slice(&pq[t * dk..(t + 1) * dk]);
            dkey[dst..dst + dk].copy_from_slice(&pk[t * dk..(t + 1) * dk]);
            dv[dst..dst + dk].copy_from_slice(&pv[t * dk..(t + 1) * dk]);
        }
    }
    (dq, dkey, dv)
}

fn check_head_tensors(q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
    if q != k || q != v {
        return Err(Error::ShapeMismatch(format!(
            "attention inputs Q {q:?}, K {k:?}, V {v:?}"
        )));
    }
    Ok(())
}

/// Softmax attention weights `(B, k, N, N)` for head tensors `(B, k, N, d_k)`.
pub fn attention_weights(q: ArrayView4<'_, f64>, k: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    check_head_tensors(q.shape(), k.shape(), k.shape())?;
    let (b, h, n, dk) = q.dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let q = q.as_standard_layout();
    let k = k.as_standard_layout();
    let (qs, ks) = (q.as_slice().unwrap(), k.as_slice().unwrap());
    let mut out = vec![0.0; b * h * n * n];
    for bh in 0..b * h {
        let s = &mut out[bh * n * n..(bh + 1) * n * n];
        gemm(
            scale,
            Mat::row_major(&qs[bh * n * dk..], n, dk),
            Mat::row_major(&ks[bh * n * dk..], n, dk).t(),
            0.0,
            s,
        );
        softmax_rows(s, n);
    }
    Ok(Array4::from_shape_vec((b, h, n, n), out).expect("shape matches buffer"))
}

/// `softmax(Q K^T / sqrt(d_k)) V` per batch and head; softmax over keys.
pub fn scaled_dot_attention(
    q: ArrayView4<'_, f64>,
    k: ArrayView4<'_, f64>,
    v: ArrayView4<'_, f64>,
) -> Result<Array4<f64>> {
    check_head_tensors(q.shape(), k.shape(), v.shape())?;
    let (b, h, n, dk) = q.dim();
    let probs = attention_weights(q, k)?;
    let v = v.as_standard_layout();
    let vs = v.as_slice().unwrap();
    let ps = probs.as_slice().unwrap();
    let mut out = vec![0.0; b * h * n * dk];
    for bh in 0..b * h {
        gemm(
            1.0,
            Mat::row_major(&ps[bh * n * n..], n, n),
            Mat::row_major(&vs[bh * n * dk..], n, dk),
            0.0,
            &mut out[bh * n * dk..(bh + 1) * n * dk],
        );
    }
    Ok(Array4::from_shape_vec((b, h, n, dk), out).expect("shape matches buffer"))
}

/// Gradients of `sum(dy * scaled_dot_attention(q, k, v))`.
pub fn scaled_dot_attention_backward(
    q: ArrayView4<'_, f64>,
    k: ArrayView4<'_, f64>,
    v: ArrayView4<'_, f64>,
    dy: ArrayView4<'_, f64>,
) -> Result<(Array4<f64>, Array4<f64>, Array4<f64>)> {
    check_head_tensors(q.shape(), k.shape(), v.shape())?;
    check_head_tensors(q.shape(), dy.shape(), dy.shape())?;
    let (b, h, n, dk) = q.dim();
    // Head tensors are batches of single-head token matrices.
    let tok = |a: ArrayView4<'_, f64>| a.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let (qs, ks, vs, gs) = (tok(q), tok(k), tok(v), tok(dy));
    let (_, probs) = attention_tokens(&qs, &ks, &vs, b * h, n, dk, 1);
    let (dq, dkey, dv) = attention_tokens_backward(&qs, &ks, &vs, &probs, &gs, b * h, n, dk, 1);
    let shape = (b, h, n, dk);
    Ok((
        Array4::from_shape_vec(shape, dq).expect("shape matches buffer"),
        Array4::from_shape_vec(shape, dkey).expect("shape matches buffer"),
        Array4::from_shape_vec(shape, dv).expect("shape matches buffer"),
    ))
}

/// Tape handles for one block's parameters, in [`BLOCK_TENSOR_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub path_w: Var,
    pub path_b: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

impl BlockVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            w_q: v[0],
            b_q: v[1],
            w_k: v[2],
            b_k: v[3],
            w_v: v[4],
            b_v: v[5],
            path_w: v[6],
            path_b: v[7],
            ln1_g: v[8],
            ln1_b: v[9],
            ln2_g: v[10],
            ln2_b: v[11],
        }
    }

    pub fn to_vec(self) -> Vec<Var> {
        vec![
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.path_w,
            self.path_b, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
        ]
    }
}

/// Records one block on the tape; returns `(y_same, y_cross)`.
pub fn block_on_tape(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    patch: usize,
    heads: usize,
    mode: PathMode,
) -> Result<(Var, Var)> {
    let q = tape.conv3d(x, vars.w_q, Some(vars.b_q), 1, 1)?;
    let k = tape.conv3d(x, vars.w_k, Some(vars.b_k), 1, 1)?;
    let v = tape.conv3d(x, vars.w_v, Some(vars.b_v), 1, 1)?;
    let att = tape.attention(q, k, v, patch, heads)?;
    let res = tape.add(x, att)?;
    let same = tape.layer_norm(res, vars.ln1_g, vars.ln1_b)?;
    let cross = match mode {
        PathMode::Down => tape.conv3d(same, vars.path_w, Some(vars.path_b), 2, 1)?,
        PathMode::Up => tape.conv_transpose3d(same, vars.path_w, Some(vars.path_b))?,
    };
    let cross = tape.layer_norm(cross, vars.ln2_g, vars.ln2_b)?;
    Ok((same, cross))
}

fn block_tape(
    x: ArrayView5<'_, f64>,
    params: &TransformerBlockParams,
) -> Result<(Tape, Var, BlockVars, Var, Var)> {
    check_heads(params.patch_size, params.channels(), params.num_heads)?;
    let mut tape = Tape::new();
    let xv = tape.param(x.to_owned().into_dyn());
    let vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| tape.param(t))
        .collect();
    let vars = BlockVars::from_slice(&vars);
    let (same, cross) = block_on_tape(
        &mut tape,
        xv,
        &vars,
        params.patch_size,
        params.num_heads,
        params.path_mode,
    )?;
    Ok((tape, xv, vars, same, cross))
}

/// Runs the block: `y_same = LN(x + attention)` at the input resolution and
/// `y_cross = LN(path(y_same))` at half or double resolution.
pub fn transformer_block_forward(
    x: ArrayView5<'_, f64>,
    params: &TransformerBlockParams,
) -> Result<(Array5<f64>, Array5<f64>)> {
    let (tape, _, _, same, cross) = block_tape(x, params)?;
    Ok((tape.value5(same), tape.value5(cross)))
}

/// Gradients of `sum(g_same * y_same) + sum(g_cross * y_cross)`.
pub struct BlockGradients {
    pub dx: Array5<f64>,
    /// In [`BLOCK_TENSOR_NAMES`] order.
    pub params: Vec<ndarray::ArrayD<f64>>,
}

pub fn transformer_block_backward(
    x: ArrayView5<'_, f64>,
    params: &TransformerBlockParams,
    g_same: ArrayView5<'_, f64>,
    g_cross: ArrayView5<'_, f64>,
) -> Result<BlockGradients> {
    let (mut tape, xv, vars, same, cross) = block_tape(x, params)?;
    // One scalar root: <g_same, same> + <g_cross, cross>.
    let root = tape.weighted_sum(&[(same, g_same.to_owned().into_dyn()), (cross, g_cross.to_owned().into_dyn())])?;
    let grads: Grads = tape.backward(root)?;
    let take = |v: Var| grads.get_or_zeros(&tape, v);
    Ok(BlockGradients {
        dx: take(xv)
            .into_dimensionality()
            .expect("input is 5D"),
        params: vars.to_vec().into_iter().map(take).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr<D: ndarray::Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
        shape: Sh,
        seed: u64,
    ) -> ndarray::Array<f64, D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ndarray::Array::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn identity_kernel(c: usize) -> Array5<f64> {
        let mut w = Array5::zeros((c, c, 3, 3, 3));
        for i in 0..c {
            w[[i, i, 1, 1, 1]] = 1.0;
        }
        w
    }

    fn block(c: usize, p: usize, k: usize, mode: PathMode, seed: u64) -> TransformerBlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TransformerBlockParams::init(c, p, k, mode, &mut rng).unwrap()
    }

    /// Direct 7-loop convolution with zero padding.
    fn naive_conv(x: &Array5<f64>, w: &Array5<f64>, b: &Array1<f64>) -> Array5<f64> {
        let (bn, cin, h, wd, d) = x.dim();
        let cout = w.shape()[0];
        Array5::from_shape_fn((bn, cout, h, wd, d), |(n, co, i, j, z)| {
            let mut acc = b[co];
            for ci in 0..cin {
                for a in 0..3 {
                    for bb in 0..3 {
                        for c in 0..3 {
                            let (ii, jj, zz) = (i + a, j + bb, z + c);
                            if ii < 1 || jj < 1 || zz < 1 || ii > h || jj > wd || zz > d {
                                continue;
                            }
                            acc += w[[co, ci, a, bb, c]] * x[[n, ci, ii - 1, jj - 1, zz - 1]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_projection() {
        let mut p = block(2, 2, 2, PathMode::Down, 1);
        p.w_q = identity_kernel(2);
        let x: Array5<f64> = rand_arr((1, 2, 4, 4, 4), 2);
        let (q, _, _) = project_qkv(x.view(), &p).unwrap();
        assert_eq!(q, x);
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let p = block(2, 2, 2, PathMode::Down, 3);
        let x = Array5::zeros((1, 2, 4, 4, 4));
        let (q, k, v) = project_qkv(x.view(), &p).unwrap();
        assert!(q.iter().chain(k.iter()).chain(v.iter()).all(|&e| e == 0.0));
    }

    #[test]
    fn projection_matches_naive_convolution() {
        let mut p = block(2, 2, 2, PathMode::Down, 4);
        p.b_k = rand_arr(2, 9);
        let x: Array5<f64> = rand_arr((1, 2, 4, 4, 4), 5);
        let (q, k, v) = project_qkv(x.view(), &p).unwrap();
        for (got, w, b) in [(q, &p.w_q, &p.b_q), (k, &p.w_k, &p.b_k), (v, &p.w_v, &p.b_v)] {
            let want = naive_conv(&x, w, b);
            let err = (&got - &want).iter().fold(0.0f64, |m, e| m.max(e.abs()));
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn patchify_shapes() {
        let x: Array5<f64> = rand_arr((1, 3, 2, 2, 4), 6);
        let s = patchify(x.view(), 1).unwrap();
        assert_eq!(s.shape(), &[1, 16, 3]);
        assert_eq!(s[[0, 5, 2]], x[[0, 2, 0, 1, 1]]);

        let x: Array5<f64> = rand_arr((1, 1, 4, 4, 4), 7);
        assert_eq!(patchify(x.view(), 4).unwrap().shape(), &[1, 1, 64]);

        let x: Array5<f64> = rand_arr((1, 2, 8, 8, 8), 8);
        let s = patchify(x.view(), 4).unwrap();
        assert_eq!(s.shape(), &[1, 8, 128]);
        assert_eq!(unpatchify(s.view(), [8, 8, 8], 4).unwrap(), x);
        assert!(matches!(
            patchify(rand_arr((1, 1, 6, 8, 8), 1).view(), 4),
            Err(Error::IndivisibleShape { .. })
        ));
    }

    #[test]
    fn patch_ordering_is_row_major_channel_major() {
        let x = Array5::from_shape_fn((1, 2, 4, 4, 4), |(_, c, i, j, k)| (c * 1000 + i * 100 + j * 10 + k) as f64);
        let s = patchify(x.view(), 2).unwrap();
        // token 1 = patch (0, 0, 1); element c*8 + (a*2+b)*2 + cc
        assert_eq!(s[[0, 1, 0]], x[[0, 0, 0, 0, 2]]);
        assert_eq!(s[[0, 1, 8 + 3]], x[[0, 1, 0, 1, 3]]);
        // token 2 = patch (0, 1, 0)
        assert_eq!(s[[0, 2, 0]], x[[0, 0, 0, 2, 0]]);
    }

    #[test]
    fn head_split_contract() {
        let s: Array3<f64> = rand_arr((2, 5, 128), 10);
        let h1 = split_heads(s.view(), 1).unwrap();
        assert_eq!(h1.shape(), &[2, 1, 5, 128]);
        let h4 = split_heads(s.view(), 4).unwrap();
        assert_eq!(h4.shape(), &[2, 4, 5, 32]);
        assert_eq!(merge_heads(h4.view()), s);
        assert!(matches!(
            split_heads(s.view(), 3),
            Err(Error::IndivisibleChannels { len: 128, heads: 3 })
        ));
        let kt = split_heads_transposed(s.view(), 4).unwrap();
        assert_eq!(kt.shape(), &[2, 4, 32, 5]);
        assert_eq!(kt[[1, 2, 7, 3]], h4[[1, 2, 3, 7]]);
    }

    #[test]
    fn single_token_returns_values() {
        let q: Array4<f64> = rand_arr((1, 2, 1, 4), 11);
        let k: Array4<f64> = rand_arr((1, 2, 1, 4), 12);
        let v: Array4<f64> = rand_arr((1, 2, 1, 4), 13);
        assert_eq!(scaled_dot_attention(q.view(), k.view(), v.view()).unwrap(), v);
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Array4::zeros((1, 1, 3, 2));
        let k: Array4<f64> = rand_arr((1, 1, 3, 2), 14);
        let v: Array4<f64> = rand_arr((1, 1, 3, 2), 15);
        let y = scaled_dot_attention(q.view(), k.view(), v.view()).unwrap();
        for t in 0..3 {
            for e in 0..2 {
                let mean = (0..3).map(|s| v[[0, 0, s, e]]).sum::<f64>() / 3.0;
                assert!((y[[0, 0, t, e]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_nested_loop_attention() {
        let q: Array4<f64> = rand_arr((1, 2, 3, 4), 16);
        let k: Array4<f64> = rand_arr((1, 2, 3, 4), 17);
        let v: Array4<f64> = rand_arr((1, 2, 3, 4), 18);
        let y = scaled_dot_attention(q.view(), k.view(), v.view()).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..3)
                    .map(|j| (0..4).map(|e| q[[0, h, i, e]] * k[[0, h, j, e]]).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for e in 0..4 {
                    let want: f64 = (0..3).map(|j| scores[j].exp() / z * v[[0, h, j, e]]).sum();
                    assert!((y[[0, h, i, e]] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn block_shape_contract() {
        let p = block(4, 4, 4, PathMode::Down, 19);
        let x: Array5<f64> = rand_arr((1, 4, 8, 8, 8), 20);
        let (same, cross) = transformer_block_forward(x.view(), &p).unwrap();
        assert_eq!(same.shape(), &[1, 4, 8, 8, 8]);
        assert_eq!(cross.shape(), &[1, 4, 4, 4, 4]);

        let p = block(4, 4, 4, PathMode::Up, 21);
        let x: Array5<f64> = rand_arr((1, 4, 4, 4, 4), 22);
        let (same, cross) = transformer_block_forward(x.view(), &p).unwrap();
        assert_eq!(same.shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(cross.shape(), &[1, 4, 8, 8, 8]);
    }

    #[test]
    fn effective_patch_divides() {
        assert_eq!(effective_patch([32, 32, 32], 4), 4);
        assert_eq!(effective_patch([6, 4, 2], 4), 2);
        assert_eq!(effective_patch([3, 5, 7], 4), 1);
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let q: Array4<f64> = rand_arr((1, 2, 3, 4), 23);
        let k: Array4<f64> = rand_arr((1, 2, 3, 4), 24);
        let v: Array4<f64> = rand_arr((1, 2, 3, 4), 25);
        let dy: Array4<f64> = rand_arr((1, 2, 3, 4), 26);
        let (dq, dk, dv) = scaled_dot_attention_backward(q.view(), k.view(), v.view(), dy.view()).unwrap();
        let f = |q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>| {
            (&scaled_dot_attention(q.view(), k.view(), v.view()).unwrap() * &dy).sum()
        };
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 1, 1, 0)] {
            let bump = |a: &Array4<f64>, s: f64| {
                let mut b = a.clone();
                b[idx] += s;
                b
            };
            let fq = (f(&bump(&q, h), &k, &v) - f(&bump(&q, -h), &k, &v)) / (2.0 * h);
            let fk = (f(&q, &bump(&k, h), &v) - f(&q, &bump(&k, -h), &v)) / (2.0 * h);
            let fv = (f(&q, &k, &bump(&v, h)) - f(&q, &k, &bump(&v, -h))) / (2.0 * h);
            assert!((fq - dq[idx]).abs() < 1e-7);
            assert!((fk - dk[idx]).abs() < 1e-7);
            assert!((fv - dv[idx]).abs() < 1e-7);
        }
    }
}
