//! Elementwise and resampling layers with their backward passes.

use ndarray::{concatenate, Array1, Array5, ArrayView1, ArrayView5, Axis};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn relu(x: ArrayView5<'_, f64>) -> Array5<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of ReLU given its output.
pub fn relu_backward(y: ArrayView5<'_, f64>, dy: ArrayView5<'_, f64>) -> Array5<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(&y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

/// 2x2x2 max pooling with stride 2; also returns the flat argmax per output.
pub fn max_pool2(x: ArrayView5<'_, f64>) -> Result<(Array5<f64>, Vec<u32>)> {
    let (b, c, h, w, d) = x.dim();
    if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
        return Err(Error::IndivisibleShape {
            shape: vec![h, w, d],
            divisor: 2,
        });
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (ho, wo, dout) = (h / 2, w / 2, d / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo * dout);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w * d;
        for i in 0..ho {
            for j in 0..wo {
                for z in 0..dout {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for t in 0..8 {
                        let (a, bb, cc) = (t >> 2, (t >> 1) & 1, t & 1);
                        let idx = base + ((2 * i + a) * w + 2 * j + bb) * d + 2 * z + cc;
                        if xs[idx] > best {
                            best = xs[idx];
                            at = idx;
                        }
                    }
                    out.push(best);
                    arg.push(at as u32);
                }
            }
        }
    }
    Ok((
        Array5::from_shape_vec((b, c, ho, wo, dout), out).expect("shape matches buffer"),
        arg,
    ))
}

pub fn max_pool2_backward(
    input_shape: &[usize],
    argmax: &[u32],
    dy: ArrayView5<'_, f64>,
) -> Array5<f64> {
    let mut dx = vec![0.0; input_shape.iter().product()];
    for (g, &a) in dy.iter().zip(argmax) {
        dx[a as usize] += g;
    }
    Array5::from_shape_vec(
        (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
            input_shape[4],
        ),
        dx,
    )
    .expect("shape matches buffer")
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: ArrayView5<'_, f64>) -> Array5<f64> {
    let (b, c, h, w, d) = x.dim();
    Array5::from_shape_fn((b, c, 2 * h, 2 * w, 2 * d), |(n, ch, i, j, k)| {
        x[[n, ch, i / 2, j / 2, k / 2]]
    })
}

pub fn upsample2_backward(dy: ArrayView5<'_, f64>) -> Array5<f64> {
    let (b, c, h, w, d) = dy.dim();
    let mut dx = Array5::zeros((b, c, h / 2, w / 2, d / 2));
    for ((n, ch, i, j, k), &g) in dy.indexed_iter() {
        dx[[n, ch, i / 2, j / 2, k / 2]] += g;
    }
    dx
}

pub fn concat_channels(parts: &[ArrayView5<'_, f64>]) -> Result<Array5<f64>> {
    concatenate(Axis(1), parts)
        .map_err(|e| Error::ShapeMismatch(format!("channel concatenation: {e}")))
}

/// Splits a channel-concatenated gradient back into its parts.
pub fn concat_backward(dy: ArrayView5<'_, f64>, channels: &[usize]) -> Vec<Array5<f64>> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = dy.slice_axis(Axis(1), (start..start + c).into()).to_owned();
            start += c;
            part
        })
        .collect()
}

/// Layer norm over the channel axis at each `(batch, voxel)` location.
pub struct LayerNormOut {
    pub y: Array5<f64>,
    pub xhat: Array5<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_channels(
    x: ArrayView5<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> Result<LayerNormOut> {
    let (b, c, h, w, d) = x.dim();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "layer norm over {c} channels with {} / {} affine params",
            gamma.len(),
            beta.len()
        )));
    }
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let nv = h * w * d;
    let mut y = vec![0.0; xs.len()];
    let mut xhat = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; b * nv];
    for n in 0..b {
        let base = n * c * nv;
        for v in 0..nv {
            let mean = (0..c).map(|ch| xs[base + ch * nv + v]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (xs[base + ch * nv + v] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[n * nv + v] = is;
            for ch in 0..c {
                let at = base + ch * nv + v;
                let xh = (xs[at] - mean) * is;
                xhat[at] = xh;
                y[at] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let shape = (b, c, h, w, d);
    Ok(LayerNormOut {
        y: Array5::from_shape_vec(shape, y).expect("shape matches buffer"),
        xhat: Array5::from_shape_vec(shape, xhat).expect("shape matches buffer"),
        inv_std,
    })
}

pub struct LayerNormGrads {
    pub dx: Array5<f64>,
    pub dgamma: Array1<f64>,
    pub dbeta: Array1<f64>,
}

pub fn layer_norm_channels_backward(
    xhat: ArrayView5<'_, f64>,
    inv_std: &[f64],
    gamma: ArrayView1<'_, f64>,
    dy: ArrayView5<'_, f64>,
) -> LayerNormGrads {
    let (b, c, h, w, d) = xhat.dim();
    let nv = h * w * d;
    let xhat = xhat.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xh = xhat.as_slice().expect("standard layout");
    let g = dy.as_slice().expect("standard layout");
    let mut dx = vec![0.0; xh.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..b {
        let base = n * c * nv;
        for v in 0..nv {
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for ch in 0..c {
                let at = base + ch * nv + v;
                let dxh = g[at] * gamma[ch];
                mean_d += dxh;
                mean_dx += dxh * xh[at];
                dgamma[ch] += g[at] * xh[at];
                dbeta[ch] += g[at];
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            let is = inv_std[n * nv + v];
            for ch in 0..c {
                let at = base + ch * nv + v;
                let dxh = g[at] * gamma[ch];
                dx[at] = is * (dxh - mean_d - xh[at] * mean_dx);
            }
        }
    }
    LayerNormGrads {
        dx: Array5::from_shape_vec((b, c, h, w, d), dx).expect("shape matches buffer"),
        dgamma: Array1::from(dgamma),
        dbeta: Array1::from(dbeta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand5(shape: (usize, usize, usize, usize, usize), seed: u64) -> Array5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let x = rand5((1, 2, 4, 6, 2), 1);
        let (p, arg) = max_pool2(x.view()).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 3, 1]);
        assert_eq!(arg.len(), p.len());
        assert_eq!(upsample2(p.view()).shape(), x.shape());
        assert!(max_pool2(rand5((1, 1, 3, 2, 2), 2).view()).is_err());
    }

    #[test]
    fn pool_backward_routes_to_argmax() {
        let x = rand5((1, 1, 2, 2, 2), 3);
        let (p, arg) = max_pool2(x.view()).unwrap();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p[[0, 0, 0, 0, 0]], max);
        let dx = max_pool2_backward(x.shape(), &arg, Array5::ones((1, 1, 1, 1, 1)).view());
        assert_eq!(dx.sum(), 1.0);
        assert_eq!(dx.as_slice().unwrap()[arg[0] as usize], 1.0);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = rand5((2, 4, 2, 3, 2), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gamma = Array1::from_shape_fn(4, |_| rng.gen_range(0.5..1.5));
        let beta = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
        let dy = rand5(x.dim(), 6);
        let out = layer_norm_channels(x.view(), gamma.view(), beta.view()).unwrap();
        let g = layer_norm_channels_backward(out.xhat.view(), &out.inv_std, gamma.view(), dy.view());
        let f = |x: &Array5<f64>, gamma: &Array1<f64>| {
            (&layer_norm_channels(x.view(), gamma.view(), beta.view()).unwrap().y * &dy).sum()
        };
        let h = 1e-6;
        for idx in [(0, 0, 0, 0, 0), (1, 3, 1, 2, 1), (0, 2, 1, 0, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp, &gamma) - f(&xm, &gamma)) / (2.0 * h);
            assert!((fd - g.dx[idx]).abs() < 1e-6, "{fd} vs {}", g.dx[idx]);
        }
        let mut gp = gamma.clone();
        gp[2] += h;
        let mut gm = gamma.clone();
        gm[2] -= h;
        let fd = (f(&x, &gp) - f(&x, &gm)) / (2.0 * h);
        assert!((fd - g.dgamma[2]).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let x = rand5((1, 6, 2, 2, 2), 7);
        let out = layer_norm_channels(x.view(), Array1::ones(6).view(), Array1::zeros(6).view()).unwrap();
        for v in 0..8 {
            let col: Vec<f64> = (0..6).map(|c| out.y.as_slice().unwrap()[c * 8 + v]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn concat_roundtrip() {
        let a = rand5((1, 2, 2, 2, 2), 8);
        let b = rand5((1, 3, 2, 2, 2), 9);
        let c = concat_channels(&[a.view(), b.view()]).unwrap();
        let parts = concat_backward(c.view(), &[2, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
