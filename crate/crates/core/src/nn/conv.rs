//! 3D convolution and transposed convolution over `(B, C, H, W, D)` maps.
//!
//! Convolutions run as im2col + GEMM over slabs of output rows. The col
//! matrix is voxel-major so the GEMM has a tall M dimension.

use ndarray::{Array1, Array5, ArrayView1, ArrayView5};

use super::gemm::{gemm, gemm_strided, Mat};
use crate::error::{Error, Result};
use crate::par;

/// Target number of output voxels per im2col slab.
const SLAB_VOXELS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geom {
    fn cols(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    fn row_vox(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output-row ranges processed together.
    fn slabs(&self) -> Vec<(usize, usize)> {
        let rows = (SLAB_VOXELS / self.row_vox().max(1)).max(1);
        (0..self.output[0])
            .step_by(rows)
            .map(|r| (r, (r + rows).min(self.output[0])))
            .collect()
    }
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Geom> {
    let (cout, cin, k) = (w[0], w[1], w[2]);
    if w[3] != k || w[4] != k {
        return Err(Error::ShapeMismatch(format!("non-cubic kernel {w:?}")));
    }
    if x[1] != cin {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, kernel expects {cin}",
            x[1]
        )));
    }
    let input = [x[2], x[3], x[4]];
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = conv_out_dim(input[a], k, stride, pad).ok_or_else(|| {
            Error::ShapeMismatch(format!("kernel {k} larger than padded input {input:?}"))
        })?;
    }
    Ok(Geom {
        cin,
        cout,
        k,
        stride,
        pad,
        input,
        output,
    })
}

/// Fills `col` (rows = output voxels of rows `r0..r1`, cols = `cin * k^3`).
fn im2col(x: &[f64], g: &Geom, r0: usize, r1: usize, col: &mut [f64]) {
    let [h, w, d] = g.input;
    let [_, wo, dout] = g.output;
    let k = g.k;
    let kk = k * k;
    let kkk = kk * k;
    let ncol = g.cols();
    let in_vox = g.in_vox();
    let mut row = 0;
    for i in r0..r1 {
        for j in 0..wo {
            for z in 0..dout {
                let dst = &mut col[row * ncol..(row + 1) * ncol];
                for a in 0..k {
                    let ii = (i * g.stride + a) as isize - g.pad as isize;
                    for b in 0..k {
                        let jj = (j * g.stride + b) as isize - g.pad as isize;
                        let inside_ij = ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w;
                        for c in 0..k {
                            let zz = (z * g.stride + c) as isize - g.pad as isize;
                            let tap = a * kk + b * k + c;
                            if inside_ij && zz >= 0 && (zz as usize) < d {
                                let src = (ii as usize * w + jj as usize) * d + zz as usize;
                                for ci in 0..g.cin {
                                    dst[ci * kkk + tap] = x[ci * in_vox + src];
                                }
                            } else {
                                for ci in 0..g.cin {
                                    dst[ci * kkk + tap] = 0.0;
                                }
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `col` back onto the input grid; adjoint of [`im2col`].
fn col2im(col: &[f64], g: &Geom, r0: usize, r1: usize, dx: &mut [f64]) {
    let [h, w, d] = g.input;
    let [_, wo, dout] = g.output;
    let k = g.k;
    let kk = k * k;
    let kkk = kk * k;
    let ncol = g.cols();
    let in_vox = g.in_vox();
    let mut row = 0;
    for i in r0..r1 {
        for j in 0..wo {
            for z in 0..dout {
                let src = &col[row * ncol..(row + 1) * ncol];
                for a in 0..k {
                    let ii = (i * g.stride + a) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for b in 0..k {
                        let jj = (j * g.stride + b) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        for c in 0..k {
                            let zz = (z * g.stride + c) as isize - g.pad as isize;
                            if zz < 0 || zz as usize >= d {
                                continue;
                            }
                            let tap = a * kk + b * k + c;
                            let at = (ii as usize * w + jj as usize) * d + zz as usize;
                            for ci in 0..g.cin {
                                dx[ci * in_vox + at] += src[ci * kkk + tap];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn contiguous<'a>(a: &'a ArrayView5<'_, f64>) -> std::borrow::Cow<'a, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

/// Cross-correlation with a cubic kernel `w: (Cout, Cin, k, k, k)`,
/// zero padding `pad` and the given stride.
pub fn conv3d(
    x: ArrayView5<'_, f64>,
    w: ArrayView5<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
    stride: usize,
    pad: usize,
) -> Result<Array5<f64>> {
    let g = geometry(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = &bias {
        if b.len() != g.cout {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
    }
    let batch = x.shape()[0];
    let xs = contiguous(&x);
    let ws = contiguous(&w);
    let ncol = g.cols();
    let (in_sz, out_vox) = (g.cin * g.in_vox(), g.out_vox());
    let wmat = Mat::row_major(&ws, g.cout, ncol);
    let slabs = g.slabs();
    let mut out = vec![0.0; batch * g.cout * out_vox];
    for bi in 0..batch {
        let xb = &xs[bi * in_sz..(bi + 1) * in_sz];
        let parts = par::map_range(slabs.len(), |s| {
            let (r0, r1) = slabs[s];
            let rows = (r1 - r0) * g.row_vox();
            let mut col = vec![0.0; rows * ncol];
            im2col(xb, &g, r0, r1, &mut col);
            // (rows x ncol) * (ncol x cout), stored column-major = channel-major.
            let mut y = vec![0.0; rows * g.cout];
            gemm_strided(
                1.0,
                Mat::row_major(&col, rows, ncol),
                wmat.t(),
                0.0,
                &mut y,
                1,
                rows,
            );
            y
        });
        let ob = &mut out[bi * g.cout * out_vox..(bi + 1) * g.cout * out_vox];
        for (s, y) in parts.iter().enumerate() {
            let start = slabs[s].0 * g.row_vox();
            let rows = y.len() / g.cout;
            for co in 0..g.cout {
                let dst = co * out_vox + start;
                ob[dst..dst + rows].copy_from_slice(&y[co * rows..(co + 1) * rows]);
            }
        }
        if let Some(b) = &bias {
            for co in 0..g.cout {
                let bv = b[co];
                ob[co * out_vox..(co + 1) * out_vox]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    let [ho, wo, dout] = g.output;
    Ok(Array5::from_shape_vec((batch, g.cout, ho, wo, dout), out).expect("shape matches buffer"))
}

pub struct ConvGrads {
    pub dx: Option<Array5<f64>>,
    pub dw: Array5<f64>,
    pub db: Array1<f64>,
}

/// Gradients of `sum(dy * conv3d(x, w, b))`.
pub fn conv3d_backward(
    x: ArrayView5<'_, f64>,
    w: ArrayView5<'_, f64>,
    dy: ArrayView5<'_, f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads> {
    let g = geometry(x.shape(), w.shape(), stride, pad)?;
    let batch = x.shape()[0];
    let expect = [batch, g.cout, g.output[0], g.output[1], g.output[2]];
    if dy.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs {expect:?}",
            dy.shape()
        )));
    }
    let xs = contiguous(&x);
    let ws = contiguous(&w);
    let dys = contiguous(&dy);
    let ncol = g.cols();
    let (in_sz, out_vox) = (g.cin * g.in_vox(), g.out_vox());
    let wmat = Mat::row_major(&ws, g.cout, ncol);
    let slabs = g.slabs();
    let group = par::threads().max(1);

    // dW accumulated transposed: (ncol x cout).
    let mut dwt = vec![0.0; ncol * g.cout];
    let mut db = vec![0.0; g.cout];
    let mut dx = if need_dx {
        vec![0.0; batch * in_sz]
    } else {
        Vec::new()
    };
    for bi in 0..batch {
        let xb = &xs[bi * in_sz..(bi + 1) * in_sz];
        let dyb = &dys[bi * g.cout * out_vox..(bi + 1) * g.cout * out_vox];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dyb[co * out_vox..(co + 1) * out_vox].iter().sum::<f64>();
        }
        for chunk in slabs.chunks(group) {
            let parts = par::map_range(chunk.len(), |s| {
                let (r0, r1) = chunk[s];
                let rows = (r1 - r0) * g.row_vox();
                let start = r0 * g.row_vox();
                let mut col = vec![0.0; rows * ncol];
                im2col(xb, &g, r0, r1, &mut col);
                // Upstream slab as (rows x cout), read in place.
                let dy_slab = Mat {
                    data: &dyb[start..],
                    rows,
                    cols: g.cout,
                    row_stride: 1,
                    col_stride: out_vox,
                };
                let mut part_dwt = vec![0.0; ncol * g.cout];
                gemm(
                    1.0,
                    Mat::row_major(&col, rows, ncol).t(),
                    dy_slab,
                    0.0,
                    &mut part_dwt,
                );
                let dcol = need_dx.then(|| {
                    let mut dcol = vec![0.0; rows * ncol];
                    gemm(1.0, dy_slab, wmat, 0.0, &mut dcol);
                    dcol
                });
                (part_dwt, dcol)
            });
            for (s, (part_dwt, dcol)) in parts.into_iter().enumerate() {
                dwt.iter_mut().zip(&part_dwt).for_each(|(a, b)| *a += b);
                if let Some(dcol) = dcol {
                    let (r0, r1) = chunk[s];
                    col2im(&dcol, &g, r0, r1, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                }
            }
        }
    }
    let mut dw = vec![0.0; g.cout * ncol];
    for co in 0..g.cout {
        for c in 0..ncol {
            dw[co * ncol + c] = dwt[c * g.cout + co];
        }
    }
    let k = g.k;
    Ok(ConvGrads {
        dx: need_dx.then(|| {
            let [h, wd, d] = g.input;
            Array5::from_shape_vec((batch, g.cin, h, wd, d), dx).expect("shape matches buffer")
        }),
        dw: Array5::from_shape_vec((g.cout, g.cin, k, k, k), dw).expect("shape matches buffer"),
        db: Array1::from(db),
    })
}

/// Transposed convolution with kernel 2 and stride 2; `w: (Cin, Cout, 2, 2, 2)`.
/// Output spatial dims are exactly double the input's.
pub fn conv_transpose3d(
    x: ArrayView5<'_, f64>,
    w: ArrayView5<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
) -> Result<Array5<f64>> {
    let (batch, cin, h, wd, d) = x.dim();
    let ws = w.shape();
    if ws[0] != cin || ws[2..] != [2, 2, 2] {
        return Err(Error::ShapeMismatch(format!(
            "transposed-conv kernel {ws:?} for {cin} input channels"
        )));
    }
    let cout = ws[1];
    if let Some(b) = &bias {
        if b.len() != cout {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
    }
    let xs = contiguous(&x);
    let wsl = contiguous(&w);
    let nv = h * wd * d;
    let (ho, wo, dout) = (2 * h, 2 * wd, 2 * d);
    let onv = ho * wo * dout;
    let mut out = vec![0.0; batch * cout * onv];
    let mut y = vec![0.0; nv * cout * 8];
    for bi in 0..batch {
        let xb = &xs[bi * cin * nv..(bi + 1) * cin * nv];
        // (nv x cin) * (cin x cout*8)
        let xt = Mat {
            data: xb,
            rows: nv,
            cols: cin,
            row_stride: 1,
            col_stride: nv,
        };
        gemm(1.0, xt, Mat::row_major(&wsl, cin, cout * 8), 0.0, &mut y);
        let ob = &mut out[bi * cout * onv..(bi + 1) * cout * onv];
        for i in 0..h {
            for j in 0..wd {
                for z in 0..d {
                    let v = (i * wd + j) * d + z;
                    for co in 0..cout {
                        let bv = bias.as_ref().map_or(0.0, |b| b[co]);
                        for t in 0..8 {
                            let (a, b, c) = (t >> 2, (t >> 1) & 1, t & 1);
                            let o = ((2 * i + a) * wo + 2 * j + b) * dout + 2 * z + c;
                            ob[co * onv + o] = y[v * cout * 8 + co * 8 + t] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(Array5::from_shape_vec((batch, cout, ho, wo, dout), out).expect("shape matches buffer"))
}

/// Gradients of `sum(dy * conv_transpose3d(x, w, b))`.
pub fn conv_transpose3d_backward(
    x: ArrayView5<'_, f64>,
    w: ArrayView5<'_, f64>,
    dy: ArrayView5<'_, f64>,
    need_dx: bool,
) -> Result<ConvGrads> {
    let (batch, cin, h, wd, d) = x.dim();
    let cout = w.shape()[1];
    let (ho, wo, dout) = (2 * h, 2 * wd, 2 * d);
    if dy.shape() != [batch, cout, ho, wo, dout] {
        return Err(Error::ShapeMismatch("upstream gradient shape".into()));
    }
    let xs = contiguous(&x);
    let wsl = contiguous(&w);
    let dys = contiguous(&dy);
    let nv = h * wd * d;
    let onv = ho * wo * dout;
    let mut dw = vec![0.0; cin * cout * 8];
    let mut db = vec![0.0; cout];
    let mut dx = if need_dx {
        vec![0.0; batch * cin * nv]
    } else {
        Vec::new()
    };
    let mut dyg = vec![0.0; nv * cout * 8];
    for bi in 0..batch {
        let dyb = &dys[bi * cout * onv..(bi + 1) * cout * onv];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dyb[co * onv..(co + 1) * onv].iter().sum::<f64>();
        }
        for i in 0..h {
            for j in 0..wd {
                for z in 0..d {
                    let v = (i * wd + j) * d + z;
                    for co in 0..cout {
                        for t in 0..8 {
                            let (a, b, c) = (t >> 2, (t >> 1) & 1, t & 1);
                            let o = ((2 * i + a) * wo + 2 * j + b) * dout + 2 * z + c;
                            dyg[v * cout * 8 + co * 8 + t] = dyb[co * onv + o];
                        }
                    }
                }
            }
        }
        let xb = &xs[bi * cin * nv..(bi + 1) * cin * nv];
        // dW += X (cin x nv) * dY' (nv x cout*8)
        gemm(
            1.0,
            Mat::row_major(xb, cin, nv),
            Mat::row_major(&dyg, nv, cout * 8),
            1.0,
            &mut dw,
        );
        if need_dx {
            // dX^T (nv x cin) = dY' (nv x cout*8) * W^T, written channel-major.
            gemm_strided(
                1.0,
                Mat::row_major(&dyg, nv, cout * 8),
                Mat::row_major(&wsl, cin, cout * 8).t(),
                0.0,
                &mut dx[bi * cin * nv..(bi + 1) * cin * nv],
                1,
                nv,
            );
        }
    }
    Ok(ConvGrads {
        dx: need_dx.then(|| {
            Array5::from_shape_vec((batch, cin, h, wd, d), dx).expect("shape matches buffer")
        }),
        dw: Array5::from_shape_vec((cin, cout, 2, 2, 2), dw).expect("shape matches buffer"),
        db: Array1::from(db),
    })
}
