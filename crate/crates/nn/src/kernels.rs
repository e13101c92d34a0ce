//! Raw CPU kernels. Batched kernels split work per sample through
//! [`crate::exec`]; weight gradients are reduced in sample order.

use crate::exec;

/// Row-major `c = op(a)·op(b) + beta·c` with `op(a)` of shape `m×k` and
/// `op(b)` of shape `k×n`. Transposition is expressed through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths were checked against the stated dimensions and
    // the strides index only within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    x.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution over `n` samples. `weight` is `[cout, cin, k, k]`.
pub fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let in_per = g.cin * g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let mut out = vec![0.0f32; n * cout * hw_out];
    exec::for_each_chunk_mut(&mut out, cout * hw_out, |i, y| {
        let xs = &x[i * in_per..(i + 1) * in_per];
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(hw_out).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(cout, kk, hw_out, weight, false, xs, false, y, beta);
        } else {
            let mut cols = vec![0.0f32; kk * hw_out];
            im2col(xs, g, &mut cols);
            gemm(cout, kk, hw_out, weight, false, &cols, false, y, beta);
        }
    });
    out
}

pub struct ConvGrads {
    pub dx: Vec<f32>,
    pub dweight: Vec<f32>,
    pub dbias: Vec<f32>,
}

pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    cout: usize,
    dy: &[f32],
) -> ConvGrads {
    let (ho, wo) = g.out_hw();
    let hw_out = ho * wo;
    let in_per = g.cin * g.h * g.w;
    let kk = g.cin * g.k * g.k;
    let partials = exec::map_range(n, |i| {
        let xs = &x[i * in_per..(i + 1) * in_per];
        let dys = &dy[i * cout * hw_out..(i + 1) * cout * hw_out];
        let mut dw = vec![0.0f32; cout * kk];
        let mut dx = vec![0.0f32; in_per];
        if g.is_pointwise() {
            gemm(cout, hw_out, kk, dys, false, xs, true, &mut dw, 0.0);
            gemm(kk, cout, hw_out, weight, true, dys, false, &mut dx, 0.0);
        } else {
            let mut cols = vec![0.0f32; kk * hw_out];
            im2col(xs, g, &mut cols);
            gemm(cout, hw_out, kk, dys, false, &cols, true, &mut dw, 0.0);
            gemm(kk, cout, hw_out, weight, true, dys, false, &mut cols, 0.0);
            col2im(&cols, g, &mut dx);
        }
        let db: Vec<f32> = dys.chunks(hw_out).map(|r| r.iter().sum()).collect();
        (dx, dw, db)
    });
    let mut dx = Vec::with_capacity(n * in_per);
    let mut dweight = vec![0.0f32; cout * kk];
    let mut dbias = vec![0.0f32; cout];
    for (px, pw, pb) in partials {
        dx.extend_from_slice(&px);
        dweight.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        dbias.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    ConvGrads { dx, dweight, dbias }
}

/// Normalization statistics over `groups` contiguous blocks per sample.
/// Returns `(y, xhat, inv_std)`; `inv_std` has one entry per (sample, group).
pub fn group_norm_forward(
    x: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let block = cpg * hw;
    let stats = exec::map_range(n * groups, |ng| {
        let xs = &x[ng * block..(ng + 1) * block];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / block as f64;
        let var = xs
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / block as f64;
        (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
    });
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for (ng, &(mean, inv)) in stats.iter().enumerate() {
        let g = ng % groups;
        for j in 0..block {
            let idx = ng * block + j;
            let ch = g * cpg + j / hw;
            let h = (x[idx] - mean) * inv;
            xhat[idx] = h;
            y[idx] = h * gamma[ch] + beta[ch];
        }
    }
    let inv_std = stats.into_iter().map(|s| s.1).collect();
    (y, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cpg = c / groups;
    let block = cpg * hw;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for j in 0..hw {
                dgamma[ch] += dy[base + j] * xhat[base + j];
                dbeta[ch] += dy[base + j];
            }
        }
    }
    let mut dx = vec![0.0f32; dy.len()];
    exec::for_each_chunk_mut(&mut dx, block, |ng, out| {
        let g = ng % groups;
        let inv = inv_std[ng];
        let off = ng * block;
        let mut mean_d = 0.0f64;
        let mut mean_dx = 0.0f64;
        for j in 0..block {
            let d = dy[off + j] * gamma[g * cpg + j / hw];
            mean_d += d as f64;
            mean_dx += (d * xhat[off + j]) as f64;
        }
        let mean_d = (mean_d / block as f64) as f32;
        let mean_dx = (mean_dx / block as f64) as f32;
        for j in 0..block {
            let d = dy[off + j] * gamma[g * cpg + j / hw];
            out[j] = inv * (d - mean_d - xhat[off + j] * mean_dx);
        }
    });
    (dx, dgamma, dbeta)
}

/// Softmax over rows of length `d`.
pub fn softmax_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut y = x.to_vec();
    for row in y.chunks_mut(d) {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    y
}

pub fn upsample_nearest2x(x: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; nc * 4 * h * w];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * 4 * h * w..(p + 1) * 4 * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample_nearest2x_backward(dy: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; nc * h * w];
    for p in 0..nc {
        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
            }
        }
    }
    dx
}
