//! Raw compute kernels over NCHW buffers. Shapes are validated by the callers
//! in `graph`; these functions only index.

use std::f32::consts::{FRAC_1_SQRT_2, PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
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

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c[m,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller
    // satisfies; matrixmultiply reads/writes only inside those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Unfolds the batch into a `[c_in*k*k, batch*oh*ow]` matrix.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        if g.stride == 1 {
                            // valid outputs satisfy 0 <= xo + kj - pad < w
                            let lo = g.pad.saturating_sub(kj).min(ow);
                            let hi = (g.w + g.pad).saturating_sub(kj).min(ow).max(lo);
                            drow[..lo].fill(0.0);
                            drow[hi..].fill(0.0);
                            if hi > lo {
                                let s0 = lo + kj - g.pad;
                                drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                            }
                            continue;
                        }
                        for (xo, d) in drow.iter_mut().enumerate() {
                            let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters-and-adds columns back into `dx`.
fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for y in 0..oh {
                        let iy = (y * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        if g.stride == 1 {
                            let lo = g.pad.saturating_sub(kj).min(ow);
                            let hi = (g.w + g.pad).saturating_sub(kj).min(ow).max(lo);
                            if hi > lo {
                                let d0 = lo + kj - g.pad;
                                let srow = &src[y * ow + lo..y * ow + hi];
                                for (d, &s) in drow[d0..d0 + hi - lo].iter_mut().zip(srow) {
                                    *d += s;
                                }
                            }
                            continue;
                        }
                        for (xo, &s) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                            let ix = (xo * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let kk = g.patch_len();
    let mut cols = vec![0.0f32; kk * ncols];
    im2col(x, g, &mut cols);
    let mut tmp = vec![0.0f32; g.c_out * ncols];
    gemm(g.c_out, kk, ncols, 1.0, w, (kk, 1), &cols, (ncols, 1), 0.0, &mut tmp, ncols);
    let mut out = vec![0.0f32; g.batch * g.c_out * plane];
    for co in 0..g.c_out {
        let bias = bias[co];
        for b in 0..g.batch {
            let src = &tmp[co * ncols + b * plane..][..plane];
            let dst = &mut out[(b * g.c_out + co) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let ncols = g.batch * plane;
    let kk = g.patch_len();
    // dout regrouped as [c_out, batch*plane]
    let mut dtmp = vec![0.0f32; g.c_out * ncols];
    for co in 0..g.c_out {
        for b in 0..g.batch {
            dtmp[co * ncols + b * plane..][..plane]
                .copy_from_slice(&dout[(b * g.c_out + co) * plane..][..plane]);
        }
    }
    let db = need_db.then(|| {
        (0..g.c_out)
            .map(|co| dtmp[co * ncols..(co + 1) * ncols].iter().sum())
            .collect()
    });
    let dw = need_dw.then(|| {
        let mut cols = vec![0.0f32; kk * ncols];
        im2col(x, g, &mut cols);
        let mut dw = vec![0.0f32; g.c_out * kk];
        gemm(g.c_out, ncols, kk, 1.0, &dtmp, (ncols, 1), &cols, (1, ncols), 0.0, &mut dw, kk);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0f32; kk * ncols];
        gemm(kk, g.c_out, ncols, 1.0, w, (1, kk), &dtmp, (ncols, 1), 0.0, &mut dcols, ncols);
        let mut dx = vec![0.0f32; x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Standard normal CDF through the error function.
pub fn normal_cdf(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

pub fn gelu(x: f32) -> f32 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f32) -> f32 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus, used to initialize reparameterized weights.
pub fn inv_softplus(y: f32) -> f32 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn log_softmax_row(row: &[f32], temperature: f32, out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = row
        .iter()
        .map(|&v| (v / temperature - max).exp())
        .sum::<f32>()
        .ln()
        + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v / temperature - lse;
    }
}
