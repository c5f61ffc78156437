//! 2-D cross-correlation (im2col + GEMM) and max pooling.

use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    /// Value read for cells outside the input. Binary convolutions pad with -1.
    pub pad_value: f64,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, pad_value: f64) -> Self {
        Self {
            stride,
            padding,
            pad_value,
        }
    }

    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Dims> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, ci, kh, kw) = w.dims4()?;
    if c != ci {
        return Err(Error::Shape(format!(
            "conv input has {c} channels but weight expects {ci} (input {:?}, weight {:?})",
            x.shape(),
            w.shape()
        )));
    }
    let (Some(ho), Some(wo)) = (g.out_extent(h, kh), g.out_extent(wd, kw)) else {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} with stride {} and padding {} does not fit input {h}x{wd}",
            g.stride, g.padding
        )));
    };
    Ok(Dims {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Output columns `ox` whose input column `ox * stride + kx - padding` lies
/// inside `[0, w)`.
fn valid_cols(d: &Dims, g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride).min(d.wo);
    let hi = if d.w + g.padding <= kx {
        0
    } else {
        ((d.w + g.padding - kx - 1) / g.stride + 1).min(d.wo)
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], d: &Dims, g: &ConvGeometry, col: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let (lo, hi) = valid_cols(d, g, kx);
                let row = &mut col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(g.pad_value);
                        continue;
                    }
                    dst[..lo].fill(g.pad_value);
                    dst[hi..].fill(g.pad_value);
                    if lo == hi {
                        continue;
                    }
                    let start = iy as usize * d.w + lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                    } else {
                        for (v, s) in dst[lo..hi]
                            .iter_mut()
                            .zip(plane[start..].iter().step_by(g.stride))
                        {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &Dims, g: &ConvGeometry, x: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.c {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let (lo, hi) = valid_cols(d, g, kx);
                if lo == hi {
                    continue;
                }
                let row = &col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let start = iy as usize * d.w + lo * g.stride + kx - g.padding;
                    let src = &row[oy * d.wo + lo..oy * d.wo + hi];
                    if g.stride == 1 {
                        for (v, s) in plane[start..start + hi - lo].iter_mut().zip(src) {
                            *v += s;
                        }
                    } else {
                        for (v, s) in plane[start..].iter_mut().step_by(g.stride).zip(src) {
                            *v += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds are checked above for every index the kernel touches;
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
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

/// Real-valued cross-correlation of `x[N,C,H,W]` with `w[O,C,Kh,Kw]`.
pub fn conv2d_real(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(x, w, g)?;
    let (k, p) = (d.k(), d.p());
    let mut out = vec![0.0; d.n * d.o * p];
    let mut col = vec![0.0; k * p];
    let per_in = d.c * d.h * d.w;
    for b in 0..d.n {
        im2col(&x.data()[b * per_in..(b + 1) * per_in], &d, g, &mut col);
        gemm(
            d.o,
            k,
            p,
            w.data(),
            (k, 1),
            &col,
            (p, 1),
            0.0,
            &mut out[b * d.o * p..(b + 1) * d.o * p],
        );
    }
    Tensor::new(vec![d.n, d.o, d.ho, d.wo], out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    g: &ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(x, w, g).expect("shapes validated in forward");
    let (k, p) = (d.k(), d.p());
    let per_in = d.c * d.h * d.w;
    let mut col = vec![0.0; k * p];
    let mut gcol = vec![0.0; k * p];
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    for b in 0..d.n {
        let gyb = &gy.data()[b * d.o * p..(b + 1) * d.o * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[b * per_in..(b + 1) * per_in], &d, g, &mut col);
            gemm(d.o, p, k, gyb, (p, 1), &col, (1, p), 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(k, d.o, p, w.data(), (1, k), gyb, (p, 1), 0.0, &mut gcol);
            col2im(&gcol, &d, g, &mut gx[b * per_in..(b + 1) * per_in]);
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape().to_vec(), v).unwrap()),
        gw.map(|v| Tensor::new(w.shape().to_vec(), v).unwrap()),
    )
}

/// Max pooling over `k x k` windows; out-of-range cells never win.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(max_pool_impl(x, k, stride, padding)?.0)
}

fn max_pool_impl(
    x: &Tensor,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let geo = ConvGeometry::new(stride, padding, f64::NEG_INFINITY);
    let (Some(ho), Some(wo)) = (geo.out_extent(h, k), geo.out_extent(w, k)) else {
        return Err(Error::Shape(format!(
            "pool window {k} does not fit {h}x{w}"
        )));
    };
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x.data()[i] > best || best_i == usize::MAX {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

impl Tape {
    pub fn conv2d(&mut self, x: Var, w: Var, g: ConvGeometry) -> Result<Var> {
        let y = conv2d_real(self.value(x), self.value(w), &g)?;
        Ok(self.record(
            y,
            &[x, w],
            Box::new(move |a| {
                let (gx, gw) =
                    conv2d_backward(a.inputs[0], a.inputs[1], a.grad, &g, a.needs[0], a.needs[1]);
                vec![gx, gw]
            }),
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, arg) = max_pool_impl(self.value(x), k, stride, padding)?;
        Ok(self.record(
            y,
            &[x],
            Box::new(move |a| {
                let mut gx = Tensor::zeros(a.inputs[0].shape());
                for (&i, &g) in arg.iter().zip(a.grad.data()) {
                    gx.data_mut()[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
