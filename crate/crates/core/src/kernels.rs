//! Forward and adjoint kernels on raw row-major buffers. The autodiff tape
//! wires these together; nothing here allocates graph state.
//!
//! Convolutions go through an im2col layout `(C*kh*kw, M*OH*OW)`, built for
//! a cache-sized group of images at a time, so each group is one GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::{ConvSpec, Scalar};

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored `(m, k)` (or `(k, m)` when `ta`), `b` is `(k, n)` (or `(n, k)`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: F,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    let a = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

/// Geometry of one sliding-window pass: `c x h x w` images, windows of
/// `kh x kw` producing an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(spec: &ConvSpec, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Window {
            c,
            h,
            w,
            kh: spec.kernel[0],
            kw: spec.kernel[1],
            sh: spec.stride[0],
            sw: spec.stride[1],
            ph: spec.padding[0],
            pw: spec.padding[1],
            oh,
            ow,
        }
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Outputs `lo..hi` whose tap `k` lands inside `0..extent`.
    #[inline]
    fn valid(k: usize, stride: usize, pad: usize, extent: usize, outputs: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(outputs) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Input coordinate covered by output `o` and kernel tap `k`, if in bounds.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfold `m` images `(m, c, h, w)` into columns `(c*kh*kw, m*oh*ow)`.
pub fn im2col<F: Scalar>(x: &[F], m: usize, g: &Window) -> Vec<F> {
    let plane = g.oh * g.ow;
    let ncols = m * plane;
    let mut cols = vec![F::zero(); g.rows() * ncols];
    for img in 0..m {
        for ch in 0..g.c {
            let xin = &x[(img * g.c + ch) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let out = &mut cols[row * ncols + img * plane..][..plane];
                    let (lo, hi) = Window::valid(kj, g.sw, g.pw, g.w, g.ow);
                    for oy in 0..g.oh {
                        let Some(iy) = Window::src(oy, ki, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        let xrow = &xin[iy * g.w..][..g.w];
                        let orow = &mut out[oy * g.ow..][..g.ow];
                        if g.sw == 1 {
                            let start = lo + kj - g.pw;
                            orow[lo..hi].copy_from_slice(&xrow[start..start + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                orow[ox] = xrow[ox * g.sw + kj - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `(m, c, h, w)`.
pub fn col2im<F: Scalar>(cols: &[F], m: usize, g: &Window) -> Vec<F> {
    let plane = g.oh * g.ow;
    let ncols = m * plane;
    let mut x = vec![F::zero(); m * g.c * g.h * g.w];
    for img in 0..m {
        for ch in 0..g.c {
            let xin = &mut x[(img * g.c + ch) * g.h * g.w..][..g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (ch * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * ncols + img * plane..][..plane];
                    let (lo, hi) = Window::valid(kj, g.sw, g.pw, g.w, g.ow);
                    for oy in 0..g.oh {
                        let Some(iy) = Window::src(oy, ki, g.sh, g.ph, g.h) else {
                            continue;
                        };
                        let srow = &src[oy * g.ow..][..g.ow];
                        let xrow = &mut xin[iy * g.w..][..g.w];
                        for ox in lo..hi {
                            xrow[ox * g.sw + kj - g.pw] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(m, c, p)` -> `(c, m*p)`.
pub fn batch_to_channel_major<F: Scalar>(x: &[F], m: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for img in 0..m {
        for ch in 0..c {
            out[ch * m * p + img * p..][..p].copy_from_slice(&x[(img * c + ch) * p..][..p]);
        }
    }
    out
}

/// `(c, m*p)` -> `(m, c, p)`.
pub fn channel_major_to_batch<F: Scalar>(x: &[F], m: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for img in 0..m {
        for ch in 0..c {
            out[(img * c + ch) * p..][..p].copy_from_slice(&x[ch * m * p + img * p..][..p]);
        }
    }
    out
}

fn add_channel_bias<F: Scalar>(y: &mut [F], bias: &[F], m: usize, p: usize) {
    let c = bias.len();
    for img in 0..m {
        for (ch, &b) in bias.iter().enumerate() {
            for v in &mut y[(img * c + ch) * p..][..p] {
                *v += b;
            }
        }
    }
}

fn channel_sums<F: Scalar>(g: &[F], m: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); c];
    for img in 0..m {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(img * c + ch) * p..][..p].iter().copied().sum::<F>();
        }
    }
    out
}

/// Unfolded input: a channel-major copy for pointwise windows, else [`im2col`].
fn unfold<F: Scalar>(x: &[F], m: usize, g: &Window) -> Vec<F> {
    if g.is_pointwise() {
        batch_to_channel_major(x, m, g.c, g.oh * g.ow)
    } else {
        im2col(x, m, g)
    }
}

/// Column buffers are built for a few images at a time so they stay in cache.
const CHUNK_ELEMS: usize = 1 << 18;

/// `(first image, count)` pairs covering `m` images of `per_image` column elements.
fn chunks(m: usize, per_image: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (CHUNK_ELEMS / per_image.max(1)).max(1);
    (0..m).step_by(step).map(move |i| (i, step.min(m - i)))
}

/// Cross-correlation. `x: (m, c, h, w)`, `w: (o, c, kh, kw)` -> `(m, o, oh, ow)`.
pub fn conv2d_forward<F: Scalar>(x: &[F], m: usize, g: &Window, w: &[F], o: usize, bias: Option<&[F]>) -> Vec<F> {
    let plane = g.oh * g.ow;
    let (rows, xs) = (g.rows(), g.c * g.h * g.w);
    let mut y = vec![F::zero(); m * o * plane];
    for (i0, mc) in chunks(m, rows * plane) {
        let cols = unfold(&x[i0 * xs..(i0 + mc) * xs], mc, g);
        let mut out_cm = vec![F::zero(); o * mc * plane];
        gemm(false, false, o, mc * plane, rows, F::one(), w, &cols, F::zero(), &mut out_cm);
        y[i0 * o * plane..(i0 + mc) * o * plane].copy_from_slice(&channel_major_to_batch(&out_cm, mc, o, plane));
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, m, plane);
    }
    y
}

pub struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub db: Vec<F>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    m: usize,
    g: &Window,
    w: &[F],
    o: usize,
    gy: &[F],
    need_dx: bool,
) -> ConvGrads<F> {
    let plane = g.oh * g.ow;
    let (rows, xs, ys) = (g.rows(), g.c * g.h * g.w, o * plane);
    let mut dw = vec![F::zero(); o * rows];
    let mut dx = need_dx.then(|| vec![F::zero(); m * xs]);
    for (i0, mc) in chunks(m, rows * plane) {
        let cols = unfold(&x[i0 * xs..(i0 + mc) * xs], mc, g);
        let gy_cm = batch_to_channel_major(&gy[i0 * ys..(i0 + mc) * ys], mc, o, plane);
        gemm(false, true, o, rows, mc * plane, F::one(), &gy_cm, &cols, F::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![F::zero(); rows * mc * plane];
            gemm(true, false, rows, mc * plane, o, F::one(), w, &gy_cm, F::zero(), &mut dcols);
            let d = if g.is_pointwise() {
                channel_major_to_batch(&dcols, mc, g.c, plane)
            } else {
                col2im(&dcols, mc, g)
            };
            dx[i0 * xs..(i0 + mc) * xs].copy_from_slice(&d);
        }
    }
    ConvGrads {
        dx,
        dw,
        db: channel_sums(gy, m, o, plane),
    }
}

/// Transposed convolution. `x: (m, cin, h, w)`, `w: (cin, cout, kh, kw)`.
/// `g` describes the forward convolution from the *output* `(cout, H, W)`
/// back onto the input grid `(h, w)`.
pub fn conv_transpose2d_forward<F: Scalar>(
    x: &[F],
    m: usize,
    cin: usize,
    g: &Window,
    w: &[F],
    bias: Option<&[F]>,
) -> Vec<F> {
    let plane_in = g.oh * g.ow;
    let (rows, xs, ys) = (g.rows(), cin * plane_in, g.c * g.h * g.w);
    let mut y = vec![F::zero(); m * ys];
    for (i0, mc) in chunks(m, rows * plane_in) {
        let xcm = batch_to_channel_major(&x[i0 * xs..(i0 + mc) * xs], mc, cin, plane_in);
        let mut cols = vec![F::zero(); rows * mc * plane_in];
        gemm(true, false, rows, mc * plane_in, cin, F::one(), w, &xcm, F::zero(), &mut cols);
        y[i0 * ys..(i0 + mc) * ys].copy_from_slice(&col2im(&cols, mc, g));
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b, m, g.h * g.w);
    }
    y
}

pub fn conv_transpose2d_backward<F: Scalar>(
    x: &[F],
    m: usize,
    cin: usize,
    g: &Window,
    w: &[F],
    gy: &[F],
    need_dx: bool,
) -> ConvGrads<F> {
    let plane_in = g.oh * g.ow;
    let (rows, xs, ys) = (g.rows(), cin * plane_in, g.c * g.h * g.w);
    let mut dw = vec![F::zero(); cin * rows];
    let mut dx = need_dx.then(|| vec![F::zero(); m * xs]);
    for (i0, mc) in chunks(m, rows * plane_in) {
        let gcols = im2col(&gy[i0 * ys..(i0 + mc) * ys], mc, g);
        let xcm = batch_to_channel_major(&x[i0 * xs..(i0 + mc) * xs], mc, cin, plane_in);
        gemm(false, true, cin, rows, mc * plane_in, F::one(), &xcm, &gcols, F::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let mut dx_cm = vec![F::zero(); cin * mc * plane_in];
            gemm(false, false, cin, mc * plane_in, rows, F::one(), w, &gcols, F::zero(), &mut dx_cm);
            dx[i0 * xs..(i0 + mc) * xs].copy_from_slice(&channel_major_to_batch(&dx_cm, mc, cin, plane_in));
        }
    }
    ConvGrads {
        dx,
        dw,
        db: channel_sums(gy, m, g.c, g.h * g.w),
    }
}

/// Single-channel 3x3x3 convolution with unit padding over `(n, t, h, w)`.
pub fn conv3d_forward<F: Scalar>(x: &[F], dims: [usize; 4], w: &[F], bias: F) -> Vec<F> {
    let [n, t, h, wd] = dims;
    let mut y = vec![bias; x.len()];
    for b in 0..n {
        let vol = &x[b * t * h * wd..][..t * h * wd];
        let out = &mut y[b * t * h * wd..][..t * h * wd];
        for_each_tap(t, h, wd, |o, i, k| out[o] += w[k] * vol[i]);
    }
    y
}

pub fn conv3d_backward<F: Scalar>(x: &[F], dims: [usize; 4], w: &[F], gy: &[F], need_dx: bool) -> (Option<Vec<F>>, Vec<F>, F) {
    let [n, t, h, wd] = dims;
    let vol_len = t * h * wd;
    let mut dw = vec![F::zero(); 27];
    let mut dx = need_dx.then(|| vec![F::zero(); x.len()]);
    for b in 0..n {
        let vol = &x[b * vol_len..][..vol_len];
        let g = &gy[b * vol_len..][..vol_len];
        for_each_tap(t, h, wd, |o, i, k| dw[k] += g[o] * vol[i]);
        if let Some(dx) = dx.as_mut() {
            let d = &mut dx[b * vol_len..][..vol_len];
            for_each_tap(t, h, wd, |o, i, k| d[i] += g[o] * w[k]);
        }
    }
    (dx, dw, gy.iter().copied().sum())
}

/// Visit every (output index, input index, kernel tap) triple of a 3x3x3
/// same-padded stencil.
#[inline]
fn for_each_tap(t: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for ot in 0..t {
        for kt in 0..3 {
            let Some(it) = (ot + kt).checked_sub(1).filter(|&v| v < t) else {
                continue;
            };
            for oy in 0..h {
                for ky in 0..3 {
                    let Some(iy) = (oy + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for ox in 0..w {
                        for kx in 0..3 {
                            let Some(ix) = (ox + kx).checked_sub(1).filter(|&v| v < w) else {
                                continue;
                            };
                            f((ot * h + oy) * w + ox, (it * h + iy) * w + ix, (kt * 3 + ky) * 3 + kx);
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `(m, c, h, w)`; returns values and the flat
/// source index of each maximum.
pub fn max_pool2x2<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Interpolation taps along one axis under the half-pixel
/// (align-corners = false) convention: `(lo, hi, weight_hi)` per output.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_forward<F: Scalar>(x: &[F], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let img = &x[p * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            let (fy, gy) = (F::of(fy), F::of(1.0 - fy));
            for &(x0, x1, fx) in &tx {
                let (fx, gx) = (F::of(fx), F::of(1.0 - fx));
                let top = img[y0 * w + x0] * gx + img[y0 * w + x1] * fx;
                let bot = img[y1 * w + x0] * gx + img[y1 * w + x1] * fx;
                y.push(top * gy + bot * fy);
            }
        }
    }
    y
}

pub fn bilinear_backward<F: Scalar>(gy: &[F], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let d = &mut dx[p * h * w..][..h * w];
        let g = &gy[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gyw) = (F::of(fy), F::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gxw) = (F::of(fx), F::of(1.0 - fx));
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * gyw * gxw;
                d[y0 * w + x1] += v * gyw * fx;
                d[y1 * w + x0] += v * fy * gxw;
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let spec = ConvSpec::new(2, 1, 3, 2, 1);
        let g = Window::new(&spec, 2, 5, 6, 3, 3);
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let cols = im2col(&x, 2, &g);
        let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn bilinear_taps_center() {
        let t = bilinear_taps(2, 1);
        assert_eq!(t, vec![(0, 1, 0.5)]);
        let y = bilinear_forward(&[0.0f64, 1.0, 2.0, 3.0], 1, 2, 2, 1, 1);
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn max_pool_picks_first_of_ties() {
        let (y, arg) = max_pool2x2(&[1.0f32, 1.0, 1.0, 1.0], 1, 2, 2);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
