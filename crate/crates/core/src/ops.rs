//! Numeric kernels behind the network layers.
//!
//! Every reduction runs in a fixed order with plain IEEE single-precision
//! arithmetic and transcendental functions come from `libm`, so a forward
//! pass produces the same bits on every platform. The entropy coder relies
//! on this: the decoder must rebuild the encoder's probability tables
//! exactly.

use crate::kernel_synthesis::dot;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f32 = 0.1;

/// Upper bound on the number of floats in one im2col band.
const BAND_FLOATS: usize = 1 << 21;
/// Output columns processed together in the accumulation loop.
const TILE: usize = 256;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> ConvGeom {
        let (c_in, h, w) = x.chw();
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,k,k]");
        assert_eq!(ws[1], c_in, "conv weight expects {} input channels, got {}", ws[1], c_in);
        let k = ws[2];
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv input smaller than kernel");
        ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows_per_band(&self) -> usize {
        let per_row = self.c_in * self.k * self.k * self.w_out;
        (BAND_FLOATS / per_row.max(1)).clamp(1, self.h_out)
    }

    /// im2col for output rows `r0..r1` into `cols` laid out `[C*k*k, rows*Wo]`.
    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut Vec<f32>) {
        let np = (r1 - r0) * self.w_out;
        let kk = self.k * self.k;
        cols.clear();
        cols.resize(self.c_in * kk * np, 0.0);
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let j = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[j * np..(j + 1) * np];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..];
                        let drow = &mut dst[ri * self.w_out..(ri + 1) * self.w_out];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of `cols` back into the input gradient.
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dx: &mut [f32]) {
        let np = (r1 - r0) * self.w_out;
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let j = (c * self.k + ki) * self.k + kj;
                    let src = &cols[j * np..(j + 1) * np];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dx[(c * self.h + iy as usize) * self.w..];
                        let srow = &src[ri * self.w_out..(ri + 1) * self.w_out];
                        for (ox, &g) in srow.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution with zero padding. `weight` is `[O, C, k, k]`, `bias` `[O]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = ConvGeom::new(x, weight, stride, pad);
    let c_out = weight.shape()[0];
    assert_eq!(bias.len(), c_out);
    let jn = g.c_in * g.k * g.k;
    let wd = weight.data();
    let bd = bias.data();
    let hw_out = g.h_out * g.w_out;
    let mut out = Tensor::zeros(&[c_out, g.h_out, g.w_out]);
    let od = out.data_mut();
    let mut cols = Vec::new();
    let band = g.rows_per_band();
    let mut r0 = 0;
    while r0 < g.h_out {
        let r1 = (r0 + band).min(g.h_out);
        g.im2col(x.data(), r0, r1, &mut cols);
        let np = (r1 - r0) * g.w_out;
        let mut t0 = 0;
        while t0 < np {
            let t1 = (t0 + TILE).min(np);
            let tl = t1 - t0;
            let mut o = 0;
            while o < c_out {
                let ob = (c_out - o).min(4);
                let mut acc = [[0f32; TILE]; 4];
                for (q, a) in acc.iter_mut().enumerate().take(ob) {
                    a[..tl].fill(bd[o + q]);
                }
                for j in 0..jn {
                    let col = &cols[j * np + t0..j * np + t1];
                    for (q, a) in acc.iter_mut().enumerate().take(ob) {
                        let wv = wd[(o + q) * jn + j];
                        for (dst, &cv) in a[..tl].iter_mut().zip(col) {
                            *dst += wv * cv;
                        }
                    }
                }
                for (q, a) in acc.iter().enumerate().take(ob) {
                    let base = (o + q) * hw_out + r0 * g.w_out + t0;
                    od[base..base + tl].copy_from_slice(&a[..tl]);
                }
                o += ob;
            }
            t0 = t1;
        }
        r0 = r1;
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Backward pass of [`conv2d`] for upstream gradient `gout`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> ConvGrads {
    let g = ConvGeom::new(x, weight, stride, pad);
    let c_out = weight.shape()[0];
    let jn = g.c_in * g.k * g.k;
    let hw_out = g.h_out * g.w_out;
    let gd = gout.data();
    let wd = weight.data();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        db.data_mut()[o] = gd[o * hw_out..(o + 1) * hw_out].iter().sum();
    }
    let mut dx = if want_dx {
        Some(Tensor::zeros(x.shape()))
    } else {
        None
    };
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let band = g.rows_per_band();
    let mut r0 = 0;
    while r0 < g.h_out {
        let r1 = (r0 + band).min(g.h_out);
        let np = (r1 - r0) * g.w_out;
        g.im2col(x.data(), r0, r1, &mut cols);
        let dwd = dw.data_mut();
        for o in 0..c_out {
            let grow = &gd[o * hw_out + r0 * g.w_out..o * hw_out + r1 * g.w_out];
            for j in 0..jn {
                dwd[o * jn + j] += dot(grow, &cols[j * np..(j + 1) * np]);
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(jn * np, 0.0);
            for j in 0..jn {
                let dst = &mut dcols[j * np..(j + 1) * np];
                for o in 0..c_out {
                    let wv = wd[o * jn + j];
                    let grow = &gd[o * hw_out + r0 * g.w_out..o * hw_out + r1 * g.w_out];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            g.col2im(&dcols, r0, r1, dx.data_mut());
        }
        r0 = r1;
    }
    ConvGrads { dx, dw, db }
}

pub fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let (s, o) = (x.data(), out.data_mut());
    for ch in 0..c {
        for i in 0..2 * h {
            let srow = &s[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
            let orow = &mut o[(ch * 2 * h + i) * 2 * w..(ch * 2 * h + i + 1) * 2 * w];
            for (j, d) in orow.iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(g: &Tensor) -> Tensor {
    let (c, h2, w2) = g.chw();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    let (s, o) = (g.data(), out.data_mut());
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                o[(ch * h + i / 2) * w + j / 2] += s[(ch * h2 + i) * w2 + j];
            }
        }
    }
    out
}

#[inline]
pub fn leaky_relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-v))
}

#[inline]
pub fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        libm::log1pf(libm::expf(v))
    }
}

const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f32) -> f32 {
    0.5 * libm::erfcf(-x * INV_SQRT2)
}

#[inline]
pub fn normal_pdf(x: f32) -> f32 {
    INV_SQRT_2PI * libm::expf(-0.5 * x * x)
}

/// Softmax across channels at every pixel of a `[C,H,W]` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let (s, o) = (x.data(), out.data_mut());
    for p in 0..hw {
        let mut m = f32::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(s[ch * hw + p]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = libm::expf(s[ch * hw + p] - m);
            o[ch * hw + p] = e;
            z += e;
        }
        for ch in 0..c {
            o[ch * hw + p] /= z;
        }
    }
    out
}

pub fn softmax_channels_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = y.chw();
    let hw = h * w;
    let mut out = Tensor::zeros(y.shape());
    let (yd, gd, o) = (y.data(), g.data(), out.data_mut());
    for p in 0..hw {
        let mut s = 0.0;
        for ch in 0..c {
            s += yd[ch * hw + p] * gd[ch * hw + p];
        }
        for ch in 0..c {
            o[ch * hw + p] = yd[ch * hw + p] * (gd[ch * hw + p] - s);
        }
    }
    out
}

pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    let (_, h, w) = xs[0].chw();
    let c: usize = xs.iter().map(|x| x.chw().0).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for x in xs {
        assert_eq!(&x.shape()[1..], &[h, w], "concat spatial mismatch");
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&[c, h, w], data).expect("concat shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor<f64> {
        let (c, h, wd) = x.chw();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::<f64>::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * s + ki) as isize - p as isize;
                                let xx = (j * s + kj) as isize - p as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += w.data()[((oc * c + ic) * k + ki) * k + kj] as f64
                                        * x.data()[(ic * h + y as usize) * wd + xx as usize] as f64;
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + i) * wo + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(c, o, h, w, k, s, p) in &[(3, 5, 9, 11, 3, 1, 1), (4, 6, 16, 16, 5, 2, 2), (2, 3, 8, 8, 1, 1, 0)] {
            let x = rand_t(&mut rng, &[c, h, w]);
            let wt = rand_t(&mut rng, &[o, c, k, k]);
            let b = rand_t(&mut rng, &[o]);
            let fast = conv2d(&x, &wt, &b, s, p);
            let slow = naive_conv(&x, &wt, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((*a as f64 - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[2, 7, 6]);
        let wt = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        let gout = rand_t(&mut rng, &[3, 4, 3]);
        let grads = conv2d_backward(&x, &wt, &gout, 2, 1, true);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            naive_conv(x, w, b, 2, 1)
                .data()
                .iter()
                .zip(gout.data())
                .map(|(a, g)| a * *g as f64)
                .sum()
        };
        let eps = 1e-2f32;
        for i in [0usize, 5, 17, 30] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &wt, &b) - loss(&xm, &wt, &b)) / (2.0 * eps as f64);
            assert!((fd - grads.dx.as_ref().unwrap().data()[i] as f64).abs() < 1e-3);
        }
        for i in [0usize, 7, 20, 53] {
            let mut wp = wt.clone();
            wp.data_mut()[i] += eps;
            let mut wm = wt.clone();
            wm.data_mut()[i] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps as f64);
            assert!((fd - grads.dw.data()[i] as f64).abs() < 1e-3);
        }
        let gsum: f32 = gout.data()[0..12].iter().sum();
        assert!((grads.db.data()[0] - gsum).abs() < 1e-5);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[2, 3, 4]);
        let g = rand_t(&mut rng, &[2, 6, 8]);
        let up = upsample2x(&x);
        let lhs: f32 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = upsample2x_backward(&g);
        let rhs: f32 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[5, 2, 2]);
        let y = softmax_channels(&x);
        for p in 0..4 {
            let s: f32 = (0..5).map(|c| y.data()[c * 4 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((normal_cdf(-2.0) - 0.022_750_13).abs() < 1e-7);
    }
}
