//! Per-pixel separable kernel synthesis.
//!
//! Every output pixel is a sum over reference frames of a vertical 1D kernel
//! times a horizontal 1D kernel applied to the patch of that reference
//! centred on the pixel:
//!
//! ```text
//! out(c, x, y) = sum_r sum_{u,v} kv_r[u, x, y] * kh_r[v, x, y] * P_r(c, x + u - KS/2, y + v - KS/2)
//! ```
//!
//! `x` is the row and `y` the column. Patches that leave the frame are
//! reflect-padded (mirror without repeating the edge sample). The same
//! kernels are applied to every colour channel.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::media_io::Frame;
use crate::tensor::Tensor;

pub const DEFAULT_KERNEL_SIZE: usize = 31;

/// Vertical and horizontal kernels for a single reference, each `[KS, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPair<T = f32> {
    pub vertical: Tensor<T>,
    pub horizontal: Tensor<T>,
}

/// The kernel operands for every reference: three pairs with the
/// interpolated reference, two without it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField<T = f32> {
    pairs: Vec<KernelPair<T>>,
    kernel_size: usize,
    height: usize,
    width: usize,
}

impl<T: Float + Default> KernelField<T> {
    pub fn new(pairs: Vec<KernelPair<T>>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::shape("kernel field needs at least one pair"))?;
        if first.vertical.shape().len() != 3 {
            return Err(Error::shape(format!(
                "kernel arrays must be [KS,H,W], got {:?}",
                first.vertical.shape()
            )));
        }
        let (ks, h, w) = first.vertical.chw();
        if ks % 2 == 0 {
            return Err(Error::invalid(format!("kernel size {ks} must be odd")));
        }
        for (i, p) in pairs.iter().enumerate() {
            if p.vertical.shape() != [ks, h, w] || p.horizontal.shape() != [ks, h, w] {
                return Err(Error::shape(format!(
                    "kernel pair {i} has shapes {:?}/{:?}, expected [{ks},{h},{w}]",
                    p.vertical.shape(),
                    p.horizontal.shape()
                )));
            }
        }
        Ok(KernelField {
            pairs,
            kernel_size: ks,
            height: h,
            width: w,
        })
    }

    /// A field of all-zero kernels.
    pub fn zeros(n_pairs: usize, kernel_size: usize, height: usize, width: usize) -> Self {
        let z = Tensor::zeros(&[kernel_size, height, width]);
        KernelField {
            pairs: (0..n_pairs)
                .map(|_| KernelPair {
                    vertical: z.clone(),
                    horizontal: z.clone(),
                })
                .collect(),
            kernel_size,
            height,
            width,
        }
    }

    pub fn pairs(&self) -> &[KernelPair<T>] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [KernelPair<T>] {
        &mut self.pairs
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of 1D kernel arrays (six with the interpolated reference).
    pub fn n_arrays(&self) -> usize {
        2 * self.pairs.len()
    }
}

/// The references a B-frame is synthesised from.
#[derive(Debug, Clone)]
pub struct ReferenceTriple {
    /// Reconstruction of the preceding reference in display order.
    pub ref0: Frame,
    /// Reconstruction of the following reference in display order.
    pub ref2: Frame,
    /// Interpolated midpoint, absent in the four-kernel variant.
    pub refi: Option<Frame>,
}

impl ReferenceTriple {
    pub fn new(ref0: Frame, ref2: Frame, refi: Option<Frame>) -> Result<Self> {
        let dims = (ref0.width(), ref0.height());
        if (ref2.width(), ref2.height()) != dims {
            return Err(Error::shape("reference frames differ in size"));
        }
        if let Some(ri) = &refi {
            if (ri.width(), ri.height()) != dims {
                return Err(Error::shape("interpolated reference differs in size"));
            }
        }
        Ok(ReferenceTriple { ref0, ref2, refi })
    }

    /// Reference planes in kernel-pair order: ref0, ref2, then refi.
    pub fn planes(&self) -> Vec<&Tensor<f32>> {
        let mut v = vec![self.ref0.tensor(), self.ref2.tensor()];
        if let Some(ri) = &self.refi {
            v.push(ri.tensor());
        }
        v
    }
}

/// Mirror an index into `0..n` (reflection without edge repeat).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Fixed-order dot product. Eight interleaved partial sums, combined in a
/// fixed tree, so the result is identical on every IEEE platform.
#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for i in 0..chunks {
        let o = i * 8;
        for l in 0..8 {
            acc[l] = acc[l] + a[o + l] * b[o + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// Reflect-padded copy of a `[C,H,W]` plane set with `r` extra samples on
/// each side.
fn reflect_pad<T: Float + Default>(src: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = src.chw();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = Tensor::zeros(&[c, ph, pw]);
    let cols: Vec<usize> = (0..pw)
        .map(|j| reflect_index(j as isize - r as isize, w))
        .collect();
    let s = src.data();
    let o = out.data_mut();
    for ch in 0..c {
        for i in 0..ph {
            let si = reflect_index(i as isize - r as isize, h);
            let srow = &s[(ch * h + si) * w..(ch * h + si + 1) * w];
            let orow = &mut o[(ch * ph + i) * pw..(ch * ph + i + 1) * pw];
            for (dst, &sj) in orow.iter_mut().zip(&cols) {
                *dst = srow[sj];
            }
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: fold a padded gradient back onto the source grid.
fn reflect_fold<T: Float + Default>(padded: &Tensor<T>, r: usize, h: usize, w: usize) -> Tensor<T> {
    let (c, ph, pw) = padded.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let cols: Vec<usize> = (0..pw)
        .map(|j| reflect_index(j as isize - r as isize, w))
        .collect();
    let p = padded.data();
    let o = out.data_mut();
    for ch in 0..c {
        for i in 0..ph {
            let si = reflect_index(i as isize - r as isize, h);
            let prow = &p[(ch * ph + i) * pw..(ch * ph + i + 1) * pw];
            let orow = &mut o[(ch * h + si) * w..(ch * h + si + 1) * w];
            for (&g, &sj) in prow.iter().zip(&cols) {
                orow[sj] = orow[sj] + g;
            }
        }
    }
    out
}

fn check_term_shapes<T: Float + Default>(
    frame: &Tensor<T>,
    kv: &Tensor<T>,
    kh: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    if frame.shape().len() != 3 || kv.shape().len() != 3 {
        return Err(Error::shape("expected [C,H,W] frame and [KS,H,W] kernels"));
    }
    let (c, h, w) = frame.chw();
    let (ks, kh_, kw_) = kv.chw();
    if kh.shape() != kv.shape() {
        return Err(Error::shape(format!(
            "vertical kernels {:?} and horizontal kernels {:?} differ",
            kv.shape(),
            kh.shape()
        )));
    }
    if (kh_, kw_) != (h, w) {
        return Err(Error::shape(format!(
            "kernels cover {kh_}x{kw_} pixels, frame is {h}x{w}"
        )));
    }
    if ks % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {ks} must be odd")));
    }
    Ok((c, h, w, ks))
}

/// One reference's contribution: `kv * kh * P` at every pixel.
pub fn separable_term<T: Float + Default>(
    frame: &Tensor<T>,
    kv: &Tensor<T>,
    kh: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(frame.shape());
    accumulate_term(frame, kv, kh, &mut out)?;
    Ok(out)
}

/// Add one reference's contribution into `out`.
pub fn accumulate_term<T: Float + Default>(
    frame: &Tensor<T>,
    kv: &Tensor<T>,
    kh: &Tensor<T>,
    out: &mut Tensor<T>,
) -> Result<()> {
    let (c, h, w, ks) = check_term_shapes(frame, kv, kh)?;
    if out.shape() != frame.shape() {
        return Err(Error::shape("output buffer does not match frame"));
    }
    let r = ks / 2;
    let padded = reflect_pad(frame, r);
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let pd = padded.data();
    let (kvd, khd) = (kv.data(), kh.data());
    let hw = h * w;
    let mut kvp = vec![T::zero(); ks];
    let mut khp = vec![T::zero(); ks];
    let o = out.data_mut();
    for x in 0..h {
        for y in 0..w {
            let p = x * w + y;
            for u in 0..ks {
                kvp[u] = kvd[u * hw + p];
                khp[u] = khd[u * hw + p];
            }
            for ch in 0..c {
                let base = ch * ph * pw;
                let mut acc = T::zero();
                for u in 0..ks {
                    let row = &pd[base + (x + u) * pw + y..base + (x + u) * pw + y + ks];
                    acc = acc + kvp[u] * dot(&khp, row);
                }
                o[ch * hw + p] = o[ch * hw + p] + acc;
            }
        }
    }
    Ok(())
}

/// Gradients of one separable term.
#[derive(Debug, Clone)]
pub struct TermGrads<T> {
    pub d_vertical: Tensor<T>,
    pub d_horizontal: Tensor<T>,
    /// Gradient w.r.t. the reference frame, when requested.
    pub d_frame: Option<Tensor<T>>,
}

/// Backward pass of [`separable_term`] for upstream gradient `grad_out`.
pub fn separable_term_backward<T: Float + Default>(
    frame: &Tensor<T>,
    kv: &Tensor<T>,
    kh: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_frame_grad: bool,
) -> Result<TermGrads<T>> {
    let (c, h, w, ks) = check_term_shapes(frame, kv, kh)?;
    if grad_out.shape() != frame.shape() {
        return Err(Error::shape("gradient does not match frame"));
    }
    let r = ks / 2;
    let padded = reflect_pad(frame, r);
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let pd = padded.data();
    let (kvd, khd, gd) = (kv.data(), kh.data(), grad_out.data());
    let hw = h * w;
    let mut dkv = Tensor::zeros(kv.shape());
    let mut dkh = Tensor::zeros(kh.shape());
    let mut dpad = if want_frame_grad {
        Some(Tensor::zeros(&[c, ph, pw]))
    } else {
        None
    };
    let mut kvp = vec![T::zero(); ks];
    let mut khp = vec![T::zero(); ks];
    let mut gkv = vec![T::zero(); ks];
    let mut gkh = vec![T::zero(); ks];
    for x in 0..h {
        for y in 0..w {
            let p = x * w + y;
            for u in 0..ks {
                kvp[u] = kvd[u * hw + p];
                khp[u] = khd[u * hw + p];
                gkv[u] = T::zero();
                gkh[u] = T::zero();
            }
            for ch in 0..c {
                let g = gd[ch * hw + p];
                if g == T::zero() {
                    continue;
                }
                let base = ch * ph * pw;
                for u in 0..ks {
                    let off = base + (x + u) * pw + y;
                    let row = &pd[off..off + ks];
                    gkv[u] = gkv[u] + g * dot(&khp, row);
                    let gu = g * kvp[u];
                    for v in 0..ks {
                        gkh[v] = gkh[v] + gu * row[v];
                    }
                    if let Some(dp) = dpad.as_mut() {
                        let drow = &mut dp.data_mut()[off..off + ks];
                        for v in 0..ks {
                            drow[v] = drow[v] + gu * khp[v];
                        }
                    }
                }
            }
            let (dv, dh) = (dkv.data_mut(), dkh.data_mut());
            for u in 0..ks {
                dv[u * hw + p] = gkv[u];
            }
            for v in 0..ks {
                dh[v * hw + p] = gkh[v];
            }
        }
    }
    Ok(TermGrads {
        d_vertical: dkv,
        d_horizontal: dkh,
        d_frame: dpad.map(|dp| reflect_fold(&dp, r, h, w)),
    })
}

fn check_synth_inputs<T: Float + Default>(refs: &[&Tensor<T>], field: &KernelField<T>) -> Result<()> {
    if refs.len() != field.pairs.len() {
        return Err(Error::shape(format!(
            "{} references for {} kernel pairs",
            refs.len(),
            field.pairs.len()
        )));
    }
    let shape = refs[0].shape();
    if refs.iter().any(|r| r.shape() != shape) {
        return Err(Error::shape("references differ in shape"));
    }
    if shape.len() != 3 || shape[1] != field.height || shape[2] != field.width {
        return Err(Error::shape(format!(
            "references {:?} do not match kernel field {}x{}",
            shape, field.height, field.width
        )));
    }
    Ok(())
}

/// Sum of the separable terms of every reference. The result is not
/// clamped; see [`clamp_to_frame`].
pub fn synthesize<T: Float + Default>(refs: &[&Tensor<T>], field: &KernelField<T>) -> Result<Tensor<T>> {
    check_synth_inputs(refs, field)?;
    let mut out = Tensor::zeros(refs[0].shape());
    for (r, pair) in refs.iter().zip(&field.pairs) {
        accumulate_term(r, &pair.vertical, &pair.horizontal, &mut out)?;
    }
    Ok(out)
}

/// [`synthesize`] over a [`ReferenceTriple`], clamped into a frame.
pub fn synthesize_frame(refs: &ReferenceTriple, field: &KernelField<f32>) -> Result<Frame> {
    let out = synthesize(&refs.planes(), field)?;
    Ok(clamp_to_frame(out))
}

pub fn clamp_to_frame(t: Tensor<f32>) -> Frame {
    Frame::from_tensor_clamped(t.map(|v| v.clamp(0.0, 1.0)))
}

/// Direct evaluation of the synthesis sum, one output sample at a time,
/// with reflection computed per tap. Intended for small inputs.
pub fn oracle_synthesize<T: Float + Default>(
    refs: &[&Tensor<T>],
    field: &KernelField<T>,
) -> Result<Tensor<T>> {
    check_synth_inputs(refs, field)?;
    let (c, h, w) = refs[0].chw();
    let ks = field.kernel_size;
    let half = (ks / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    let hw = h * w;
    for (r, pair) in refs.iter().zip(&field.pairs) {
        let (pv, ph, src) = (pair.vertical.data(), pair.horizontal.data(), r.data());
        for ch in 0..c {
            for x in 0..h {
                for y in 0..w {
                    let mut acc = T::zero();
                    for u in 0..ks {
                        for v in 0..ks {
                            let sx = reflect_index(x as isize + u as isize - half, h);
                            let sy = reflect_index(y as isize + v as isize - half, w);
                            acc = acc
                                + pv[u * hw + x * w + y]
                                    * ph[v * hw + x * w + y]
                                    * src[ch * hw + sx * w + sy];
                        }
                    }
                    let o = out.data_mut();
                    o[ch * hw + x * w + y] = o[ch * hw + x * w + y] + acc;
                }
            }
        }
    }
    Ok(out)
}
