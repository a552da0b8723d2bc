//! Forward and backward numeric routines behind the tape ops.

use super::Element;

/// Stride, dilation and symmetric zero padding of a square 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent for an input extent, or `None` when the input is too small.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose tap `iw = ow·s + off − pad` lands inside `[0, w)`.
fn valid_range(out: usize, w: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(off).div_ceil(stride);
    let hi = if w + pad > off {
        (w + pad - off - 1) / stride + 1
    } else {
        0
    };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

fn im2col<F: Element>(x: &[F], d: &ConvDims, g: ConvGeom, cols: &mut [F]) {
    let hw = d.out_hw();
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(d.wo, d.w, g.stride, kj * g.dilation, g.pad);
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let seg = &mut dst[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize || lo == hi {
                        seg.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    seg[..lo].fill(F::zero());
                    seg[hi..].fill(F::zero());
                    let first = lo * g.stride + kj * g.dilation - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (i, out) in seg[lo..hi].iter_mut().enumerate() {
                            *out = src[first + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(cols: &[F], d: &ConvDims, g: ConvGeom, dx: &mut [F]) {
    let hw = d.out_hw();
    for c in 0..d.c {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(d.wo, d.w, g.stride, kj * g.dilation, g.pad);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj * g.dilation - g.pad;
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let s = &src[oh * d.wo + lo..oh * d.wo + hi];
                    if g.stride == 1 {
                        for (o, v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *o += *v;
                        }
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            dst[first + i * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Element>(x: &[F], w: &[F], b: Option<&[F]>, d: &ConvDims, g: ConvGeom) -> Vec<F> {
    let hw = d.out_hw();
    let mut out = vec![F::zero(); d.n * d.co * hw];
    let mut cols = vec![F::zero(); d.ckk() * hw];
    for n in 0..d.n {
        im2col(&x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], d, g, &mut cols);
        let dst = &mut out[n * d.co * hw..(n + 1) * d.co * hw];
        F::gemm(d.co, d.ckk(), hw, w, false, &cols, false, dst, false);
        if let Some(b) = b {
            for (co, &bias) in b.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub(crate) fn conv2d_backward<F: Element>(
    x: &[F],
    w: &[F],
    gout: &[F],
    d: &ConvDims,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>, Vec<F>) {
    let hw = d.out_hw();
    let in_sz = d.c * d.h * d.w;
    let mut dx = need_dx.then(|| vec![F::zero(); d.n * in_sz]);
    let mut dw = need_dw.then(|| vec![F::zero(); d.co * d.ckk()]);
    let mut db = vec![F::zero(); d.co];
    let mut cols = vec![F::zero(); d.ckk() * hw];
    let mut dcols = vec![F::zero(); d.ckk() * hw];
    for n in 0..d.n {
        let go = &gout[n * d.co * hw..(n + 1) * d.co * hw];
        for co in 0..d.co {
            db[co] += go[co * hw..(co + 1) * hw].iter().copied().sum::<F>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * in_sz..(n + 1) * in_sz], d, g, &mut cols);
            F::gemm(d.co, hw, d.ckk(), go, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            F::gemm(d.ckk(), d.co, hw, w, true, go, false, &mut dcols, false);
            col2im(&dcols, d, g, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    (dx, dw, db)
}

/// Row-major strides for `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each input element, the flat index of the output element it reduces into.
pub(crate) fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    // Stride each input axis contributes to the output index (0 for reduced axes).
    let mut contrib = Vec::with_capacity(shape.len());
    let mut j = 0;
    for i in 0..shape.len() {
        if axes.contains(&i) {
            contrib.push(0);
        } else {
            contrib.push(out_strides[j]);
            j += 1;
        }
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += contrib[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= contrib[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

pub(crate) fn upsample2_forward<F: Element>(x: &[F], nc: usize, h: usize, w: usize) -> Vec<F> {
    let mut out = vec![F::zero(); nc * 4 * h * w];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let r0 = 2 * i * 2 * w + 2 * j;
                let r1 = r0 + 2 * w;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r1] = v;
                dst[r1 + 1] = v;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<F: Element>(g: &[F], nc: usize, h: usize, w: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); nc * h * w];
    for p in 0..nc {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let r0 = 2 * i * 2 * w + 2 * j;
                let r1 = r0 + 2 * w;
                dx[p * h * w + i * w + j] = src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1];
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `[N, C, H*W]`.
pub(crate) fn channel_moments<F: Element>(x: &[F], n: usize, c: usize, hw: usize) -> (Vec<F>, Vec<F>) {
    let count = F::of((n * hw) as f64);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ch in 0..c {
        let mut s = F::zero();
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<F>();
        }
        let m = s / count;
        let mut v = F::zero();
        for b in 0..n {
            for &e in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

pub(crate) fn softmax_rows<F: Element>(x: &[F], rows: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * k];
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let dst = &mut out[r * k..(r + 1) * k];
        let mut sum = F::zero();
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        dst.iter_mut().for_each(|o| *o /= sum);
    }
    out
}
