//! Slice-level compute kernels over B×C×H×W buffers.
//!
//! These carry no shape validation beyond debug assertions; the tape layer
//! validates geometry before calling in.

use crate::real::Real;

/// Stride / dilation / padding of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeom {
            stride,
            dilation,
            padding,
        }
    }

    /// Side of the dilated kernel footprint: `(n - 1) * r + 1`.
    pub fn effective(&self, kernel: usize) -> usize {
        (kernel - 1) * self.dilation + 1
    }

    /// Output extent of a convolution, or `None` when it would be < 1.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        let eff = self.effective(kernel);
        if self.stride == 0 || padded < eff {
            return None;
        }
        Some((padded - eff) / self.stride + 1)
    }

    /// Output extent of the adjoint (transposed) convolution.
    pub fn transposed_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.effective(kernel);
        if self.stride == 0 || full <= 2 * self.padding {
            return None;
        }
        Some(full - 2 * self.padding)
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o * stride + offset`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, out_len: usize, in_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Shapes of a convolution call: input `[b, c, h, w]`, weight `[o, c, k, k]`,
/// output `[b, o, oh, ow]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
}

/// Cross-correlation accumulated into `out`.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], out: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let ConvDims {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        out_h,
        out_w,
        kernel: k,
    } = *d;
    let (ihw, ohw) = (in_h * in_w, out_h * out_w);
    let s = g.stride;
    for b in 0..batch {
        for oc in 0..out_ch {
            let o_plane = &mut out[(b * out_ch + oc) * ohw..][..ohw];
            for ic in 0..in_ch {
                let i_plane = &x[(b * in_ch + ic) * ihw..][..ihw];
                let w_base = (oc * in_ch + ic) * k * k;
                for ky in 0..k {
                    let offy = (ky * g.dilation) as isize - g.padding as isize;
                    let (oy0, oy1) = valid_range(offy, s, out_h, in_h);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        let offx = (kx * g.dilation) as isize - g.padding as isize;
                        let (ox0, ox1) = valid_range(offx, s, out_w, in_w);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + offy;
                            let irow = &i_plane[iy as usize * in_w..][..in_w];
                            let orow = &mut o_plane[oy * out_w..][..out_w];
                            if s == 1 {
                                let start = (ox0 as isize + offx) as usize;
                                let src = &irow[start..start + (ox1 - ox0)];
                                for (o, &iv) in orow[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * iv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_forward`] w.r.t. its input, accumulated into `dx`.
/// This is also the forward pass of the transposed convolution.
pub fn conv_backward_input<T: Real>(dy: &[T], w: &[T], dx: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let ConvDims {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        out_h,
        out_w,
        kernel: k,
    } = *d;
    let (ihw, ohw) = (in_h * in_w, out_h * out_w);
    let s = g.stride;
    for b in 0..batch {
        for oc in 0..out_ch {
            let o_plane = &dy[(b * out_ch + oc) * ohw..][..ohw];
            for ic in 0..in_ch {
                let i_plane = &mut dx[(b * in_ch + ic) * ihw..][..ihw];
                let w_base = (oc * in_ch + ic) * k * k;
                for ky in 0..k {
                    let offy = (ky * g.dilation) as isize - g.padding as isize;
                    let (oy0, oy1) = valid_range(offy, s, out_h, in_h);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        let offx = (kx * g.dilation) as isize - g.padding as isize;
                        let (ox0, ox1) = valid_range(offx, s, out_w, in_w);
                        if ox0 == ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + offy;
                            let irow = &mut i_plane[iy as usize * in_w..][..in_w];
                            let orow = &o_plane[oy * out_w..][..out_w];
                            if s == 1 {
                                let start = (ox0 as isize + offx) as usize;
                                let dst = &mut irow[start..start + (ox1 - ox0)];
                                for (i, &ov) in dst.iter_mut().zip(&orow[ox0..ox1]) {
                                    *i += wv * ov;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ((ox * s) as isize + offx) as usize;
                                    irow[ix] += wv * orow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_forward`] w.r.t. its weights, accumulated into `dw`.
pub fn conv_backward_weight<T: Real>(dy: &[T], x: &[T], dw: &mut [T], d: &ConvDims, g: &ConvGeom) {
    let ConvDims {
        batch,
        in_ch,
        in_h,
        in_w,
        out_ch,
        out_h,
        out_w,
        kernel: k,
    } = *d;
    let (ihw, ohw) = (in_h * in_w, out_h * out_w);
    let s = g.stride;
    for b in 0..batch {
        for oc in 0..out_ch {
            let o_plane = &dy[(b * out_ch + oc) * ohw..][..ohw];
            for ic in 0..in_ch {
                let i_plane = &x[(b * in_ch + ic) * ihw..][..ihw];
                let w_base = (oc * in_ch + ic) * k * k;
                for ky in 0..k {
                    let offy = (ky * g.dilation) as isize - g.padding as isize;
                    let (oy0, oy1) = valid_range(offy, s, out_h, in_h);
                    for kx in 0..k {
                        let offx = (kx * g.dilation) as isize - g.padding as isize;
                        let (ox0, ox1) = valid_range(offx, s, out_w, in_w);
                        if ox0 == ox1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = (oy * s) as isize + offy;
                            let irow = &i_plane[iy as usize * in_w..][..in_w];
                            let orow = &o_plane[oy * out_w..][..out_w];
                            for ox in ox0..ox1 {
                                let ix = ((ox * s) as isize + offx) as usize;
                                acc += orow[ox] * irow[ix];
                            }
                        }
                        dw[w_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Average pooling window description. The divisor counts only taps that
/// fall inside the input, so a constant map is a fixed point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub ceil_mode: bool,
}

impl PoolGeom {
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        let span = padded - self.kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // last window must start inside the input or left padding
        if self.ceil_mode && (out - 1) * self.stride >= input + self.padding {
            out -= 1;
        }
        Some(out)
    }

    fn window(&self, o: usize, input: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize, (end.min(input as isize)) as usize)
    }
}

pub fn avg_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    g: &PoolGeom,
    out: &mut [T],
) {
    for p in 0..planes {
        let ip = &x[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let (y0, y1) = g.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = g.window(ox, w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += ip[iy * w + ix];
                    }
                }
                op[oy * ow + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0));
            }
        }
    }
}

pub fn avg_pool_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    g: &PoolGeom,
    dx: &mut [T],
) {
    for p in 0..planes {
        let gp = &dy[p * oh * ow..][..oh * ow];
        let ip = &mut dx[p * h * w..][..h * w];
        for oy in 0..oh {
            let (y0, y1) = g.window(oy, h);
            for ox in 0..ow {
                let (x0, x1) = g.window(ox, w);
                let share = gp[oy * ow + ox] / T::from_usize((y1 - y0) * (x1 - x0));
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        ip[iy * w + ix] += share;
                    }
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel (align-corners false) bilinear
/// resize: `(lo, hi, weight_of_hi)` per output index.
pub fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, T::lit(frac))
        })
        .collect()
}

pub fn bilinear_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for p in 0..planes {
        let ip = &x[p * h * w..][..h * w];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = ip[y0 * w + x0] * (T::one() - fx) + ip[y0 * w + x1] * fx;
                let bot = ip[y1 * w + x0] * (T::one() - fx) + ip[y1 * w + x1] * fx;
                op[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
}

pub fn bilinear_backward<T: Real>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    for p in 0..planes {
        let gp = &dy[p * oh * ow..][..oh * ow];
        let ip = &mut dx[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gp[oy * ow + ox];
                let (gt, gb) = (g * (T::one() - fy), g * fy);
                ip[y0 * w + x0] += gt * (T::one() - fx);
                ip[y0 * w + x1] += gt * fx;
                ip[y1 * w + x0] += gb * (T::one() - fx);
                ip[y1 * w + x1] += gb * fx;
            }
        }
    }
}

/// Softmax over each contiguous plane of `plane_len` values.
pub fn softmax_planes<T: Real>(x: &[T], plane_len: usize, out: &mut [T]) {
    for (src, dst) in x.chunks(plane_len).zip(out.chunks_mut(plane_len)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
}

pub fn softmax_planes_backward<T: Real>(y: &[T], dy: &[T], plane_len: usize, dx: &mut [T]) {
    for ((yp, gp), dp) in y
        .chunks(plane_len)
        .zip(dy.chunks(plane_len))
        .zip(dx.chunks_mut(plane_len))
    {
        let inner: T = yp.iter().zip(gp).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dp.iter_mut().zip(yp).zip(gp) {
            *d += yv * (gv - inner);
        }
    }
}

/// Per-channel batch statistics over (B, H, W): biased mean and variance.
pub fn channel_stats<T: Real>(x: &[T], [b, c, h, w]: [usize; 4]) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let count = T::from_usize(b * hw);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for bi in 0..b {
            for &xv in &x[(bi * c + ch) * hw..][..hw] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for offset in -5isize..5 {
            for stride in 1..4 {
                for out_len in 1..7 {
                    for in_len in 1..9 {
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(offset, stride, out_len, in_len);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), brute);
                    }
                }
            }
        }
    }

    #[test]
    fn geometry_formulas() {
        let g = ConvGeom::new(1, 1, 0);
        assert_eq!(g.effective(3), 3);
        assert_eq!(ConvGeom::new(1, 8, 0).effective(3), 17);
        assert_eq!(ConvGeom::new(2, 1, 1).out_extent(64, 3), Some(32));
        assert_eq!(ConvGeom::new(1, 1, 0).out_extent(2, 3), None);
        assert_eq!(ConvGeom::new(2, 1, 0).transposed_extent(4, 2), Some(8));
    }

    #[test]
    fn pool_extents() {
        let half = PoolGeom {
            kernel: 2,
            stride: 2,
            padding: 0,
            ceil_mode: true,
        };
        assert_eq!(half.out_extent(32), Some(16));
        assert_eq!(half.out_extent(5), Some(3));
        assert_eq!(half.out_extent(1), None);
        let same = PoolGeom {
            kernel: 3,
            stride: 1,
            padding: 1,
            ceil_mode: false,
        };
        assert_eq!(same.out_extent(7), Some(7));
    }

    #[test]
    fn bilinear_taps_half_pixel() {
        let t = bilinear_taps::<f64>(2, 4);
        let vals: Vec<f64> = t
            .iter()
            .map(|&(lo, hi, f)| [0.0, 1.0][lo] * (1.0 - f) + [0.0, 1.0][hi] * f)
            .collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
