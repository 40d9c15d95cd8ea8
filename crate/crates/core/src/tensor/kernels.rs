//! Raw loops behind the graph operations. Everything here works on flat
//! row-major slices; shapes are validated by the caller.
//!
//! Reductions use a fixed accumulation order so results are bit-identical
//! from run to run.

use super::Real;

/// Dot product with eight interleaved partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for k in 0..8 {
            acc[k] = acc[k] + x[k];
        }
    }
    let mut tail = T::zero();
    for x in r {
        tail = tail + *x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], w: T, x: &[T]) {
    for (o, i) in y.iter_mut().zip(x) {
        *o = *o + w * *i;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output index range `[lo, hi)` along one axis for kernel tap `k`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // need 0 <= o*s + off < extent
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_excl = if extent as isize - off <= 0 {
            0
        } else {
            (extent as isize - 1 - off) / s + 1
        };
        let lo = lo.max(0) as usize;
        let hi = (hi_excl.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut out = vec![T::zero(); g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let o_off = (n * g.c_out + oc) * plane_out;
            let dst = &mut out[o_off..o_off + plane_out];
            if let Some(b) = bias {
                dst.fill(b[oc]);
            }
            for ic in 0..g.c_in {
                let src = &input[(n * g.c_in + ic) * plane_in..][..plane_in];
                let kbase = (oc * g.c_in + ic) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let wgt = kernel[kbase + ky * g.kw + kx];
                        if wgt == T::zero() {
                            continue;
                        }
                        let (x0, x1) = g.valid(kx, g.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &mut dst[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(
                                    &mut row[x0..x1],
                                    wgt,
                                    &src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)],
                                );
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    row[ox] = row[ox] + wgt * src[iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward_input<T: Real>(g: &ConvGeom, dout: &[T], kernel: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut din = vec![T::zero(); g.n * g.c_in * plane_in];
    for n in 0..g.n {
        for ic in 0..g.c_in {
            let d_off = (n * g.c_in + ic) * plane_in;
            let dst = &mut din[d_off..d_off + plane_in];
            for oc in 0..g.c_out {
                let src = &dout[(n * g.c_out + oc) * plane_out..][..plane_out];
                let kbase = (oc * g.c_in + ic) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, oh);
                    for kx in 0..g.kw {
                        let wgt = kernel[kbase + ky * g.kw + kx];
                        if wgt == T::zero() {
                            continue;
                        }
                        let (x0, x1) = g.valid(kx, g.w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &src[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(
                                    &mut dst[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)],
                                    wgt,
                                    &grow[x0..x1],
                                );
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    dst[iy * g.w + ix] = dst[iy * g.w + ix] + wgt * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

pub fn conv2d_backward_kernel<T: Real>(g: &ConvGeom, dout: &[T], input: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let plane_out = oh * ow;
    let mut dk = vec![T::zero(); g.c_out * g.c_in * g.kh * g.kw];
    let mut strided = Vec::new();
    for oc in 0..g.c_out {
        for ic in 0..g.c_in {
            let kbase = (oc * g.c_in + ic) * g.kh * g.kw;
            for ky in 0..g.kh {
                let (y0, y1) = g.valid(ky, g.h, oh);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid(kx, g.w, ow);
                    let mut acc = T::zero();
                    if x0 < x1 {
                        for n in 0..g.n {
                            let src = &input[(n * g.c_in + ic) * plane_in..][..plane_in];
                            let grd = &dout[(n * g.c_out + oc) * plane_out..][..plane_out];
                            for oy in y0..y1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &grd[oy * ow + x0..oy * ow + x1];
                                if g.stride == 1 {
                                    let ix0 = x0 + kx - g.pad;
                                    acc = acc
                                        + dot(grow, &src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)]);
                                } else {
                                    strided.clear();
                                    strided.extend(
                                        (x0..x1).map(|ox| src[iy * g.w + ox * g.stride + kx - g.pad]),
                                    );
                                    acc = acc + dot(grow, &strided);
                                }
                            }
                        }
                    }
                    dk[kbase + ky * g.kw + kx] = acc;
                }
            }
        }
    }
    dk
}

/// Per-channel sum over batch and spatial axes, the bias gradient of a conv.
pub fn channel_sums<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o = *o + sum(&x[(b * c + ch) * plane..][..plane]);
        }
    }
    out
}

/// 2x2 average pooling on `planes` planes of `h x w`.
pub fn down2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] = ((src[i] + src[i + 1]) + (src[i + w] + src[i + w + 1])) * quarter;
            }
        }
    }
    out
}

pub fn down2_backward<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..][..oh * ow];
        let dst = &mut out[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    out
}

/// Source taps for 2x bilinear upsampling with half-pixel centers and edge
/// clamping: output `o` reads `(i0, 1 - f)` and `(i1, f)`.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let fl = src.floor();
            let f = src - fl;
            let i0 = (fl as isize).clamp(0, n as isize - 1) as usize;
            let i1 = (fl as isize + 1).clamp(0, n as isize - 1) as usize;
            (i0, i1, f)
        })
        .collect()
}

pub fn up2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for iy in 0..h {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::of(f);
                rows[iy * ow + ox] = src[iy * w + i0] * (T::one() - f) + src[iy * w + i1] * f;
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::of(f);
            let g = T::one() - f;
            for ox in 0..ow {
                dst[oy * ow + ox] = rows[i0 * ow + ox] * g + rows[i1 * ow + ox] * f;
            }
        }
    }
    out
}

pub fn up2_backward<T: Real>(grad: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let mut out = vec![T::zero(); planes * h * w];
    let mut rows = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &grad[p * oh * ow..][..oh * ow];
        rows.fill(T::zero());
        for (oy, &(i0, i1, f)) in ty.iter().enumerate() {
            let f = T::of(f);
            let g = T::one() - f;
            for ox in 0..ow {
                let v = src[oy * ow + ox];
                rows[i0 * ow + ox] = rows[i0 * ow + ox] + v * g;
                rows[i1 * ow + ox] = rows[i1 * ow + ox] + v * f;
            }
        }
        let dst = &mut out[p * h * w..][..h * w];
        for iy in 0..h {
            for (ox, &(i0, i1, f)) in tx.iter().enumerate() {
                let f = T::of(f);
                let v = rows[iy * ow + ox];
                dst[iy * w + i0] = dst[iy * w + i0] + v * (T::one() - f);
                dst[iy * w + i1] = dst[iy * w + i1] + v * f;
            }
        }
    }
    out
}

/// `a[m,k] @ b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Applies `y = A x B^T` to each `h x w` plane, with `A: h x h`, `B: w x w`.
pub fn separable<T: Real>(x: &[T], planes: usize, h: usize, w: usize, a: &[T], b: &[T]) -> Vec<T> {
    let bt = transpose(b, w, w);
    let mut out = Vec::with_capacity(x.len());
    for p in 0..planes {
        let plane = &x[p * h * w..][..h * w];
        let tmp = matmul(plane, &bt, h, w, w);
        out.extend(matmul(a, &tmp, h, h, w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.c_out * oh * ow];
        for n in 0..g.n {
            for oc in 0..g.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x[((n * g.c_in + ic) * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((oc * g.c_in + ic) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        let mut seed = 7u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(stride, pad, h, w) in &[(1, 0, 5, 6), (1, 1, 5, 5), (2, 1, 7, 6), (2, 0, 8, 8), (3, 2, 9, 7)] {
            let g = ConvGeom { n: 2, c_in: 3, h, w, c_out: 2, kh: 3, kw: 3, stride, pad };
            let x: Vec<f64> = (0..g.n * g.c_in * h * w).map(|_| rnd()).collect();
            let k: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|_| rnd()).collect();
            let fast = conv2d_forward(&g, &x, &k, None);
            let slow = naive_conv(&g, &x, &k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn up2_interpolates_with_quarter_weights() {
        let x = [0.0f64, 1.0];
        let y = up2(&x, 1, 1, 2);
        assert_eq!(y.len(), 8);
        assert_eq!(&y[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y[..4], &y[4..]);
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..13).map(|v| v as f64).collect();
        assert_eq!(dot(&a, &a), (0..13).map(|v| (v * v) as f64).sum::<f64>());
        assert_eq!(sum(&a), 78.0);
    }
}
