//! Full-reference and no-reference image quality metrics, computed in `f64`.

pub mod constants;
mod report;

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use crate::image::Image;
use constants::*;

pub use report::{MetricReport, MetricRow, METRIC_NAMES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image pair has different extents: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("{metric} needs images of at least {min}x{min} pixels, got {height}x{width}")]
    TooSmall {
        metric: &'static str,
        min: usize,
        height: usize,
        width: usize,
    },
}

fn same(a: &Image, b: &Image) -> Result<(), MetricError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(MetricError::Shape((a.height(), a.width()), (b.height(), b.width())));
    }
    Ok(())
}

fn pixels(a: &Image) -> impl Iterator<Item = f64> + '_ {
    a.data().iter().map(|v| *v as f64)
}

/// 8-bit level of a unit-range value, rounding half up and clamping.
pub fn quantize8(v: f32) -> usize {
    ((v as f64 * 255.0).round().clamp(0.0, 255.0)) as usize
}

fn entropy(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn en(a: &Image) -> f64 {
    let mut hist = [0usize; HIST_BINS];
    for v in a.data() {
        hist[quantize8(*v)] += 1;
    }
    entropy(&hist, a.len())
}

fn mean(a: &Image) -> f64 {
    pixels(a).sum::<f64>() / a.len() as f64
}

/// Population standard deviation on the unit scale.
pub fn sd(a: &Image) -> f64 {
    let m = mean(a);
    (pixels(a).map(|v| (v - m) * (v - m)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Mutual information (bits) of the joint 8-bit histogram.
pub fn mi(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same(a, b)?;
    let mut joint = vec![0usize; HIST_BINS * HIST_BINS];
    let mut ha = [0usize; HIST_BINS];
    let mut hb = [0usize; HIST_BINS];
    for (x, y) in a.data().iter().zip(b.data()) {
        let (i, j) = (quantize8(*x), quantize8(*y));
        joint[i * HIST_BINS + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    for i in 0..HIST_BINS {
        if ha[i] == 0 {
            continue;
        }
        for j in 0..HIST_BINS {
            let c = joint[i * HIST_BINS + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            // p(i,j) / (p(i) p(j)) = c n / (ha hb)
            total += pij * (c as f64 * n / (ha[i] as f64 * hb[j] as f64)).log2();
        }
    }
    Ok(total)
}

/// `10 log10(1 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same(a, b)?;
    let mse = pixels(a)
        .zip(pixels(b))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Sum of correlations of differences:
/// `corr(fused - src_b, src_a) + corr(fused - src_a, src_b)`.
pub fn scd(fused: &Image, src_a: &Image, src_b: &Image) -> Result<f64, MetricError> {
    same(fused, src_a)?;
    same(fused, src_b)?;
    let f: Vec<f64> = pixels(fused).collect();
    let a: Vec<f64> = pixels(src_a).collect();
    let b: Vec<f64> = pixels(src_b).collect();
    let d_fb: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x - y).collect();
    let d_fa: Vec<f64> = f.iter().zip(&a).map(|(x, y)| x - y).collect();
    Ok(pearson(&d_fb, &a) + pearson(&d_fa, &b))
}

/// Sobel responses with replicated borders.
fn sobel(a: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (a.height() as i64, a.width() as i64);
    let px = |r: i64, c: i64| a.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize) as f64;
    let mut gx = Vec::with_capacity(a.len());
    let mut gy = Vec::with_capacity(a.len());
    for r in 0..h {
        for c in 0..w {
            gx.push(
                (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1))
                    - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1)),
            );
            gy.push(
                (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1))
                    - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1)),
            );
        }
    }
    (gx, gy)
}

fn orientation(gx: f64, gy: f64) -> f64 {
    if gx == 0.0 {
        FRAC_PI_2
    } else {
        (gy / gx).atan()
    }
}

/// Gradient-information preservation from `src` into `fused`, weighted by
/// the source edge strength. Returns 0 when the source has no edges.
pub fn qabf(fused: &Image, src: &Image) -> Result<f64, MetricError> {
    same(fused, src)?;
    let (fx, fy) = sobel(fused);
    let (sx, sy) = sobel(src);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..fx.len() {
        let ga = (sx[i] * sx[i] + sy[i] * sy[i]).sqrt();
        if ga == 0.0 {
            continue;
        }
        let gf = (fx[i] * fx[i] + fy[i] * fy[i]).sqrt();
        let g = if gf > ga { ga / gf } else { gf / ga };
        let alpha = 1.0 - (orientation(sx[i], sy[i]) - orientation(fx[i], fy[i])).abs() / FRAC_PI_2;
        let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
        let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (alpha - QABF_SIGMA_A)).exp());
        num += qg * qa * ga;
        den += ga;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Value of [`qabf`] when the fused image reproduces the source exactly.
pub fn qabf_plateau() -> f64 {
    QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (1.0 - QABF_SIGMA_G)).exp())
        * QABF_GAMMA_A
        / (1.0 + (QABF_KAPPA_A * (1.0 - QABF_SIGMA_A)).exp())
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Row-major plane of `f64` with extents.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn of(a: &Image, scale: f64) -> Self {
        Self {
            h: a.height(),
            w: a.width(),
            v: pixels(a).map(|x| x * scale).collect(),
        }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Separable 'valid' correlation with a symmetric kernel.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for r in 0..self.h {
            for c in 0..ow {
                rows[r * ow + c] = (0..n).map(|j| k[j] * self.v[r * self.w + c + j]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                v.push(self.v[2 * r * self.w + 2 * c]);
            }
        }
        Plane { h, w, v }
    }
}

/// Smallest extent for which every VIF scale still has a valid window.
pub const VIF_MIN_SIZE: usize = 41;

/// Pixel-domain visual information fidelity of `dist` w.r.t. `reference`
/// over four Gaussian-pyramid scales, on a 0-255 intensity scale.
pub fn vif(reference: &Image, dist: &Image) -> Result<f64, MetricError> {
    same(reference, dist)?;
    if reference.height() < VIF_MIN_SIZE || reference.width() < VIF_MIN_SIZE {
        return Err(MetricError::TooSmall {
            metric: "VIF",
            min: VIF_MIN_SIZE,
            height: reference.height(),
            width: reference.width(),
        });
    }
    let mut r = Plane::of(reference, 255.0);
    let mut d = Plane::of(dist, 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..VIF_SCALES {
        let n = (1usize << (VIF_SCALES - scale)) + 1;
        let win = gaussian_1d(n, n as f64 / 5.0);
        if scale > 0 {
            r = r.filter_valid(&win).decimate();
            d = d.filter_valid(&win).decimate();
        }
        let mu1 = r.filter_valid(&win);
        let mu2 = d.filter_valid(&win);
        let e11 = r.zip(&r, |a, b| a * b).filter_valid(&win);
        let e22 = d.zip(&d, |a, b| a * b).filter_valid(&win);
        let e12 = r.zip(&d, |a, b| a * b).filter_valid(&win);
        for i in 0..mu1.v.len() {
            let (m1, m2) = (mu1.v[i], mu2.v[i]);
            let mut s1 = (e11.v[i] - m1 * m1).max(0.0);
            let s2 = (e22.v[i] - m2 * m2).max(0.0);
            let s12 = e12.v[i] - m1 * m2;
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(VIF_EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Mean single-scale SSIM over valid 11x11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            metric: "SSIM",
            min: SSIM_WINDOW,
            height: a.height(),
            width: a.width(),
        });
    }
    let win = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let pa = Plane::of(a, 1.0);
    let pb = Plane::of(b, 1.0);
    let mu_a = pa.filter_valid(&win);
    let mu_b = pb.filter_valid(&win);
    let e_aa = pa.zip(&pa, |x, y| x * y).filter_valid(&win);
    let e_bb = pb.zip(&pb, |x, y| x * y).filter_valid(&win);
    let e_ab = pa.zip(&pb, |x, y| x * y).filter_valid(&win);
    let mut total = 0.0;
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = e_aa.v[i] - ma * ma;
        let vb = e_bb.v[i] - mb * mb;
        let cov = e_ab.v[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.v.len() as f64)
}
