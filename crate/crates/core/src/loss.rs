//! Training criterion: weighted L1 plus structural dissimilarity.

use crate::metrics::constants::{SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 1.1,
        }
    }
}

/// Normalised `size x size` Gaussian as an OIHW kernel.
pub fn gaussian_kernel<T: Real>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut data = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            data.push(T::of(a * b / (s * s)));
        }
    }
    Tensor::new(vec![1, 1, size, size], data).expect("sized")
}

/// Mean single-scale SSIM over all valid windows of an `[N, 1, H, W]` pair.
pub fn ssim<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s != g.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            lhs: s,
            rhs: g.shape(b).to_vec(),
        });
    }
    if s.len() != 4 || s[1] != 1 || s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(TensorError::InvalidArgument {
            op: "ssim",
            msg: format!("need [N, 1, H, W] with H, W >= {SSIM_WINDOW}, got {s:?}"),
        });
    }
    let k = g.constant(gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA));
    let filt = |g: &mut Graph<T>, v: Var| g.conv2d(v, k, None, 1, 0);
    let mu_a = filt(g, a)?;
    let mu_b = filt(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = filt(g, aa)?;
    let e_bb = filt(g, bb)?;
    let e_ab = filt(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let two = T::of(2.0);
    let n1 = g.scale(mu_ab, two);
    let n1 = g.add_scalar(n1, T::of(SSIM_C1));
    let n2 = g.scale(cov, two);
    let n2 = g.add_scalar(n2, T::of(SSIM_C2));
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.add_scalar(d1, T::of(SSIM_C1));
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.add_scalar(d2, T::of(SSIM_C2));
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `alpha * mean|yhat - y| + beta * (1 - SSIM(yhat, y))`.
pub fn loss_total<T: Real>(g: &mut Graph<T>, yhat: Var, y: Var, w: LossWeights) -> Result<Var> {
    let d = g.sub(yhat, y)?;
    let d = g.abs(d);
    let l1 = g.mean(d);
    let l1 = g.scale(l1, T::of(w.alpha));
    let s = ssim(g, yhat, y)?;
    let dis = g.scale(s, T::of(-w.beta));
    let dis = g.add_scalar(dis, T::of(w.beta));
    g.add(l1, dis)
}

/// `-L(yhat, y) + lambda * L(xhat, x)`: minimising it raises the enhancement
/// loss while keeping the degraded input close to the clean one.
pub fn loss_generator<T: Real>(
    g: &mut Graph<T>,
    yhat: Var,
    y: Var,
    xhat: Var,
    x: Var,
    w: LossWeights,
    lambda: f64,
) -> Result<Var> {
    let enh = loss_total(g, yhat, y, w)?;
    let neg = g.scale(enh, T::of(-1.0));
    if lambda == 0.0 {
        // Keep shape checking of the proximity pair even when unused.
        if g.shape(xhat) != g.shape(x) {
            return Err(TensorError::ShapeMismatch {
                op: "loss_generator",
                lhs: g.shape(xhat).to_vec(),
                rhs: g.shape(x).to_vec(),
            });
        }
        return Ok(neg);
    }
    let prox = loss_total(g, xhat, x, w)?;
    let prox = g.scale(prox, T::of(lambda));
    g.add(neg, prox)
}
