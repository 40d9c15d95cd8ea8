//! Frozen constants of the evaluation metrics.

/// SSIM Gaussian window side and standard deviation.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// SSIM stabilisers `(K1 L)^2` and `(K2 L)^2` for unit dynamic range.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Histogram bins for EN and MI (8-bit quantisation).
pub const HIST_BINS: usize = 256;

/// Edge-strength sigmoid of the gradient-transfer metric.
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
/// Orientation sigmoid of the gradient-transfer metric.
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Pixel-domain VIF: assumed HVS noise variance (on a 0-255 scale), scales.
pub const VIF_SIGMA_NSQ: f64 = 2.0;
pub const VIF_SCALES: usize = 4;
pub const VIF_EPS: f64 = 1e-10;
