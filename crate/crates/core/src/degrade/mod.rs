//! Thermal degradation operators (column stripes, bicubic resolution loss,
//! gamma/contrast compression) and their soft-weighted multi-step mixture.

pub mod bicubic;
mod compose;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::Image;
use crate::tensor::{clamp01, contrast_plane, kernels, Real, TensorError};

pub use compose::{compose, operator_on_batch, validate_rows};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DegradeError {
    #[error("stripe amplitude {0} outside [0, 0.5]")]
    Amplitude(f64),
    #[error("low-resolution scale {0} is not 2 or 4")]
    Scale(usize),
    #[error("{height}x{width} image is not divisible by scale {scale}")]
    NotDivisible { height: usize, width: usize, scale: usize },
    #[error("contrast factor {factor} must be in (0, 1] and gamma {gamma} in [1, 3]")]
    Contrast { factor: f64, gamma: f64 },
    #[error("weight row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("weights cover {got} operators but the bank has {expected}")]
    OperatorCount { got: usize, expected: usize },
    #[error("severity levels for {0} must be strictly increasing")]
    Ordering(Family),
    #[error("unknown degradation `{0}`")]
    Parse(String),
    #[error("level {level} out of range for {family} ({count} levels)")]
    Level { family: Family, level: usize, count: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Stripe,
    LowRes,
    Contrast,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Stripe => "stripe",
            Family::LowRes => "lowres",
            Family::Contrast => "contrast",
        })
    }
}

impl FromStr for Family {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stripe" => Ok(Family::Stripe),
            "lowres" => Ok(Family::LowRes),
            "contrast" => Ok(Family::Contrast),
            _ => Err(DegradeError::Parse(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Operator {
    Identity,
    Stripe { amplitude: f64 },
    LowRes { scale: usize },
    Contrast { factor: f64, gamma: f64 },
}

impl Operator {
    pub fn validate(&self) -> Result<(), DegradeError> {
        match *self {
            Operator::Identity => Ok(()),
            Operator::Stripe { amplitude } => {
                if (0.0..=0.5).contains(&amplitude) {
                    Ok(())
                } else {
                    Err(DegradeError::Amplitude(amplitude))
                }
            }
            Operator::LowRes { scale } => {
                if scale == 2 || scale == 4 {
                    Ok(())
                } else {
                    Err(DegradeError::Scale(scale))
                }
            }
            Operator::Contrast { factor, gamma } => {
                if factor > 0.0 && factor <= 1.0 && (1.0..=3.0).contains(&gamma) {
                    Ok(())
                } else {
                    Err(DegradeError::Contrast { factor, gamma })
                }
            }
        }
    }

    /// Applies the operator to one image. `seed` only matters for stripes.
    pub fn apply(&self, x: &Image, seed: u64) -> Result<Image, DegradeError> {
        match *self {
            Operator::Identity => Ok(x.clone()),
            Operator::Stripe { amplitude } => degrade_stripe(x, amplitude, seed),
            Operator::LowRes { scale } => degrade_lowres(x, scale),
            Operator::Contrast { factor, gamma } => degrade_contrast(x, factor, gamma),
        }
    }
}

/// `identity`, `stripe:A`, `lowres:S` or `contrast:F:G`.
impl FromStr for Operator {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DegradeError::Parse(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        let op = match parts[0] {
            "identity" if parts.len() == 1 => Operator::Identity,
            "stripe" if parts.len() == 2 => Operator::Stripe { amplitude: num(1)? },
            "lowres" if parts.len() == 2 => Operator::LowRes {
                scale: parts[1].parse().map_err(|_| bad())?,
            },
            "contrast" if parts.len() == 3 => Operator::Contrast {
                factor: num(1)?,
                gamma: num(2)?,
            },
            _ => return Err(bad()),
        };
        op.validate()?;
        Ok(op)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Identity => write!(f, "identity"),
            Operator::Stripe { amplitude } => write!(f, "stripe:{amplitude}"),
            Operator::LowRes { scale } => write!(f, "lowres:{scale}"),
            Operator::Contrast { factor, gamma } => write!(f, "contrast:{factor}:{gamma}"),
        }
    }
}

/// A chain of operators applied left to right, written `op+op+...`.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec(pub Vec<Operator>);

impl FromStr for DegradationSpec {
    type Err = DegradeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split('+').map(str::parse).collect::<Result<Vec<_>, _>>().map(Self)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|o| o.to_string()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl DegradationSpec {
    /// Each stage draws its own stripe pattern from `seed`.
    pub fn apply(&self, x: &Image, seed: u64) -> Result<Image, DegradeError> {
        let mut y = x.clone();
        for (i, op) in self.0.iter().enumerate() {
            y = op.apply(&y, mix_seed(seed, i as u64))?;
        }
        Ok(y)
    }
}

/// Ordered severity levels per family. Operator 0 of the bank is identity,
/// followed by stripe, low-resolution and contrast levels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeverityBank {
    pub stripe: Vec<f64>,
    pub lowres: Vec<usize>,
    pub contrast: Vec<(f64, f64)>,
}

impl Default for SeverityBank {
    fn default() -> Self {
        Self {
            stripe: vec![0.05, 0.15, 0.30],
            lowres: vec![2, 4],
            contrast: vec![(0.7, 1.0), (0.5, 1.2), (0.3, 1.5)],
        }
    }
}

impl SeverityBank {
    pub fn validate(&self) -> Result<(), DegradeError> {
        for op in self.operators() {
            op.validate()?;
        }
        if self.stripe.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DegradeError::Ordering(Family::Stripe));
        }
        if self.lowres.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DegradeError::Ordering(Family::LowRes));
        }
        // Lower factor or higher gamma is harsher; both must not ease.
        if self
            .contrast
            .windows(2)
            .any(|w| w[1].0 > w[0].0 || w[1].1 < w[0].1 || w[0] == w[1])
        {
            return Err(DegradeError::Ordering(Family::Contrast));
        }
        Ok(())
    }

    pub fn operators(&self) -> Vec<Operator> {
        let mut ops = vec![Operator::Identity];
        ops.extend(self.stripe.iter().map(|&amplitude| Operator::Stripe { amplitude }));
        ops.extend(self.lowres.iter().map(|&scale| Operator::LowRes { scale }));
        ops.extend(
            self.contrast
                .iter()
                .map(|&(factor, gamma)| Operator::Contrast { factor, gamma }),
        );
        ops
    }

    pub fn n_ops(&self) -> usize {
        1 + self.stripe.len() + self.lowres.len() + self.contrast.len()
    }

    /// 0-based level within a family.
    pub fn level(&self, family: Family, level: usize) -> Result<Operator, DegradeError> {
        let count = match family {
            Family::Stripe => self.stripe.len(),
            Family::LowRes => self.lowres.len(),
            Family::Contrast => self.contrast.len(),
        };
        if level >= count {
            return Err(DegradeError::Level { family, level, count });
        }
        Ok(match family {
            Family::Stripe => Operator::Stripe {
                amplitude: self.stripe[level],
            },
            Family::LowRes => Operator::LowRes {
                scale: self.lowres[level],
            },
            Family::Contrast => Operator::Contrast {
                factor: self.contrast[level].0,
                gamma: self.contrast[level].1,
            },
        })
    }

    /// Smallest operator multiple of extents the bank needs.
    pub fn required_divisor(&self) -> usize {
        self.lowres.iter().copied().fold(1, usize::max)
    }
}

/// SplitMix64 finaliser applied to a combination of two words.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the stripe pattern for one image of a batch at one step.
pub fn stripe_seed(batch_seed: u64, image: usize, step: usize) -> u64 {
    mix_seed(mix_seed(batch_seed, image as u64), step as u64)
}

/// Per-column additive offsets `amplitude * b[c]`, `b[c] ~ U(-1, 1)`.
pub fn stripe_offsets<T: Real>(width: usize, amplitude: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = T::of(amplitude);
    (0..width)
        .map(|_| a * T::of(rng.gen_range(-1.0..1.0)))
        .collect()
}

pub fn degrade_stripe(x: &Image, amplitude: f64, column_seed: u64) -> Result<Image, DegradeError> {
    Operator::Stripe { amplitude }.validate()?;
    let offsets = stripe_offsets::<f32>(x.width(), amplitude, column_seed);
    let w = x.width();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| clamp01(*v + offsets[i % w]))
        .collect();
    Ok(Image::new(x.height(), x.width(), data).expect("same extents"))
}

pub(crate) fn check_divisible(h: usize, w: usize, scale: usize) -> Result<(), DegradeError> {
    if h % scale != 0 || w % scale != 0 || h < scale || w < scale {
        return Err(DegradeError::NotDivisible {
            height: h,
            width: w,
            scale,
        });
    }
    Ok(())
}

/// Row and column operators of the down-then-up resampling, in `T`.
pub fn lowres_operators<T: Real>(h: usize, w: usize, scale: usize) -> (Vec<T>, Vec<T>) {
    let cast = |m: Vec<f64>| m.into_iter().map(T::of).collect();
    (
        cast(bicubic::down_up_matrix(h, scale)),
        cast(bicubic::down_up_matrix(w, scale)),
    )
}

/// Bicubic down/up resampling without the final clamp.
pub fn lowres_unclamped(x: &Image, scale: usize) -> Result<Vec<f32>, DegradeError> {
    Operator::LowRes { scale }.validate()?;
    check_divisible(x.height(), x.width(), scale)?;
    let (a, b) = lowres_operators::<f32>(x.height(), x.width(), scale);
    Ok(kernels::separable(x.data(), 1, x.height(), x.width(), &a, &b))
}

pub fn degrade_lowres(x: &Image, scale: usize) -> Result<Image, DegradeError> {
    let data = lowres_unclamped(x, scale)?.into_iter().map(clamp01).collect();
    Ok(Image::new(x.height(), x.width(), data).expect("same extents"))
}

pub fn degrade_contrast(x: &Image, factor: f64, gamma: f64) -> Result<Image, DegradeError> {
    Operator::Contrast { factor, gamma }.validate()?;
    let data = contrast_plane(x.data(), factor, gamma)
        .into_iter()
        .map(clamp01)
        .collect();
    Ok(Image::new(x.height(), x.width(), data).expect("same extents"))
}
