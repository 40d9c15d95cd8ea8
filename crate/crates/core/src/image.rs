use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image extents must be positive, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("pixel buffer holds {len} values for a {height}x{width} image")]
    Length { height: usize, width: usize, len: usize },
    #[error("batch mixes {0:?} and {1:?} image extents")]
    Mismatch((usize, usize), (usize, usize)),
    #[error("expected a single-channel NCHW tensor, got shape {0:?}")]
    Layout(Vec<usize>),
}

/// Single-channel image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Empty { height, width });
        }
        if data.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Stacks equally sized images into an `[N, 1, H, W]` tensor.
pub fn to_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>, ImageError> {
    let first = images.first().ok_or(ImageError::Empty { height: 0, width: 0 })?;
    let dims = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if (im.height, im.width) != dims {
            return Err(ImageError::Mismatch(dims, (im.height, im.width)));
        }
        data.extend(im.data.iter().map(|v| T::of(*v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 1, dims.0, dims.1], data).expect("sizes checked"))
}

pub fn from_batch<T: Real>(shape: &[usize], data: &[T]) -> Result<Vec<Image>, ImageError> {
    let [n, 1, h, w] = *shape else {
        return Err(ImageError::Layout(shape.to_vec()));
    };
    Ok((0..n)
        .map(|i| Image {
            height: h,
            width: w,
            data: data[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|v| v.f64() as f32)
                .collect(),
        })
        .collect())
}
