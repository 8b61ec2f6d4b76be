use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Single-channel image with values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                "gray_image",
                format!("{height}x{width} image needs {} pixels, got {}", height * width, pixels.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("image dims")
    }

    /// Min-max normalized copy; constant images map to zero.
    pub fn normalized(&self) -> GrayImage {
        let lo = self.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                .collect(),
        }
    }
}
