//! Two-dimensional mask types shared by the data, loss and detection code.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-pixel ground-truth labels, each exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Binarized prediction with pixel values 0 or 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

macro_rules! mask_common {
    ($ty:ident, $on:expr) => {
        impl $ty {
            /// Foreground pixel value.
            pub const ON: u8 = $on;

            pub fn empty(height: usize, width: usize) -> Self {
                $ty {
                    height,
                    width,
                    data: vec![0; height * width],
                }
            }

            /// Builds a mask from a foreground predicate over `(row, col)`.
            pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
                let mut data = Vec::with_capacity(height * width);
                for r in 0..height {
                    for c in 0..width {
                        data.push(if f(r, c) { $on } else { 0 });
                    }
                }
                $ty { height, width, data }
            }

            pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
                if data.len() != height * width {
                    return Err(Error::Shape(format!(
                        "mask {height}x{width} needs {} pixels, got {}",
                        height * width,
                        data.len()
                    )));
                }
                if let Some(v) = data.iter().find(|&&v| v != 0 && v != $on) {
                    return Err(Error::Shape(format!(
                        "mask value {v} outside {{0, {}}}",
                        $on
                    )));
                }
                Ok($ty { height, width, data })
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.height, self.width)
            }

            pub fn data(&self) -> &[u8] {
                &self.data
            }

            pub fn get(&self, row: usize, col: usize) -> bool {
                self.data[row * self.width + col] != 0
            }

            pub fn set(&mut self, row: usize, col: usize, on: bool) {
                self.data[row * self.width + col] = if on { $on } else { 0 };
            }

            pub fn count(&self) -> usize {
                self.data.iter().filter(|&&v| v != 0).count()
            }

            pub fn is_empty(&self) -> bool {
                self.data.iter().all(|&v| v == 0)
            }
        }
    };
}

mask_common!(LabelMask, 1);
mask_common!(BinaryMask, 255);

impl LabelMask {
    pub fn to_binary(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }

    /// Labels as a `1 x 1 x H x W` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| if v != 0 { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("mask dimensions are positive")
    }
}

impl BinaryMask {
    pub fn to_labels(&self) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }
}
