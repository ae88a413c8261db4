//! Minimal row-major 2D image of f64 values, used for range-view channels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Elementwise product, used to apply binary masks to value channels.
    pub fn masked_by(&self, mask: &Image) -> Image {
        assert!(self.same_dims(mask));
        let data = self
            .data
            .iter()
            .zip(mask.data.iter())
            .map(|(v, m)| v * m)
            .collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Image::from_vec(2, 3, vec![0.0; 6]).is_ok());
        assert!(Image::from_vec(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn get_set_roundtrip() {
        let mut img = Image::zeros(4, 5);
        img.set(2, 3, 7.5);
        assert_eq!(img.get(2, 3), 7.5);
        assert_eq!(img.get(0, 0), 0.0);
    }
}
