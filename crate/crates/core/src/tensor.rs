//! Dense `height × width × channels` rasters.
//!
//! Both images and feature maps are stored row-major by (row, column, channel),
//! so a single row of a raster is one contiguous `width × channels` block.

use crate::error::{Error, Result};

/// A dense H×W×C array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Image raster: raw values in `[0, 255]` or normalized reals.
pub type Image = Tensor3;

/// Backbone output; houses aerial and ground feature maps.
pub type FeatureMap = Tensor3;

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor3 {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(row, col, channel)` at every index.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    data.push(f(r, c, k));
                }
            }
        }
        Tensor3 {
            height,
            width,
            channels,
            data,
        }
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
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Contiguous slice holding one row.
    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.width * self.channels;
        &self.data[row * n..(row + 1) * n]
    }

    /// Channels of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    /// Width-`len` crop starting at column `start`, wrapping past the right edge.
    pub fn crop_columns_circular(&self, start: usize, len: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.height, len, self.channels);
        let c = self.channels;
        for r in 0..self.height {
            for j in 0..len {
                let src = (start + j) % self.width;
                let s = self.index(r, src, 0);
                let d = out.index(r, j, 0);
                out.data[d..d + c].copy_from_slice(&self.data[s..s + c]);
            }
        }
        out
    }

    /// Circularly rotates columns so that output column `j` holds input column `j - shift`.
    pub fn roll_columns(&self, shift: usize) -> Tensor3 {
        if self.width == 0 {
            return self.clone();
        }
        let start = (self.width - shift % self.width) % self.width;
        self.crop_columns_circular(start, self.width)
    }

    /// Channels `start..end` of every pixel.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor3> {
        if start > end || end > self.channels {
            return Err(Error::Shape(format!(
                "channel range {start}..{end} out of bounds for {} channels",
                self.channels
            )));
        }
        let c = end - start;
        let mut data = Vec::with_capacity(self.height * self.width * c);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..end]);
        }
        Tensor3::from_vec(self.height, self.width, c, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor3 {
        self.map(|v| v * factor)
    }

    /// Rounds every value to `f32` precision, the precision of the on-disk format.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
