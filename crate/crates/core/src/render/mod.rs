//! CPU Gaussian-splatting renderer: SH color, projection, compositing,
//! image losses and metrics.

pub mod camera;
pub mod metrics;
mod raster;
pub mod sh;

pub use camera::Camera;
pub use raster::{
    modulated_color, render, render_backward, render_colors, sigmoid, view_direction, ColorFactors, Gaussian, Modulation, RenderGrads, RenderOptions, RenderedImage,
    ALPHA_MAX, ALPHA_MIN, DET_MIN, GAUSSIAN_PARAMS, T_MIN,
};

use crate::error::{Error, Result};

/// RGB image with `f64` channels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[3 * (y * self.width + x) + ch]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = 3 * (y * self.width + x);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.data.len() != other.data.len() {
            return Err(Error::Shape(format!(
                "image size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// 8-bit quantization with rounding, clamped to `[0, 255]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}
