//! Multi-channel square image tensor `[C, H, W]`, row-major per channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of stain channels: DNA, DNA damage, F-actin, tubulin.
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len().max(1) as f64
    }

    pub fn channel_std(&self, c: usize) -> f64 {
        let mean = self.channel_mean(c);
        let ch = self.channel(c);
        (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / ch.len().max(1) as f64)
            .sqrt()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}
