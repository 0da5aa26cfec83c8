//! Three-channel floating-point images (row-major, channel-interleaved).

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Per-channel standardization constants applied to both modalities.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// A value per modality. Used for frames, crops and token sequences alike.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair<T> {
    pub rgb: T,
    pub tir: T,
}

impl<T> Pair<T> {
    pub fn new(rgb: T, tir: T) -> Self {
        Self { rgb, tir }
    }

    pub fn as_ref(&self) -> Pair<&T> {
        Pair::new(&self.rgb, &self.tir)
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> Pair<U> {
        Pair::new(f(self.rgb), f(self.tir))
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(T) -> Result<U, E>) -> Result<Pair<U>, E> {
        Ok(Pair::new(f(self.rgb)?, f(self.tir)?))
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * CHANNELS {
            return Err(Error::shape(
                "image",
                format!("{width}x{height}x{CHANNELS} values"),
                data.len(),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        m.map(|v| v / n)
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// `(v − mean) / std` per channel.
    pub fn standardized(&self) -> Image {
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .flat_map(|px| [0, 1, 2].map(|c| (px[c] - PIXEL_MEAN[c]) / PIXEL_STD[c]))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Flattens non-overlapping `p×p` patches, row-major over the patch grid;
    /// each patch is laid out `(row, col, channel)`. Returns `(count, p²·3)`
    /// values.
    pub fn patches(&self, p: usize) -> Result<Vec<f64>> {
        if p == 0 || self.width % p != 0 || self.height % p != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for gy in 0..self.height / p {
            for gx in 0..self.width / p {
                for py in 0..p {
                    let y = gy * p + py;
                    let start = (y * self.width + gx * p) * CHANNELS;
                    out.extend_from_slice(&self.data[start..start + p * CHANNELS]);
                }
            }
        }
        Ok(out)
    }
}
