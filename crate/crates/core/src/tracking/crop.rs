use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Square crop placement: maps `out_size × out_size` crop pixels to frame
/// coordinates. Coordinates are continuous; pixel `i` spans `[i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub frame_w: usize,
    pub frame_h: usize,
    pub center: (f64, f64),
    /// Crop side length in frame pixels.
    pub side: f64,
    pub out_size: usize,
}

impl CropGeometry {
    /// The crop that is exactly the frame (square frames only).
    pub fn identity(size: usize) -> Self {
        Self {
            frame_w: size,
            frame_h: size,
            center: (size as f64 / 2.0, size as f64 / 2.0),
            side: size as f64,
            out_size: size,
        }
    }

    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_size as f64
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let half = self.out_size as f64 / 2.0;
        let s = self.scale();
        (self.center.0 + (u - half) * s, self.center.1 + (v - half) * s)
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.out_size as f64 / 2.0;
        let s = self.scale();
        ((x - self.center.0) / s + half, (y - self.center.1) / s + half)
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_frame(b.x, b.y);
        let s = self.scale();
        BBox::new(x, y, b.w * s, b.h * s).with_confidence(b.confidence)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (x, y) = self.to_crop(b.x, b.y);
        let s = self.scale();
        BBox::new(x, y, b.w / s, b.h / s).with_confidence(b.confidence)
    }
}

/// Square crop of side `context·√(w·h)` centered on `b`, resampled
/// bilinearly to `out_size²`. Samples outside the frame take the frame's
/// channel mean.
pub fn crop_region(frame: &Image, b: &BBox, context: f64, out_size: usize) -> Result<(Image, CropGeometry)> {
    b.validate()?;
    if out_size == 0 || !(context > 0.0) {
        return Err(Error::config(format!("invalid crop: context {context}, size {out_size}")));
    }
    let geom = CropGeometry {
        frame_w: frame.width(),
        frame_h: frame.height(),
        center: b.center(),
        side: context * (b.w * b.h).sqrt(),
        out_size,
    };
    Ok((resample(frame, &geom), geom))
}

/// Renders the crop described by `geom` from `frame`.
pub fn resample(frame: &Image, geom: &CropGeometry) -> Image {
    let fill = frame.channel_means();
    let (fw, fh) = (frame.width(), frame.height());
    let n = geom.out_size;
    let mut data = Vec::with_capacity(n * n * CHANNELS);
    for v in 0..n {
        for u in 0..n {
            let (x, y) = geom.to_frame(u as f64 + 0.5, v as f64 + 0.5);
            if !(x >= 0.0 && y >= 0.0 && x < fw as f64 && y < fh as f64) {
                data.extend_from_slice(&fill);
                continue;
            }
            let px = (x - 0.5).clamp(0.0, (fw - 1) as f64);
            let py = (y - 0.5).clamp(0.0, (fh - 1) as f64);
            let (x0, y0) = (px.floor() as usize, py.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
            let (tx, ty) = (px - x0 as f64, py - y0 as f64);
            for c in 0..CHANNELS {
                let top = frame.get(x0, y0, c) * (1.0 - tx) + frame.get(x1, y0, c) * tx;
                let bot = frame.get(x0, y1, c) * (1.0 - tx) + frame.get(x1, y1, c) * tx;
                data.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Image::new(n, n, data).expect("crop buffer sized to out_size²")
}
