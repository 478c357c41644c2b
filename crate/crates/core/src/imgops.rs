//! Grayscale raster primitives: resampling, geometry, box arithmetic, I/O.
//!
//! Images are `Array2<f32>` indexed (row, col) with values nominally in
//! [0,1]. Resampling uses half-pixel centers: source coordinate of output
//! pixel i is (i + 0.5) * in/out - 0.5. Resize clamps at the border,
//! rotation fills out-of-frame samples with zero.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle [x0,x1) × [y0,y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        assert!(x0 <= x1 && y0 <= y1, "inverted box ({x0},{y0},{x1},{y1})");
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection(&self, other: &PixelBox) -> PixelBox {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1).max(x0);
        let y1 = self.y1.min(other.y1).max(y0);
        PixelBox { x0, y0, x1, y1 }
    }

    /// Intersection over union; 0 when both boxes are empty.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other).area();
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Map grid coordinates to image coordinates, covering fractional edges.
    pub fn scale(&self, sy: f64, sx: f64) -> PixelBox {
        PixelBox {
            x0: (self.x0 as f64 * sx).floor() as usize,
            y0: (self.y0 as f64 * sy).floor() as usize,
            x1: (self.x1 as f64 * sx).ceil() as usize,
            y1: (self.y1 as f64 * sy).ceil() as usize,
        }
    }

    pub fn clamp_to(&self, height: usize, width: usize) -> PixelBox {
        PixelBox {
            x0: self.x0.min(width),
            y0: self.y0.min(height),
            x1: self.x1.min(width),
            y1: self.y1.min(height),
        }
    }

    /// Grow each side below `min_side` pixels, staying inside height×width.
    pub fn expand_to_min_side(&self, min_side: usize, height: usize, width: usize) -> PixelBox {
        let grow = |lo: usize, hi: usize, limit: usize| -> (usize, usize) {
            let (mut lo, mut hi) = (lo, hi);
            while hi - lo < min_side.min(limit) {
                if hi < limit {
                    hi += 1;
                } else if lo > 0 {
                    lo -= 1;
                } else {
                    break;
                }
            }
            (lo, hi)
        };
        let (x0, x1) = grow(self.x0, self.x1, width);
        let (y0, y1) = grow(self.y0, self.y1, height);
        PixelBox { x0, y0, x1, y1 }
    }
}

/// Minimal box enclosing all true pixels, None when the mask is empty.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<PixelBox> {
    let (h, w) = mask.dim();
    let mut x0 = w;
    let mut y0 = h;
    let mut x1 = 0usize;
    let mut y1 = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 >= x1 {
        None
    } else {
        Some(PixelBox { x0, y0, x1, y1 })
    }
}

fn sample_clamped(img: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = img.dim();
    let yc = y.max(0.0).min((h - 1) as f32);
    let xc = x.max(0.0).min((w - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f32;
    let fx = xc - x0 as f32;
    let top = img[(y0, x0)] * (1.0 - fx) + img[(y0, x1)] * fx;
    let bot = img[(y1, x0)] * (1.0 - fx) + img[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_zero_fill(img: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = img.dim();
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let y0 = y0f as isize;
    let x0 = x0f as isize;
    let at = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img[(yy as usize, xx as usize)]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize; returns the input unchanged when already at size.
pub fn resize_bilinear(img: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    assert!(out_h > 0 && out_w > 0, "resize to empty image");
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let y = (oy as f32 + 0.5) * sy - 0.5;
        let x = (ox as f32 + 0.5) * sx - 0.5;
        sample_clamped(img, y, x)
    })
}

/// Rotate about the image center; out-of-frame samples are zero.
pub fn rotate_bilinear(img: &Array2<f32>, degrees: f32) -> Array2<f32> {
    if degrees == 0.0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = h as f32 / 2.0;
    let cx = w as f32 / 2.0;
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        let dy = oy as f32 + 0.5 - cy;
        let dx = ox as f32 + 0.5 - cx;
        // inverse rotation of the output pixel center
        let sxs = cos * dx + sin * dy + cx - 0.5;
        let sys = -sin * dx + cos * dy + cy - 0.5;
        sample_zero_fill(img, sys, sxs)
    })
}

pub fn flip_horizontal(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[(y, w - 1 - x)])
}

pub fn flip_vertical(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[(h - 1 - y, x)])
}

pub fn crop(img: &Array2<f32>, b: &PixelBox) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(b.x1 <= w && b.y1 <= h && !b.is_empty(), "crop box {b:?} outside {h}x{w}");
    img.slice(ndarray::s![b.y0..b.y1, b.x0..b.x1]).to_owned()
}

/// Scale to [0,1] by min-max; constant images map to all-zero.
pub fn min_max_normalize(img: &Array2<f32>) -> Array2<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Array2::zeros(img.dim());
    }
    let inv = 1.0 / (hi - lo);
    img.mapv(|v| (v - lo) * inv)
}

/// Read an 8/16-bit grayscale image to [0,1] by its full representable range.
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    // 8-bit widens exactly (v * 257 / 65535 == v / 255)
    let buf = img.into_luma16();
    let (w, h) = buf.dimensions();
    let data: Vec<f32> = buf.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|e| Error::Shape(format!("image buffer {}: {e}", path.display())))
}

/// Read a mask image; any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let buf = img.into_luma16();
    let (w, h) = buf.dimensions();
    let data: Vec<bool> = buf.into_raw().iter().map(|&v| v != 0).collect();
    Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|e| Error::Shape(format!("mask buffer {}: {e}", path.display())))
}

/// Write as 8-bit PNG, clamping to [0,1].
pub fn write_gray_png(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let data: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Lay out equally sized panels in one row with a gray separator.
pub fn compose_panels(panels: &[&Array2<f32>], gap: usize) -> Array2<f32> {
    assert!(!panels.is_empty(), "no panels");
    let (h, w) = panels[0].dim();
    assert!(
        panels.iter().all(|p| p.dim() == (h, w)),
        "panel size mismatch"
    );
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut sheet = Array2::from_elem((h, total_w), 0.5f32);
    for (i, p) in panels.iter().enumerate() {
        let x = i * (w + gap);
        sheet.slice_mut(ndarray::s![.., x..x + w]).assign(p);
    }
    sheet
}
