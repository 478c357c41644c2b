//! Intensity normalization, CLAHE, and the stochastic augmentation pipeline.
//!
//! Order of application: CLAHE on raw intensities, resize to the network
//! resolution, stochastic augmentations (training only), Z-score last.
//!
//! CLAHE works on 256 quantized gray levels. Each tile's histogram is
//! clipped at clip_limit × (mean bin count) with the excess spread equally
//! over all bins, then turned into a lookup table
//!
//!   lut(b) = (mass strictly below b) / (mass not in bin b)
//!
//! and per-pixel outputs bilinearly interpolate the LUTs of the four
//! neighboring tile centers. The rank-style LUT makes constant images exact
//! fixed points for any clip limit: redistribution puts equal mass u in
//! every other bin, so lut(b) = b·u / 255·u = b/255.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imgops;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub clahe_enabled: bool,
    pub clip_limit: f32,
    /// CLAHE tile grid (rows, cols).
    pub tiles: (usize, usize),
    /// Network input resolution (height, width).
    pub target_size: (usize, usize),
    pub zscore: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe_enabled: true,
            clip_limit: 2.0,
            tiles: (8, 8),
            target_size: (224, 224),
            zscore: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_limit <= 0.0 {
            return Err(Error::Usage(format!(
                "clip limit must be positive, got {}",
                self.clip_limit
            )));
        }
        if self.tiles.0 < 1 || self.tiles.1 < 1 {
            return Err(Error::Usage(format!("tile grid must be at least 1x1, got {:?}", self.tiles)));
        }
        if self.target_size.0 < 32 || self.target_size.1 < 32 {
            return Err(Error::Usage(format!(
                "target size must be at least 32x32, got {:?}",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// Per-image standardization; zero-variance images map to all zeros.
pub fn zscore_normalize(image: &Array2<f32>) -> Array2<f32> {
    let n = image.len() as f64;
    assert!(n > 0.0, "zscore on empty image");
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var < 1e-12 {
        return Array2::zeros(image.dim());
    }
    let inv_std = 1.0 / var.sqrt();
    image.mapv(|v| ((v as f64 - mean) * inv_std) as f32)
}

const BINS: usize = 256;

fn quantize(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Clipped, redistributed histogram of one tile, as f64 mass per bin.
fn tile_histogram(pixels: impl Iterator<Item = f32>, clip_limit: f64) -> ([f64; BINS], f64) {
    let mut hist = [0.0f64; BINS];
    let mut area = 0.0f64;
    for v in pixels {
        hist[quantize(v)] += 1.0;
        area += 1.0;
    }
    // floor of one count per bin, or sparse tiles would clip every
    // occupied bin and redistribute nearly all their mass
    let limit = (clip_limit * area / BINS as f64).max(1.0);
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / BINS as f64;
    for h in hist.iter_mut() {
        *h += share;
    }
    (hist, area)
}

fn histogram_lut(hist: &[f64; BINS], area: f64) -> [f32; BINS] {
    let mut lut = [0.0f32; BINS];
    let mut below = 0.0f64;
    for b in 0..BINS {
        let rest = area - hist[b];
        lut[b] = if rest <= 0.0 {
            // every pixel in one bin: keep its own gray level
            b as f32 / 255.0
        } else {
            (below / rest) as f32
        };
        below += hist[b];
    }
    lut
}

/// Tier boundaries and interpolation weights along one axis.
///
/// For each pixel coordinate: the two neighboring tile indices and the
/// blend weight toward the second one. Outside the first/last tile center
/// the edge tile is used alone.
fn axis_interp(len: usize, tiles: usize) -> (Vec<usize>, Vec<(usize, usize, f32)>) {
    let bounds: Vec<usize> = (0..=tiles).map(|t| t * len / tiles).collect();
    let centers: Vec<f32> = (0..tiles)
        .map(|t| (bounds[t] + bounds[t + 1] - 1) as f32 / 2.0)
        .collect();
    let mut interp = Vec::with_capacity(len);
    for p in 0..len {
        let pf = p as f32;
        if pf <= centers[0] {
            interp.push((0, 0, 0.0));
        } else if pf >= centers[tiles - 1] {
            interp.push((tiles - 1, tiles - 1, 0.0));
        } else {
            let hi = centers.iter().position(|&c| c >= pf).unwrap();
            let lo = hi - 1;
            let t = (pf - centers[lo]) / (centers[hi] - centers[lo]);
            interp.push((lo, hi, t));
        }
    }
    (bounds, interp)
}

/// Contrast-limited adaptive histogram equalization on a [0,1] image.
pub fn clahe(image: &Array2<f32>, clip_limit: f32, tiles: (usize, usize)) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    let (rows, cols) = tiles;
    if rows < 1 || cols < 1 || clip_limit <= 0.0 {
        return Err(Error::Usage(format!(
            "invalid clahe config: clip {clip_limit}, tiles {tiles:?}"
        )));
    }
    if rows > h || cols > w {
        return Err(Error::Usage(format!(
            "tile grid {rows}x{cols} larger than image {h}x{w}"
        )));
    }
    let (row_bounds, row_interp) = axis_interp(h, rows);
    let (col_bounds, col_interp) = axis_interp(w, cols);

    let mut luts = vec![[0.0f32; BINS]; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let view = image.slice(ndarray::s![
                row_bounds[r]..row_bounds[r + 1],
                col_bounds[c]..col_bounds[c + 1]
            ]);
            let (hist, area) = tile_histogram(view.iter().copied(), clip_limit as f64);
            luts[r * cols + c] = histogram_lut(&hist, area);
        }
    }

    let out = Array2::from_shape_fn((h, w), |(y, x)| {
        let b = quantize(image[(y, x)]);
        let (r0, r1, ty) = row_interp[y];
        let (c0, c1, tx) = col_interp[x];
        let v00 = luts[r0 * cols + c0][b];
        let v01 = luts[r0 * cols + c1][b];
        let v10 = luts[r1 * cols + c0][b];
        let v11 = luts[r1 * cols + c1][b];
        let top = v00 * (1.0 - tx) + v01 * tx;
        let bot = v10 * (1.0 - tx) + v11 * tx;
        (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
    });
    Ok(out)
}

/// CLAHE (when enabled) followed by resize to the target resolution.
/// Z-score is intentionally not applied here; it is the final step before
/// the network and must not affect attention-guided augmentation, which
/// works on [0,1] images.
pub fn preprocess_image(image: &Array2<f32>, config: &PreprocessConfig) -> Result<Array2<f32>> {
    let enhanced = if config.clahe_enabled {
        clahe(image, config.clip_limit, config.tiles)?
    } else {
        image.clone()
    };
    Ok(imgops::resize_bilinear(
        &enhanced,
        config.target_size.0,
        config.target_size.1,
    ))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StochasticAugConfig {
    /// Multiplicative brightness factor range; None disables.
    pub brightness: Option<(f32, f32)>,
    /// Contrast factor range around the image mean; None disables.
    pub contrast: Option<(f32, f32)>,
    /// Random resized crop back to input size.
    pub crop: bool,
    /// Rotation angle range in degrees; None disables.
    pub rotation: Option<(f32, f32)>,
    pub hflip: bool,
    pub vflip: bool,
    /// Upper bound on how many of the enabled transforms hit one sample.
    pub max_ops_per_sample: usize,
}

impl Default for StochasticAugConfig {
    fn default() -> Self {
        StochasticAugConfig {
            brightness: Some((0.5, 1.0)),
            contrast: Some((0.7, 1.0)),
            crop: true,
            rotation: Some((0.0, 120.0)),
            hflip: true,
            vflip: true,
            max_ops_per_sample: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum AugKind {
    Brightness,
    Contrast,
    Crop,
    Rotation,
    HFlip,
    VFlip,
}

impl StochasticAugConfig {
    fn enabled(&self) -> Vec<AugKind> {
        let mut kinds = Vec::new();
        if self.brightness.is_some() {
            kinds.push(AugKind::Brightness);
        }
        if self.contrast.is_some() {
            kinds.push(AugKind::Contrast);
        }
        if self.crop {
            kinds.push(AugKind::Crop);
        }
        if self.rotation.is_some() {
            kinds.push(AugKind::Rotation);
        }
        if self.hflip {
            kinds.push(AugKind::HFlip);
        }
        if self.vflip {
            kinds.push(AugKind::VFlip);
        }
        kinds
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, r: Option<(f32, f32)>| -> Result<()> {
            match r {
                Some((lo, hi)) if lo > hi || !lo.is_finite() || !hi.is_finite() => Err(
                    Error::Usage(format!("invalid {name} range [{lo},{hi}]")),
                ),
                _ => Ok(()),
            }
        };
        check("brightness", self.brightness)?;
        check("contrast", self.contrast)?;
        check("rotation", self.rotation)?;
        if self.max_ops_per_sample > self.enabled().len() {
            return Err(Error::Usage(format!(
                "max_ops_per_sample {} exceeds the {} enabled transforms",
                self.max_ops_per_sample,
                self.enabled().len()
            )));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Apply a uniformly random subset of the enabled transforms (at most
/// `max_ops_per_sample`, in the fixed order brightness, contrast, crop,
/// rotation, hflip, vflip), then resize to `target` and clamp to [0,1].
pub fn apply_stochastic_augs(
    image: &Array2<f32>,
    config: &StochasticAugConfig,
    target: (usize, usize),
    rng: &mut impl Rng,
) -> Array2<f32> {
    let enabled = config.enabled();
    let cap = config.max_ops_per_sample.min(enabled.len());
    let chosen: Vec<AugKind> = if cap == 0 {
        Vec::new()
    } else {
        let count = rng.random_range(0..=cap);
        let mut picked: Vec<AugKind> = rand::seq::index::sample(rng, enabled.len(), count)
            .into_iter()
            .map(|i| enabled[i])
            .collect();
        picked.sort();
        picked
    };

    let mut img = image.clone();
    for kind in chosen {
        img = match kind {
            AugKind::Brightness => {
                let f = draw(rng, config.brightness.unwrap());
                img.mapv(|v| (v * f).clamp(0.0, 1.0))
            }
            AugKind::Contrast => {
                let f = draw(rng, config.contrast.unwrap());
                let mean = img.iter().sum::<f32>() / img.len() as f32;
                img.mapv(|v| ((v - mean) * f + mean).clamp(0.0, 1.0))
            }
            AugKind::Crop => {
                let (h, w) = img.dim();
                let frac = rng.random_range(0.7..1.0f32);
                let ch = ((h as f32 * frac).round() as usize).clamp(1, h);
                let cw = ((w as f32 * frac).round() as usize).clamp(1, w);
                let oy = rng.random_range(0..=h - ch);
                let ox = rng.random_range(0..=w - cw);
                let cropped = imgops::crop(&img, &imgops::PixelBox::new(ox, oy, ox + cw, oy + ch));
                imgops::resize_bilinear(&cropped, h, w)
            }
            AugKind::Rotation => {
                let deg = draw(rng, config.rotation.unwrap());
                imgops::rotate_bilinear(&img, deg)
            }
            AugKind::HFlip => imgops::flip_horizontal(&img),
            AugKind::VFlip => imgops::flip_vertical(&img),
        };
    }
    imgops::resize_bilinear(&img, target.0, target.1).mapv(|v| v.clamp(0.0, 1.0))
}
