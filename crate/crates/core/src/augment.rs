//! Attention-guided augmentation: mixup against the attended crop, patching
//! a copy of the attended crop elsewhere in the frame, and dimming the
//! attended region.
//!
//! All three operate on preprocessed images still in [0,1]; score
//! normalization happens after augmentation so the pixel arithmetic here
//! stays in the displayable range. Inputs are single-channel arrays at the
//! network input resolution.

use ndarray::{Array2, ArrayViewD};
use rand::Rng;

use crate::attention::normalize_attention;
use crate::error::{Error, Result};
use crate::imgops::{self, PixelBox};

/// Which auxiliary routes are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AugSet {
    pub mixup: bool,
    pub patching: bool,
    pub dimming: bool,
}

impl Default for AugSet {
    fn default() -> Self {
        AugSet {
            mixup: true,
            patching: true,
            dimming: true,
        }
    }
}

impl AugSet {
    pub fn none() -> Self {
        AugSet {
            mixup: false,
            patching: false,
            dimming: false,
        }
    }

    pub fn count(&self) -> usize {
        self.mixup as usize + self.patching as usize + self.dimming as usize
    }
}

impl std::str::FromStr for AugSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = AugSet::none();
        if s.trim() == "none" || s.trim().is_empty() {
            return Ok(set);
        }
        for part in s.split(',') {
            match part.trim() {
                "mixup" => set.mixup = true,
                "patching" | "patch" => set.patching = true,
                "dimming" | "dim" => set.dimming = true,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown augmentation '{other}' (expected mixup, patch, dim, or none)"
                    )))
                }
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for AugSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.mixup {
            parts.push("mixup");
        }
        if self.patching {
            parts.push("patching");
        }
        if self.dimming {
            parts.push("dimming");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Threshold selecting the attended region for mixup and patching.
    pub theta_m: f32,
    /// Threshold on the upsampled map for dimming.
    pub theta_d: f32,
    /// Mixup blend weight, drawn uniformly from this closed interval.
    pub gamma: (f32, f32),
    /// Multiplier applied inside the dimmed region.
    pub dim_factor: f32,
    pub enabled: AugSet,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            theta_m: 0.5,
            theta_d: 0.5,
            gamma: (0.5, 0.5),
            dim_factor: 0.1,
            enabled: AugSet::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f32, name: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Usage(format!("{name} {v} outside [0,1]")));
            }
            Ok(())
        };
        unit(self.theta_m, "theta_m")?;
        unit(self.theta_d, "theta_d")?;
        unit(self.dim_factor, "dim_factor")?;
        unit(self.gamma.0, "gamma lower bound")?;
        unit(self.gamma.1, "gamma upper bound")?;
        if self.gamma.0 > self.gamma.1 {
            return Err(Error::Usage(format!(
                "gamma interval ({}, {}) is inverted",
                self.gamma.0, self.gamma.1
            )));
        }
        Ok(())
    }

    fn draw_gamma(&self, rng: &mut impl Rng) -> f32 {
        if self.gamma.0 < self.gamma.1 {
            rng.random_range(self.gamma.0..self.gamma.1)
        } else {
            self.gamma.0
        }
    }
}

/// Thresholded attention cells plus their enclosing box in image pixels.
#[derive(Debug, Clone)]
pub struct BinaryRegion {
    pub mask: Array2<bool>,
    pub bbox: PixelBox,
}

/// Cells strictly above `theta` form the region; the enclosing box is scaled
/// from the attention grid to `image_h`×`image_w`. An empty region falls back
/// to the full frame so downstream crops stay well defined.
pub fn threshold_region(
    a_star: &Array2<f32>,
    theta: f32,
    image_h: usize,
    image_w: usize,
) -> BinaryRegion {
    let mask = a_star.mapv(|v| v > theta);
    let (gh, gw) = mask.dim();
    let bbox = match imgops::mask_bbox(&mask) {
        Some(cells) => cells
            .scale(image_h as f64 / gh as f64, image_w as f64 / gw as f64)
            .clamp_to(image_h, image_w),
        None => PixelBox::new(0, 0, image_w, image_h),
    };
    BinaryRegion { mask, bbox }
}

fn cropped_enlargement(i0: &Array2<f32>, region: &BinaryRegion) -> Array2<f32> {
    let (h, w) = i0.dim();
    let bbox = region.bbox.expand_to_min_side(2, h, w);
    let crop = imgops::crop(i0, &bbox);
    imgops::resize_bilinear(&crop, h, w)
}

/// Blend the image with its attended crop blown up to full frame.
pub fn attention_mixup(i0: &Array2<f32>, region: &BinaryRegion, gamma: f32) -> Array2<f32> {
    let b = cropped_enlargement(i0, region);
    if gamma >= 1.0 {
        return i0.clone();
    }
    if gamma <= 0.0 {
        return b;
    }
    let mut out = i0.clone();
    // i0 + (1-gamma)(b - i0): exact identity whenever b equals i0
    out.zip_mut_with(&b, |o, &bv| {
        *o = (*o + (1.0 - gamma) * (bv - *o)).clamp(0.0, 1.0);
    });
    out
}

/// Copy the attended crop to a random in-frame position, avoiding the source
/// box whenever any non-overlapping position exists.
pub fn attention_patching(
    i0: &Array2<f32>,
    region: &BinaryRegion,
    rng: &mut impl Rng,
) -> Array2<f32> {
    let (h, w) = i0.dim();
    let bbox = region.bbox.expand_to_min_side(2, h, w);
    let (bh, bw) = (bbox.height(), bbox.width());
    let mut clear = Vec::new();
    let mut all = Vec::new();
    for y in 0..=(h - bh) {
        for x in 0..=(w - bw) {
            let candidate = PixelBox::new(x, y, x + bw, y + bh);
            all.push((y, x));
            if candidate.intersection(&bbox).is_empty() {
                clear.push((y, x));
            }
        }
    }
    let pool = if clear.is_empty() { &all } else { &clear };
    let (py, px) = pool[rng.random_range(0..pool.len())];
    let mut out = i0.clone();
    for dy in 0..bh {
        for dx in 0..bw {
            out[(py + dy, px + dx)] = i0[(bbox.y0 + dy, bbox.x0 + dx)];
        }
    }
    out
}

/// Multiply pixels under high attention by `dim_factor`, leaving the rest
/// untouched. The map is upsampled to image resolution before thresholding.
pub fn attention_dimming(
    i0: &Array2<f32>,
    a_star: &Array2<f32>,
    theta_d: f32,
    dim_factor: f32,
) -> Array2<f32> {
    let (h, w) = i0.dim();
    let up = imgops::resize_bilinear(a_star, h, w);
    let mut out = i0.clone();
    out.zip_mut_with(&up, |o, &a| {
        if a > theta_d {
            *o *= dim_factor;
        }
    });
    out
}

/// Per-sample record of the random draws, for previews and reproducibility
/// checks.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SampleChoices {
    pub mixup_map: Option<usize>,
    pub gamma: Option<f32>,
    pub patch_map: Option<usize>,
    pub dim_map: Option<usize>,
}

pub struct AuxiliaryBatch {
    pub mixup: Vec<Array2<f32>>,
    pub patching: Vec<Array2<f32>>,
    pub dimming: Vec<Array2<f32>>,
    pub choices: Vec<SampleChoices>,
}

/// Build the three auxiliary batches from a detached attention stack
/// [B,N,S,S]. Each enabled augmentation draws its own map index per sample;
/// disabled routes carry an unmodified copy.
pub fn make_auxiliary_batch(
    images: &[Array2<f32>],
    stack: &ArrayViewD<'_, f32>,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AuxiliaryBatch> {
    config.validate()?;
    let shape = stack.shape();
    if shape.len() != 4 || shape[0] != images.len() {
        return Err(Error::Shape(format!(
            "attention stack {shape:?} does not match batch of {}",
            images.len()
        )));
    }
    let n_maps = shape[1];
    let mut out = AuxiliaryBatch {
        mixup: Vec::with_capacity(images.len()),
        patching: Vec::with_capacity(images.len()),
        dimming: Vec::with_capacity(images.len()),
        choices: Vec::with_capacity(images.len()),
    };
    for (i, image) in images.iter().enumerate() {
        let (h, w) = image.dim();
        let mut choices = SampleChoices {
            mixup_map: None,
            gamma: None,
            patch_map: None,
            dim_map: None,
        };
        if config.enabled.mixup {
            let j = rng.random_range(0..n_maps);
            let gamma = config.draw_gamma(rng);
            let a = normalize_attention(stack, i, j);
            let region = threshold_region(&a, config.theta_m, h, w);
            out.mixup.push(attention_mixup(image, &region, gamma));
            choices.mixup_map = Some(j);
            choices.gamma = Some(gamma);
        } else {
            out.mixup.push(image.clone());
        }
        if config.enabled.patching {
            let j = rng.random_range(0..n_maps);
            let a = normalize_attention(stack, i, j);
            let region = threshold_region(&a, config.theta_m, h, w);
            out.patching.push(attention_patching(image, &region, rng));
            choices.patch_map = Some(j);
        } else {
            out.patching.push(image.clone());
        }
        if config.enabled.dimming {
            let j = rng.random_range(0..n_maps);
            let a = normalize_attention(stack, i, j);
            out.dimming
                .push(attention_dimming(image, &a, config.theta_d, config.dim_factor));
            choices.dim_map = Some(j);
        } else {
            out.dimming.push(image.clone());
        }
        out.choices.push(choices);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, ArrayD, IxDyn};

    fn checker(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.1 + 0.8 * (((y / 4 + x / 4) % 2) as f32) + 0.001 * (y * w + x) as f32 % 0.05
        })
    }

    #[test]
    fn threshold_matches_worked_grid() {
        let a = arr2(&[[0.9f32, 0.1], [0.2, 0.8]]);
        let region = threshold_region(&a, 0.5, 2, 2);
        assert_eq!(region.mask, arr2(&[[true, false], [false, true]]));
        assert_eq!(region.bbox, PixelBox::new(0, 0, 2, 2));
        // same mask scaled to a 224 px frame covers everything
        let region = threshold_region(&a, 0.5, 224, 224);
        assert_eq!(region.bbox, PixelBox::new(0, 0, 224, 224));
    }

    #[test]
    fn threshold_is_strict_and_falls_back_to_full_frame() {
        let a = arr2(&[[0.5f32, 0.5], [0.3, 0.2]]);
        let region = threshold_region(&a, 0.5, 64, 64);
        assert!(region.mask.iter().all(|&m| !m));
        assert_eq!(region.bbox, PixelBox::new(0, 0, 64, 64));
    }

    #[test]
    fn single_hot_cell_maps_to_its_pixel_block() {
        let mut a = Array2::zeros((7, 7));
        a[(0, 0)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 224, 224);
        assert_eq!(region.bbox, PixelBox::new(0, 0, 32, 32));
    }

    #[test]
    fn mixup_endpoints_are_exact() {
        let i0 = checker(16, 16);
        let mut a = Array2::zeros((4, 4));
        a[(1, 1)] = 1.0f32;
        a[(2, 2)] = 0.9;
        let region = threshold_region(&a, 0.5, 16, 16);
        assert_eq!(attention_mixup(&i0, &region, 1.0), i0);
        let expect_b = {
            let crop = imgops::crop(&i0, &region.bbox);
            imgops::resize_bilinear(&crop, 16, 16)
        };
        assert_eq!(attention_mixup(&i0, &region, 0.0), expect_b);
    }

    #[test]
    fn mixup_of_constant_image_is_constant() {
        let i0 = Array2::from_elem((12, 12), 0.2f32);
        let mut a = Array2::zeros((3, 3));
        a[(0, 2)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 12, 12);
        for gamma in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let i1 = attention_mixup(&i0, &region, gamma);
            for &v in i1.iter() {
                assert!((v - 0.2).abs() < 1e-6, "gamma {gamma}: {v}");
            }
        }
    }

    #[test]
    fn uniform_attention_makes_mixup_an_identity() {
        let i0 = checker(20, 20);
        let a = Array2::from_elem((5, 5), 1.0f32);
        let region = threshold_region(&a, 0.5, 20, 20);
        assert_eq!(region.bbox, PixelBox::new(0, 0, 20, 20));
        for gamma in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(attention_mixup(&i0, &region, gamma), i0);
        }
    }

    #[test]
    fn mixup_blend_interpolates_between_endpoints() {
        let i0 = checker(16, 16);
        let mut a = Array2::zeros((4, 4));
        a[(1, 2)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 16, 16);
        let b = attention_mixup(&i0, &region, 0.0);
        let mid = attention_mixup(&i0, &region, 0.5);
        for ((&lo, &hi), &m) in i0.iter().zip(b.iter()).zip(mid.iter()) {
            let expect = 0.5 * lo + 0.5 * hi;
            assert!((m - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn full_frame_patching_is_identity() {
        let i0 = checker(16, 16);
        let a = Array2::zeros((4, 4));
        let region = threshold_region(&a, 0.5, 16, 16);
        let mut rng = crate::rng::derive(0, "patch");
        assert_eq!(attention_patching(&i0, &region, &mut rng), i0);
    }

    #[test]
    fn patching_changes_only_the_pasted_rectangle() {
        let i0 = checker(32, 32);
        let mut a = Array2::zeros((4, 4));
        a[(0, 0)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 32, 32);
        let mut rng = crate::rng::derive(1, "patch");
        let i2 = attention_patching(&i0, &region, &mut rng);
        let (bh, bw) = (region.bbox.height(), region.bbox.width());
        let mut diff_box: Option<(usize, usize)> = None;
        for y in 0..32 {
            for x in 0..32 {
                if i2[(y, x)] != i0[(y, x)] {
                    let (dy, dx) = diff_box.get_or_insert((y, x)).clone();
                    assert!(y < dy + bh && x >= dx.saturating_sub(bw) && x < dx + bw + bw);
                }
            }
        }
        // the paste landed somewhere outside the source corner block
        let (py, px) = diff_box.expect("patch visible on a generic image");
        let source = region.bbox;
        assert!(py >= source.y1 || px >= source.x1);
    }

    #[test]
    fn patching_prefers_non_overlapping_targets() {
        let i0 = checker(32, 32);
        let mut a = Array2::zeros((4, 4));
        a[(1, 1)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 32, 32);
        for trial in 0..20 {
            let mut rng = crate::rng::derive(trial, "patch-clear");
            let i2 = attention_patching(&i0, &region, &mut rng);
            // source block must be untouched: a non-overlapping target exists
            for y in region.bbox.y0..region.bbox.y1 {
                for x in region.bbox.x0..region.bbox.x1 {
                    assert_eq!(i2[(y, x)], i0[(y, x)], "trial {trial} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn patching_is_deterministic_given_the_stream() {
        let i0 = checker(24, 24);
        let mut a = Array2::zeros((3, 3));
        a[(2, 0)] = 1.0f32;
        let region = threshold_region(&a, 0.5, 24, 24);
        let run = || {
            let mut rng = crate::rng::derive(9, "patch-det");
            attention_patching(&i0, &region, &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dimming_with_cold_attention_is_identity() {
        let i0 = checker(16, 16);
        let a = Array2::zeros((4, 4));
        assert_eq!(attention_dimming(&i0, &a, 0.5, 0.1), i0);
    }

    #[test]
    fn dimming_with_saturated_attention_scales_everything() {
        let i0 = checker(16, 16);
        let a = Array2::from_elem((4, 4), 1.0f32);
        let i3 = attention_dimming(&i0, &a, 0.5, 0.1);
        for (&v, &o) in i3.iter().zip(i0.iter()) {
            assert!((v - 0.1 * o).abs() < 1e-7);
        }
    }

    #[test]
    fn dimming_never_brightens_and_never_overdims() {
        let mut rng = crate::rng::derive(5, "dim-fuzz");
        for _ in 0..20 {
            let i0 = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0));
            let a = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0f32..1.0));
            let i3 = attention_dimming(&i0, &a, 0.5, 0.1);
            for (&v, &o) in i3.iter().zip(i0.iter()) {
                assert!(v <= o + 1e-7);
                assert!(v >= 0.1 * o - 1e-7);
            }
        }
    }

    fn toy_stack(b: usize, n: usize) -> ArrayD<f32> {
        let mut rng = crate::rng::derive(77, "stack");
        ArrayD::from_shape_fn(IxDyn(&[b, n, 4, 4]), |_| rng.random_range(0.0f32..2.0))
    }

    #[test]
    fn disabled_augmentations_pass_through() {
        let images = vec![checker(16, 16), checker(16, 16).mapv(|v| 1.0 - v)];
        let stack = toy_stack(2, 3);
        let config = AugmentConfig {
            enabled: AugSet::none(),
            ..AugmentConfig::default()
        };
        let mut rng = crate::rng::derive(2, "aux");
        let aux = make_auxiliary_batch(&images, &stack.view(), &config, &mut rng).unwrap();
        for i in 0..2 {
            assert_eq!(aux.mixup[i], images[i]);
            assert_eq!(aux.patching[i], images[i]);
            assert_eq!(aux.dimming[i], images[i]);
            assert_eq!(aux.choices[i].mixup_map, None);
        }
    }

    #[test]
    fn single_enabled_augmentation_leaves_other_routes_alone() {
        let images = vec![checker(16, 16)];
        // every map localized at one corner so the attended crop is a proper
        // sub-window and mixup is not the identity
        let mut stack = ArrayD::from_elem(IxDyn(&[1, 4, 4, 4]), 0.1f32);
        for j in 0..4 {
            stack[IxDyn(&[0, j, 0, 0])] = 1.0;
        }
        let config = AugmentConfig {
            enabled: AugSet {
                mixup: true,
                patching: false,
                dimming: false,
            },
            gamma: (0.2, 0.2),
            ..AugmentConfig::default()
        };
        let mut rng = crate::rng::derive(3, "aux");
        let aux = make_auxiliary_batch(&images, &stack.view(), &config, &mut rng).unwrap();
        assert_eq!(aux.patching[0], images[0]);
        assert_eq!(aux.dimming[0], images[0]);
        assert_ne!(aux.mixup[0], images[0], "generic input must change");
    }

    #[test]
    fn auxiliary_batches_are_reproducible() {
        let images = vec![checker(16, 16), checker(16, 16).mapv(|v| v * 0.5)];
        let stack = toy_stack(2, 4);
        let config = AugmentConfig {
            gamma: (0.2, 0.8),
            ..AugmentConfig::default()
        };
        let run = || {
            let mut rng = crate::rng::derive(4, "aux-det");
            make_auxiliary_batch(&images, &stack.view(), &config, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.mixup, b.mixup);
        assert_eq!(a.patching, b.patching);
        assert_eq!(a.dimming, b.dimming);
        assert_eq!(a.choices, b.choices);
    }

    #[test]
    fn outputs_stay_in_unit_range_and_keep_shape() {
        let mut rng = crate::rng::derive(6, "aux-fuzz");
        for trial in 0..10 {
            let images: Vec<Array2<f32>> = (0..3)
                .map(|_| Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0f32..1.0)))
                .collect();
            let stack = ArrayD::from_shape_fn(IxDyn(&[3, 2, 4, 4]), |_| {
                rng.random_range(0.0f32..3.0)
            });
            let config = AugmentConfig {
                gamma: (0.0, 1.0),
                ..AugmentConfig::default()
            };
            let aux = make_auxiliary_batch(&images, &stack.view(), &config, &mut rng).unwrap();
            for batch in [&aux.mixup, &aux.patching, &aux.dimming] {
                for img in batch {
                    assert_eq!(img.dim(), (16, 16));
                    assert!(
                        img.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()),
                        "trial {trial}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let images = vec![checker(8, 8)];
        let stack = toy_stack(2, 2);
        let config = AugmentConfig::default();
        let mut rng = crate::rng::derive(7, "aux");
        assert!(make_auxiliary_batch(&images, &stack.view(), &config, &mut rng).is_err());
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut config = AugmentConfig::default();
        config.theta_m = 1.5;
        assert!(config.validate().is_err());
        let mut config = AugmentConfig::default();
        config.gamma = (0.8, 0.2);
        assert!(config.validate().is_err());
        let mut config = AugmentConfig::default();
        config.dim_factor = -0.1;
        assert!(config.validate().is_err());
    }

    #[test]
    fn aug_set_parses_subsets() {
        use std::str::FromStr;
        let set = AugSet::from_str("mixup,dimming").unwrap();
        assert!(set.mixup && !set.patching && set.dimming);
        assert_eq!(set.to_string(), "mixup,dimming");
        assert_eq!(AugSet::from_str("none").unwrap(), AugSet::none());
        assert!(AugSet::from_str("cutout").is_err());
    }
}
