//! Dataset ingestion, synthetic data generation, and stratified fold splits.
//!
//! Manifests are CSV files `path,label[,annotation_path]` with a header row;
//! paths are resolved against the manifest's directory. Annotations ending in
//! `.json` are half-open pixel boxes, anything else is read as a mask image
//! (nonzero = foreground).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imgops::{self, PixelBox};
use crate::rng;

/// Localization ground truth attached to a sample.
#[derive(Debug, Clone)]
pub enum Annotation {
    Mask(Array2<bool>),
    Box(PixelBox),
}

impl Annotation {
    /// Minimal enclosing box of the annotated region, None for empty masks.
    pub fn bbox(&self) -> Option<PixelBox> {
        match self {
            Annotation::Mask(m) => imgops::mask_bbox(m),
            Annotation::Box(b) => Some(*b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array2<f32>,
    pub label: usize,
    pub id: String,
    pub annotation: Option<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub annotation_path: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Unique label names in first-appearance order.
    pub classes: Vec<String>,
    /// Directory entries are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// Parse a manifest CSV. With `strict`, every referenced image must exist.
pub fn load_manifest(path: &Path, strict: bool) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
        let h: Vec<&str> = headers.iter().map(|s| s.trim()).collect();
        if h.len() < 2 || h[0] != "path" || h[1] != "label" {
            return Err(Error::Data(format!(
                "manifest {}: header must start with `path,label`, got {h:?}",
                path.display()
            )));
        }
    }
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record
            .map_err(|e| Error::Data(format!("manifest {} row {}: {e}", path.display(), i + 2)))?;
        if record.len() < 2 || record[0].trim().is_empty() || record[1].trim().is_empty() {
            return Err(Error::Data(format!(
                "manifest {} row {}: malformed row, expected `path,label[,annotation_path]`",
                path.display(),
                i + 2
            )));
        }
        let img_path = record[0].trim().to_string();
        let label = record[1].trim().to_string();
        let annotation_path = record
            .get(2)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from);
        if !seen.insert(img_path.clone()) {
            return Err(Error::Data(format!("duplicate path `{img_path}` in manifest")));
        }
        if strict && !root.join(&img_path).is_file() {
            return Err(Error::Data(format!(
                "missing image file `{}` referenced by manifest",
                img_path
            )));
        }
        if !classes.iter().any(|c| c == &label) {
            classes.push(label.clone());
        }
        entries.push(ManifestEntry {
            path: img_path,
            label,
            annotation_path,
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("empty manifest {}", path.display())));
    }
    Ok(Manifest {
        entries,
        classes,
        root,
    })
}

/// Write a manifest CSV (inverse of [`load_manifest`]).
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Data(format!("write manifest: {e}")))?;
    let has_annotations = manifest.entries.iter().any(|e| e.annotation_path.is_some());
    let header: &[&str] = if has_annotations {
        &["path", "label", "annotation_path"]
    } else {
        &["path", "label"]
    };
    writer
        .write_record(header)
        .map_err(|e| Error::Data(format!("write manifest: {e}")))?;
    for e in &manifest.entries {
        let mut row = vec![e.path.clone(), e.label.clone()];
        if has_annotations {
            row.push(e.annotation_path.clone().unwrap_or_default());
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::Data(format!("write manifest: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    Ok(())
}

/// Load every sample referenced by a manifest into memory.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let img_path = manifest.root.join(&e.path);
            let image = imgops::read_gray(&img_path)?;
            let annotation = match &e.annotation_path {
                None => None,
                Some(p) if p.ends_with(".json") => {
                    let full = manifest.root.join(p);
                    let text = std::fs::read_to_string(&full)
                        .map_err(|err| Error::io(full.clone(), err))?;
                    let b: PixelBox = serde_json::from_str(&text)
                        .map_err(|err| Error::Data(format!("box annotation {p}: {err}")))?;
                    Some(Annotation::Box(b))
                }
                Some(p) => {
                    let mask = imgops::read_mask(&manifest.root.join(p))?;
                    if mask.dim() != image.dim() {
                        return Err(Error::Data(format!(
                            "mask {} is {:?} but image {} is {:?}",
                            p,
                            mask.dim(),
                            e.path,
                            image.dim()
                        )));
                    }
                    Some(Annotation::Mask(mask))
                }
            };
            let label = manifest
                .class_index(&e.label)
                .expect("manifest label always in classes");
            Ok(Sample {
                image,
                label,
                id: e.path.clone(),
                annotation,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Images are size×size.
    pub size: usize,
    pub seed: u64,
    /// Stamp a bright corner glyph uncorrelated with the class.
    pub marker: bool,
}

/// Base blob center for a class, in unit coordinates.
///
/// The first four classes sit at the quadrant centers; further classes move
/// onto inner rings so centers stay pairwise distinct.
fn class_center_base(class: usize) -> (f64, f64) {
    let quad = class % 4;
    let ring = (class / 4) as f64;
    let qx = if quad & 1 == 0 { 0.25 } else { 0.75 };
    let qy = if quad < 2 { 0.25 } else { 0.75 };
    let shrink = 1.0 / (1.0 + 0.6 * ring);
    (
        0.5 + (qx - 0.5) * shrink,
        0.5 + (qy - 0.5) * shrink,
    )
}

/// Generate a deterministic pseudo-radiograph dataset.
///
/// Each sample is a soft Gaussian blob at a class-conditional location over
/// a noisy background; the half-maximum region of the blob is attached as a
/// mask annotation.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Vec<Sample>> {
    if spec.classes < 2 {
        return Err(Error::Usage(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class < 1 {
        return Err(Error::Usage("per_class must be at least 1".into()));
    }
    if spec.size < 32 {
        return Err(Error::Usage(format!(
            "synthetic image size must be at least 32, got {}",
            spec.size
        )));
    }
    let s = spec.size;
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let (bx, by) = class_center_base(class);
        for i in 0..spec.per_class {
            let index = (class * spec.per_class + i) as u64;
            let mut r = rng::derive_indexed(spec.seed, "synth", index);
            let jitter = s as f64 / 16.0;
            let cx = bx * s as f64 + r.random_range(-jitter..jitter);
            let cy = by * s as f64 + r.random_range(-jitter..jitter);
            let sigma = s as f64 * r.random_range(0.13..0.18);
            let amplitude = r.random_range(0.55..0.85);

            let mut image = Array2::<f32>::zeros((s, s));
            let mut mask = Array2::<bool>::from_elem((s, s), false);
            let inv2s2 = 1.0 / (2.0 * sigma * sigma);
            for y in 0..s {
                for x in 0..s {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let blob = amplitude * (-(dx * dx + dy * dy) * inv2s2).exp();
                    let base = 0.10 + 0.05 * (y as f64 / s as f64);
                    let noise = r.random_range(0.0..0.10);
                    image[(y, x)] = ((base + noise + blob) as f32).clamp(0.0, 1.0);
                    mask[(y, x)] = blob >= 0.5 * amplitude;
                }
            }
            if spec.marker {
                stamp_corner_glyph(&mut image, &mut r);
            }
            samples.push(Sample {
                image,
                label: class,
                id: format!("c{class}-{i:04}"),
                annotation: Some(Annotation::Mask(mask)),
            });
        }
    }
    Ok(samples)
}

/// Bright L-shaped glyph in a random corner, mimicking position labels
/// burned into radiographs.
fn stamp_corner_glyph(image: &mut Array2<f32>, r: &mut impl Rng) {
    let s = image.nrows();
    let g = (s / 10).max(5);
    let corner = r.random_range(0..4usize);
    let (oy, ox) = (
        if corner < 2 { 1 } else { s - 1 - g },
        if corner % 2 == 0 { 1 } else { s - 1 - g },
    );
    let bar = (g / 3).max(1);
    for y in 0..g {
        for x in 0..g {
            if x < bar || y >= g - bar {
                image[(oy + y, ox + x)] = 0.95;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    /// Each fold is a list of indices into the sample list.
    pub folds: Vec<Vec<usize>>,
    pub k: usize,
}

impl FoldSplit {
    /// Train/eval index sets where `fold` is held out.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        assert!(fold < self.k, "fold {fold} out of range");
        let eval = self.folds[fold].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        (train, eval)
    }
}

/// Split sample indices into K stratified folds.
///
/// Per class, indices are shuffled then dealt round-robin, so per-fold class
/// counts differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Usage(format!("fold count must be at least 2, got {k}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut folds = vec![Vec::new(); k];
    for class in 0..classes {
        let mut idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idxs.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} samples, fewer than {k} folds",
                idxs.len()
            )));
        }
        let mut r = rng::derive_indexed(seed, "folds", class as u64);
        idxs.shuffle(&mut r);
        for (i, idx) in idxs.into_iter().enumerate() {
            folds[i % k].push(idx);
        }
    }
    Ok(FoldSplit { folds, k })
}
