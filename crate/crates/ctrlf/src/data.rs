//! Dataset ingestion: image-folder scanning with a stratified split,
//! decode/resize/augment/standardize batching, and an in-memory synthetic
//! set for smoke tests.
//!
//! Folder layout: `root/<class_name>/<image>`, or explicit `root/train/...`
//! plus `root/test/...` trees. Class ids follow the lexicographic order of
//! the class directory names.

use crate::error::{Error, Result};
use crate::tensor::TensorData;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];
const NORM_CACHE: &str = ".ctrlf_norm.tsv";
const NORM_SAMPLE_IMAGES: usize = 64;

/// Per-channel standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// (path relative to root, label id)
    pub train: Vec<(PathBuf, usize)>,
    pub test: Vec<(PathBuf, usize)>,
    pub resolution: usize,
    pub normalization: Normalization,
}

/// One training batch: standardized images plus integer labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: TensorData<f32>,
    pub labels: Vec<usize>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)
        .map_err(|e| Error::dataset(format!("cannot read dataset root {}: {e}", root.display())))?
    {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') {
                dirs.push((name, entry.path()));
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        match entry {
            Ok(e) if is_image(&e.path()) => files.push(e.path()),
            Ok(_) => {}
            Err(err) => eprintln!("warning: skipping unreadable entry in {}: {err}", dir.display()),
        }
    }
    files.sort();
    Ok(files)
}

/// Scans an image-folder tree into a manifest with a deterministic
/// stratified split (or the explicit `train/`+`test/` split when present).
pub fn scan_dataset(root: &Path, resolution: usize, split_ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&(1.0 - split_ratio)) {
        return Err(Error::config(format!("split ratio {split_ratio} outside (0,1]")));
    }
    let has_explicit = root.join("train").is_dir() && root.join("test").is_dir();
    let (classes, train, test) = if has_explicit {
        let train_dirs = list_class_dirs(&root.join("train"))?;
        let test_dirs = list_class_dirs(&root.join("test"))?;
        let classes: Vec<String> = train_dirs.iter().map(|(n, _)| n.clone()).collect();
        let test_names: Vec<String> = test_dirs.iter().map(|(n, _)| n.clone()).collect();
        if classes != test_names {
            return Err(Error::dataset(format!(
                "train/test class directories disagree: {classes:?} vs {test_names:?}"
            )));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (items, dirs) in [(&mut train, &train_dirs), (&mut test, &test_dirs)] {
            for (label, (name, dir)) in dirs.iter().enumerate() {
                let files = list_images(dir)?;
                if files.is_empty() {
                    return Err(Error::dataset(format!("class directory '{name}' contains no images")));
                }
                for f in files {
                    items.push((f.strip_prefix(root).unwrap().to_path_buf(), label));
                }
            }
        }
        (classes, train, test)
    } else {
        let dirs = list_class_dirs(root)?;
        if dirs.is_empty() {
            return Err(Error::dataset(format!(
                "no class directories under {}",
                root.display()
            )));
        }
        let classes: Vec<String> = dirs.iter().map(|(n, _)| n.clone()).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (label, (name, dir)) in dirs.iter().enumerate() {
            let mut files = list_images(dir)?;
            if files.is_empty() {
                return Err(Error::dataset(format!("class directory '{name}' contains no images")));
            }
            files.shuffle(&mut rng);
            let n_train = ((files.len() as f64) * split_ratio).round() as usize;
            let n_train = n_train.clamp(1, files.len());
            for (i, f) in files.into_iter().enumerate() {
                let rel = f.strip_prefix(root).unwrap().to_path_buf();
                if i < n_train {
                    train.push((rel, label));
                } else {
                    test.push((rel, label));
                }
            }
        }
        (classes, train, test)
    };

    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        train,
        test,
        resolution,
        normalization: Normalization::default(),
    };
    manifest.normalization = load_or_compute_normalization(&manifest);
    Ok(manifest)
}

fn load_or_compute_normalization(manifest: &DatasetManifest) -> Normalization {
    let cache = manifest.root.join(NORM_CACHE);
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Some(n) = parse_normalization(&text) {
            return n;
        }
    }
    let n = compute_normalization(manifest);
    let text = format!(
        "{} {} {}\n{} {} {}\n",
        n.mean[0], n.mean[1], n.mean[2], n.std[0], n.std[1], n.std[2]
    );
    let _ = fs::write(&cache, text); // best effort: read-only roots fall back to recompute
    n
}

fn parse_normalization(text: &str) -> Option<Normalization> {
    let mut lines = text.lines();
    let parse3 = |line: &str| -> Option<[f32; 3]> {
        let v: Vec<f32> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        (v.len() == 3).then(|| [v[0], v[1], v[2]])
    };
    let mean = parse3(lines.next()?)?;
    let std = parse3(lines.next()?)?;
    if std.iter().all(|s| *s > 0.0) {
        Some(Normalization { mean, std })
    } else {
        None
    }
}

/// Channel statistics from a deterministic subsample of the training split;
/// falls back to (0.5, 0.5) when nothing decodes.
fn compute_normalization(manifest: &DatasetManifest) -> Normalization {
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for (rel, _) in manifest.train.iter().take(NORM_SAMPLE_IMAGES) {
        match decode_resized(&manifest.root.join(rel), manifest.resolution) {
            Ok(chw) => {
                let hw = manifest.resolution * manifest.resolution;
                for c in 0..3 {
                    for &v in &chw[c * hw..(c + 1) * hw] {
                        sums[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
                count += hw;
            }
            Err(e) => eprintln!("warning: normalization skip: {e}"),
        }
    }
    if count == 0 {
        return Normalization::default();
    }
    let mut mean = [0.0f32; 3];
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        let m = sums[c] / count as f64;
        let v = (sq[c] / count as f64 - m * m).max(1e-6);
        mean[c] = m as f32;
        std[c] = v.sqrt() as f32;
    }
    Normalization { mean, std }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Writes the split index files (`train.index`, `test.index`), one
    /// `relative_path<TAB>label` per line with LF endings.
    pub fn save_indexes(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, entries) in [("train.index", &self.train), ("test.index", &self.test)] {
            let mut text = String::new();
            for (rel, label) in entries {
                text.push_str(&format!("{}\t{}\n", rel.display(), label));
            }
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

fn decode_resized(path: &Path, resolution: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let resized = image::imageops::resize(
        &rgb,
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let hw = resolution * resolution;
    let mut chw = vec![0.0f32; 3 * hw];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            chw[c * hw + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(chw)
}

/// Horizontal flip of a CHW plane stack. An involution: applying it twice
/// restores the input exactly.
pub fn hflip_chw(chw: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; chw.len()];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = chw[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Rotation about the image center with bilinear sampling and reflected
/// borders. Angle zero reproduces the input exactly.
pub fn rotate_chw(chw: &[f32], channels: usize, h: usize, w: usize, degrees: f32) -> Vec<f32> {
    let rad = degrees.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = vec![0.0; chw.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0i = x0 as isize;
            let y0i = y0 as isize;
            let (x0r, x1r) = (reflect(x0i, w), reflect(x0i + 1, w));
            let (y0r, y1r) = (reflect(y0i, h), reflect(y0i + 1, h));
            for c in 0..channels {
                let plane = &chw[c * h * w..(c + 1) * h * w];
                let v = plane[y0r * w + x0r] * (1.0 - fx) * (1.0 - fy)
                    + plane[y0r * w + x1r] * fx * (1.0 - fy)
                    + plane[y1r * w + x0r] * (1.0 - fx) * fy
                    + plane[y1r * w + x1r] * fx * fy;
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

const ROTATION_RANGE_DEG: f32 = 15.0;

fn augment_chw(chw: Vec<f32>, resolution: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let chw = if rng.gen::<f64>() < 0.5 {
        hflip_chw(&chw, 3, resolution, resolution)
    } else {
        chw
    };
    let angle = (rng.gen::<f32>() * 2.0 - 1.0) * ROTATION_RANGE_DEG;
    rotate_chw(&chw, 3, resolution, resolution, angle)
}

fn standardize(chw: &mut [f32], hw: usize, norm: &Normalization) {
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for v in &mut chw[c * hw..(c + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Decodes, resizes, optionally augments, and standardizes the images at
/// `indices` of the chosen split.
pub fn load_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    split: Split,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    assert!(!indices.is_empty(), "load_batch: empty index list");
    let entries = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    let r = manifest.resolution;
    let hw = r * r;
    let mut images = Vec::with_capacity(indices.len() * 3 * hw);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (rel, label) = entries
            .get(i)
            .ok_or_else(|| Error::dataset(format!("index {i} out of range ({})", entries.len())))?;
        let mut chw = decode_resized(&manifest.root.join(rel), r)?;
        if augment {
            chw = augment_chw(chw, r, rng);
        }
        standardize(&mut chw, hw, &manifest.normalization);
        images.extend_from_slice(&chw);
        labels.push(*label);
    }
    Ok(Batch {
        images: TensorData::new(vec![indices.len(), 3, r, r], images),
        labels,
    })
}

/// Fully in-memory dataset (synthetic smoke data); images are raw [0,1]
/// CHW planes standardized at batch time with the default normalization.
#[derive(Clone, Debug)]
pub struct MemoryDataset {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub resolution: usize,
    pub classes: usize,
}

impl MemoryDataset {
    pub fn batch(&self, indices: &[usize]) -> Batch {
        assert!(!indices.is_empty(), "batch: empty index list");
        let hw = self.resolution * self.resolution;
        let norm = Normalization::default();
        let mut images = Vec::with_capacity(indices.len() * 3 * hw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let mut chw = self.images[i].clone();
            standardize(&mut chw, hw, &norm);
            images.extend_from_slice(&chw);
            labels.push(self.labels[i]);
        }
        Batch {
            images: TensorData::new(vec![indices.len(), 3, self.resolution, self.resolution], images),
            labels,
        }
    }
}

/// Synthetic overfit set: per-class channel offsets plus uniform noise.
/// Classes are trivially separable, so a working trainer must drive
/// training accuracy to 1.0 quickly.
pub fn synthetic_smoke(classes: usize, per_class: usize, resolution: usize, seed: u64) -> MemoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = resolution * resolution;
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        for _ in 0..per_class {
            let mut chw = vec![0.0f32; 3 * hw];
            for c in 0..3 {
                let base = 0.15 + 0.7 * (((class + c * 3) % classes) as f32) / (classes.max(2) - 1) as f32;
                for v in &mut chw[c * hw..(c + 1) * hw] {
                    *v = (base + (rng.gen::<f32>() - 0.5) * 0.2).clamp(0.0, 1.0);
                }
            }
            images.push(chw);
            labels.push(class);
        }
    }
    MemoryDataset {
        images,
        labels,
        resolution,
        classes,
    }
}

/// Every training index exactly once, in seeded shuffled order.
pub fn epoch_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Either a scanned image folder or an in-memory set, behind one API.
pub enum DataSource {
    Folder(DatasetManifest),
    Memory(MemoryDataset),
}

impl DataSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Folder(m) => m.num_classes(),
            DataSource::Memory(m) => m.classes,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            DataSource::Folder(m) => m.resolution,
            DataSource::Memory(m) => m.resolution,
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            DataSource::Folder(m) => m.train.len(),
            DataSource::Memory(m) => m.images.len(),
        }
    }

    pub fn test_len(&self) -> usize {
        match self {
            DataSource::Folder(m) => m.test.len(),
            DataSource::Memory(m) => m.images.len(),
        }
    }

    pub fn train_batch(&self, indices: &[usize], augment: bool, rng: &mut ChaCha8Rng) -> Result<Batch> {
        match self {
            DataSource::Folder(m) => load_batch(m, indices, Split::Train, augment, rng),
            DataSource::Memory(m) => Ok(m.batch(indices)),
        }
    }

    pub fn test_batch(&self, indices: &[usize]) -> Result<Batch> {
        match self {
            DataSource::Folder(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0); // unused without augment
                load_batch(m, indices, Split::Test, false, &mut rng)
            }
            DataSource::Memory(m) => Ok(m.batch(indices)),
        }
    }
}
