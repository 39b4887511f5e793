//! Image batches, on-disk dataset ingestion and deterministic epoch ordering.
//!
//! Layout on disk is `root/<split>/<class_name>/*.png|jpg`; class directories
//! are optional when labels are not needed. Pixels are scaled to `[-1, 1]`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Dense `(batch, 3, H, W)` pixels in `[-1, 1]` plus optional class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Array4<f32>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got shape {:?}", data.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != data.shape()[0] {
                return Err(Error::Shape(format!("{} labels for {} images", l.len(), data.shape()[0])));
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image batch".into()));
        }
        Ok(Self { data, labels })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            data: self.data.select(Axis(0), idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn concat(batches: &[ImageBatch]) -> Result<ImageBatch> {
        let views: Vec<_> = batches.iter().map(|b| b.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let labels = batches
            .iter()
            .map(|b| b.labels.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(ImageBatch { data, labels })
    }

    pub fn check_size(&self, image_size: usize) -> Result<()> {
        if self.height() != image_size || self.width() != image_size {
            return Err(Error::Shape(format!(
                "images are {}x{}, config expects {image_size}x{image_size}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split `{other}` (expected train or eval)")),
        }
    }
}

/// An in-memory image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: ImageBatch,
    pub class_names: Vec<String>,
    /// Files that failed to decode during ingestion.
    pub skipped: usize,
}

impl Dataset {
    pub fn from_batch(images: ImageBatch, class_names: Vec<String>) -> Self {
        Self { images, class_names, skipped: 0 }
    }

    /// Reads `root/<split>`, resizing the shorter side to `image_size` and
    /// cropping to a square: centred for eval, at a seeded random offset for train.
    pub fn load(root: impl AsRef<Path>, split: Split, config: &RunConfig) -> Result<Self> {
        Self::load_dir(root.as_ref().join(split.dir_name()), split, config)
    }

    /// Reads images directly under `dir` (or its class subdirectories),
    /// cropping as `split` would.
    pub fn load_dir(dir: impl AsRef<Path>, split: Split, config: &RunConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let (files, class_names) = list_images(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no images under {}", dir.display())));
        }
        let size = config.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut skipped = 0;
        for (path, label) in &files {
            let img = match image::open(path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    skipped += 1;
                    continue;
                }
            };
            let img = fit_square(img, size, split, &mut rng);
            pixels.push(to_signed_unit(&img));
            labels.push(*label);
        }
        if pixels.is_empty() {
            return Err(Error::Dataset(format!("none of the {} files under {} could be read", files.len(), dir.display())));
        }
        let views: Vec<_> = pixels.iter().map(|p| p.view()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let labels = labels.into_iter().collect::<Option<Vec<_>>>();
        Ok(Self { images: ImageBatch::new(data, labels)?, class_names, skipped })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.images.labels.as_deref()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Index permutation for one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The `index`-th batch of `epoch`; the final batch of an epoch may be short.
    pub fn batch_at(&self, batch_size: usize, seed: u64, epoch: u64, index: usize) -> ImageBatch {
        self.images.select(&self.batch_indices(batch_size, seed, epoch, index))
    }

    /// Dataset indices of [`Dataset::batch_at`].
    pub fn batch_indices(&self, batch_size: usize, seed: u64, epoch: u64, index: usize) -> Vec<usize> {
        let order = self.epoch_order(seed, epoch);
        let start = (index * batch_size).min(order.len());
        let end = (start + batch_size).min(order.len());
        order[start..end].to_vec()
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = ImageBatch> + '_ {
        let order = self.epoch_order(seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| self.images.select(&idx))
    }

    /// Sequential, unshuffled batches (for evaluation).
    pub fn ordered_batches(&self, batch_size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            self.images.select(&idx)
        })
    }
}

/// Batches of the first epoch for `root/<split>`, in seeded order.
pub fn ingest_dataset(root: impl AsRef<Path>, split: Split, config: &RunConfig) -> Result<impl Iterator<Item = ImageBatch>> {
    let ds = Dataset::load(root, split, config)?;
    let batches: Vec<ImageBatch> = ds.batches(config.batch_size, config.seed, 0).collect();
    Ok(batches.into_iter())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Image files with class ids (from subdirectory names) in a stable order.
fn list_images(dir: &Path) -> Result<(Vec<(PathBuf, Option<usize>)>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let entries = sorted_entries(dir)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files = Vec::new();
    let mut class_names = Vec::new();
    if class_dirs.is_empty() {
        files.extend(entries.iter().filter(|p| is_image(p)).map(|p| (p.clone(), None)));
    } else {
        for (label, cdir) in class_dirs.iter().enumerate() {
            class_names.push(cdir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for p in sorted_entries(cdir)? {
                if is_image(&p) {
                    files.push((p, Some(label)));
                }
            }
        }
    }
    Ok((files, class_names))
}

fn fit_square(img: RgbImage, size: usize, split: Split, rng: &mut ChaCha8Rng) -> RgbImage {
    let size = size as u32;
    let (w, h) = img.dimensions();
    let img = if w.min(h) != size {
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as u32).max(size);
        let nh = ((h as f64 * scale).round() as u32).max(size);
        image::imageops::resize(&img, nw, nh, FilterType::Triangle)
    } else {
        img
    };
    let (w, h) = img.dimensions();
    let (x0, y0) = match split {
        Split::Eval => ((w - size) / 2, (h - size) / 2),
        Split::Train => (rng.random_range(0..=w - size), rng.random_range(0..=h - size)),
    };
    image::imageops::crop_imm(&img, x0, y0, size, size).to_image()
}

/// `(3, H, W)` array with `v / 127.5 - 1`, so 0 maps to -1 and 255 to 1.
pub fn to_signed_unit(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Inverse of [`to_signed_unit`], clamping to the valid range.
pub fn to_rgb8(img: ArrayView3<f32>) -> RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (((img[[c, y as usize, x as usize]].clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Writes side-by-side `(original | reconstruction)` images stacked vertically.
pub fn write_comparison_png(path: &Path, original: &ImageBatch, recon: &ImageBatch) -> Result<()> {
    let (h, w) = (original.height() as u32, original.width() as u32);
    let n = original.len() as u32;
    let mut canvas = RgbImage::new(2 * w, h * n.max(1));
    for i in 0..original.len() {
        let a = to_rgb8(original.image(i));
        let b = to_rgb8(recon.image(i));
        image::imageops::replace(&mut canvas, &a, 0, (i as u32 * h) as i64);
        image::imageops::replace(&mut canvas, &b, w as i64, (i as u32 * h) as i64);
    }
    canvas.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Procedural labelled corpus used for tests, demos and the acceptance suite.
pub mod synth {
    use super::*;

    pub const CLASS_NAMES: [&str; 4] = ["disc", "square", "stripes", "ring"];

    fn smoothstep(edge: f64, x: f64) -> f64 {
        // 1 inside (x < edge), 0 outside, with a one-pixel soft edge
        (0.5 - (x - edge)).clamp(0.0, 1.0)
    }

    /// One `(3, size, size)` image of class `label` in `[-1, 1]`.
    pub fn render<R: Rng + ?Sized>(label: usize, size: usize, rng: &mut R) -> Array3<f32> {
        let s = size as f64;
        let mut color = || [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        let bg0 = color();
        let bg1 = color();
        let fg = color();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let cx = rng.random_range(0.3 * s..0.7 * s);
        let cy = rng.random_range(0.3 * s..0.7 * s);
        let radius = rng.random_range(0.18 * s..0.32 * s);
        let period = rng.random_range(0.2 * s..0.4 * s);
        let (sa, ca) = angle.sin_cos();
        let mut out = Array3::zeros((3, size, size));
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let g = ((fx * ca + fy * sa) / s).clamp(0.0, 1.0);
                let (dx, dy) = (fx - cx, fy - cy);
                let cover = match label % 4 {
                    0 => smoothstep(radius, (dx * dx + dy * dy).sqrt()),
                    1 => smoothstep(radius, dx.abs().max(dy.abs())),
                    2 => 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (dx * ca + dy * sa) / period).sin(),
                    _ => {
                        let r = (dx * dx + dy * dy).sqrt();
                        smoothstep(radius, r) * (1.0 - smoothstep(0.55 * radius, r))
                    }
                };
                for c in 0..3 {
                    let bg = bg0[c] * (1.0 - g) + bg1[c] * g;
                    out[[c, y, x]] = (bg * (1.0 - cover) + fg[c] * cover) as f32;
                }
            }
        }
        out
    }

    /// `count` images cycling through the four classes.
    pub fn generate(count: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Array4::zeros((count, 3, size, size));
        let labels: Vec<usize> = (0..count).map(|i| i % CLASS_NAMES.len()).collect();
        for (i, &label) in labels.iter().enumerate() {
            data.slice_mut(s![i, .., .., ..]).assign(&render(label, size, &mut rng));
        }
        let images = ImageBatch { data, labels: Some(labels) };
        Dataset::from_batch(images, CLASS_NAMES.iter().map(|s| s.to_string()).collect())
    }

    /// Writes a generated corpus as `root/<split>/<class>/NNNNN.png`.
    pub fn write_corpus(root: &Path, split: Split, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
        let ds = generate(count, size, seed);
        let labels = ds.labels().expect("synthetic corpus is labelled");
        let mut written = Vec::with_capacity(count);
        for (i, &label) in labels.iter().enumerate() {
            let dir = root.join(split.dir_name()).join(CLASS_NAMES[label]);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{i:05}.png"));
            to_rgb8(ds.images.image(i)).save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            written.push(path);
        }
        Ok(written)
    }
}
