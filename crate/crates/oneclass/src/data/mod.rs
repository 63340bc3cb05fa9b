//! Dataset ingestion and batching: directory-of-images loading, a
//! procedural synthetic dataset for desk-scale experiments, overlap
//! filtering between target and reference sets, stratified splits, and
//! reshuffling batch streams.
//!
//! Images are dense `c×h×w` blocks of `f64` in `[0, 1]`. Every loader is
//! deterministic: directory scans are sorted, and all randomness flows
//! from explicit seeds.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image collection with one shared shape and dense class ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    shape: (usize, usize, usize),
    source: String,
}

impl Dataset {
    pub fn new(
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        shape: (usize, usize, usize),
        source: String,
    ) -> Result<Dataset> {
        let pixel_count = shape.0 * shape.1 * shape.2;
        if images.len() != labels.len() {
            return Err(Error::Invalid("images and labels disagree in length".into()));
        }
        if images.iter().any(|im| im.len() != pixel_count) {
            return Err(Error::Invalid("all images must share one shape".into()));
        }
        if labels.iter().any(|&l| l >= class_names.len()) {
            return Err(Error::Invalid("label outside the class-name table".into()));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            shape,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Pack the selected samples into an `[n×c×h×w]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (c, h, w) = self.shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(data, &[indices.len(), c, h, w])?, labels))
    }

    /// New dataset from a subset of sample indices; class table unchanged.
    pub fn subset(&self, indices: &[usize], source_suffix: &str) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            shape: self.shape,
            source: format!("{}{}", self.source, source_suffix),
        }
    }

    /// Keep only the given classes and re-densify ids, preserving the
    /// relative order of the surviving class names.
    pub fn restrict_to_classes(&self, keep: &[usize], source_suffix: &str) -> Result<Dataset> {
        if keep.is_empty() {
            return Err(Error::Invalid("restriction removes every class".into()));
        }
        let mut remap = vec![None; self.class_count()];
        let mut class_names = Vec::new();
        for (new_id, &old_id) in keep.iter().enumerate() {
            if old_id >= self.class_count() || remap[old_id].is_some() {
                return Err(Error::Invalid(format!("bad class selection {old_id}")));
            }
            remap[old_id] = Some(new_id);
            class_names.push(self.class_names[old_id].clone());
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (im, &l) in self.images.iter().zip(&self.labels) {
            if let Some(new_id) = remap[l] {
                images.push(im.clone());
                labels.push(new_id);
            }
        }
        Dataset::new(
            images,
            labels,
            class_names,
            self.shape,
            format!("{}{}", self.source, source_suffix),
        )
    }
}

// ---- synthetic generator ---------------------------------------------------

/// Base intensity of a pattern family at pixel (x, y); families cycle past
/// the first ten with scaled frequencies so any class count works.
fn pattern_value(class: usize, x: usize, y: usize, size: usize) -> f64 {
    use std::f64::consts::PI;
    let s = size as f64;
    let (fx, fy) = (x as f64 / s, y as f64 / s);
    let cycle = (class / 10) as f64;
    let freq = 1.0 + 0.5 * cycle;
    let v = match class % 10 {
        // oriented gratings
        0 => 0.5 + 0.5 * (2.0 * PI * 3.0 * freq * fy).sin(),
        1 => 0.5 + 0.5 * (2.0 * PI * 3.0 * freq * fx).sin(),
        2 => 0.5 + 0.5 * (2.0 * PI * 2.5 * freq * (fx + fy)).sin(),
        // two ring radii; deliberately similar families
        3 | 4 => {
            let r = if class % 10 == 3 { 0.22 } else { 0.34 } / freq.sqrt();
            let d = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
            0.12 + 0.8 * (-(d - r).powi(2) / (2.0 * 0.05f64.powi(2))).exp()
        }
        // centered blob
        5 => {
            let d2 = (fx - 0.5).powi(2) + (fy - 0.5).powi(2);
            0.1 + 0.85 * (-d2 / (2.0 * (0.18 / freq).powi(2))).exp()
        }
        // checker grating
        6 => 0.5 + 0.5 * (2.0 * PI * 2.0 * freq * fx).sin() * (2.0 * PI * 2.0 * freq * fy).sin(),
        // axis-aligned cross
        7 => {
            let bar = |t: f64| (-(t - 0.5).powi(2) / (2.0 * 0.06f64.powi(2))).exp();
            0.1 + 0.8 * bar(fx).max(bar(fy))
        }
        // dot grid
        8 => {
            let g = |t: f64| (PI * 4.0 * freq * t).sin().abs();
            0.1 + 0.8 * g(fx) * g(fy)
        }
        // corner gradient
        _ => 0.1 + 0.8 * (fx + fy) / 2.0,
    };
    v.clamp(0.0, 1.0)
}

fn pattern_name(class: usize) -> String {
    let base = [
        "bars-h", "bars-v", "diag", "ring-s", "ring-l", "blob", "checker", "cross", "dots",
        "grad",
    ][class % 10];
    if class < 10 {
        base.to_string()
    } else {
        format!("{base}-{}", class / 10)
    }
}

/// Procedural stand-in for a real multi-class image corpus: one rendered
/// pattern per class plus additive uniform pixel noise of half-width
/// `noise`, clamped back to `[0, 1]`. `noise = 0` makes every sample of a
/// class identical.
pub fn synth_shapes(
    classes: usize,
    per_class: usize,
    image_size: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Invalid("synthetic dataset needs at least 2 classes".into()));
    }
    if image_size < 4 {
        return Err(Error::Invalid(format!("image size {image_size} too small")));
    }
    if per_class == 0 {
        return Err(Error::Invalid("per_class must be positive".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Invalid(format!("noise {noise} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut base = Vec::with_capacity(image_size * image_size);
        for y in 0..image_size {
            for x in 0..image_size {
                base.push(pattern_value(class, x, y, image_size));
            }
        }
        for _ in 0..per_class {
            let image: Vec<f64> = base
                .iter()
                .map(|&v| {
                    if noise == 0.0 {
                        v
                    } else {
                        (v + rng.gen_range(-noise..noise)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            images.push(image);
            labels.push(class);
        }
    }
    Dataset::new(
        images,
        labels,
        (0..classes).map(pattern_name).collect(),
        (1, image_size, image_size),
        format!(
            "synth:classes={classes},per_class={per_class},size={image_size},noise={noise},seed={seed}"
        ),
    )
}

// ---- directory loading -----------------------------------------------------

/// Load a directory with one subdirectory per class (sorted name order
/// assigns ids). Images are decoded, scaled to `[0, 1]`, and resized to
/// `shape` with bilinear interpolation; grayscale for 1 channel, RGB for 3.
pub fn load_image_dir(path: &Path, shape: (usize, usize, usize)) -> Result<Dataset> {
    let (c, h, w) = shape;
    if c != 1 && c != 3 {
        return Err(Error::Invalid(format!("{c} channels unsupported (1 or 3)")));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            entry.path().is_dir().then_some(entry.path())
        })
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Invalid(format!(
            "{} has no class subdirectories",
            path.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| {
                let entry = entry.ok()?;
                entry.path().is_file().then_some(entry.path())
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Invalid(format!("class directory {} is empty", dir.display())));
        }
        for file in files {
            let decoded = image::open(&file)
                .map_err(|e| Error::Corrupt(format!("{}: {e}", file.display())))?;
            images.push(decode_to_planes(&decoded, c, h, w));
            labels.push(class_id);
        }
        class_names.push(name);
    }
    Dataset::new(
        images,
        labels,
        class_names,
        shape,
        format!("dir:{}", path.display()),
    )
}

fn decode_to_planes(img: &image::DynamicImage, c: usize, h: usize, w: usize) -> Vec<f64> {
    if c == 1 {
        let gray = img.to_luma32f();
        let resized =
            image::imageops::resize(&gray, w as u32, h as u32, image::imageops::FilterType::Triangle);
        resized.pixels().map(|p| p.0[0] as f64).collect()
    } else {
        let rgb = img.to_rgb32f();
        let resized =
            image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
        let mut planes = vec![0.0; 3 * h * w];
        for (y, row) in resized.rows().enumerate() {
            for (x, p) in row.enumerate() {
                for ch in 0..3 {
                    planes[ch * h * w + y * w + x] = p.0[ch] as f64;
                }
            }
        }
        planes
    }
}

// ---- protocol helpers ------------------------------------------------------

/// Remove reference classes whose *name* matches a target class, then
/// re-densify ids. Errors if nothing survives.
pub fn filter_overlap(reference: &Dataset, target_classes: &[String]) -> Result<Dataset> {
    let keep: Vec<usize> = (0..reference.class_count())
        .filter(|&c| !target_classes.contains(&reference.class_names()[c]))
        .collect();
    if keep.is_empty() {
        return Err(Error::Invalid(
            "overlap filtering removed every reference class".into(),
        ));
    }
    reference.restrict_to_classes(&keep, ":overlap-filtered")
}

/// Per-class stratified split; `fraction` of each class (at least one
/// sample on each side) goes to the first return value.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.class_count() {
        let mut indices = dataset.indices_of_class(class);
        if indices.len() < 2 {
            return Err(Error::Invalid(format!(
                "class {} has {} samples, cannot split",
                dataset.class_names()[class],
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let take = ((indices.len() as f64 * fraction).floor() as usize)
            .clamp(1, indices.len() - 1);
        train.extend_from_slice(&indices[..take]);
        test.extend_from_slice(&indices[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train, ":train"), dataset.subset(&test, ":test")))
}

// ---- batch streams ---------------------------------------------------------

/// Epoch-reshuffled batch iterator. Every epoch is a fresh seeded
/// permutation covering each sample exactly once; a final short batch
/// below `min_batch` is dropped (the compactness loss needs n ≥ 2).
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    min_batch: usize,
    seed: u64,
    epoch: usize,
    queue: VecDeque<usize>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        dataset: &'a Dataset,
        batch_size: usize,
        min_batch: usize,
        seed: u64,
    ) -> Result<BatchStream<'a>> {
        if dataset.is_empty() {
            return Err(Error::Invalid("cannot stream an empty dataset".into()));
        }
        if batch_size == 0 || min_batch == 0 || min_batch > batch_size {
            return Err(Error::Invalid(format!(
                "bad batch sizing: batch {batch_size}, minimum {min_batch}"
            )));
        }
        if dataset.len() < min_batch {
            return Err(Error::Invalid(format!(
                "dataset of {} samples cannot fill a batch of at least {min_batch}",
                dataset.len()
            )));
        }
        let mut stream = BatchStream {
            dataset,
            batch_size,
            min_batch,
            seed,
            epoch: 0,
            queue: VecDeque::new(),
        };
        stream.refill();
        Ok(stream)
    }

    /// Epoch of the batch that `next_batch` will return, counting from 0.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        let full = self.dataset.len() / self.batch_size;
        let tail = self.dataset.len() % self.batch_size;
        full + usize::from(tail >= self.min_batch)
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
        let keep = self.batches_per_epoch() * self.batch_size;
        order.truncate(keep.min(order.len()));
        self.queue = order.into();
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let take = self.batch_size.min(self.queue.len());
        let indices: Vec<usize> = self.queue.drain(..take).collect();
        if self.queue.is_empty() {
            self.epoch += 1;
            self.refill();
        }
        self.dataset.batch(&indices)
    }
}

#[cfg(test)]
mod tests;
