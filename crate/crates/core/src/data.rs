//! Image datasets: loading, shorter-side resize, crops, shuffling and a
//! synthetic generator.
//!
//! On disk a split lives in `<root>/<split>/` as a `manifest.tsv` of
//! `relative/path.png<TAB>label` rows plus 8-bit RGB PNG files. An optional
//! first line `# classes=N` fixes the class count. Pixels are fed to the net
//! as raw values in `[0, 255]`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";
pub const DEFAULT_RESIZE: usize = 256;
pub const DEFAULT_CROP: usize = 224;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: cannot decode image: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("{path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("empty dataset: {0}")]
    Empty(PathBuf),
    #[error("{0}")]
    Argument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(DataError::Argument(format!("unknown split '{s}'"))),
        }
    }
}

/// Planar RGB image with `f32` samples in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub h: usize,
    pub w: usize,
    /// `3 x h x w`, channel-major.
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if h == 0 || w == 0 || data.len() != Self::CHANNELS * h * w {
            return Err(DataError::Argument(format!("{} samples do not form a 3x{h}x{w} image", data.len())));
        }
        Ok(ImageBuffer { h, w, data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Self, DataError> {
        let decode = |msg: String| DataError::Decode { path: path.to_path_buf(), msg };
        let bytes = fs::read(path).map_err(io_err(path))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| decode(e.to_string()))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c] as f32;
            }
        }
        ImageBuffer::new(h, w, data)
    }

    /// Writes the image as 8-bit RGB, rounding and clamping each sample.
    pub fn save_png(&self, path: &Path) -> Result<(), DataError> {
        let plane = self.h * self.w;
        let mut raw = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                raw[3 * i + c] = self.data[c * plane + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        image::save_buffer_with_format(
            path,
            &raw,
            self.w as u32,
            self.h as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| DataError::Decode { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self, DataError> {
        if size == 0 || top + size > self.h || left + size > self.w {
            return Err(DataError::Argument(format!(
                "crop {size} at ({top}, {left}) does not fit a {}x{} image",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in top..top + size {
                let row = (c * self.h + y) * self.w;
                data.extend_from_slice(&self.data[row + left..row + left + size]);
            }
        }
        ImageBuffer::new(size, size, data)
    }
}

/// Output size of a shorter-side resize: the short side becomes `target` and
/// the long side `round(long * target / short)`.
pub fn resized_dims(h: usize, w: usize, target: usize) -> (usize, usize) {
    let scale_long = |long: usize, short: usize| ((2 * long * target + short) / (2 * short)).max(1);
    if h <= w {
        (target, scale_long(w, h))
    } else {
        (scale_long(h, w), target)
    }
}

/// Bilinear resize with half-pixel centers and edge clamping. An image whose
/// shorter side already equals `target` is returned unchanged.
pub fn resize_shorter_side(img: &ImageBuffer, target: usize) -> Result<ImageBuffer, DataError> {
    if target == 0 {
        return Err(DataError::Argument("resize target must be positive".into()));
    }
    if img.h.min(img.w) == target {
        return Ok(img.clone());
    }
    let (oh, ow) = resized_dims(img.h, img.w, target);
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f32)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, img.h), taps(ow, img.w));
    let mut data = vec![0f32; 3 * oh * ow];
    for c in 0..3 {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                data[(c * oh + y) * ow + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    ImageBuffer::new(oh, ow, data)
}

fn check_crop(img: &ImageBuffer, crop: usize) -> Result<(), DataError> {
    if crop == 0 || crop > img.h.min(img.w) {
        return Err(DataError::Argument(format!("crop {crop} does not fit a {}x{} image", img.h, img.w)));
    }
    Ok(())
}

/// Offsets for a random crop, row first.
pub fn random_crop_offsets(h: usize, w: usize, crop: usize, rng: &mut impl Rng) -> (usize, usize) {
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    (top, left)
}

pub fn random_crop(img: &ImageBuffer, crop: usize, rng: &mut impl Rng) -> Result<ImageBuffer, DataError> {
    check_crop(img, crop)?;
    let (top, left) = random_crop_offsets(img.h, img.w, crop, rng);
    img.crop(top, left, crop)
}

pub fn center_crop_offsets(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

pub fn center_crop(img: &ImageBuffer, crop: usize) -> Result<ImageBuffer, DataError> {
    check_crop(img, crop)?;
    let (top, left) = center_crop_offsets(img.h, img.w, crop);
    img.crop(top, left, crop)
}

/// Shuffled order of `0..n` for one epoch. The generator is seeded by `seed`
/// and switched to stream `epoch`, so epochs are independent.
pub fn epoch_permutation(n: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// Relative to the split directory.
    pub path: PathBuf,
    pub label: usize,
}

/// Lazily decoded split. Decoded images are kept after shorter-side resize.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub dir: PathBuf,
    pub split: Split,
    pub items: Vec<Item>,
    pub class_count: usize,
    pub resize_target: usize,
    pub crop: usize,
    cache: Arc<Vec<OnceLock<Arc<ImageBuffer>>>>,
}

#[derive(Debug)]
pub enum Augment<'a, R: Rng> {
    RandomCrop(&'a mut R),
    CenterCrop,
}

/// Where a sample's pixels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetHandle, DataError> {
    let dir = root.join(split.as_str());
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let bad = |line: usize, msg: String| DataError::Manifest { path: manifest.clone(), line, msg };
    let mut declared = None;
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if let Some(comment) = raw.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("classes=") {
                declared = Some(v.trim().parse::<usize>().map_err(|e| bad(line, format!("bad class count: {e}")))?);
            }
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        let (path, label) = raw.split_once('\t').ok_or_else(|| bad(line, "expected 'path<TAB>label'".into()))?;
        let label = label.trim().parse::<usize>().map_err(|e| bad(line, format!("bad label '{label}': {e}")))?;
        if let Some(k) = declared {
            if label >= k {
                return Err(bad(line, format!("label {label} out of range for {k} classes")));
            }
        }
        let rel = PathBuf::from(path);
        if !dir.join(&rel).is_file() {
            return Err(bad(line, format!("missing image file {}", dir.join(&rel).display())));
        }
        items.push(Item { path: rel, label });
    }
    if items.is_empty() {
        return Err(DataError::Empty(manifest));
    }
    let class_count = declared.unwrap_or_else(|| items.iter().map(|it| it.label).max().unwrap_or(0) + 1);
    let cache = Arc::new((0..items.len()).map(|_| OnceLock::new()).collect());
    Ok(DatasetHandle { dir, split, items, class_count, resize_target: DEFAULT_RESIZE, crop: DEFAULT_CROP, cache })
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn with_geometry(mut self, resize_target: usize, crop: usize) -> Result<Self, DataError> {
        if crop == 0 || crop > resize_target {
            return Err(DataError::Argument(format!("crop {crop} must be in 1..={resize_target}")));
        }
        self.resize_target = resize_target;
        self.crop = crop;
        self.cache = Arc::new((0..self.items.len()).map(|_| OnceLock::new()).collect());
        Ok(self)
    }

    /// Decoded and resized image `i`.
    pub fn image(&self, i: usize) -> Result<Arc<ImageBuffer>, DataError> {
        if let Some(img) = self.cache[i].get() {
            return Ok(img.clone());
        }
        let raw = ImageBuffer::load_png(&self.dir.join(&self.items[i].path))?;
        let img = Arc::new(resize_shorter_side(&raw, self.resize_target)?);
        Ok(self.cache[i].get_or_init(|| img).clone())
    }

    /// Builds an `[N, 3, crop, crop]` batch and its labels. Random offsets
    /// are drawn in `indices` order before any decoding, so worker count
    /// never changes the result.
    pub fn assemble<R: Rng>(
        &self,
        indices: &[usize],
        augment: Augment<'_, R>,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Vec<CropRecord>), DataError> {
        if indices.is_empty() {
            return Err(DataError::Argument("empty batch".into()));
        }
        let crop = self.crop;
        let images: Vec<Arc<ImageBuffer>> =
            indices.par_iter().map(|&i| self.image(i)).collect::<Result<_, _>>()?;
        let mut records = Vec::with_capacity(indices.len());
        let mut augment = augment;
        for (&index, img) in indices.iter().zip(&images) {
            check_crop(img, crop)?;
            let (top, left) = match &mut augment {
                Augment::RandomCrop(rng) => random_crop_offsets(img.h, img.w, crop, *rng),
                Augment::CenterCrop => center_crop_offsets(img.h, img.w, crop),
            };
            records.push(CropRecord { index, top, left, size: crop });
        }
        let item = 3 * crop * crop;
        let mut data = vec![0f32; indices.len() * item];
        data.par_chunks_mut(item).zip(records.par_iter()).zip(images.par_iter()).try_for_each(
            |((out, r), img)| -> Result<(), DataError> {
                out.copy_from_slice(&img.crop(r.top, r.left, r.size)?.data);
                Ok(())
            },
        )?;
        let labels = indices.iter().map(|&i| self.items[i].label as f32).collect();
        let n = indices.len();
        let x = Tensor::new(vec![n, 3, crop, crop], data).map_err(|e| DataError::Argument(e.to_string()))?;
        let y = Tensor::new(vec![n], labels).map_err(|e| DataError::Argument(e.to_string()))?;
        Ok((x, y, records))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub dir: PathBuf,
    pub files: usize,
    /// Held-out error of a nearest-centroid classifier: centroids from even
    /// samples of each class, scored on the odd ones.
    pub nearest_centroid_error: f64,
}

/// RGB base color and stripe layout of a synthetic class.
fn class_style(class: usize) -> ([f32; 3], usize, usize) {
    const PALETTE: [[f32; 3]; 12] = [
        [200.0, 60.0, 60.0],
        [60.0, 180.0, 70.0],
        [70.0, 90.0, 210.0],
        [210.0, 190.0, 60.0],
        [170.0, 70.0, 190.0],
        [60.0, 190.0, 190.0],
        [220.0, 130.0, 50.0],
        [130.0, 130.0, 130.0],
        [120.0, 60.0, 30.0],
        [230.0, 150.0, 190.0],
        [40.0, 90.0, 60.0],
        [150.0, 200.0, 120.0],
    ];
    let color = PALETTE[class % PALETTE.len()];
    let tint = (class / PALETTE.len()) as f32 * 17.0;
    let color = [color[0], (color[1] + tint) % 256.0, color[2]];
    (color, class % 4, 3 + (class / 4) % 3)
}

fn synth_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let (color, orientation, period) = class_style(class);
    let phase = rng.random_range(0..2 * period);
    let brightness: f32 = rng.random_range(0.85..1.15);
    let noise = Normal::new(0.0f32, 18.0).expect("valid sigma");
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let coord = match orientation {
                0 => y,
                1 => x,
                2 => x + y,
                _ => x + 2 * size - y,
            };
            let on = ((coord + phase) / period) % 2 == 0;
            let level = if on { 1.0 } else { 0.45 };
            for c in 0..3 {
                let v = color[c] * level * brightness + noise.sample(rng);
                data[c * plane + y * size + x] = v.round().clamp(0.0, 255.0);
            }
        }
    }
    ImageBuffer { h: size, w: size, data }
}

fn nearest_centroid_error(images: &[(usize, ImageBuffer)], classes: usize) -> f64 {
    let dim = images[0].1.data.len();
    let mut centroids = vec![vec![0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut held_out = Vec::new();
    for (label, img) in images {
        if seen[*label].is_multiple_of(2) {
            for (c, &v) in centroids[*label].iter_mut().zip(&img.data) {
                *c += v as f64;
            }
            counts[*label] += 1;
        } else {
            held_out.push((*label, img));
        }
        seen[*label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    if held_out.is_empty() {
        return 0.0;
    }
    let wrong = held_out
        .iter()
        .filter(|(label, img)| {
            let best = (0..classes)
                .filter(|&k| counts[k] > 0)
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f64 {
                        centroids[k].iter().zip(&img.data).map(|(c, &v)| (c - v as f64).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .expect("at least one centroid");
            best != *label
        })
        .count();
    wrong as f64 / held_out.len() as f64
}

/// Writes `classes * per_class` striped, tinted, noisy PNGs and a manifest
/// into `<root>/<split>/`. Identical arguments give identical bytes.
pub fn generate_synthetic(
    root: &Path,
    split: Split,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<SynthReport, DataError> {
    if classes < 2 {
        return Err(DataError::Argument(format!("need at least 2 classes, got {classes}")));
    }
    if per_class == 0 || size == 0 {
        return Err(DataError::Argument("per_class and size must be positive".into()));
    }
    let dir = root.join(split.as_str());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut manifest = format!("# classes={classes}\n");
    let mut images = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        for i in 0..per_class {
            images.push((class, synth_image(class, size, &mut rng), format!("c{class:03}_{i:05}.png")));
        }
    }
    images.par_iter().try_for_each(|(_, img, name)| img.save_png(&dir.join(name)))?;
    for (class, _, name) in &images {
        manifest.push_str(&format!("{name}\t{class}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    let labelled: Vec<(usize, ImageBuffer)> = images.into_iter().map(|(c, img, _)| (c, img)).collect();
    Ok(SynthReport { dir, files: labelled.len(), nearest_centroid_error: nearest_centroid_error(&labelled, classes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(h: usize, w: usize) -> ImageBuffer {
        let data = (0..3 * h * w).map(|i| (i % 251) as f32).collect();
        ImageBuffer::new(h, w, data).unwrap()
    }

    #[test]
    fn resize_dimensions() {
        assert_eq!(resize_shorter_side(&gradient(1024, 512), 256).unwrap().h, 512);
        let r = resize_shorter_side(&gradient(512, 1024), 256).unwrap();
        assert_eq!((r.h, r.w), (256, 512));
        let r = resize_shorter_side(&gradient(375, 500), 256).unwrap();
        assert_eq!((r.h, r.w), (256, 341));
        assert_eq!(resized_dims(500, 375, 256), (341, 256));
        let same = gradient(256, 256);
        assert_eq!(resize_shorter_side(&same, 256).unwrap(), same);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = ImageBuffer::new(7, 13, vec![42.0; 3 * 7 * 13]).unwrap();
        let r = resize_shorter_side(&img, 20).unwrap();
        assert!(r.data.iter().all(|&v| (v - 42.0).abs() < 1e-4));
    }

    #[test]
    fn upsample_by_two_matches_hand_weights() {
        // One row 0..4 upsampled to 8: half-pixel centers give 0.25/0.75 blends.
        let data: Vec<f32> = (0..3).flat_map(|_| [0.0, 10.0, 20.0, 30.0]).collect();
        let img = ImageBuffer::new(1, 4, data).unwrap();
        let r = resize_shorter_side(&img, 2).unwrap();
        assert_eq!((r.h, r.w), (2, 8));
        let row: Vec<f32> = (0..8).map(|x| r.at(0, 0, x)).collect();
        assert_eq!(row, [0.0, 2.5, 7.5, 12.5, 17.5, 22.5, 27.5, 30.0]);
    }

    #[test]
    fn center_crop_offsets_floor() {
        assert_eq!(center_crop_offsets(256, 256, 224), (16, 16));
        assert_eq!(center_crop_offsets(257, 256, 224), (16, 16));
        let img = gradient(30, 30);
        assert_eq!(center_crop(&img, 30).unwrap(), img);
        assert!(center_crop(&img, 31).is_err());
        let c = center_crop(&gradient(10, 12), 4).unwrap();
        assert_eq!(c.at(1, 0, 0), gradient(10, 12).at(1, 3, 4));
    }

    #[test]
    fn random_crop_full_size_and_determinism() {
        let img = gradient(20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(random_crop(&img, 20, &mut rng).unwrap(), img);
        let a = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_crop(&img, 21, &mut rng).is_err());
    }

    #[test]
    fn random_crop_offsets_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut rows = [0usize; 33];
        let mut cols = [0usize; 33];
        for _ in 0..draws {
            let (t, l) = random_crop_offsets(256, 256, 224, &mut rng);
            rows[t] += 1;
            cols[l] += 1;
        }
        let expected = draws as f64 / 33.0;
        let chi = ChiSquared::new(32.0).unwrap();
        for hist in [rows, cols] {
            let stat: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            assert!(1.0 - chi.cdf(stat) > 0.001, "chi2 {stat}");
        }
    }

    #[test]
    fn permutations() {
        assert_eq!(epoch_permutation(1, 0, 5), vec![0]);
        assert_eq!(epoch_permutation(50, 2, 5), epoch_permutation(50, 2, 5));
        assert_ne!(epoch_permutation(50, 2, 5), epoch_permutation(50, 3, 5));
        let a = epoch_permutation(1000, 0, 77);
        let b = epoch_permutation(1000, 0, 78);
        assert!(a.iter().zip(&b).filter(|(x, y)| x != y).count() > 900);
        for seed in 0..20 {
            assert_ne!(epoch_permutation(16, 0, seed), epoch_permutation(16, 0, seed + 1));
        }
    }

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate_synthetic(dir.path(), Split::Train, 2, 1, 8, 1).unwrap();
        assert_eq!(report.files, 2);
        let entries = fs::read_dir(dir.path().join("train")).unwrap().count();
        assert_eq!(entries, 3);
        let handle = load_dataset(dir.path(), Split::Train).unwrap().with_geometry(8, 8).unwrap();
        assert_eq!(handle.len(), 2);
        assert_eq!(handle.class_count, 2);
        let again = tempfile::tempdir().unwrap();
        generate_synthetic(again.path(), Split::Train, 2, 1, 8, 1).unwrap();
        for name in ["c000_00000.png", "c001_00000.png", MANIFEST] {
            let a = fs::read(dir.path().join("train").join(name)).unwrap();
            let b = fs::read(again.path().join("train").join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn png_round_trip_is_exact_for_integers() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(5, 7);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageBuffer::load_png(&p).unwrap(), img);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("val");
        fs::create_dir_all(&split).unwrap();
        fs::write(split.join(MANIFEST), "# classes=3\n").unwrap();
        let err = load_dataset(dir.path(), Split::Val).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
        gradient(4, 4).save_png(&split.join("a.png")).unwrap();
        fs::write(split.join(MANIFEST), "# classes=3\na.png\t3\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Val), Err(DataError::Manifest { line: 2, .. })));
        fs::write(split.join(MANIFEST), "a.png\t0\nmissing.png\t1\n").unwrap();
        let err = load_dataset(dir.path(), Split::Val).unwrap_err().to_string();
        assert!(err.contains("missing.png"), "{err}");
        fs::write(split.join("bad.png"), b"not a png").unwrap();
        fs::write(split.join(MANIFEST), "a.png\t0\nbad.png\t1\n").unwrap();
        let handle = load_dataset(dir.path(), Split::Val).unwrap();
        assert_eq!(handle.len(), 2);
        handle.image(0).unwrap();
        let err = handle.image(1).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");
    }

    #[test]
    fn batch_assembly_is_worker_independent() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), Split::Train, 3, 4, 12, 2).unwrap();
        let handle = load_dataset(dir.path(), Split::Train).unwrap().with_geometry(12, 9).unwrap();
        let idx = [5, 0, 11, 3];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                handle.assemble(&idx, Augment::RandomCrop(&mut rng)).unwrap()
            })
        };
        let (a, la, ra) = run(1);
        let (b, lb, rb) = run(4);
        assert_eq!((a.clone(), la.clone(), ra), (b, lb, rb));
        assert_eq!(a.shape(), &[4, 3, 9, 9]);
        assert_eq!(la.data(), &[1.0, 0.0, 2.0, 0.0]);
        let (_, _, center) = handle.assemble::<ChaCha8Rng>(&idx, Augment::CenterCrop).unwrap();
        assert!(center.iter().all(|r| (r.top, r.left) == (1, 1)));
    }

    #[test]
    fn synthetic_classes_are_separable() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate_synthetic(dir.path(), Split::Train, 8, 500, 32, 7).unwrap();
        assert_eq!(report.files, 4000);
        assert!(report.nearest_centroid_error < 0.15, "{}", report.nearest_centroid_error);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn resize_is_idempotent(h in 1usize..40, w in 1usize..40, target in 1usize..30) {
            let once = resize_shorter_side(&gradient(h, w), target).unwrap();
            prop_assert_eq!(once.h.min(once.w), target);
            let twice = resize_shorter_side(&once, target).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn crop_mean_equals_source_region(h in 4usize..30, w in 4usize..30, seed: u64) {
            let img = gradient(h, w);
            let crop = h.min(w) / 2 + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (top, left) = random_crop_offsets(h, w, crop, &mut rng);
            let out = img.crop(top, left, crop).unwrap();
            let mut sum = 0f64;
            for c in 0..3 {
                for y in top..top + crop {
                    for x in left..left + crop {
                        sum += img.at(c, y, x) as f64;
                    }
                }
            }
            let region_mean = sum / (3 * crop * crop) as f64;
            prop_assert!((out.mean() - region_mean).abs() < 1e-3);
        }

        #[test]
        fn permutation_is_bijection(n in 1usize..300, epoch: u64, seed: u64) {
            let mut p = epoch_permutation(n, epoch, seed);
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
