//! Synthetic shape-segmentation dataset.
//!
//! Images contain many small shapes over a flat background. The color noise
//! is mostly a *spatially correlated* random field (blurred white noise)
//! plus a small white component. The split is deliberate: a per-pixel
//! classifier only sees the per-pixel marginal, which is the same Gaussian
//! either way, so the nearest-color oracle sits in its headroom band — but
//! a convnet cannot average the field away, so finding region boundaries
//! from RGB alone is genuinely noisy. A noised-label input channel restores
//! exact region structure regardless of the field, which is where the
//! teacher's advantage comes from. The shape kind is drawn independently of
//! the class, so geometry never identifies a class; and classes 1 and 2
//! draw their base color from overlapping windows of the same ramp, so
//! their identity is partly irreducible from RGB alone.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LadError, Result};
use crate::label::{LabelMap, IGNORE};
use crate::real::derive_seed;

pub const FORMAT_VERSION: u32 = 1;

/// Base colors in [0,1] RGB, kept away from the value range ends so the
/// noise is not flattened by clamping. Classes 1 and 2 interpolate along
/// `RAMP_A..RAMP_B` (each shape instance picks a ramp position); the rest
/// use fixed bases. Pixel colors are the base plus field and white noise.
const BG_BASE: [f64; 3] = [0.8, 0.8, 0.8];
const RAMP_A: [f64; 3] = [0.8, 0.2, 0.2];
const RAMP_B: [f64; 3] = [0.8, 0.75, 0.2];
const CLASS3_BASE: [f64; 3] = [0.2, 0.8, 0.2];
const CLASS4_BASE: [f64; 3] = [0.2, 0.2, 0.8];

/// Shape half-extent range as a fraction of image size. Small shapes keep
/// the boundary-to-interior ratio high, which is what makes structure hard.
const MIN_EXTENT: f64 = 0.06;
const MAX_EXTENT: f64 = 0.13;

/// Shapes per image.
const MIN_SHAPES: usize = 5;
const MAX_SHAPES: usize = 10;

/// Variance share of `color_noise_sigma` carried by the correlated field;
/// the rest is white. At equal channel scales the per-pixel marginal is
/// N(base, sigma^2) for any split, so this knob trades convnet difficulty
/// against nothing on the oracle side; the per-channel scales below do move
/// the marginals and are tuned against the headroom-band test.
const FIELD_SHARE: f64 = 0.85;

/// Gaussian blur radius of the field as a fraction of image size; shapes
/// scale with image size too, so field blobs stay shape-sized.
const FIELD_BLUR_FRAC: f64 = 0.1;

/// Per-channel field strength, like illumination that varies more in some
/// bands. The ramp separating classes 1 and 2 runs along G, so a weak G
/// field keeps their identity a *pooling* problem: a model that pools the
/// exact region (handed to the teacher by the label channel) reads the ramp
/// position cleanly, while a model with sloppy regions pools in background
/// pixels and misreads it. R and B carry the strong field that makes the
/// regions sloppy in the first place.
const FIELD_CHANNEL_SCALE: [f64; 3] = [1.2, 0.35, 1.2];

/// Whole-dataset regeneration attempts when the class histogram is too thin.
const MAX_HISTOGRAM_ATTEMPTS: u64 = 8;

/// Images are quantized to 8 bits on disk and normalized at load.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub image_size: usize,
    pub color_noise_sigma: f64,
    pub class_color_overlap: f64,
    pub ignore_border: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            num_classes: 5,
            num_train: 400,
            num_val: 100,
            image_size: 64,
            color_noise_sigma: 0.19,
            class_color_overlap: 0.2,
            ignore_border: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 5 {
            return Err(LadError::InvalidConfig(format!(
                "num_classes must be in 2..=5 (background plus up to 4 shape kinds), got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(LadError::InvalidConfig(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if !(self.color_noise_sigma >= 0.0) {
            return Err(LadError::InvalidConfig(format!(
                "color_noise_sigma must be >= 0, got {}",
                self.color_noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.class_color_overlap) {
            return Err(LadError::InvalidConfig(format!(
                "class_color_overlap must be in [0,1], got {}",
                self.class_color_overlap
            )));
        }
        if self.num_train == 0 || self.num_val == 0 {
            return Err(LadError::InvalidConfig(
                "num_train and num_val must both be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One image/label pair; `image` is normalized to roughly zero mean.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f32>,
    pub label: LabelMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub num_classes: usize,
    pub num_train: usize,
    pub num_val: usize,
    /// Seed actually used, after any histogram-driven regeneration.
    pub effective_seed: u64,
    pub histogram_attempts: u64,
}

/// Loaded dataset with the train/val split fixed by the manifest: the first
/// `num_train` files are train, the rest val.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.manifest.num_train]
    }

    pub fn val(&self) -> &[Sample] {
        &self.samples[self.manifest.num_train..]
    }
}

/// Deterministic permutation of 0..n.
pub fn shuffle_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian taps normalized to unit L2, so blurring unit white noise with
/// one horizontal and one vertical pass yields unit variance again.
fn field_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let l2 = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    for t in &mut taps {
        *t /= l2;
    }
    taps
}

/// One channel of the correlated field: white noise on an expanded plane,
/// separably blurred, cropped to the interior so the variance is stationary
/// up to the image edge. Scan order of the draws is part of the format.
fn sample_field(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let taps = field_kernel(FIELD_BLUR_FRAC * size as f64);
    let pad = taps.len() / 2;
    let big = size + 2 * pad;
    let mut plane = Array2::<f64>::zeros((big, big));
    for v in plane.iter_mut() {
        *v = sample_standard_normal(rng);
    }
    // horizontal pass: valid columns only
    let mut rows = Array2::<f64>::zeros((big, size));
    for y in 0..big {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[(y, x + k)];
            }
            rows[(y, x)] = acc;
        }
    }
    // vertical pass: valid rows only
    let mut out = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(y + k, x)];
            }
            out[(y, x)] = sigma * acc;
        }
    }
    out
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Ramp positions for the confusable classes. Each class draws uniformly from
/// a window of length L = 1/(2-v); the windows share a fraction v of their
/// length (v=0: disjoint halves, v=1: identical).
fn ramp_window(class: u8, overlap: f64) -> (f64, f64) {
    let l = 1.0 / (2.0 - overlap);
    match class {
        1 => (0.0, l),
        2 => (l * (1.0 - overlap), l * (2.0 - overlap)),
        _ => unreachable!("ramp_window is only defined for classes 1 and 2"),
    }
}

/// Base color of one shape instance; classes 1 and 2 draw a fresh ramp
/// position per shape.
fn shape_color(class: u8, spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        1 | 2 => {
            let (lo, hi) = ramp_window(class, spec.class_color_overlap);
            let u = lo + (hi - lo) * rng.gen::<f64>();
            lerp3(RAMP_A, RAMP_B, u)
        }
        3 => CLASS3_BASE,
        4 => CLASS4_BASE,
        _ => unreachable!("shape classes start at 1"),
    }
}

/// Mean color of each class's distribution; these are the references the
/// nearest-color oracle classifies against.
pub fn class_reference_colors(spec: &DatasetSpec) -> Vec<[f64; 3]> {
    let mut refs = vec![BG_BASE];
    for class in 1..spec.num_classes as u8 {
        refs.push(match class {
            1 | 2 => {
                let (lo, hi) = ramp_window(class, spec.class_color_overlap);
                lerp3(RAMP_A, RAMP_B, 0.5 * (lo + hi))
            }
            3 => CLASS3_BASE,
            4 => CLASS4_BASE,
            _ => unreachable!(),
        });
    }
    refs
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle { cx: f64, cy: f64, rx: f64, ry: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    /// Apex-up isoceles triangle: half-width grows linearly from apex to base.
    Triangle { cx: f64, cy: f64, r: f64 },
    Annulus { cx: f64, cy: f64, r_out: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rectangle { cx, cy, rx, ry } => (x - cx).abs() <= rx && (y - cy).abs() <= ry,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle { cx, cy, r } => {
                let dy = y - cy + r;
                (0.0..=2.0 * r).contains(&dy) && (x - cx).abs() <= dy * 0.5
            }
            Shape::Annulus { cx, cy, r_out } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let r_in = 0.5 * r_out;
                d2 >= r_in * r_in && d2 <= r_out * r_out
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rectangle { cx, cy, rx, ry } => (cx - rx, cx + rx, cy - ry, cy + ry),
            Shape::Disc { cx, cy, r }
            | Shape::Triangle { cx, cy, r }
            | Shape::Annulus { cx, cy, r_out: r } => (cx - r, cx + r, cy - r, cy + r),
        }
    }
}

fn sample_extent(size: f64, rng: &mut ChaCha8Rng) -> f64 {
    size * (MIN_EXTENT + (MAX_EXTENT - MIN_EXTENT) * rng.gen::<f64>())
}

/// Center coordinate keeping a half-extent `r` fully inside [0, size-1].
fn sample_center(size: f64, r: f64, rng: &mut ChaCha8Rng) -> f64 {
    r + (size - 1.0 - 2.0 * r) * rng.gen::<f64>()
}

/// Geometry is drawn independently of the class: every kind is equally
/// likely for every class, so shape never leaks class identity and color is
/// the only appearance cue.
fn sample_shape(size: f64, rng: &mut ChaCha8Rng) -> Shape {
    match rng.gen_range(0..4u8) {
        0 => {
            let rx = sample_extent(size, rng);
            let ry = sample_extent(size, rng);
            let cx = sample_center(size, rx, rng);
            let cy = sample_center(size, ry, rng);
            Shape::Rectangle { cx, cy, rx, ry }
        }
        1 => {
            let r = sample_extent(size, rng);
            let cx = sample_center(size, r, rng);
            let cy = sample_center(size, r, rng);
            Shape::Disc { cx, cy, r }
        }
        2 => {
            let r = sample_extent(size, rng);
            let cx = sample_center(size, r, rng);
            let cy = sample_center(size, r, rng);
            Shape::Triangle { cx, cy, r }
        }
        _ => {
            let r = sample_extent(size, rng);
            let cx = sample_center(size, r, rng);
            let cy = sample_center(size, r, rng);
            Shape::Annulus { cx, cy, r_out: r }
        }
    }
}

/// One rendered sample before quantization: u8 image planes plus exact label.
struct RawSample {
    image: Array3<u8>,
    label: LabelMap,
}

/// Fully determined by (effective_seed, index); the rng draw order is part of
/// the format and must not change.
fn generate_sample(spec: &DatasetSpec, effective_seed: u64, index: u64) -> RawSample {
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(effective_seed, "sample", index));

    let mut color = Array3::<f64>::zeros((3, s, s));
    for ch in 0..3 {
        color.index_axis_mut(ndarray::Axis(0), ch).fill(BG_BASE[ch]);
    }
    let mut label = Array2::<u8>::zeros((s, s));

    let n_shapes = rng.gen_range(MIN_SHAPES..=MAX_SHAPES);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..spec.num_classes) as u8;
        let fill = shape_color(class, spec, &mut rng);
        let shape = sample_shape(s as f64, &mut rng);
        let (x0, x1, y0, y1) = shape.bounds();
        let x0 = (x0.floor().max(0.0)) as usize;
        let x1 = (x1.ceil().min((s - 1) as f64)) as usize;
        let y0 = (y0.floor().max(0.0)) as usize;
        let y1 = (y1.ceil().min((s - 1) as f64)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape.contains(x as f64, y as f64) {
                    label[(y, x)] = class;
                    for ch in 0..3 {
                        color[(ch, y, x)] = fill[ch];
                    }
                }
            }
        }
    }

    // color noise: per-channel correlated field first, then white noise in
    // a fixed scan order (y, x, channel)
    if spec.color_noise_sigma > 0.0 {
        let field_sigma = spec.color_noise_sigma * FIELD_SHARE.sqrt();
        let white_sigma = spec.color_noise_sigma * (1.0 - FIELD_SHARE).sqrt();
        for ch in 0..3 {
            let field = sample_field(s, field_sigma * FIELD_CHANNEL_SCALE[ch], &mut rng);
            for y in 0..s {
                for x in 0..s {
                    color[(ch, y, x)] += field[(y, x)];
                }
            }
        }
        for y in 0..s {
            for x in 0..s {
                for ch in 0..3 {
                    color[(ch, y, x)] += white_sigma * sample_standard_normal(&mut rng);
                }
            }
        }
    }

    let label = apply_ignore_ring(&label, spec.ignore_border);
    let image = color.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    RawSample {
        image,
        label: LabelMap::new(spec.num_classes, label).expect("generated labels are in range"),
    }
}

/// Marks pixels within Chebyshev distance `border` of a class transition
/// as IGNORE.
fn apply_ignore_ring(label: &Array2<u8>, border: usize) -> Array2<u8> {
    if border == 0 {
        return label.clone();
    }
    let (h, w) = label.dim();
    let b = border as isize;
    let mut out = label.clone();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let here = label[(y as usize, x as usize)];
            'scan: for dy in -b..=b {
                for dx in -b..=b {
                    let ny = y + dy;
                    let nx = x + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if label[(ny as usize, nx as usize)] != here {
                        out[(y as usize, x as usize)] = IGNORE;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Fraction of non-IGNORE pixels per class over a set of labels.
fn class_histogram(num_classes: usize, labels: &[&LabelMap]) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut valid = 0u64;
    for label in labels {
        for &v in label.data().iter() {
            if v != IGNORE {
                counts[usize::from(v)] += 1;
                valid += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|c| if valid == 0 { 0.0 } else { c as f64 / valid as f64 })
        .collect()
}

fn generate_all(spec: &DatasetSpec, effective_seed: u64) -> Vec<RawSample> {
    let total = spec.num_train + spec.num_val;
    (0..total as u64)
        .into_par_iter()
        .map(|index| generate_sample(spec, effective_seed, index))
        .collect()
}

/// Generates the dataset on disk. If any class covers < 1% of the non-IGNORE
/// train pixels, the whole dataset is regenerated from a derived seed; the
/// manifest records how many attempts that took.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut chosen: Option<(Vec<RawSample>, u64, u64)> = None;
    for attempt in 0..MAX_HISTOGRAM_ATTEMPTS {
        let effective_seed = if attempt == 0 {
            spec.seed
        } else {
            derive_seed(spec.seed, "histogram-retry", attempt)
        };
        let samples = generate_all(spec, effective_seed);
        let train_labels: Vec<&LabelMap> =
            samples[..spec.num_train].iter().map(|s| &s.label).collect();
        let histogram = class_histogram(spec.num_classes, &train_labels);
        if histogram.iter().all(|&f| f >= 0.01) {
            chosen = Some((samples, effective_seed, attempt));
            break;
        }
    }
    let Some((samples, effective_seed, attempts)) = chosen else {
        return Err(LadError::InvalidConfig(format!(
            "class histogram stayed below 1% after {MAX_HISTOGRAM_ATTEMPTS} regeneration attempts; \
             the spec (sizes/classes) leaves some class too rare"
        )));
    };

    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&images_dir)
        .map_err(|e| LadError::io(format!("creating {}", images_dir.display()), e))?;
    fs::create_dir_all(&labels_dir)
        .map_err(|e| LadError::io(format!("creating {}", labels_dir.display()), e))?;

    for (index, sample) in samples.iter().enumerate() {
        write_image_png(&images_dir.join(format!("{index:05}.png")), &sample.image)?;
        write_label_png(&labels_dir.join(format!("{index:05}.png")), sample.label.data())?;
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        num_classes: spec.num_classes,
        num_train: spec.num_train,
        num_val: spec.num_val,
        effective_seed,
        histogram_attempts: attempts,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| LadError::InvalidConfig(format!("manifest serialization failed: {e}")))?;
    fs::write(&manifest_path, text + "\n")
        .map_err(|e| LadError::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(manifest)
}

fn write_image_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([image[(0, y, x)], image[(1, y, x)], image[(2, y, x)]]),
            );
        }
    }
    buf.save(path).map_err(|e| LadError::DatasetFile {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

fn write_label_png(path: &Path, label: &Array2<u8>) -> Result<()> {
    let (h, w) = label.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([label[(y, x)]]));
        }
    }
    buf.save(path).map_err(|e| LadError::DatasetFile {
        path: path.to_path_buf(),
        reason: format!("write failed: {e}"),
    })
}

fn dataset_file_err(path: &Path, reason: impl Into<String>) -> LadError {
    LadError::DatasetFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// (v/255 - mean) / scale, applied per channel at load time.
pub fn normalize_u8(v: u8) -> f32 {
    ((f64::from(v) / 255.0 - NORM_MEAN) / NORM_SCALE) as f32
}

fn load_image(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| dataset_file_err(path, format!("unreadable: {e}")))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => other.to_rgb8(),
    };
    if (rgb.width() as usize, rgb.height() as usize) != (size, size) {
        return Err(dataset_file_err(
            path,
            format!("expected {size}x{size}, got {}x{}", rgb.width(), rgb.height()),
        ));
    }
    let mut out = Array3::<f32>::zeros((3, size, size));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = normalize_u8(pixel[ch]);
        }
    }
    Ok(out)
}

fn load_label(path: &Path, size: usize, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| dataset_file_err(path, format!("unreadable: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    if (gray.width() as usize, gray.height() as usize) != (size, size) {
        return Err(dataset_file_err(
            path,
            format!("expected {size}x{size}, got {}x{}", gray.width(), gray.height()),
        ));
    }
    let mut data = Array2::<u8>::zeros((size, size));
    for (x, y, pixel) in gray.enumerate_pixels() {
        data[(y as usize, x as usize)] = pixel[0];
    }
    LabelMap::new(num_classes, data).map_err(|e| dataset_file_err(path, format!("{e}")))
}

pub fn load_dataset_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| dataset_file_err(&manifest_path, format!("unreadable: {e}")))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| dataset_file_err(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(dataset_file_err(
            &manifest_path,
            format!(
                "format_version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_dataset_manifest(dir)?;
    let total = manifest.num_train + manifest.num_val;
    let size = manifest.spec.image_size;
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let image_path = dir.join("images").join(format!("{index:05}.png"));
        let label_path = dir.join("labels").join(format!("{index:05}.png"));
        samples.push(Sample {
            image: load_image(&image_path, size)?,
            label: load_label(&label_path, size, manifest.num_classes)?,
        });
    }
    Ok(Dataset { samples, manifest })
}

/// Per-pixel nearest-reference-color classification on a normalized image.
/// Ties break toward the lower class id.
pub fn oracle_predictions(spec: &DatasetSpec, image: &Array3<f32>) -> Array2<u8> {
    let refs: Vec<[f64; 3]> = class_reference_colors(spec)
        .into_iter()
        .map(|c| {
            [
                (c[0] - NORM_MEAN) / NORM_SCALE,
                (c[1] - NORM_MEAN) / NORM_SCALE,
                (c[2] - NORM_MEAN) / NORM_SCALE,
            ]
        })
        .collect();
    let (_, h, w) = image.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [
                f64::from(image[(0, y, x)]),
                f64::from(image[(1, y, x)]),
                f64::from(image[(2, y, x)]),
            ];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, r) in refs.iter().enumerate() {
                let d = (px[0] - r[0]).powi(2) + (px[1] - r[1]).powi(2) + (px[2] - r[2]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            out[(y, x)] = best as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{miou, ConfusionMatrix};
    use once_cell::sync::Lazy;
    use tempfile::TempDir;

    /// Default-spec dataset shared across tests; generation is the slow part.
    static DEFAULT_SET: Lazy<(TempDir, Dataset)> = Lazy::new(|| {
        let dir = TempDir::new().unwrap();
        let spec = DatasetSpec::new(7);
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        (dir, ds)
    });

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_train: 12,
            num_val: 4,
            ..DatasetSpec::new(seed)
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec::new(1).validate().is_ok());
        let mut bad = DatasetSpec::new(1);
        bad.num_classes = 1;
        assert!(bad.validate().is_err());
        bad = DatasetSpec::new(1);
        bad.num_classes = 6;
        assert!(bad.validate().is_err());
        bad = DatasetSpec::new(1);
        bad.image_size = 8;
        assert!(bad.validate().is_err());
        bad = DatasetSpec::new(1);
        bad.color_noise_sigma = -0.1;
        assert!(bad.validate().is_err());
        bad = DatasetSpec::new(1);
        bad.class_color_overlap = 1.5;
        assert!(bad.validate().is_err());
        bad = DatasetSpec::new(1);
        bad.num_val = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generation_is_byte_identical() {
        let spec = small_spec(7);
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let man_a = generate_dataset(&spec, dir_a.path()).unwrap();
        let man_b = generate_dataset(&spec, dir_b.path()).unwrap();
        assert_eq!(man_a.effective_seed, man_b.effective_seed);
        for sub in ["images", "labels"] {
            for i in 0..spec.num_train + spec.num_val {
                let name = format!("{i:05}.png");
                let a = fs::read(dir_a.path().join(sub).join(&name)).unwrap();
                let b = fs::read(dir_b.path().join(sub).join(&name)).unwrap();
                assert_eq!(a, b, "{sub}/{name}");
            }
        }
        let ma = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let mb = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn round_trip_preserves_labels_exactly() {
        let spec = small_spec(11);
        let dir = TempDir::new().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 16);
        for (index, sample) in ds.samples.iter().enumerate() {
            let raw = generate_sample(&spec, ds.manifest.effective_seed, index as u64);
            assert_eq!(sample.label.data(), raw.label.data(), "sample {index}");
            // image round-trip is exact at 8 bits, then normalization is fixed
            for ((c, y, x), &v) in raw.image.indexed_iter() {
                assert_eq!(sample.image[(c, y, x)], normalize_u8(v));
            }
        }
    }

    #[test]
    fn split_sizes_follow_manifest() {
        let (_, ds) = &*DEFAULT_SET;
        assert_eq!(ds.train().len(), 400);
        assert_eq!(ds.val().len(), 100);
        assert_eq!(ds.manifest.histogram_attempts, 0);
    }

    #[test]
    fn class_histogram_is_dense_enough() {
        let (_, ds) = &*DEFAULT_SET;
        let labels: Vec<&LabelMap> = ds.train().iter().map(|s| &s.label).collect();
        let histogram = class_histogram(5, &labels);
        for (class, frac) in histogram.iter().enumerate() {
            assert!(*frac >= 0.01, "class {class} occupies {frac:.4}");
        }
    }

    #[test]
    fn ignore_fraction_below_20_percent() {
        let (_, ds) = &*DEFAULT_SET;
        let mut ignore = 0usize;
        let mut total = 0usize;
        for sample in &ds.samples {
            ignore += sample
                .label
                .data()
                .iter()
                .filter(|&&v| v == IGNORE)
                .count();
            total += sample.label.data().len();
        }
        let frac = ignore as f64 / total as f64;
        assert!(frac < 0.20, "IGNORE fraction {frac:.3}");
    }

    #[test]
    fn oracle_headroom_band_on_val() {
        let (_, ds) = &*DEFAULT_SET;
        let mut conf = ConfusionMatrix::new(5);
        for sample in ds.val() {
            let pred = oracle_predictions(&ds.manifest.spec, &sample.image);
            conf.update(&sample.label, &pred).unwrap();
        }
        let (m, per) = miou(&conf).unwrap();
        assert!(
            (0.45..=0.85).contains(&m),
            "oracle mIoU {m:.3} outside the headroom band (per-class {per:?})"
        );
    }

    #[test]
    fn noiseless_disjoint_oracle_is_near_perfect_on_interiors() {
        let mut spec = small_spec(13);
        spec.color_noise_sigma = 0.0;
        spec.class_color_overlap = 0.0;
        let dir = TempDir::new().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let mut correct = 0usize;
        let mut total = 0usize;
        for sample in &ds.samples {
            let pred = oracle_predictions(&spec, &sample.image);
            for ((y, x), &gt) in sample.label.data().indexed_iter() {
                if gt == IGNORE || gt == 0 {
                    continue; // interiors of shapes only
                }
                total += 1;
                if pred[(y, x)] == gt {
                    correct += 1;
                }
            }
        }
        assert!(total > 0);
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.99, "interior accuracy {acc:.4}");
    }

    #[test]
    fn overlap_windows_have_advertised_geometry() {
        // v=0: disjoint halves; v=1: identical windows
        assert_eq!(ramp_window(1, 0.0), (0.0, 0.5));
        assert_eq!(ramp_window(2, 0.0), (0.5, 1.0));
        assert_eq!(ramp_window(1, 1.0), (0.0, 1.0));
        assert_eq!(ramp_window(2, 1.0), (0.0, 1.0));
        // shared length over window length equals v
        for v in [0.25, 0.5, 0.75] {
            let (a0, a1) = ramp_window(1, v);
            let (b0, b1) = ramp_window(2, v);
            let shared = (a1.min(b1) - b0.max(a0)).max(0.0);
            approx::assert_abs_diff_eq!(shared / (a1 - a0), v, epsilon = 1e-12);
        }
    }

    #[test]
    fn ignore_ring_only_at_transitions() {
        let mut label = Array2::<u8>::zeros((8, 8));
        for y in 2..6 {
            for x in 2..6 {
                label[(y, x)] = 1;
            }
        }
        let ringed = apply_ignore_ring(&label, 1);
        // transition-adjacent pixels become IGNORE on both sides
        assert_eq!(ringed[(2, 2)], IGNORE);
        assert_eq!(ringed[(1, 2)], IGNORE);
        // far interior and far background survive
        assert_eq!(ringed[(4, 4)], 1);
        assert_eq!(ringed[(0, 0)], 0);
        // border 0 is the identity
        assert_eq!(apply_ignore_ring(&label, 0), label);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = TempDir::new().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            LadError::DatasetFile { path, .. } => {
                assert!(path.ends_with("manifest.json"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_file_error_names_the_file() {
        let spec = small_spec(17);
        let dir = TempDir::new().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let victim = dir.path().join("images").join("00003.png");
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            LadError::DatasetFile { path, .. } => assert_eq!(path, victim),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn corrupt_label_values_are_rejected() {
        let spec = small_spec(19);
        let dir = TempDir::new().unwrap();
        generate_dataset(&spec, dir.path()).unwrap();
        let victim = dir.path().join("labels").join("00001.png");
        let mut buf = image::GrayImage::new(spec.image_size as u32, spec.image_size as u32);
        buf.put_pixel(0, 0, image::Luma([200])); // 200 is neither a class nor IGNORE
        buf.save(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            LadError::DatasetFile { path, reason } => {
                assert_eq!(path, victim);
                assert!(reason.contains("200"), "reason: {reason}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn shuffle_is_seed_stable_and_a_permutation() {
        let a = shuffle_indices(50, 3);
        let b = shuffle_indices(50, 3);
        let c = shuffle_indices(50, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(shuffle_indices(0, 1), Vec::<usize>::new());
    }

    #[test]
    #[ignore = "diagnostic: prints oracle quality for dataset tuning"]
    fn print_dataset_diagnostics() {
        let (_, ds) = &*DEFAULT_SET;
        let mut conf = ConfusionMatrix::new(5);
        for sample in ds.val() {
            let pred = oracle_predictions(&ds.manifest.spec, &sample.image);
            conf.update(&sample.label, &pred).unwrap();
        }
        let (m, per) = miou(&conf).unwrap();
        println!("oracle val mIoU {m:.4}");
        for (class, iou) in per.iter().enumerate() {
            println!("  class {class}: {iou:?}");
        }
    }

    #[test]
    fn normalization_matches_advertised_transform() {
        approx::assert_abs_diff_eq!(normalize_u8(128), ((128.0 / 255.0 - 0.5) / 0.25) as f32);
        assert_eq!(normalize_u8(0), -2.0);
        assert_eq!(normalize_u8(255), 2.0);
    }
}
