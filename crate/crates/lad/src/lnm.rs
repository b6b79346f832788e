//! Label noising module: turns a ground-truth label map into the privileged
//! real-valued input channel for the teacher.
//!
//! Noising has two stages. Class-wise noising multiplies each one-hot class
//! plane by one shared Gaussian weight and sums over classes, scrambling the
//! class index while keeping the value constant inside each class region.
//! Pixel-wise noising then adds `alpha`-scaled i.i.d. Gaussian noise,
//! breaking within-class constancy.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{LadError, Result};
use crate::label::{LabelMap, IGNORE};
use crate::real::Real;

/// One sampled realization of the noising transform: per-class weights,
/// a per-pixel noise field, and the pixel-noise scale.
#[derive(Debug, Clone)]
pub struct NoiseParams<F> {
    pub class_weights: Array1<F>,
    pub pixel_noise: Array2<F>,
    pub alpha: F,
}

/// Real-valued H×W map produced by noising a label; the privileged channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedLabelMap<F>(pub Array2<F>);

impl<F: Real> NoisedLabelMap<F> {
    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }
}

/// How the label channel is produced for a teacher input.
///
/// `ClassWise` is the two-stage noising above. `Direct` skips class-wise
/// noising: class ids are normalized to [0, 1] (ignore pixels to 0) before
/// pixel noise is added, so `Direct` with `alpha = 0` feeds the clean label —
/// the shortcut-learning arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NoisingMode {
    ClassWise,
    Direct,
}

/// One-hot encode a label map to a C×H×W binary tensor.
///
/// Ignore pixels get an all-zero column: they leak nothing into the noised
/// channel and their per-pixel channel sum is 0 instead of 1.
pub fn one_hot<F: Real>(label: &LabelMap) -> Array3<F> {
    let (c, h, w) = (label.num_classes(), label.height(), label.width());
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            if v != IGNORE {
                out[(usize::from(v), y, x)] = F::one();
            }
        }
    }
    out
}

/// Draws fresh noising parameters: `num_classes` class weights and an H×W
/// pixel-noise field, all standard Gaussian.
pub fn sample_noise_params<F: Real, R: Rng + ?Sized>(
    num_classes: usize,
    height: usize,
    width: usize,
    alpha: F,
    rng: &mut R,
) -> Result<NoiseParams<F>> {
    if alpha < F::zero() {
        return Err(LadError::InvalidConfig(format!(
            "alpha must be non-negative, got {}",
            alpha.to_f64()
        )));
    }
    let class_weights = Array1::from_shape_simple_fn(num_classes, || F::standard_normal(rng));
    let pixel_noise = Array2::from_shape_simple_fn((height, width), || F::standard_normal(rng));
    Ok(NoiseParams {
        class_weights,
        pixel_noise,
        alpha,
    })
}

fn check_shapes<F: Real>(label: &LabelMap, params: &NoiseParams<F>) -> Result<()> {
    if params.class_weights.len() != label.num_classes() {
        return Err(LadError::shape(
            "noise params class weights",
            format!("{}", label.num_classes()),
            format!("{}", params.class_weights.len()),
        ));
    }
    if params.pixel_noise.dim() != (label.height(), label.width()) {
        return Err(LadError::shape(
            "noise params pixel field",
            format!("{}x{}", label.height(), label.width()),
            format!("{}x{}", params.pixel_noise.dim().0, params.pixel_noise.dim().1),
        ));
    }
    Ok(())
}

/// Applies the two-stage noising transform: `out = W[y] + alpha * Z`,
/// with ignore pixels contributing only the pixel-noise term.
pub fn apply_lnm<F: Real>(label: &LabelMap, params: &NoiseParams<F>) -> Result<NoisedLabelMap<F>> {
    check_shapes(label, params)?;
    let (h, w) = (label.height(), label.width());
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            let class_term = if v == IGNORE {
                F::zero()
            } else {
                params.class_weights[usize::from(v)]
            };
            out[(y, x)] = class_term + params.alpha * params.pixel_noise[(y, x)];
        }
    }
    Ok(NoisedLabelMap(out))
}

/// Label channel without class-wise noising: class ids normalized to [0, 1]
/// (ignore pixels to 0), plus `alpha`-scaled pixel noise.
pub fn apply_direct<F: Real>(label: &LabelMap, params: &NoiseParams<F>) -> Result<NoisedLabelMap<F>> {
    check_shapes(label, params)?;
    let (h, w) = (label.height(), label.width());
    let denom = F::from_f64((label.num_classes().saturating_sub(1)).max(1) as f64);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = label.get(y, x);
            let base = if v == IGNORE {
                F::zero()
            } else {
                F::from_f64(f64::from(v)) / denom
            };
            out[(y, x)] = base + params.alpha * params.pixel_noise[(y, x)];
        }
    }
    Ok(NoisedLabelMap(out))
}

/// Applies the label channel transform selected by `mode`.
pub fn noised_channel<F: Real>(
    label: &LabelMap,
    params: &NoiseParams<F>,
    mode: NoisingMode,
) -> Result<NoisedLabelMap<F>> {
    match mode {
        NoisingMode::ClassWise => apply_lnm(label, params),
        NoisingMode::Direct => apply_direct(label, params),
    }
}

/// Concatenates the noised label as a fourth channel after the RGB image.
///
/// The label channel is fed verbatim; standard-Gaussian scale already matches
/// the normalized image channels.
pub fn concat_input<F: Real>(image: &Array3<F>, noised: &NoisedLabelMap<F>) -> Result<Array3<F>> {
    let (c, h, w) = image.dim();
    if (h, w) != noised.0.dim() {
        return Err(LadError::shape(
            "concat input",
            format!("{h}x{w}"),
            format!("{}x{}", noised.height(), noised.width()),
        ));
    }
    let mut out = Array3::zeros((c + 1, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(image);
    out.index_axis_mut(Axis(0), c).assign(&noised.0);
    Ok(out)
}
