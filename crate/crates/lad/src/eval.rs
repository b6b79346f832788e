//! Evaluation: mIoU over a confusion matrix, the KL_mean output-stability
//! metric for noised-label teachers, and the label-channel saliency ratio
//! that exposes shortcut learning.

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::error::{LadError, Result};
use crate::label::{LabelMap, IGNORE};
use crate::lnm::{concat_input, noised_channel, sample_noise_params, NoisingMode};
use crate::real::{derive_seed, Real};
use crate::segnet::SegNet;
use crate::synthdata::Sample;

/// Row = ground truth, column = prediction. Ignore pixels never enter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn update(&mut self, gt: &LabelMap, pred: &Array2<u8>) -> Result<()> {
        if gt.num_classes() != self.num_classes {
            return Err(LadError::shape(
                "confusion matrix classes",
                format!("{}", self.num_classes),
                format!("{}", gt.num_classes()),
            ));
        }
        if (gt.height(), gt.width()) != pred.dim() {
            return Err(LadError::shape(
                "confusion matrix prediction",
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", pred.dim().0, pred.dim().1),
            ));
        }
        for (gv, &pv) in gt.data().iter().zip(pred.iter()) {
            if *gv == IGNORE {
                continue;
            }
            if usize::from(pv) >= self.num_classes {
                return Err(LadError::InvalidLabel {
                    value: pv,
                    num_classes: self.num_classes,
                });
            }
            self.counts[(usize::from(*gv), usize::from(pv))] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(LadError::shape(
                "confusion matrix merge",
                format!("{}", self.num_classes),
                format!("{}", other.num_classes),
            ));
        }
        self.counts += &other.counts;
        Ok(())
    }
}

/// Mean IoU plus the per-class vector; `None` marks classes with zero union
/// (absent in both ground truth and prediction), which are excluded from
/// the mean.
pub fn miou(conf: &ConfusionMatrix) -> Result<(f64, Vec<Option<f64>>)> {
    let c = conf.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        let tp = conf.counts[(k, k)];
        let row: u64 = (0..c).map(|j| conf.counts[(k, j)]).sum();
        let col: u64 = (0..c).map(|i| conf.counts[(i, k)]).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(LadError::EmptyConfusion);
    }
    Ok((sum / present as f64, per_class))
}

/// mIoU of an RGB-only model over samples.
pub fn miou_rgb(net: &SegNet<f32>, samples: &[Sample]) -> Result<(f64, Vec<Option<f64>>)> {
    let mut conf = ConfusionMatrix::new(net.config().num_classes);
    for sample in samples {
        let logits = net.forward(&sample.image)?;
        conf.update(&sample.label, &SegNet::predict_classes(&logits))?;
    }
    miou(&conf)
}

/// mIoU of a label-assisted teacher, re-sampling input noise per image from
/// a substream of `seed` (matching how the teacher is used in distillation).
pub fn miou_noised(
    net: &SegNet<f32>,
    samples: &[Sample],
    alpha: f64,
    mode: NoisingMode,
    seed: u64,
) -> Result<(f64, Vec<Option<f64>>)> {
    let mut conf = ConfusionMatrix::new(net.config().num_classes);
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng: ChaCha8Rng =
            rand::SeedableRng::seed_from_u64(derive_seed(seed, "eval-noise", idx as u64));
        let params = sample_noise_params::<f32, _>(
            sample.label.num_classes(),
            sample.label.height(),
            sample.label.width(),
            alpha as f32,
            &mut rng,
        )?;
        let channel = noised_channel(&sample.label, &params, mode)?;
        let input = concat_input(&sample.image, &channel)?;
        let logits = net.forward(&input)?;
        conf.update(&sample.label, &SegNet::predict_classes(&logits))?;
    }
    miou(&conf)
}

/// Output stability over noise resamplings, aggregated over images.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityReport {
    pub kl_mean: f64,
    pub m: usize,
    pub per_image: Vec<f64>,
}

impl StabilityReport {
    /// Display scaling used by stability tables.
    pub fn kl_mean_x100(&self) -> f64 {
        self.kl_mean * 100.0
    }
}

/// Per-pixel channel-axis softmax KL(p ‖ q), averaged over pixels.
fn pixelwise_kl<F: Real>(p_logits: &Array3<F>, q_logits: &Array3<F>) -> f64 {
    let (c, h, w) = p_logits.dim();
    let mut total = 0.0;
    let mut lp = vec![0.0f64; c];
    let mut lq = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            log_softmax_pixel(p_logits, y, x, &mut lp);
            log_softmax_pixel(q_logits, y, x, &mut lq);
            let mut kl = 0.0;
            for ch in 0..c {
                kl += lp[ch].exp() * (lp[ch] - lq[ch]);
            }
            total += kl;
        }
    }
    total / (h * w) as f64
}

fn log_softmax_pixel<F: Real>(logits: &Array3<F>, y: usize, x: usize, out: &mut [f64]) {
    let c = out.len();
    let mut max = f64::NEG_INFINITY;
    for ch in 0..c {
        out[ch] = logits[(ch, y, x)].to_f64();
        max = max.max(out[ch]);
    }
    let mut sum = 0.0;
    for v in out.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in out.iter_mut() {
        *v -= lse;
    }
}

/// Mean over all ordered pairs (k, j), diagonal included as exact zeros:
/// (1/m²)·Σ_k Σ_j KL(O^k, O^j).
pub fn pairwise_kl_mean<F: Real>(logits: &[Array3<F>]) -> f64 {
    let m = logits.len();
    let mut sum = 0.0;
    for k in 0..m {
        for j in 0..m {
            if k != j {
                sum += pixelwise_kl(&logits[k], &logits[j]);
            }
        }
    }
    sum / (m * m) as f64
}

/// KL_mean for one image: m teacher forwards under independent noise.
pub fn kl_mean_single(
    net: &SegNet<f32>,
    sample: &Sample,
    m: usize,
    alpha: f64,
    mode: NoisingMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if m < 1 {
        return Err(LadError::InvalidConfig("kl_mean requires m >= 1".into()));
    }
    let mut outputs = Vec::with_capacity(m);
    for _ in 0..m {
        let params = sample_noise_params::<f32, _>(
            sample.label.num_classes(),
            sample.label.height(),
            sample.label.width(),
            alpha as f32,
            rng,
        )?;
        let channel = noised_channel(&sample.label, &params, mode)?;
        let input = concat_input(&sample.image, &channel)?;
        outputs.push(net.forward(&input)?);
    }
    Ok(pairwise_kl_mean(&outputs))
}

/// KL_mean over a set of images with per-image rng substreams.
pub fn stability_report(
    net: &SegNet<f32>,
    samples: &[Sample],
    m: usize,
    alpha: f64,
    mode: NoisingMode,
    seed: u64,
) -> Result<StabilityReport> {
    if samples.is_empty() {
        return Err(LadError::InvalidConfig("stability report needs at least one image".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng: ChaCha8Rng =
            rand::SeedableRng::seed_from_u64(derive_seed(seed, "stability", idx as u64));
        per_image.push(kl_mean_single(net, sample, m, alpha, mode, &mut rng)?);
    }
    let kl_mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(StabilityReport { kl_mean, m, per_image })
}

pub const SALIENCY_CAP: f64 = 1e6;

/// Ratio of mean absolute input gradient on the label channel to that on
/// the RGB channels, for the objective Σ_pixels maxᶜ logit. Averaged over
/// `draws` noise resamplings; each draw is capped at [`SALIENCY_CAP`].
pub fn saliency_ratio(
    net: &SegNet<f32>,
    sample: &Sample,
    alpha: f64,
    mode: NoisingMode,
    draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if draws < 1 {
        return Err(LadError::InvalidConfig("saliency_ratio requires draws >= 1".into()));
    }
    if net.config().in_channels != 4 {
        return Err(LadError::InvalidConfig(
            "saliency_ratio requires a 4-channel teacher".into(),
        ));
    }
    let mut acc = 0.0;
    for _ in 0..draws {
        let params = sample_noise_params::<f32, _>(
            sample.label.num_classes(),
            sample.label.height(),
            sample.label.width(),
            alpha as f32,
            rng,
        )?;
        let channel = noised_channel(&sample.label, &params, mode)?;
        let input = concat_input(&sample.image, &channel)?;
        let (logits, cache) = net.forward_cached(&input)?;
        // d(Σ max-class logit)/d logits: one-hot at the argmax channel
        let (c, h, w) = logits.dim();
        let mut grad_logits = Array3::<f32>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                for ch in 1..c {
                    if logits[(ch, y, x)] > logits[(best, y, x)] {
                        best = ch;
                    }
                }
                grad_logits[(best, y, x)] = 1.0;
            }
        }
        let (_, grad_input) = net.backward(&cache, &grad_logits);
        let mut label_abs = 0.0f64;
        let mut rgb_abs = 0.0f64;
        for ch in 0..4 {
            let plane_sum: f64 = grad_input
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .map(|v| f64::from(v.abs()))
                .sum();
            if ch == 3 {
                label_abs += plane_sum;
            } else {
                rgb_abs += plane_sum;
            }
        }
        let label_mean = label_abs / (h * w) as f64;
        let rgb_mean = rgb_abs / (3 * h * w) as f64;
        let ratio = if label_mean == 0.0 {
            0.0
        } else if rgb_mean == 0.0 {
            SALIENCY_CAP
        } else {
            (label_mean / rgb_mean).min(SALIENCY_CAP)
        };
        acc += ratio;
    }
    Ok(acc / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{random_input, NetConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::SeedableRng;

    fn label(c: usize, values: &[u8], h: usize, w: usize) -> LabelMap {
        LabelMap::from_flat(c, h, w, values).unwrap()
    }

    fn sample_from(net_classes: usize, h: usize, w: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<u8> = (0..h * w)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..net_classes) as u8)
            .collect();
        Sample {
            image: random_input::<f32>(3, h, w, seed + 1),
            label: label(net_classes, &values, h, w),
        }
    }

    /// Zeroes first-conv weight columns belonging to the given input channels.
    fn zero_input_channels(net: &mut SegNet<f32>, channels: &[usize]) {
        let layout = net.param_layout();
        let mut flat = net.params_flat();
        let mut offset = 0;
        for (name, len) in &layout {
            if name == "enc0.conv.weight" {
                let in9 = net.config().in_channels * 9;
                let out = len / in9;
                for o in 0..out {
                    for &ch in channels {
                        for k in 0..9 {
                            flat[offset + o * in9 + ch * 9 + k] = 0.0;
                        }
                    }
                }
                break;
            }
            offset += len;
        }
        net.set_params_flat(flat.view()).unwrap();
    }

    #[test]
    fn miou_perfect_prediction() {
        let gt = label(3, &[0, 1, 2, 0], 2, 2);
        let pred = ndarray::array![[0u8, 1], [2, 0]];
        let mut conf = ConfusionMatrix::new(3);
        conf.update(&gt, &pred).unwrap();
        let (m, per) = miou(&conf).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0)]);
    }

    #[test]
    fn miou_hand_case() {
        // gt [0,1], pred [0,0]: class0 tp=1 fp=1 fn=0, class1 tp=0 fn=1
        let gt = label(2, &[0, 1], 1, 2);
        let pred = ndarray::array![[0u8, 0]];
        let mut conf = ConfusionMatrix::new(2);
        conf.update(&gt, &pred).unwrap();
        let (m, per) = miou(&conf).unwrap();
        assert_abs_diff_eq!(per[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(per[1].unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn miou_ignore_contributes_nothing() {
        let gt = label(2, &[IGNORE, IGNORE, IGNORE, IGNORE], 2, 2);
        let pred = ndarray::array![[0u8, 1], [1, 0]];
        let mut conf = ConfusionMatrix::new(2);
        conf.update(&gt, &pred).unwrap();
        assert_eq!(conf.total(), 0);
        assert!(matches!(miou(&conf), Err(LadError::EmptyConfusion)));
    }

    #[test]
    fn miou_absent_class_excluded() {
        // class 2 never appears in gt or pred: excluded from the mean
        let gt = label(3, &[0, 1], 1, 2);
        let pred = ndarray::array![[0u8, 1]];
        let mut conf = ConfusionMatrix::new(3);
        conf.update(&gt, &pred).unwrap();
        let (m, per) = miou(&conf).unwrap();
        assert_eq!(per[2], None);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn confusion_additivity() {
        let gt_a = label(2, &[0, 1, 0, 1], 2, 2);
        let pred_a = ndarray::array![[0u8, 0], [1, 1]];
        let gt_b = label(2, &[1, 1, 0, 0], 2, 2);
        let pred_b = ndarray::array![[1u8, 0], [0, 0]];
        let mut whole = ConfusionMatrix::new(2);
        whole.update(&gt_a, &pred_a).unwrap();
        whole.update(&gt_b, &pred_b).unwrap();
        let mut part_a = ConfusionMatrix::new(2);
        part_a.update(&gt_a, &pred_a).unwrap();
        let mut part_b = ConfusionMatrix::new(2);
        part_b.update(&gt_b, &pred_b).unwrap();
        part_a.merge(&part_b).unwrap();
        assert_eq!(whole, part_a);
    }

    #[test]
    fn confusion_rejects_bad_prediction_values() {
        let gt = label(2, &[0, 1], 1, 2);
        let pred = ndarray::array![[0u8, 2]];
        let mut conf = ConfusionMatrix::new(2);
        assert!(conf.update(&gt, &pred).is_err());
    }

    #[test]
    fn predictions_invariant_under_positive_scaling() {
        let logits = random_input::<f32>(4, 8, 8, 3);
        let scaled = logits.mapv(|v| v * 2.5);
        assert_eq!(SegNet::predict_classes(&logits), SegNet::predict_classes(&scaled));
    }

    #[test]
    fn kl_mean_m1_is_zero() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 1)).unwrap();
        let sample = sample_from(3, 16, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = kl_mean_single(&net, &sample, 1, 0.01, NoisingMode::ClassWise, &mut rng).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kl_mean_zero_for_noise_invariant_teacher() {
        let mut net = SegNet::<f32>::build(NetConfig::new(4, 3, 4)).unwrap();
        zero_input_channels(&mut net, &[3]);
        let sample = sample_from(3, 16, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in [2, 3, 4] {
            let v = kl_mean_single(&net, &sample, m, 0.5, NoisingMode::ClassWise, &mut rng).unwrap();
            assert_eq!(v, 0.0, "m = {m}");
        }
    }

    #[test]
    fn kl_mean_positive_for_noise_sensitive_teacher() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 7)).unwrap();
        let sample = sample_from(3, 16, 16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = kl_mean_single(&net, &sample, 3, 0.5, NoisingMode::ClassWise, &mut rng).unwrap();
        assert!(v > 0.0);
    }

    #[test]
    fn kl_mean_matches_brute_force_double_loop() {
        let outputs: Vec<ndarray::Array3<f64>> = (0..3)
            .map(|s| random_input::<f64>(4, 5, 5, 40 + s))
            .collect();
        let fast = pairwise_kl_mean(&outputs);
        // independent accumulation including the zero diagonal
        let m = outputs.len();
        let mut brute = 0.0;
        for k in 0..m {
            for j in 0..m {
                brute += pixelwise_kl(&outputs[k], &outputs[j]);
            }
        }
        brute /= (m * m) as f64;
        assert_abs_diff_eq!(fast, brute, epsilon = 1e-10);
        assert!(fast > 0.0);
    }

    #[test]
    fn kl_mean_rejects_m_zero() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 10)).unwrap();
        let sample = sample_from(3, 16, 16, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(kl_mean_single(&net, &sample, 0, 0.01, NoisingMode::ClassWise, &mut rng).is_err());
    }

    #[test]
    fn stability_report_aggregates_per_image() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 13)).unwrap();
        let samples: Vec<Sample> = (0..4).map(|i| sample_from(3, 16, 16, 20 + i)).collect();
        let report =
            stability_report(&net, &samples, 3, 0.5, NoisingMode::ClassWise, 99).unwrap();
        assert_eq!(report.per_image.len(), 4);
        let mean = report.per_image.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(report.kl_mean, mean, epsilon = 1e-15);
        assert_abs_diff_eq!(report.kl_mean_x100(), report.kl_mean * 100.0, epsilon = 1e-15);
        // same seed reproduces exactly
        let again =
            stability_report(&net, &samples, 3, 0.5, NoisingMode::ClassWise, 99).unwrap();
        assert_eq!(report.per_image, again.per_image);
    }

    #[test]
    fn saliency_zero_when_label_channel_unused() {
        let mut net = SegNet::<f32>::build(NetConfig::new(4, 3, 14)).unwrap();
        zero_input_channels(&mut net, &[3]);
        let sample = sample_from(3, 16, 16, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r = saliency_ratio(&net, &sample, 0.01, NoisingMode::ClassWise, 4, &mut rng).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn saliency_capped_when_rgb_unused() {
        let mut net = SegNet::<f32>::build(NetConfig::new(4, 3, 17)).unwrap();
        zero_input_channels(&mut net, &[0, 1, 2]);
        let sample = sample_from(3, 16, 16, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let r = saliency_ratio(&net, &sample, 0.01, NoisingMode::ClassWise, 4, &mut rng).unwrap();
        assert_eq!(r, SALIENCY_CAP);
    }

    #[test]
    fn saliency_requires_teacher_and_positive_draws() {
        let rgb_net = SegNet::<f32>::build(NetConfig::new(3, 3, 20)).unwrap();
        let sample = sample_from(3, 16, 16, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        assert!(
            saliency_ratio(&rgb_net, &sample, 0.01, NoisingMode::ClassWise, 4, &mut rng).is_err()
        );
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 23)).unwrap();
        assert!(saliency_ratio(&net, &sample, 0.01, NoisingMode::ClassWise, 0, &mut rng).is_err());
    }

    #[test]
    fn saliency_deterministic_per_seed() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 24)).unwrap();
        let sample = sample_from(3, 16, 16, 25);
        let a = saliency_ratio(
            &net,
            &sample,
            0.01,
            NoisingMode::ClassWise,
            4,
            &mut ChaCha8Rng::seed_from_u64(26),
        )
        .unwrap();
        let b = saliency_ratio(
            &net,
            &sample,
            0.01,
            NoisingMode::ClassWise,
            4,
            &mut ChaCha8Rng::seed_from_u64(26),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite() && a >= 0.0);
    }

    #[test]
    fn zeroing_helper_layout_sanity() {
        // the helper's column arithmetic must target enc0 weight entries
        let net = SegNet::<f32>::build(NetConfig::new(4, 3, 27)).unwrap();
        let layout = net.param_layout();
        assert_eq!(layout[0].0, "enc0.conv.weight");
        assert_eq!(layout[0].1, 32 * 4 * 9);
        let _ = Array1::<f32>::zeros(1);
    }
}
