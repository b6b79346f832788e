//! Encoder-decoder segmentation network, the shared architecture for
//! teacher, student and baseline. Parameters live in layer structs; the
//! optimizer sees them as one flat vector via `params_flat` /
//! `set_params_flat`, with gradients returned in the same layout.

mod layers;

pub use layers::{
    avgpool2, avgpool2_backward, concat_channels, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv1x1, Conv3x3, LayerNorm,
};

use layers::{fill_from_flat, Conv1x1Cache, Conv3x3Cache, LayerNormCache};
use ndarray::{Array1, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LadError, Result};
use crate::real::Real;

/// Architecture hyperparameters. `in_channels` is 3 for RGB-only models and
/// 4 for the label-assisted teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl NetConfig {
    pub fn new(in_channels: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            in_channels,
            num_classes,
            base_width: 32,
            depth: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 && self.in_channels != 4 {
            return Err(LadError::InvalidConfig(format!(
                "in_channels must be 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.base_width < 4 {
            return Err(LadError::InvalidConfig(format!(
                "base_width must be at least 4, got {}",
                self.base_width
            )));
        }
        if self.depth < 1 {
            return Err(LadError::InvalidConfig("depth must be at least 1".into()));
        }
        if self.num_classes < 1 || self.num_classes > 254 {
            return Err(LadError::InvalidConfig(format!(
                "num_classes must be in 1..=254, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Encoder: depth stages of conv3×3 + norm + ReLU, each followed by 2×
/// average pooling. Decoder mirrors them coarse-to-fine: conv3×3 + norm +
/// ReLU, bilinear ×2 upsample, then concat with the matching encoder skip.
/// A 1×1 head maps the final 2·width channels to class logits.
#[derive(Debug, Clone)]
pub struct SegNet<F> {
    cfg: NetConfig,
    enc_conv: Vec<Conv3x3<F>>,
    enc_norm: Vec<LayerNorm<F>>,
    dec_conv: Vec<Conv3x3<F>>,
    dec_norm: Vec<LayerNorm<F>>,
    head: Conv1x1<F>,
}

struct EncStageCache<F> {
    conv: Conv3x3Cache<F>,
    norm: LayerNormCache<F>,
    act: Array3<F>,
}

struct DecStageCache<F> {
    conv: Conv3x3Cache<F>,
    norm: LayerNormCache<F>,
    act: Array3<F>,
}

/// Intermediate state of one forward pass, consumed by `backward`.
pub struct ForwardCache<F> {
    enc: Vec<EncStageCache<F>>,
    dec: Vec<Option<DecStageCache<F>>>,
    head: Conv1x1Cache<F>,
}

impl<F: Real> SegNet<F> {
    pub fn build(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut enc_conv = Vec::with_capacity(cfg.depth);
        let mut enc_norm = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let in_ch = if i == 0 { cfg.in_channels } else { w };
            enc_conv.push(Conv3x3::init(in_ch, w, &mut rng));
            enc_norm.push(LayerNorm::new(w));
        }
        // stage depth-1 consumes the pooled bottleneck (w channels); every
        // finer stage consumes the previous upsample+skip concat (2w)
        let mut dec_conv: Vec<Option<Conv3x3<F>>> = (0..cfg.depth).map(|_| None).collect();
        let mut dec_norm: Vec<Option<LayerNorm<F>>> = (0..cfg.depth).map(|_| None).collect();
        for i in (0..cfg.depth).rev() {
            let in_ch = if i == cfg.depth - 1 { w } else { 2 * w };
            dec_conv[i] = Some(Conv3x3::init(in_ch, w, &mut rng));
            dec_norm[i] = Some(LayerNorm::new(w));
        }
        let head = Conv1x1::init(2 * w, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg,
            enc_conv,
            enc_norm,
            dec_conv: dec_conv.into_iter().map(Option::unwrap).collect(),
            dec_norm: dec_norm.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Array3<F>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(LadError::shape(
                "network input channels",
                format!("{}", self.cfg.in_channels),
                format!("{c}"),
            ));
        }
        let divisor = 1usize << self.cfg.depth;
        if h % divisor != 0 || w % divisor != 0 || h == 0 || w == 0 {
            return Err(LadError::shape(
                "network input spatial dims",
                format!("multiples of {divisor}"),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Array3<F>) -> Result<(Array3<F>, ForwardCache<F>)> {
        self.check_input(x)?;
        let depth = self.cfg.depth;
        let mut enc = Vec::with_capacity(depth);
        let mut a = x.clone();
        for i in 0..depth {
            let (z, conv_cache) = self.enc_conv[i].forward(&a)?;
            let (n, norm_cache) = self.enc_norm[i].forward(&z)?;
            let act = relu(&n);
            a = avgpool2(&act)?;
            enc.push(EncStageCache {
                conv: conv_cache,
                norm: norm_cache,
                act,
            });
        }
        let mut dec: Vec<Option<DecStageCache<F>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let (z, conv_cache) = self.dec_conv[i].forward(&a)?;
            let (n, norm_cache) = self.dec_norm[i].forward(&z)?;
            let act = relu(&n);
            let up = upsample2(&act);
            a = concat_channels(&up, &enc[i].act)?;
            dec[i] = Some(DecStageCache {
                conv: conv_cache,
                norm: norm_cache,
                act,
            });
        }
        let (logits, head_cache) = self.head.forward(&a)?;
        Ok((
            logits,
            ForwardCache {
                enc,
                dec,
                head: head_cache,
            },
        ))
    }

    pub fn forward(&self, x: &Array3<F>) -> Result<Array3<F>> {
        self.forward_cached(x).map(|(logits, _)| logits)
    }

    /// Backpropagates `grad_logits`, returning parameter gradients flattened
    /// in `params_flat` order plus the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        grad_logits: &Array3<F>,
    ) -> (Array1<F>, Array3<F>) {
        let depth = self.cfg.depth;
        let w = self.cfg.base_width;
        let (gh_w, gh_b, mut g) = self.head.backward(&cache.head, grad_logits);
        let mut skip_grads: Vec<Option<Array3<F>>> = (0..depth).map(|_| None).collect();
        let mut dec_grads: Vec<Option<(ndarray::Array2<F>, Array1<F>, Array1<F>, Array1<F>)>> =
            (0..depth).map(|_| None).collect();
        // decoder ran coarse-to-fine (i = depth-1 .. 0); reverse order is ascending i
        for i in 0..depth {
            let stage = cache.dec[i].as_ref().expect("decoder cache");
            let (g_up, g_skip) = split_channels(&g, w);
            skip_grads[i] = Some(g_skip);
            let g_act = upsample2_backward(&g_up);
            let g_relu = relu_backward(&stage.act, &g_act);
            let (g_gamma, g_beta, g_norm) = self.dec_norm[i].backward(&stage.norm, &g_relu);
            let (g_cw, g_cb, g_in) = self.dec_conv[i].backward(&stage.conv, &g_norm);
            dec_grads[i] = Some((g_cw, g_cb, g_gamma, g_beta));
            g = g_in;
        }
        let mut enc_grads: Vec<Option<(ndarray::Array2<F>, Array1<F>, Array1<F>, Array1<F>)>> =
            (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let stage = &cache.enc[i];
            let mut g_act = avgpool2_backward(&g);
            g_act = g_act + skip_grads[i].take().expect("skip grad");
            let g_relu = relu_backward(&stage.act, &g_act);
            let (g_gamma, g_beta, g_norm) = self.enc_norm[i].backward(&stage.norm, &g_relu);
            let (g_cw, g_cb, g_in) = self.enc_conv[i].backward(&stage.conv, &g_norm);
            enc_grads[i] = Some((g_cw, g_cb, g_gamma, g_beta));
            g = g_in;
        }
        let mut flat = Vec::with_capacity(self.num_params());
        for grads in enc_grads.into_iter().chain(dec_grads) {
            let (cw, cb, gamma, beta) = grads.expect("stage grads");
            flat.extend(cw.iter().copied());
            flat.extend(cb.iter().copied());
            flat.extend(gamma.iter().copied());
            flat.extend(beta.iter().copied());
        }
        flat.extend(gh_w.iter().copied());
        flat.extend(gh_b.iter().copied());
        (Array1::from_vec(flat), g)
    }

    /// Parameter layout as (name, length) pairs in flat-vector order.
    pub fn param_layout(&self) -> Vec<(String, usize)> {
        let mut layout = Vec::new();
        for (prefix, convs, norms) in [
            ("enc", &self.enc_conv, &self.enc_norm),
            ("dec", &self.dec_conv, &self.dec_norm),
        ] {
            for (i, (conv, norm)) in convs.iter().zip(norms.iter()).enumerate() {
                layout.push((format!("{prefix}{i}.conv.weight"), conv.weight.len()));
                layout.push((format!("{prefix}{i}.conv.bias"), conv.bias.len()));
                layout.push((format!("{prefix}{i}.norm.gamma"), norm.gamma.len()));
                layout.push((format!("{prefix}{i}.norm.beta"), norm.beta.len()));
            }
        }
        layout.push(("head.weight".into(), self.head.weight.len()));
        layout.push(("head.bias".into(), self.head.bias.len()));
        layout
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|(_, len)| len).sum()
    }

    pub fn params_flat(&self) -> Array1<F> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (conv, norm) in self
            .enc_conv
            .iter()
            .zip(&self.enc_norm)
            .chain(self.dec_conv.iter().zip(&self.dec_norm))
        {
            flat.extend(conv.weight.iter().copied());
            flat.extend(conv.bias.iter().copied());
            flat.extend(norm.gamma.iter().copied());
            flat.extend(norm.beta.iter().copied());
        }
        flat.extend(self.head.weight.iter().copied());
        flat.extend(self.head.bias.iter().copied());
        Array1::from_vec(flat)
    }

    pub fn set_params_flat(&mut self, flat: ArrayView1<F>) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(LadError::shape(
                "flat parameter vector",
                format!("{}", self.num_params()),
                format!("{}", flat.len()),
            ));
        }
        let mut offset = 0;
        let mut take = |len: usize| {
            let view = flat.slice(ndarray::s![offset..offset + len]);
            offset += len;
            view
        };
        for (conv, norm) in self
            .enc_conv
            .iter_mut()
            .zip(self.enc_norm.iter_mut())
            .chain(self.dec_conv.iter_mut().zip(self.dec_norm.iter_mut()))
        {
            let len = conv.weight.len();
            fill_from_flat(&mut conv.weight, take(len));
            let len = conv.bias.len();
            fill_from_flat(&mut conv.bias, take(len));
            let len = norm.gamma.len();
            fill_from_flat(&mut norm.gamma, take(len));
            let len = norm.beta.len();
            fill_from_flat(&mut norm.beta, take(len));
        }
        let len = self.head.weight.len();
        fill_from_flat(&mut self.head.weight, take(len));
        let len = self.head.bias.len();
        fill_from_flat(&mut self.head.bias, take(len));
        Ok(())
    }

    /// Per-pixel argmax over the channel axis.
    pub fn predict_classes(logits: &Array3<F>) -> ndarray::Array2<u8> {
        let (c, h, w) = logits.dim();
        let mut out = ndarray::Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[(0, y, x)];
                for ch in 1..c {
                    if logits[(ch, y, x)] > best_v {
                        best_v = logits[(ch, y, x)];
                        best = ch;
                    }
                }
                out[(y, x)] = best as u8;
            }
        }
        out
    }
}

/// Convenience for tests and diagnostics: zero-mean unit-ish random input.
pub fn random_input<F: Real>(c: usize, h: usize, w: usize, seed: u64) -> Array3<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((c, h, w), || F::standard_normal(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use crate::label::LabelMap;
    use crate::losses::{cross_entropy_seg, cross_entropy_seg_grad};
    use rand::Rng;

    fn tiny_cfg(in_channels: usize, depth: usize, seed: u64) -> NetConfig {
        NetConfig {
            in_channels,
            num_classes: 2,
            base_width: 4,
            depth,
            seed,
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = NetConfig::new(4, 5, 17);
        let a = SegNet::<f32>::build(cfg).unwrap();
        let b = SegNet::<f32>::build(cfg).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        assert!(pa.iter().zip(pb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = SegNet::<f32>::build(NetConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(pa, c.params_flat());
    }

    #[test]
    fn param_count_differs_only_in_first_conv() {
        let rgb = SegNet::<f32>::build(NetConfig::new(3, 5, 0)).unwrap();
        let rgbl = SegNet::<f32>::build(NetConfig::new(4, 5, 0)).unwrap();
        let la = rgb.param_layout();
        let lb = rgbl.param_layout();
        assert_eq!(la.len(), lb.len());
        for ((name_a, len_a), (name_b, len_b)) in la.iter().zip(lb.iter()) {
            assert_eq!(name_a, name_b);
            if name_a == "enc0.conv.weight" {
                assert_eq!(len_b - len_a, 9 * 32);
            } else {
                assert_eq!(len_a, len_b, "{name_a}");
            }
        }
    }

    #[test]
    fn forward_shape_contract() {
        let net = SegNet::<f32>::build(NetConfig::new(3, 4, 1)).unwrap();
        let x = random_input::<f32>(3, 64, 64, 2);
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.dim(), (4, 64, 64));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SegNet::<f32>::build(NetConfig::new(5, 4, 0)).is_err());
        assert!(SegNet::<f32>::build(NetConfig {
            base_width: 2,
            ..NetConfig::new(3, 4, 0)
        })
        .is_err());
        assert!(SegNet::<f32>::build(NetConfig {
            depth: 0,
            ..NetConfig::new(3, 4, 0)
        })
        .is_err());
        assert!(SegNet::<f32>::build(NetConfig {
            num_classes: 0,
            ..NetConfig::new(3, 4, 0)
        })
        .is_err());
    }

    #[test]
    fn invalid_inputs_rejected() {
        let net = SegNet::<f32>::build(tiny_cfg(3, 2, 0)).unwrap();
        assert!(net.forward(&random_input::<f32>(4, 16, 16, 0)).is_err());
        assert!(net.forward(&random_input::<f32>(3, 15, 16, 0)).is_err());
        assert!(net.forward(&random_input::<f32>(3, 16, 18, 0)).is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut net = SegNet::<f32>::build(tiny_cfg(3, 2, 3)).unwrap();
        net.head.weight.fill(0.0);
        net.head.bias.fill(0.0);
        let logits = net.forward(&random_input::<f32>(3, 16, 16, 4)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let net = SegNet::<f32>::build(tiny_cfg(3, 2, 5)).unwrap();
        let x = random_input::<f32>(3, 16, 16, 6);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn logits_finite_across_seeds() {
        for seed in 0..100 {
            let net = SegNet::<f32>::build(NetConfig {
                base_width: 8,
                num_classes: 3,
                ..tiny_cfg(3, 2, seed)
            })
            .unwrap();
            let x = random_input::<f32>(3, 16, 16, seed + 1000);
            let logits = net.forward(&x).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()), "seed {seed}");
            let max = logits.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max < 1e4, "seed {seed} max {max}");
        }
    }

    #[test]
    fn params_flat_roundtrip_and_length_check() {
        let mut net = SegNet::<f64>::build(tiny_cfg(3, 2, 7)).unwrap();
        let n = net.num_params();
        assert_eq!(net.params_flat().len(), n);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fresh = Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0));
        net.set_params_flat(fresh.view()).unwrap();
        assert_eq!(net.params_flat(), fresh);
        assert!(net.set_params_flat(fresh.slice(ndarray::s![..n - 1])).is_err());
        let layout_total: usize = net.param_layout().iter().map(|(_, l)| l).sum();
        assert_eq!(layout_total, n);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = SegNet::<f64>::build(tiny_cfg(3, 2, 9)).unwrap();
        let x = random_input::<f64>(3, 8, 8, 10);
        let probe = random_input::<f64>(2, 8, 8, 11);
        let f = |x: &Array3<f64>| {
            let logits = net.forward(x).unwrap();
            logits.iter().zip(probe.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (_, grad_input) = net.backward(&cache, &probe);
        let step = 1e-4;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += step;
            let mut xm = x.clone();
            xm[idx] -= step;
            let fd = (f(&xp) - f(&xm)) / (2.0 * step);
            let a = grad_input[idx];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-6);
            assert!(rel < 1e-3, "at {idx:?}: analytic {a} fd {fd}");
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences_through_ce() {
        let cfg = tiny_cfg(3, 1, 12);
        let net = SegNet::<f64>::build(cfg).unwrap();
        let x = random_input::<f64>(3, 8, 8, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let values: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2)).collect();
        let label = LabelMap::from_flat(2, 8, 8, &values).unwrap();
        let (logits, cache) = net.forward_cached(&x).unwrap();
        let (_, grad_logits) = cross_entropy_seg_grad(&logits, &label).unwrap();
        let (grads, _) = net.backward(&cache, &grad_logits);
        let params = net.params_flat();
        let loss_at = |p: &Array1<f64>| {
            let mut probe = net.clone();
            probe.set_params_flat(p.view()).unwrap();
            cross_entropy_seg(&probe.forward(&x).unwrap(), &label).unwrap()
        };
        let step = 1e-4;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += step;
            let mut pm = params.clone();
            pm[i] -= step;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * step);
            let a = grads[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs() + 1e-6);
            assert!(rel < 1e-3, "param {i}: analytic {a} fd {fd}");
        }
    }

    #[test]
    #[ignore = "wallclock benchmark, run explicitly"]
    fn bench_train_step_shape() {
        let net = SegNet::<f32>::build(NetConfig::new(4, 5, 0)).unwrap();
        let x = random_input::<f32>(4, 64, 64, 1);
        let grad = random_input::<f32>(5, 64, 64, 2);
        let reps = 20;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            std::hint::black_box(net.forward(&x).unwrap());
        }
        let fwd = start.elapsed().as_secs_f64() / reps as f64;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            let (_, cache) = net.forward_cached(&x).unwrap();
            let (g, _) = net.backward(&cache, &grad);
            std::hint::black_box(g);
        }
        let per = start.elapsed().as_secs_f64() / reps as f64;
        println!("fwd per image: {:.2} ms", fwd * 1e3);
        println!("fwd+bwd per image: {:.2} ms", per * 1e3);
    }

    #[test]
    fn receptive_field_covers_9x9_at_depth_2() {
        let net = SegNet::<f64>::build(tiny_cfg(3, 2, 15)).unwrap();
        let x = random_input::<f64>(3, 16, 16, 16);
        let (logits, cache) = net.forward_cached(&x).unwrap();
        let mut grad = Array3::zeros(logits.dim());
        for c in 0..2 {
            grad[(c, 8, 8)] = 1.0;
        }
        let (_, grad_input) = net.backward(&cache, &grad);
        let support = grad_input.map_axis(Axis(0), |chans| {
            chans.iter().map(|v| v.abs()).fold(0.0f64, f64::max)
        });
        let rows: Vec<usize> = (0..16)
            .filter(|&y| (0..16).any(|x| support[(y, x)] > 1e-12))
            .collect();
        let cols: Vec<usize> = (0..16)
            .filter(|&x| (0..16).any(|y| support[(y, x)] > 1e-12))
            .collect();
        let row_span = rows.last().unwrap() - rows.first().unwrap() + 1;
        let col_span = cols.last().unwrap() - cols.first().unwrap() + 1;
        assert!(row_span >= 9, "row span {row_span}");
        assert!(col_span >= 9, "col span {col_span}");
    }
}
