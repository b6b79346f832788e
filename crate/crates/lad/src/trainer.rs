//! Training loops for the three arms: label-assisted teacher (dual-path
//! consistency), distilled student, and plain supervised baseline.
//!
//! All randomness flows from the run seed through named substreams (init /
//! noise / shuffle / eval), so reruns reproduce exactly. The dual path runs
//! two stochastic forwards through one shared parameter set by default;
//! the independent-copies reading is available behind `shared_dual_path`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    metrics_path, save_checkpoint, CheckpointManifest, FinalMetrics, FORMAT_VERSION,
};
use crate::error::{LadError, Result};
use crate::eval::{miou_noised, miou_rgb};
use crate::lnm::{concat_input, noised_channel, sample_noise_params, NoisingMode};
use crate::losses::{cross_entropy_seg_grad, student_loss, teacher_loss, LossWeights};
use crate::real::derive_seed;
use crate::segnet::{NetConfig, SegNet};
use crate::synthdata::{load_dataset, shuffle_indices, Dataset};

pub const EVAL_EVERY: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Teacher,
    Student,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda_consistency: f64,
    pub beta_kd: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub class_wise_noising: bool,
    #[serde(default = "default_true")]
    pub dual_path: bool,
    /// One shared parameter set for both dual-path forwards (default), or
    /// two independently updated copies of which the checkpoint keeps the
    /// first.
    #[serde(default = "default_true")]
    pub shared_dual_path: bool,
    pub net: NetConfig,
    pub dataset: PathBuf,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(net: NetConfig, dataset: PathBuf, seed: u64) -> Self {
        Self {
            alpha: 0.01,
            lambda_consistency: 1.0,
            beta_kd: 3.0,
            temperature: 4.0,
            learning_rate: 2e-3,
            iterations: 3000,
            batch_size: 8,
            seed,
            class_wise_noising: true,
            dual_path: true,
            shared_dual_path: true,
            net,
            dataset,
        }
    }

    pub fn noising_mode(&self) -> NoisingMode {
        if self.class_wise_noising {
            NoisingMode::ClassWise
        } else {
            NoisingMode::Direct
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_consistency: self.lambda_consistency,
            beta_kd: self.beta_kd,
            temperature: self.temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LadError::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        // lr = 0 is allowed: it freezes parameters, useful for control runs
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LadError::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LadError::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.loss_weights().validate()?;
        self.net.validate()
    }
}

/// One JSONL row per iteration. `loss_consis_or_kd` is the raw (unweighted)
/// measured value; the weighted total satisfies
/// `loss_total = loss_ce + weight * loss_consis_or_kd` with weight λ
/// (teacher), β (student) or 0 (baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_consis_or_kd: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub manifest: CheckpointManifest,
    pub records: Vec<RunRecord>,
    pub final_miou: f64,
    pub checkpoint_prefix: PathBuf,
}

/// Adam on the flat parameter vector; moments in f32 like the parameters.
struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Array1<f32>,
    v: Array1<f32>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array1::zeros(n),
            v: Array1::zeros(n),
        }
    }

    fn describe(lr: f64) -> String {
        format!("adam(lr={lr}, beta1=0.9, beta2=0.999, eps=1e-8)")
    }

    fn step(&mut self, params: &mut Array1<f32>, grads: &Array1<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grads)
            .for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
    }
}

/// Endless shuffled pass over train indices; reshuffles per epoch from the
/// shuffle substream.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    batch: usize,
    seed: u64,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            order: shuffle_indices(n, derive_seed(seed, "shuffle", 0)),
            cursor: 0,
            epoch: 0,
            batch,
            seed,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.epoch += 1;
            self.order =
                shuffle_indices(self.order.len(), derive_seed(self.seed, "shuffle", self.epoch));
            self.cursor = 0;
        }
        let slice = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        slice
    }
}

struct Recorder {
    writer: BufWriter<File>,
    path: PathBuf,
    records: Vec<RunRecord>,
}

impl Recorder {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| LadError::io(format!("creating {}", parent.display()), e))?;
            }
        }
        let file = File::create(&path)
            .map_err(|e| LadError::io(format!("creating {}", path.display()), e))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path,
            records: Vec::new(),
        })
    }

    fn push(&mut self, record: RunRecord) -> Result<()> {
        let line = serde_json::to_string(&record)
            .map_err(|e| LadError::InvalidConfig(format!("record serialization failed: {e}")))?;
        writeln!(self.writer, "{line}")
            .map_err(|e| LadError::io(format!("writing {}", self.path.display()), e))?;
        self.records.push(record);
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<RunRecord>> {
        self.writer
            .flush()
            .map_err(|e| LadError::io(format!("writing {}", self.path.display()), e))?;
        Ok(self.records)
    }
}

fn open_dataset(config: &TrainConfig) -> Result<Dataset> {
    let dataset = load_dataset(&config.dataset)?;
    if dataset.manifest.num_classes != config.net.num_classes {
        return Err(LadError::InvalidConfig(format!(
            "dataset has {} classes but the net is configured for {}",
            dataset.manifest.num_classes, config.net.num_classes
        )));
    }
    if config.batch_size > dataset.manifest.num_train {
        return Err(LadError::InvalidConfig(format!(
            "batch_size {} exceeds the {} train images",
            config.batch_size, dataset.manifest.num_train
        )));
    }
    Ok(dataset)
}

/// All randomness is rooted in the run seed; the net's own seed field is
/// replaced by the init substream.
fn build_net(config: &TrainConfig) -> Result<SegNet<f32>> {
    let cfg = NetConfig {
        seed: derive_seed(config.seed, "init", 0),
        ..config.net
    };
    SegNet::build(cfg)
}

fn nan_abort(iteration: usize, detail: String) -> LadError {
    LadError::NanLoss { iteration, detail }
}

/// Per-iteration f64 accumulators for logging; the weighted total is
/// recomposed in f64 so accounting holds far below the 1e-10 bound.
#[derive(Default)]
struct LossAcc {
    ce: f64,
    other: f64,
}

impl LossAcc {
    fn record(&self, iter: usize, weight: f64, batch: f64, val_miou: Option<f64>) -> RunRecord {
        let loss_ce = self.ce / batch;
        let loss_other = self.other / batch;
        RunRecord {
            iter,
            loss_total: loss_ce + weight * loss_other,
            loss_ce,
            loss_consis_or_kd: loss_other,
            val_miou,
        }
    }
}

fn should_eval(iter1: usize, iterations: usize) -> bool {
    iter1 % EVAL_EVERY == 0 || iter1 == iterations
}

fn make_manifest(
    kind: RunKind,
    config: &TrainConfig,
    final_metrics: FinalMetrics,
) -> CheckpointManifest {
    CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind,
        train_config: config.clone(),
        net: config.net,
        seed: config.seed,
        optimizer: Adam::describe(config.learning_rate),
        final_metrics,
    }
}

/// Dual-path consistency training of the 4-channel teacher. With `dual_path`
/// off this degenerates to single-path CE training on noised inputs.
pub fn train_teacher(config: &TrainConfig, out_prefix: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if config.net.in_channels != 4 {
        return Err(LadError::InvalidConfig(format!(
            "teacher needs in_channels = 4, got {}",
            config.net.in_channels
        )));
    }
    let dataset = open_dataset(config)?;
    let mode = config.noising_mode();
    let weights = config.loss_weights();
    let classes = config.net.num_classes;

    let mut net = build_net(config)?;
    // independent-copies reading: branch 2 starts as a duplicate and is
    // updated separately; the checkpoint retains branch 1
    let mut branch2 = (config.dual_path && !config.shared_dual_path).then(|| net.clone());
    let mut adam = Adam::new(config.learning_rate, net.num_params());
    let mut adam2 = branch2
        .as_ref()
        .map(|b| Adam::new(config.learning_rate, b.num_params()));

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise", 0));
    let mut batcher = Batcher::new(dataset.manifest.num_train, config.batch_size, config.seed);
    let mut recorder = Recorder::create(metrics_path(out_prefix))?;
    let start = Instant::now();
    let mut last_record: Option<RunRecord> = None;

    for iter in 0..config.iterations {
        let iter1 = iter + 1;
        let batch: Vec<usize> = batcher.next_batch().to_vec();
        let n = batch.len() as f64;
        let mut grad_acc = Array1::<f32>::zeros(net.num_params());
        let mut grad_acc2 = branch2.as_ref().map(|b| Array1::<f32>::zeros(b.num_params()));
        let mut acc = LossAcc::default();

        for &idx in &batch {
            let sample = &dataset.train()[idx];
            let (h, w) = (sample.label.height(), sample.label.width());
            let p1 = sample_noise_params::<f32, _>(classes, h, w, config.alpha as f32, &mut noise_rng)?;
            let in1 = concat_input(&sample.image, &noised_channel(&sample.label, &p1, mode)?)?;

            if config.dual_path {
                let p2 =
                    sample_noise_params::<f32, _>(classes, h, w, config.alpha as f32, &mut noise_rng)?;
                let in2 = concat_input(&sample.image, &noised_channel(&sample.label, &p2, mode)?)?;
                let (o1, cache1) = net.forward_cached(&in1)?;
                let second_net = branch2.as_ref().unwrap_or(&net);
                let (o2, cache2) = second_net.forward_cached(&in2)?;
                let out = teacher_loss(&o1, &o2, &sample.label, &weights)
                    .map_err(|e| nan_abort(iter1, format!("teacher loss failed: {e}")))?;
                if !out.total.is_finite() {
                    return Err(nan_abort(
                        iter1,
                        format!(
                            "total {} (ce1 {}, ce2 {}, consistency {})",
                            out.total, out.ce_path1, out.ce_path2, out.consistency
                        ),
                    ));
                }
                let (g1, _) = net.backward(&cache1, &out.grad_o1);
                let (g2, _) = second_net.backward(&cache2, &out.grad_o2);
                let inv_n = (1.0 / n) as f32;
                match grad_acc2.as_mut() {
                    // shared weights: both paths' gradients accumulate into one step
                    None => grad_acc.scaled_add(inv_n, &(g1 + g2)),
                    Some(acc2) => {
                        grad_acc.scaled_add(inv_n, &g1);
                        acc2.scaled_add(inv_n, &g2);
                    }
                }
                acc.ce += f64::from(out.ce_path1) + f64::from(out.ce_path2);
                acc.other += f64::from(out.consistency);
            } else {
                let (o1, cache1) = net.forward_cached(&in1)?;
                let (ce, g_ce) = cross_entropy_seg_grad(&o1, &sample.label)
                    .map_err(|e| nan_abort(iter1, format!("teacher CE failed: {e}")))?;
                if !ce.is_finite() {
                    return Err(nan_abort(iter1, format!("cross-entropy {ce}")));
                }
                let (g, _) = net.backward(&cache1, &g_ce);
                grad_acc.scaled_add((1.0 / n) as f32, &g);
                acc.ce += f64::from(ce);
            }
        }

        let mut params = net.params_flat();
        adam.step(&mut params, &grad_acc);
        net.set_params_flat(params.view())?;
        if let (Some(b2), Some(a2), Some(gacc2)) =
            (branch2.as_mut(), adam2.as_mut(), grad_acc2.as_ref())
        {
            let mut params2 = b2.params_flat();
            a2.step(&mut params2, gacc2);
            b2.set_params_flat(params2.view())?;
        }

        let val_miou = if should_eval(iter1, config.iterations) {
            let seed = derive_seed(config.seed, "eval", iter1 as u64);
            Some(miou_noised(&net, dataset.val(), config.alpha, mode, seed)?.0)
        } else {
            None
        };
        let weight = if config.dual_path {
            config.lambda_consistency
        } else {
            0.0
        };
        let record = acc.record(iter1, weight, n, val_miou);
        last_record = Some(record.clone());
        recorder.push(record)?;
    }

    finish_run(
        RunKind::Teacher,
        config,
        net,
        recorder,
        last_record,
        start,
        out_prefix,
        |net| {
            let seed = derive_seed(config.seed, "eval", config.iterations as u64);
            Ok(miou_noised(net, dataset.val(), config.alpha, mode, seed)?.0)
        },
    )
}

/// Distillation of the RGB student against a frozen teacher checkpoint.
/// The teacher input's noising mode and alpha are read from the teacher's
/// manifest; `config.alpha` and `config.class_wise_noising` are not used.
pub fn train_student(
    config: &TrainConfig,
    teacher_prefix: &Path,
    out_prefix: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.net.in_channels != 3 {
        return Err(LadError::InvalidConfig(format!(
            "student needs in_channels = 3, got {}",
            config.net.in_channels
        )));
    }
    let (teacher, teacher_manifest) = crate::checkpoint::load_checkpoint(teacher_prefix)?;
    if teacher.config().in_channels != 4 {
        return Err(LadError::InvalidConfig(
            "teacher checkpoint is not a 4-channel net".into(),
        ));
    }
    if teacher.config().num_classes != config.net.num_classes {
        return Err(LadError::InvalidConfig(format!(
            "teacher has {} classes but the student is configured for {}",
            teacher.config().num_classes,
            config.net.num_classes
        )));
    }
    // the teacher is deployed exactly as trained: its manifest fixes the
    // noising mode and alpha, regardless of the student config; the student
    // manifest records the effective values
    let mut config = config.clone();
    config.alpha = teacher_manifest.train_config.alpha;
    config.class_wise_noising = teacher_manifest.train_config.class_wise_noising;
    let config = &config;
    let mode = config.noising_mode();
    let alpha = config.alpha;
    let dataset = open_dataset(config)?;
    let weights = config.loss_weights();
    let classes = config.net.num_classes;

    let mut net = build_net(config)?;
    let mut adam = Adam::new(config.learning_rate, net.num_params());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "noise", 0));
    let mut batcher = Batcher::new(dataset.manifest.num_train, config.batch_size, config.seed);
    let mut recorder = Recorder::create(metrics_path(out_prefix))?;
    let start = Instant::now();
    let mut last_record: Option<RunRecord> = None;

    for iter in 0..config.iterations {
        let iter1 = iter + 1;
        let batch: Vec<usize> = batcher.next_batch().to_vec();
        let n = batch.len() as f64;
        let mut grad_acc = Array1::<f32>::zeros(net.num_params());
        let mut acc = LossAcc::default();

        for &idx in &batch {
            let sample = &dataset.train()[idx];
            let (h, w) = (sample.label.height(), sample.label.width());
            // fresh noise every iteration; no gradients flow into the teacher
            let p = sample_noise_params::<f32, _>(classes, h, w, alpha as f32, &mut noise_rng)?;
            let t_in = concat_input(&sample.image, &noised_channel(&sample.label, &p, mode)?)?;
            let t_logits = teacher.forward(&t_in)?;
            let (s_logits, cache) = net.forward_cached(&sample.image)?;
            let out = student_loss(&s_logits, &t_logits, &sample.label, &weights)
                .map_err(|e| nan_abort(iter1, format!("student loss failed: {e}")))?;
            if !out.total.is_finite() {
                return Err(nan_abort(
                    iter1,
                    format!("total {} (ce {}, kd {})", out.total, out.ce, out.kd),
                ));
            }
            let (g, _) = net.backward(&cache, &out.grad);
            grad_acc.scaled_add((1.0 / n) as f32, &g);
            acc.ce += f64::from(out.ce);
            acc.other += f64::from(out.kd);
        }

        let mut params = net.params_flat();
        adam.step(&mut params, &grad_acc);
        net.set_params_flat(params.view())?;

        let val_miou = if should_eval(iter1, config.iterations) {
            Some(miou_rgb(&net, dataset.val())?.0)
        } else {
            None
        };
        let record = acc.record(iter1, config.beta_kd, n, val_miou);
        last_record = Some(record.clone());
        recorder.push(record)?;
    }

    finish_run(
        RunKind::Student,
        config,
        net,
        recorder,
        last_record,
        start,
        out_prefix,
        |net| Ok(miou_rgb(net, dataset.val())?.0),
    )
}

/// Plain supervised training on RGB, the "no assistance" reference.
pub fn train_baseline(config: &TrainConfig, out_prefix: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    if config.net.in_channels != 3 {
        return Err(LadError::InvalidConfig(format!(
            "baseline needs in_channels = 3, got {}",
            config.net.in_channels
        )));
    }
    let dataset = open_dataset(config)?;
    let mut net = build_net(config)?;
    let mut adam = Adam::new(config.learning_rate, net.num_params());
    let mut batcher = Batcher::new(dataset.manifest.num_train, config.batch_size, config.seed);
    let mut recorder = Recorder::create(metrics_path(out_prefix))?;
    let start = Instant::now();
    let mut last_record: Option<RunRecord> = None;

    for iter in 0..config.iterations {
        let iter1 = iter + 1;
        let batch: Vec<usize> = batcher.next_batch().to_vec();
        let n = batch.len() as f64;
        let mut grad_acc = Array1::<f32>::zeros(net.num_params());
        let mut acc = LossAcc::default();

        for &idx in &batch {
            let sample = &dataset.train()[idx];
            let (logits, cache) = net.forward_cached(&sample.image)?;
            let (ce, g_ce) = cross_entropy_seg_grad(&logits, &sample.label)
                .map_err(|e| nan_abort(iter1, format!("baseline CE failed: {e}")))?;
            if !ce.is_finite() {
                return Err(nan_abort(iter1, format!("cross-entropy {ce}")));
            }
            let (g, _) = net.backward(&cache, &g_ce);
            grad_acc.scaled_add((1.0 / n) as f32, &g);
            acc.ce += f64::from(ce);
        }

        let mut params = net.params_flat();
        adam.step(&mut params, &grad_acc);
        net.set_params_flat(params.view())?;

        let val_miou = if should_eval(iter1, config.iterations) {
            Some(miou_rgb(&net, dataset.val())?.0)
        } else {
            None
        };
        let record = acc.record(iter1, 0.0, n, val_miou);
        last_record = Some(record.clone());
        recorder.push(record)?;
    }

    finish_run(
        RunKind::Baseline,
        config,
        net,
        recorder,
        last_record,
        start,
        out_prefix,
        |net| Ok(miou_rgb(net, dataset.val())?.0),
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    kind: RunKind,
    config: &TrainConfig,
    net: SegNet<f32>,
    recorder: Recorder,
    last_record: Option<RunRecord>,
    start: Instant,
    out_prefix: &Path,
    final_eval: impl Fn(&SegNet<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    // the final iteration always evaluates, so reuse that value when present
    let final_miou = match last_record.as_ref().and_then(|r| r.val_miou) {
        Some(v) => v,
        None => final_eval(&net)?,
    };
    let final_metrics = FinalMetrics {
        val_miou: final_miou,
        loss_total: last_record.as_ref().map(|r| r.loss_total),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let manifest = make_manifest(kind, config, final_metrics);
    save_checkpoint(out_prefix, &net, &manifest)?;
    let records = recorder.finish()?;
    Ok(TrainOutcome {
        manifest,
        records,
        final_miou,
        checkpoint_prefix: out_prefix.to_path_buf(),
    })
}

/// Reads a metrics JSONL file back into records.
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LadError::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line).map_err(|e| {
            LadError::InvalidConfig(format!(
                "{} line {}: invalid record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    Ok(records)
}
