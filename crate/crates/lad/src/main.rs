use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lad::checkpoint::{load_checkpoint, CheckpointManifest};
use lad::config::{config_hash, ExperimentConfig};
use lad::derive_seed;
use lad::error::{LadError, Result};
use lad::eval::{miou_noised, miou_rgb, saliency_ratio, stability_report};
use lad::report::{append_block, ReportBlock, SweepCell};
use lad::segnet::NetConfig;
use lad::synthdata::{
    generate_dataset, load_dataset, load_dataset_manifest, Dataset, DatasetManifest, DatasetSpec,
    Sample,
};
use lad::trainer::{train_baseline, train_student, train_teacher, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(name = "lad", version, about = "label-assisted distillation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-segmentation dataset.
    GenData(GenDataArgs),
    /// Train a teacher, student or baseline checkpoint.
    Train(TrainArgs),
    /// Report a checkpoint's mIoU on a dataset split.
    Eval(EvalArgs),
    /// Report a teacher's KL_mean output stability under noise resampling.
    Stability(StabilityArgs),
    /// Probe a teacher's label-channel reliance via input-gradient saliency.
    Shortcut(ShortcutArgs),
    /// Train the (alpha x noising-mode) grid of teacher/student pairs.
    SweepAlpha(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images/, labels/ and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Dataset spec JSON; a previous run's manifest.json also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_val: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Teacher,
    Student,
    Baseline,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Baseline => "baseline",
        }
    }

    fn in_channels(self) -> usize {
        match self {
            Role::Teacher => 4,
            Role::Student | Role::Baseline => 3,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(value_enum)]
    role: Role,
    /// Dataset directory from gen-data. Required unless --config supplies one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint prefix: writes <out>.weights, .manifest.json, .metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON; a checkpoint manifest also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Label-noise magnitude (teacher only).
    #[arg(long)]
    alpha: Option<f64>,
    /// Consistency weight (teacher only).
    #[arg(long)]
    lambda: Option<f64>,
    /// Distillation weight (student only).
    #[arg(long)]
    beta: Option<f64>,
    /// Softening temperature for the channel-wise divergence.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Encoder/decoder channel width.
    #[arg(long)]
    width: Option<usize>,
    /// Encoder/decoder stage count.
    #[arg(long)]
    depth: Option<usize>,
    /// Teacher only: plain single-path CE training, no consistency term.
    #[arg(long)]
    no_consistency: bool,
    /// Teacher only: direct label scaling instead of class-wise noising.
    #[arg(long)]
    no_class_wise: bool,
    /// Teacher only: clean label channel (direct mode with alpha = 0).
    #[arg(long)]
    clean_label: bool,
    /// Teacher only: two independently updated branch copies.
    #[arg(long)]
    independent_copies: bool,
    /// Teacher checkpoint prefix (student only).
    #[arg(long)]
    teacher_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint prefix.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    /// Noise seed for 4-channel checkpoints; defaults to the training run's
    /// final-eval stream so `lad eval` reproduces the manifest's val_miou.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory whose report.json/report.txt gain an eval block.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct StabilityArgs {
    /// Teacher checkpoint prefix.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Noise resamplings per image.
    #[arg(short, long, default_value_t = 3)]
    m: usize,
    /// Validation images to average over.
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ShortcutArgs {
    /// Teacher checkpoint prefix.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Validation images to probe.
    #[arg(long, default_value_t = 20)]
    images: usize,
    /// Noise draws per image.
    #[arg(long, default_value_t = 4)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory; generated under <out>/dataset when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, report and plot.
    #[arg(long)]
    out: PathBuf,
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated alpha grid.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

fn main() {
    if let Ok(threads) = std::env::var("LAD_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => {
                eprintln!("error: LAD_THREADS must be a positive integer, got {threads:?}");
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_usage() { 2 } else { 1 });
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Stability(args) => run_stability(args),
        Command::Shortcut(args) => run_shortcut(args),
        Command::SweepAlpha(args) => run_sweep(args),
    }
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| LadError::io(format!("reading {}", path.display()), e))?;
            match serde_json::from_str::<DatasetSpec>(&text) {
                Ok(spec) => spec,
                Err(_) => serde_json::from_str::<DatasetManifest>(&text)
                    .map(|m| m.spec)
                    .map_err(|e| {
                        LadError::InvalidConfig(format!(
                            "{}: neither a dataset spec nor a manifest: {e}",
                            path.display()
                        ))
                    })?,
            }
        }
        None => DatasetSpec::new(args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.num_train {
        spec.num_train = n;
    }
    if let Some(n) = args.num_val {
        spec.num_val = n;
    }
    if let Some(n) = args.image_size {
        spec.image_size = n;
    }
    if let Some(n) = args.num_classes {
        spec.num_classes = n;
    }
    let manifest = generate_dataset(&spec, &args.out)?;
    println!(
        "wrote {} train + {} val images ({} classes, {}x{}) to {}",
        manifest.num_train,
        manifest.num_val,
        manifest.num_classes,
        manifest.spec.image_size,
        manifest.spec.image_size,
        args.out.display()
    );
    println!(
        "effective seed {} ({} histogram retries)",
        manifest.effective_seed, manifest.histogram_attempts
    );
    Ok(())
}

fn usage_err(msg: impl Into<String>) -> LadError {
    LadError::InvalidConfig(msg.into())
}

fn check_role_flags(args: &TrainArgs) -> Result<()> {
    let teacher_only: [(&str, bool); 6] = [
        ("--alpha", args.alpha.is_some()),
        ("--lambda", args.lambda.is_some()),
        ("--no-consistency", args.no_consistency),
        ("--no-class-wise", args.no_class_wise),
        ("--clean-label", args.clean_label),
        ("--independent-copies", args.independent_copies),
    ];
    match args.role {
        Role::Teacher => {
            if args.beta.is_some() {
                return Err(usage_err("--beta applies to student training only"));
            }
            if args.teacher_checkpoint.is_some() {
                return Err(usage_err("--teacher-checkpoint applies to student training only"));
            }
        }
        Role::Student => {
            // the teacher is deployed exactly as trained: its manifest fixes
            // the noising mode and alpha, so the student cannot override them
            for (flag, set) in teacher_only {
                if set {
                    return Err(usage_err(format!("{flag} applies to teacher training only")));
                }
            }
            if args.teacher_checkpoint.is_none() {
                return Err(usage_err("student training requires --teacher-checkpoint"));
            }
        }
        Role::Baseline => {
            for (flag, set) in teacher_only {
                if set {
                    return Err(usage_err(format!("{flag} applies to teacher training only")));
                }
            }
            if args.beta.is_some() {
                return Err(usage_err("--beta applies to student training only"));
            }
            if args.teacher_checkpoint.is_some() {
                return Err(usage_err("--teacher-checkpoint applies to student training only"));
            }
        }
    }
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| LadError::io(format!("reading {}", path.display()), e))?;
            match serde_json::from_str::<CheckpointManifest>(&text) {
                Ok(manifest) => manifest.train_config,
                Err(_) => serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                    LadError::InvalidConfig(format!(
                        "{}: neither a checkpoint manifest nor a train config: {e}",
                        path.display()
                    ))
                })?,
            }
        }
        None => {
            let data = args
                .data
                .clone()
                .ok_or_else(|| usage_err("--data is required when no --config is given"))?;
            let seed = args.seed.unwrap_or(0);
            let classes = load_dataset_manifest(&data)?.num_classes;
            TrainConfig::new(
                NetConfig::new(args.role.in_channels(), classes, seed),
                data,
                seed,
            )
        }
    };
    if let Some(data) = &args.data {
        config.dataset = data.clone();
        config.net.num_classes = load_dataset_manifest(data)?.num_classes;
    }
    config.net.in_channels = args.role.in_channels();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.lambda {
        config.lambda_consistency = v;
    }
    if let Some(v) = args.beta {
        config.beta_kd = v;
    }
    if let Some(v) = args.temperature {
        config.temperature = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.width {
        config.net.base_width = v;
    }
    if let Some(v) = args.depth {
        config.net.depth = v;
    }
    if args.no_consistency {
        config.dual_path = false;
    }
    if args.no_class_wise {
        config.class_wise_noising = false;
    }
    if args.clean_label {
        config.class_wise_noising = false;
        config.alpha = 0.0;
    }
    if args.independent_copies {
        config.shared_dual_path = false;
    }
    Ok(config)
}

fn describe_teacher(config: &TrainConfig) -> String {
    let mode = if config.class_wise_noising { "class-wise" } else { "direct" };
    let path = if !config.dual_path {
        "single-path".to_string()
    } else if config.shared_dual_path {
        format!("dual-path shared, lambda {}", config.lambda_consistency)
    } else {
        format!("dual-path independent, lambda {}", config.lambda_consistency)
    };
    format!("alpha {} {mode}, {path}", config.alpha)
}

fn run_train(args: TrainArgs) -> Result<()> {
    check_role_flags(&args)?;
    let config = resolve_train_config(&args)?;
    let detail = match args.role {
        Role::Teacher => describe_teacher(&config),
        Role::Student => format!("beta {}, tau {}", config.beta_kd, config.temperature),
        Role::Baseline => "plain CE".to_string(),
    };
    println!(
        "training {}: {} iterations, batch {}, lr {}, seed {} ({detail})",
        args.role.name(),
        config.iterations,
        config.batch_size,
        config.learning_rate,
        config.seed
    );
    println!("follow progress: tail -f {}.metrics.jsonl", args.out.display());
    let outcome: TrainOutcome = match args.role {
        Role::Teacher => train_teacher(&config, &args.out)?,
        Role::Student => {
            train_student(&config, args.teacher_checkpoint.as_deref().unwrap(), &args.out)?
        }
        Role::Baseline => train_baseline(&config, &args.out)?,
    };
    println!(
        "done in {:.1}s: val mIoU {:.4}, checkpoint {}",
        outcome.manifest.final_metrics.wall_clock_seconds,
        outcome.final_miou,
        outcome.checkpoint_prefix.display()
    );
    Ok(())
}

fn split_samples<'d>(dataset: &'d Dataset, split: Split) -> &'d [Sample] {
    match split {
        Split::Train => dataset.train(),
        Split::Val => dataset.val(),
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (net, manifest) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let samples = split_samples(&dataset, args.split);
    let (miou, per_class) = if net.config().in_channels == 4 {
        let tc = &manifest.train_config;
        let seed = args
            .seed
            .unwrap_or_else(|| derive_seed(tc.seed, "eval", tc.iterations as u64));
        miou_noised(&net, samples, tc.alpha, tc.noising_mode(), seed)?
    } else {
        miou_rgb(&net, samples)?
    };
    println!("mIoU {miou:.4} ({} images)", samples.len());
    for (class, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("  class {class}: {v:.4}"),
            None => println!("  class {class}: absent"),
        }
    }
    if let Some(dir) = &args.report {
        append_block(
            dir,
            ReportBlock::Eval {
                checkpoint: args.checkpoint.display().to_string(),
                dataset: args.data.display().to_string(),
                miou,
                per_class,
            },
        )?;
        println!("appended eval block to {}", dir.join("report.json").display());
    }
    Ok(())
}

fn take_val_images<'d>(dataset: &'d Dataset, images: usize) -> Result<&'d [Sample]> {
    if images < 1 {
        return Err(usage_err("--images must be at least 1"));
    }
    let val = dataset.val();
    Ok(&val[..images.min(val.len())])
}

fn run_stability(args: StabilityArgs) -> Result<()> {
    let (net, manifest) = load_checkpoint(&args.checkpoint)?;
    if net.config().in_channels != 4 {
        return Err(usage_err(
            "stability applies to 4-channel teacher checkpoints; this one takes RGB only",
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let samples = take_val_images(&dataset, args.images)?;
    let tc = &manifest.train_config;
    let report = stability_report(&net, samples, args.m, tc.alpha, tc.noising_mode(), args.seed)?;
    println!(
        "KL_mean {:.6} (x100: {:.4}) over {} images, m = {}",
        report.kl_mean,
        report.kl_mean_x100(),
        samples.len(),
        report.m
    );
    if let Some(dir) = &args.report {
        append_block(
            dir,
            ReportBlock::Stability {
                checkpoint: args.checkpoint.display().to_string(),
                dataset: args.data.display().to_string(),
                m: report.m,
                images: samples.len(),
                kl_mean: report.kl_mean,
                kl_mean_x100: report.kl_mean_x100(),
                per_image: report.per_image.clone(),
            },
        )?;
        println!("appended stability block to {}", dir.join("report.json").display());
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn run_shortcut(args: ShortcutArgs) -> Result<()> {
    let (net, manifest) = load_checkpoint(&args.checkpoint)?;
    if net.config().in_channels != 4 {
        return Err(usage_err(
            "shortcut probing applies to 4-channel teacher checkpoints; this one takes RGB only",
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let samples = take_val_images(&dataset, args.images)?;
    let tc = &manifest.train_config;
    let mut per_image = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, "shortcut", idx as u64));
        per_image.push(saliency_ratio(
            &net,
            sample,
            tc.alpha,
            tc.noising_mode(),
            args.draws,
            &mut rng,
        )?);
    }
    let med = median(&per_image);
    println!(
        "saliency ratio median {med:.4} over {} images ({} draws each)",
        per_image.len(),
        args.draws
    );
    for (idx, ratio) in per_image.iter().enumerate() {
        println!("  image {idx}: {ratio:.4}");
    }
    if let Some(dir) = &args.report {
        append_block(
            dir,
            ReportBlock::Shortcut {
                checkpoint: args.checkpoint.display().to_string(),
                dataset: args.data.display().to_string(),
                draws: args.draws,
                per_image,
                median: med,
            },
        )?;
        println!("appended shortcut block to {}", dir.join("report.json").display());
    }
    Ok(())
}

const DEFAULT_SWEEP_ALPHAS: [f64; 5] = [0.0, 1e-3, 1e-2, 1e-1, 1.0];

fn alpha_tag(alpha: f64) -> String {
    format!("{alpha}").replace('.', "p")
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let mut exp = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(args.out.clone(), args.seed.unwrap_or(0)),
    };
    if let Some(seed) = args.seed {
        exp.train.seed = seed;
    }
    if let Some(v) = args.iterations {
        exp.train.iterations = v;
    }
    if let Some(v) = args.batch_size {
        exp.train.batch_size = v;
    }
    if let Some(v) = args.width {
        exp.teacher_net.base_width = v;
        exp.student_net.base_width = v;
    }
    if let Some(v) = args.depth {
        exp.teacher_net.depth = v;
        exp.student_net.depth = v;
    }
    let alphas: Vec<f64> = args
        .alphas
        .clone()
        .unwrap_or_else(|| DEFAULT_SWEEP_ALPHAS.to_vec());
    if alphas.is_empty() {
        return Err(usage_err("--alphas needs at least one value"));
    }

    let data_dir = match &args.data {
        Some(dir) => {
            let manifest = load_dataset_manifest(dir)?;
            exp.dataset = manifest.spec.clone();
            dir.clone()
        }
        None => {
            let dir = args.out.join("dataset");
            if dir.join("manifest.json").exists() {
                let manifest = load_dataset_manifest(&dir)?;
                exp.dataset = manifest.spec.clone();
                println!("reusing dataset at {}", dir.display());
            } else {
                let manifest = generate_dataset(&exp.dataset, &dir)?;
                println!(
                    "generated {} train + {} val images at {}",
                    manifest.num_train,
                    manifest.num_val,
                    dir.display()
                );
            }
            dir
        }
    };
    exp.teacher_net.num_classes = exp.dataset.num_classes;
    exp.student_net.num_classes = exp.dataset.num_classes;
    exp.out_dir = args.out.clone();
    exp.validate()?;
    let hash = config_hash(&exp);

    let cells_dir = args.out.join("sweep");
    let mut cells = Vec::new();
    for class_wise in [true, false] {
        for &alpha in &alphas {
            let mode_tag = if class_wise { "cw" } else { "d" };
            let tag = format!("{mode_tag}-a{}", alpha_tag(alpha));
            let teacher_prefix = cells_dir.join(format!("teacher-{tag}"));
            let student_prefix = cells_dir.join(format!("student-{tag}"));

            let mut tcfg = exp.train.to_train_config(exp.teacher_net, data_dir.clone());
            tcfg.alpha = alpha;
            tcfg.class_wise_noising = class_wise;
            let teacher = train_teacher(&tcfg, &teacher_prefix)?;
            // noising mode and alpha flow to the student via the teacher manifest
            let scfg = exp.train.to_train_config(exp.student_net, data_dir.clone());
            let student = train_student(&scfg, &teacher_prefix, &student_prefix)?;

            println!(
                "cell {mode_tag} alpha {alpha}: teacher mIoU {:.4}, student mIoU {:.4}",
                teacher.final_miou, student.final_miou
            );
            cells.push(SweepCell {
                class_wise,
                alpha,
                teacher_miou: teacher.final_miou,
                student_miou: student.final_miou,
                teacher_checkpoint: teacher_prefix.display().to_string(),
                student_checkpoint: student_prefix.display().to_string(),
            });
        }
    }

    let plot_path = args.out.join("sweep_alpha.svg");
    lad::report::write_sweep_svg(&plot_path, &alphas, &cells)?;
    append_block(
        &args.out,
        ReportBlock::SweepAlpha {
            config_hash: hash,
            seed: exp.train.seed,
            alphas,
            cells,
            plot: plot_path.display().to_string(),
        },
    )?;
    println!(
        "sweep done: {} and {}",
        args.out.join("report.txt").display(),
        plot_path.display()
    );
    Ok(())
}
