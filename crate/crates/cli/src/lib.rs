//! The `bnfs` command line.
//!
//! Exit codes: 0 success, 2 bad input, 3 refused by a contract check,
//! 4 divergence not recovered within the restart budget, 5 gradient check
//! failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Command, Parser, Subcommand, ValueEnum};

use bnfs::data::{self, generate_synthetic, load_dataset, DataError, DatasetHandle, Split};
use bnfs::eval::{self, emit_curve, evaluate, parse_log, reference_numbers};
use bnfs::gradcheck::{
    self, check_layer_kinds, check_net, table_header, CheckOptions, GradCheckRow,
};
use bnfs::layers::{BnMode, LayerError};
use bnfs::netdef::{parse, serialize, InputSpec, NetDef};
use bnfs::solver::{
    iters_for_epochs, load_snapshot, train, Preset, SolverConfig, SolverError, TrainOptions,
};
use bnfs::transform::{
    self, generate_plain, generate_resnet, insert_batchnorm, BlockType, PlainArch, TransformError,
};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CONTRACT: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_INPUT,
            error: error.into(),
        }
    }
}

fn solver_failure(e: SolverError) -> Failure {
    let code = match &e {
        SolverError::SmallBatch { .. } | SolverError::Precondition(_) => EXIT_CONTRACT,
        SolverError::DivergenceAborted { .. } => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn transform_failure(e: TransformError) -> Failure {
    let code = match &e {
        TransformError::AlreadyTransformed(_) | TransformError::NameCollision(_) => EXIT_CONTRACT,
        _ => EXIT_INPUT,
    };
    Failure {
        code,
        error: e.into(),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bnfs",
    version,
    about = "Batch-normalized convnet training on the CPU"
)]
pub struct Cli {
    /// Worker threads for the data pipeline and kernels (0 = one per core); results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Insert batch normalization into a network definition
    Transform(TransformArgs),
    /// Write a generated AlexNet-, VGG- or ResNet-style network definition
    Generate(GenerateArgs),
    /// Train a network with SGD and linear learning-rate decay
    Train(TrainArgs),
    /// Single center-crop evaluation of a snapshot
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(GradcheckArgs),
    /// Export the validation-error and learning-rate curve from a training log
    Curve(CurveArgs),
    /// Write a deterministic synthetic image dataset
    Synth(SynthArgs),
    /// Print the stored reference error table
    Reference,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Input .ndef file
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output .ndef file
    #[arg(long)]
    pub out: PathBuf,
    /// Also add a bn layer on the input blob in place of mean subtraction
    #[arg(long)]
    pub input_bn: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Arch {
    Alexnet,
    Vgg,
    Resnet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Architecture family
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// Width multiplier for alexnet and vgg
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Residual blocks per stage, comma separated (resnet)
    #[arg(long, default_value = "1,1,1,1", value_delimiter = ',')]
    pub blocks: Vec<usize>,
    /// Base channel width (resnet)
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Residual block type (resnet)
    #[arg(long, value_enum, default_value_t = BlockKind::Basic)]
    pub block: BlockKind,
    /// Number of classes
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
    /// Square input side in pixels [default: 227 for alexnet, 224 otherwise]
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Emit the batch-normalized form of alexnet or vgg instead of the classic one
    #[arg(long)]
    pub bn: bool,
    /// Output .ndef file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetName {
    Alexnet,
    Vgg19,
    Resnet,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Network definition (.ndef)
    #[arg(long)]
    pub net: PathBuf,
    /// Dataset root holding train/ and optionally val/
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for log.csv and snapshots
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the learning rate of a standard schedule
    #[arg(long, value_enum)]
    pub preset: Option<PresetName>,
    /// Initial learning rate [default: 0.01, or the preset's]
    #[arg(long)]
    pub base_lr: Option<f64>,
    /// Training length in epochs, used when --max-iter is absent
    #[arg(long, default_value_t = 64)]
    pub epochs: u64,
    /// Total number of parameter updates
    #[arg(long)]
    pub max_iter: Option<u64>,
    /// Images per forward pass
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Forward/backward passes accumulated per update
    #[arg(long, default_value_t = 1)]
    pub iter_size: usize,
    #[arg(long, default_value_t = 0.9)]
    /// Momentum coefficient
    pub momentum: f64,
    /// L2 weight decay (never applied to biases or bn scale/shift)
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Smallest batch accepted for bn layers using batch statistics
    #[arg(long, default_value_t = 16)]
    pub min_bn_batch: usize,
    /// Train even when the batch is below --min-bn-batch
    #[arg(long)]
    pub allow_small_batch: bool,
    /// Switch every bn layer to its stored running statistics
    #[arg(long)]
    pub global_stats: bool,
    /// Snapshot interval in iterations (0 = initial and final only)
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: u64,
    /// Seed for initialization, shuffling and crops
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Recent losses kept for divergence detection
    #[arg(long, default_value_t = SolverConfig::default().divergence_window)]
    pub divergence_window: usize,
    /// A loss above this multiple of the recent median counts as divergence
    #[arg(long, default_value_t = SolverConfig::default().divergence_factor)]
    pub divergence_factor: f64,
    /// Lower bound on the median used by --divergence-factor
    #[arg(long, default_value_t = SolverConfig::default().divergence_floor)]
    pub divergence_floor: f64,
    /// Restarts allowed before giving up
    #[arg(long, default_value_t = 3)]
    pub max_restarts: usize,
    /// Validation interval in epochs
    #[arg(long, default_value_t = 1)]
    pub eval_every: u64,
    /// Shorter-side resize target [default: 256 for crops of 224 and up, else crop*8/7]
    #[arg(long)]
    pub resize: Option<usize>,
    /// Square crop side [default: the net's input height]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Images per validation forward pass
    #[arg(long, default_value_t = 100)]
    pub eval_batch: usize,
    /// Testing hook: replace the loss at this iteration with NaN once
    #[arg(long)]
    pub inject_nonfinite_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Network definition (.ndef)
    #[arg(long)]
    pub net: PathBuf,
    /// Snapshot file (.bnfs)
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset root
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Shorter-side resize target [default: as for train]
    #[arg(long)]
    pub resize: Option<usize>,
    /// Square crop side [default: the net's input height]
    #[arg(long)]
    pub crop: Option<usize>,
    /// Images per forward pass
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network to check; without it every layer kind is checked in isolation
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// Finite-difference step
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    pub eps: f64,
    /// Arithmetic precision
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Maximum relative error [default: 1e-4 per isolated layer, 1e-3 for a net]
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Batch size of the random probe input
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Seed for weights, inputs and labels
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Training log (log.csv)
    #[arg(long)]
    pub log: PathBuf,
    /// Output curve CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root to create
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Training images per class
    #[arg(long, default_value_t = 500)]
    pub train_per_class: usize,
    /// Validation images per class (0 skips the split)
    #[arg(long, default_value_t = 100)]
    pub val_per_class: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Seed of the training split; validation uses seed + 1
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Long flags that are defined but missing from `--help`, or mentioned in
/// `--help` without being defined, over every subcommand.
///
/// ```
/// use clap::CommandFactory;
/// let problems = bnfs_cli::help_flag_mismatches(&mut bnfs_cli::Cli::command());
/// assert!(problems.is_empty(), "{problems:?}");
/// ```
pub fn help_flag_mismatches(cmd: &mut Command) -> Vec<String> {
    cmd.build();
    let mut problems = Vec::new();
    let mut stack: Vec<Command> = vec![cmd.clone()];
    while let Some(mut c) = stack.pop() {
        stack.extend(c.get_subcommands().cloned());
        let path = c.get_bin_name().unwrap_or(c.get_name()).to_string();
        let defined: BTreeSet<String> = c
            .get_arguments()
            .filter_map(|a| a.get_long().map(str::to_string))
            .collect();
        let help = c.render_long_help().to_string();
        let mentioned: BTreeSet<String> = help
            .split(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '-'))
            .filter_map(|w| w.strip_prefix("--"))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        for f in defined.difference(&mentioned) {
            problems.push(format!("{path}: --{f} not in help"));
        }
        for f in mentioned.difference(&defined) {
            problems.push(format!("{path}: help mentions unknown --{f}"));
        }
        for a in c.get_arguments() {
            if a.get_long().is_some()
                && a.get_help().is_none()
                && a.get_id() != "help"
                && a.get_id() != "version"
            {
                problems.push(format!("{path}: --{} has no description", a.get_id()));
            }
        }
    }
    problems
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    if cli.workers > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global();
    }
    match cli.command {
        Cmd::Transform(a) => cmd_transform(&a, out),
        Cmd::Generate(a) => cmd_generate(&a, out),
        Cmd::Train(a) => cmd_train(&a, cli.workers, out),
        Cmd::Eval(a) => cmd_eval(&a, out),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a, out),
        Cmd::Curve(a) => cmd_curve(&a, out),
        Cmd::Synth(a) => cmd_synth(&a, out),
        Cmd::Reference => cmd_reference(out),
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), Failure> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(Failure::input)
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => { emit($out, format_args!($($t)*)) };
}

pub fn read_net(path: &Path) -> Result<NetDef, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::input)?;
    parse(&text)
        .with_context(|| format!("{}", path.display()))
        .map_err(Failure::input)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(Failure::input)?;
    }
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::input)
}

fn cmd_transform(a: &TransformArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let net = read_net(&a.input)?;
    let (rewritten, report) = insert_batchnorm(&net, a.input_bn).map_err(transform_failure)?;
    write_file(&a.out, &serialize(&rewritten))?;
    write!(out, "{report}").map_err(Failure::input)?;
    say!(out, "wrote {}", a.out.display())
}

fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let side = a.input_size.unwrap_or(match a.arch {
        Arch::Alexnet => 227,
        _ => 224,
    });
    let input = InputSpec::new("data", 3, side, side);
    let net = match a.arch {
        Arch::Alexnet => generate_plain(PlainArch::AlexnetStyle, a.scale, a.classes, &input, a.bn),
        Arch::Vgg => generate_plain(PlainArch::VggStyle, a.scale, a.classes, &input, a.bn),
        Arch::Resnet => {
            let block = match a.block {
                BlockKind::Basic => BlockType::Basic,
                BlockKind::Bottleneck => BlockType::Bottleneck,
            };
            generate_resnet(&a.blocks, a.width, a.classes, &input, block)
        }
    }
    .map_err(Failure::input)?;
    write_file(&a.out, &serialize(&net))?;
    say!(
        out,
        "wrote {} ({} layers, weighted depth {})",
        a.out.display(),
        net.layers.len(),
        transform::weighted_depth(&net)
    )
}

fn default_resize(crop: usize) -> usize {
    if crop >= data::DEFAULT_CROP {
        data::DEFAULT_RESIZE.max(crop)
    } else {
        (crop as f64 * 8.0 / 7.0).round() as usize
    }
}

fn open_split(
    root: &Path,
    split: Split,
    resize: usize,
    crop: usize,
) -> Result<DatasetHandle, Failure> {
    load_dataset(root, split)
        .and_then(|d| d.with_geometry(resize, crop))
        .map_err(Failure::input)
}

fn cmd_train(a: &TrainArgs, workers: usize, out: &mut dyn Write) -> Result<(), Failure> {
    let mut net = read_net(&a.net)?;
    if a.global_stats {
        net = transform::set_bn_mode(&net, BnMode::GlobalStats);
    }
    let crop = a.crop.unwrap_or(net.input.h);
    let resize = a.resize.unwrap_or_else(|| default_resize(crop));
    let train_set = open_split(&a.data, Split::Train, resize, crop)?;
    let val_set = match load_dataset(&a.data, Split::Val) {
        Ok(d) => Some(d.with_geometry(resize, crop).map_err(Failure::input)?),
        Err(DataError::Io { .. }) => None,
        Err(e) => return Err(Failure::input(e)),
    };
    let base = match a.preset {
        Some(PresetName::Alexnet) => SolverConfig::preset(Preset::AlexNet).base_lr,
        Some(PresetName::Vgg19) => SolverConfig::preset(Preset::Vgg19).base_lr,
        Some(PresetName::Resnet) => SolverConfig::preset(Preset::ResNet).base_lr,
        None => SolverConfig::default().base_lr,
    };
    let cfg = SolverConfig {
        base_lr: a.base_lr.unwrap_or(base),
        max_iter: a.max_iter.unwrap_or_else(|| {
            iters_for_epochs(a.epochs, train_set.len(), a.batch_size * a.iter_size.max(1))
        }),
        batch_size: a.batch_size,
        iter_size: a.iter_size,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        min_bn_batch: a.min_bn_batch,
        allow_small_batch: a.allow_small_batch,
        snapshot_every: a.snapshot_every,
        seed: a.seed,
        divergence_window: a.divergence_window,
        divergence_factor: a.divergence_factor,
        divergence_floor: a.divergence_floor,
        max_restarts: a.max_restarts,
        eval_every: a.eval_every,
    };
    say!(
        out,
        "config: net={} data={} train_images={} val_images={} resize={resize} crop={crop} workers={workers} \
         global_stats={} {cfg}",
        net.name,
        a.data.display(),
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len()),
        a.global_stats
    )?;
    let mut rows: Vec<String> = Vec::new();
    let mut on_row = |r: &eval::LogRow| {
        if let (Some(t1), Some(t5)) = (r.val_top1, r.val_top5) {
            rows.push(format!(
                "iter {} epoch {} lr {} loss {:.4} val top-1 {} top-5 {}",
                r.iter,
                r.epoch,
                r.lr,
                r.train_loss,
                eval::percent(t1),
                eval::percent(t5)
            ));
        }
    };
    let opts = TrainOptions {
        val: val_set.as_ref(),
        eval_batch: a.eval_batch,
        inject_nonfinite_at: a.inject_nonfinite_at,
        on_row: Some(&mut on_row),
    };
    let result = train(&net, &cfg, &train_set, &a.out, opts);
    for r in &rows {
        say!(out, "{r}")?;
    }
    let outcome = result.map_err(solver_failure)?;
    for r in &outcome.restarts {
        say!(
            out,
            "restart: diverged at iter {} resumed from iter {} seed {} -> {}",
            r.diverged_at,
            r.resumed_from,
            r.old_seed,
            r.new_seed
        )?;
    }
    say!(
        out,
        "done: {} iterations, {} restarts, final snapshot {}",
        outcome.state.iter,
        outcome.restarts.len(),
        outcome.final_snapshot.display()
    )
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let net = read_net(&a.net)?;
    let crop = a.crop.unwrap_or(net.input.h);
    let resize = a.resize.unwrap_or_else(|| default_resize(crop));
    let data = open_split(&a.data, a.split, resize, crop)?;
    let snap = load_snapshot(&a.weights).map_err(solver_failure)?;
    let params = snap.params(&net).map_err(solver_failure)?;
    let r = evaluate(&net, &params, &data, a.batch, None).map_err(Failure::input)?;
    say!(
        out,
        "images {} top-1 error {} top-5 error {}",
        r.sample_count,
        r.top1_error,
        r.top5_error
    )?;
    say!(out, "{r}")
}

fn gradcheck_failure(e: LayerError) -> Failure {
    Failure::input(e)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let net = a.net.as_deref().map(read_net).transpose()?;
    let default_tol = if net.is_some() {
        gradcheck::NET_TOLERANCE
    } else {
        gradcheck::LAYER_TOLERANCE
    };
    let opts = CheckOptions {
        step: a.eps,
        tolerance: a.tolerance.unwrap_or(default_tol),
        batch: a.batch,
        seed: a.seed,
    };
    if !(opts.step > 0.0) || opts.batch == 0 {
        return Err(Failure::input(anyhow!(
            "--eps and --batch must be positive"
        )));
    }
    let rows: Vec<GradCheckRow> = match (&net, a.precision) {
        (Some(n), Precision::F64) => check_net::<f64>(n, opts),
        (Some(n), Precision::F32) => check_net::<f32>(n, opts),
        (None, Precision::F64) => check_layer_kinds::<f64>(opts),
        (None, Precision::F32) => check_layer_kinds::<f32>(opts),
    }
    .map_err(gradcheck_failure)?;
    say!(out, "{}", table_header())?;
    for r in &rows {
        say!(out, "{r}")?;
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        say!(out, "all {} rows within tolerance", rows.len())
    } else {
        Err(Failure {
            code: EXIT_GRADCHECK,
            error: anyhow!("gradient check failed for {}", failed.join(", ")),
        })
    }
}

fn cmd_curve(a: &CurveArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.log)
        .with_context(|| format!("cannot read {}", a.log.display()))
        .map_err(Failure::input)?;
    let rows = parse_log(&text)
        .with_context(|| format!("{}", a.log.display()))
        .map_err(Failure::input)?;
    emit_curve(&rows, &a.out).map_err(Failure::input)?;
    say!(out, "wrote {} ({} rows)", a.out.display(), rows.len())
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let mut splits = vec![(Split::Train, a.train_per_class, a.seed)];
    if a.val_per_class > 0 {
        splits.push((Split::Val, a.val_per_class, a.seed.wrapping_add(1)));
    }
    for (split, per_class, seed) in splits {
        let r = generate_synthetic(&a.out, split, a.classes, per_class, a.size, seed)
            .map_err(Failure::input)?;
        say!(
            out,
            "{}: {} images in {}, nearest-centroid error {}",
            split.as_str(),
            r.files,
            r.dir.display(),
            r.nearest_centroid_error
        )?;
    }
    Ok(())
}

fn cmd_reference(out: &mut dyn Write) -> Result<(), Failure> {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    say!(
        out,
        "{:<10} {:>8} {:>13} {:>8} {:>13}",
        "arch",
        "bn_top1",
        "baseline_top1",
        "bn_top5",
        "baseline_top5"
    )?;
    for r in &reference_numbers().rows {
        say!(
            out,
            "{:<10} {:>8} {:>13} {:>8} {:>13}",
            r.arch,
            cell(Some(r.bn_top1)),
            cell(r.baseline_top1),
            cell(Some(r.bn_top5)),
            cell(r.baseline_top5)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_lists_every_flag() {
        let problems = help_flag_mismatches(&mut Cli::command());
        assert!(problems.is_empty(), "{problems:?}");
    }

    #[test]
    fn resize_defaults() {
        assert_eq!(default_resize(224), 256);
        assert_eq!(default_resize(227), 256);
        assert_eq!(default_resize(28), 32);
    }

    #[test]
    fn unknown_flag_rejected() {
        assert!(
            Cli::try_parse_from(["bnfs", "curve", "--log", "a", "--out", "b", "--bogus"]).is_err()
        );
    }

    #[test]
    fn exit_codes_by_error() {
        let gate = SolverError::SmallBatch {
            batch: 8,
            min: 16,
            layers: vec!["conv1_bn".into()],
        };
        assert_eq!(solver_failure(gate).code, EXIT_CONTRACT);
        assert_eq!(
            solver_failure(SolverError::DivergenceAborted {
                iter: 3,
                restarts: 3
            })
            .code,
            EXIT_DIVERGED
        );
        assert_eq!(
            solver_failure(SolverError::Config("x".into())).code,
            EXIT_INPUT
        );
        assert_eq!(
            transform_failure(TransformError::AlreadyTransformed(vec![])).code,
            EXIT_CONTRACT
        );
    }
}
