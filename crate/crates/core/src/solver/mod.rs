//! Momentum SGD with linear learning-rate decay, gradient accumulation,
//! snapshots and divergence restarts.

pub mod snapshot;

use std::collections::VecDeque;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{epoch_permutation, Augment, DataError, DatasetHandle};
use crate::eval::{evaluate, EvalError, LogRow, LOG_HEADER};
use crate::layers::{net_backward_scaled, net_forward, LayerError, ParamSet};
use crate::netdef::{LayerKind, NetDef};
use crate::tensor::{Real, Tensor};
pub use snapshot::{load_snapshot, save_snapshot, Snapshot};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(
        "refusing to train: batch size {batch} is below {min}, the minimum for bn layers using batch statistics \
         ({}); bn needs batch_size >= {min} for robust statistics. Pass allow_small_batch or switch the bn layers \
         to global_stats",
        layers.join(", ")
    )]
    SmallBatch { batch: usize, min: usize, layers: Vec<String> },
    #[error("{0}")]
    Argument(String),
    #[error("non-finite gradient in '{0}'")]
    NonFinite(String),
    #[error("training diverged at iteration {iter}; last snapshot {}", snapshot.display())]
    Diverged { iter: u64, snapshot: PathBuf },
    #[error("training diverged at iteration {iter} after {restarts} restarts; giving up")]
    DivergenceAborted { iter: u64, restarts: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("snapshot integrity error: {0}")]
    Integrity(String),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("snapshot does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub base_lr: f64,
    pub max_iter: u64,
    pub batch_size: usize,
    pub iter_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub min_bn_batch: usize,
    pub allow_small_batch: bool,
    /// Periodic snapshot interval in iterations; 0 keeps only the initial and final ones.
    pub snapshot_every: u64,
    pub seed: u64,
    pub divergence_window: usize,
    pub divergence_factor: f64,
    /// Lower bound on the median the factor is applied to.
    pub divergence_floor: f64,
    pub max_restarts: usize,
    /// Validation cadence in epochs.
    pub eval_every: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            base_lr: 0.01,
            max_iter: 100,
            batch_size: 32,
            iter_size: 1,
            momentum: 0.9,
            weight_decay: 5e-4,
            min_bn_batch: 16,
            allow_small_batch: false,
            snapshot_every: 0,
            seed: 0,
            divergence_window: 20,
            divergence_factor: 50.0,
            divergence_floor: 1.0,
            max_restarts: 3,
            eval_every: 1,
        }
    }
}

/// ILSVRC-2012 schedules: batch 256 for 64 epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    AlexNet,
    Vgg19,
    ResNet,
}

pub const ILSVRC_TRAIN_IMAGES: usize = 1_281_167;

impl SolverConfig {
    pub fn preset(p: Preset) -> Self {
        let base_lr = match p {
            Preset::AlexNet => 0.05,
            Preset::Vgg19 => 0.01,
            Preset::ResNet => 0.1,
        };
        SolverConfig { base_lr, batch_size: 256, max_iter: iters_for_epochs(64, ILSVRC_TRAIN_IMAGES, 256), ..Self::default() }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.iter_size
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let fail = |m: String| Err(SolverError::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 || self.iter_size == 0 {
            return fail("batch_size and iter_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.divergence_window == 0 || !(self.divergence_factor > 0.0) {
            return fail("divergence_window and divergence_factor must be positive".into());
        }
        if !(self.divergence_floor >= 0.0 && self.divergence_floor.is_finite()) {
            return fail(format!("divergence_floor must be non-negative, got {}", self.divergence_floor));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of every field except the seed, so restarts keep the digest.
    pub fn digest(&self) -> [u8; 32] {
        let text = self.to_string();
        let without_seed: Vec<&str> = text.split(' ').filter(|kv| !kv.starts_with("seed=")).collect();
        Sha256::digest(without_seed.join(" ").as_bytes()).into()
    }
}

impl fmt::Display for SolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "base_lr={} max_iter={} batch_size={} iter_size={} momentum={} weight_decay={} min_bn_batch={} \
             allow_small_batch={} snapshot_every={} seed={} divergence_window={} divergence_factor={} \
             divergence_floor={} max_restarts={} eval_every={}",
            self.base_lr,
            self.max_iter,
            self.batch_size,
            self.iter_size,
            self.momentum,
            self.weight_decay,
            self.min_bn_batch,
            self.allow_small_batch,
            self.snapshot_every,
            self.seed,
            self.divergence_window,
            self.divergence_factor,
            self.divergence_floor,
            self.max_restarts,
            self.eval_every
        )
    }
}

/// Whole updates per epoch; the partial tail batch is dropped.
pub fn iters_per_epoch(dataset: usize, effective_batch: usize) -> u64 {
    (dataset / effective_batch) as u64
}

pub fn iters_for_epochs(epochs: u64, dataset: usize, effective_batch: usize) -> u64 {
    epochs * iters_per_epoch(dataset, effective_batch)
}

/// `base_lr * (1 - iter / max_iter)`.
pub fn lr_at(cfg: &SolverConfig, iter: u64) -> Result<f64, SolverError> {
    if cfg.max_iter == 0 || iter > cfg.max_iter {
        return Err(SolverError::Argument(format!("iteration {iter} outside 0..={}", cfg.max_iter)));
    }
    Ok(cfg.base_lr * ((cfg.max_iter - iter) as f64 / cfg.max_iter as f64))
}

/// `v <- momentum * v + lr * (g + weight_decay * w)`, `w <- w - v`. Biases
/// and bn scale/shift are not decayed; running statistics are not touched.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, lr: f64, cfg: &SolverConfig) -> Result<(), SolverError> {
    for (name, p) in params.learnables() {
        if p.grad.data().iter().any(|g| !g.is_finite()) {
            return Err(SolverError::NonFinite(name));
        }
    }
    for (_, p) in params.learnables_mut() {
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let grad = p.grad.data().to_vec();
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(p.velocity.data_mut()).zip(grad) {
            let nv = cfg.momentum * v.as_f64() + lr * (g.as_f64() + decay * w.as_f64());
            *v = T::lit(nv);
            *w = T::lit(w.as_f64() - nv);
        }
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// True when `current` is not finite, or the history holds `window` losses
/// and `current` exceeds `factor` times the larger of their median and `floor`.
pub fn detect_divergence(history: &[f64], window: usize, factor: f64, floor: f64, current: f64) -> bool {
    if !current.is_finite() {
        return true;
    }
    history.len() >= window && !history.is_empty() && current > factor * median(history).max(floor)
}

/// bn layers that normalize with batch statistics.
pub fn batch_stat_bn_layers(net: &NetDef) -> Vec<String> {
    net.layers
        .iter()
        .filter(|l| l.kind == LayerKind::Bn && !l.flag("global_stats"))
        .map(|l| l.name.clone())
        .collect()
}

pub fn check_batch_gate(net: &NetDef, cfg: &SolverConfig) -> Result<(), SolverError> {
    let layers = batch_stat_bn_layers(net);
    if !layers.is_empty() && cfg.batch_size < cfg.min_bn_batch && !cfg.allow_small_batch {
        return Err(SolverError::SmallBatch { batch: cfg.batch_size, min: cfg.min_bn_batch, layers });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iter: u64,
    pub params: ParamSet<f32>,
    /// Crop offsets and dropout masks.
    pub rng: ChaCha8Rng,
    pub epoch_order_seed: u64,
    pub loss_history: VecDeque<f64>,
}

fn augment_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl TrainState {
    pub fn new(net: &NetDef, cfg: &SolverConfig) -> Result<Self, SolverError> {
        Ok(TrainState {
            iter: 0,
            params: ParamSet::init(net, cfg.seed)?,
            rng: augment_rng(cfg.seed),
            epoch_order_seed: cfg.seed,
            loss_history: VecDeque::new(),
        })
    }

    pub fn snapshot(&self, cfg: &SolverConfig) -> Snapshot {
        Snapshot {
            version: snapshot::VERSION,
            iter: self.iter,
            config_digest: cfg.digest(),
            rng_words: snapshot::rng_words(self.epoch_order_seed, &self.rng),
            tensors: snapshot::param_tensors(&self.params),
        }
    }

    /// Inverse of [`TrainState::snapshot`]; the loss history starts empty.
    pub fn from_snapshot(snap: &Snapshot, net: &NetDef) -> Result<Self, SolverError> {
        Ok(TrainState {
            iter: snap.iter,
            params: snap.params(net)?,
            rng: snap.rng()?,
            epoch_order_seed: snap.epoch_order_seed(),
            loss_history: VecDeque::new(),
        })
    }

    fn push_loss(&mut self, loss: f64, window: usize) {
        self.loss_history.push_back(loss);
        while self.loss_history.len() > window {
            self.loss_history.pop_front();
        }
    }
}

/// Parameters and iteration from `snap`, a new shuffle seed and a fresh
/// augmentation stream derived from it.
pub fn restart_from(snap: &Snapshot, net: &NetDef, new_seed: u64) -> Result<TrainState, SolverError> {
    if new_seed == snap.epoch_order_seed() {
        return Err(SolverError::Precondition(format!("restart seed {new_seed} equals the snapshot's shuffle seed")));
    }
    let mut state = TrainState::from_snapshot(snap, net)?;
    state.epoch_order_seed = new_seed;
    state.rng = augment_rng(new_seed);
    Ok(state)
}

/// Forward and backward over each sub-batch, each normalized by its own bn
/// statistics, with gradients scaled by `1 / batches.len()`. Returns the mean
/// loss.
pub fn accumulate_gradients(
    net: &NetDef,
    state: &mut TrainState,
    batches: &[(Tensor<f32>, Tensor<f32>)],
) -> Result<f64, SolverError> {
    state.params.zero_grads();
    let scale = 1.0 / batches.len() as f32;
    let mut total = 0f64;
    for (x, y) in batches {
        let out = net_forward(net, &mut state.params, x, Some(y), true, &mut state.rng)?;
        let loss = out.loss.ok_or_else(|| SolverError::Config(format!("net '{}' has no softmax_loss", net.name)))?;
        total += loss as f64;
        let mut tape = out.tape.expect("training pass records a tape");
        net_backward_scaled(&mut tape, &mut state.params, scale)?;
    }
    Ok(total / batches.len() as f64)
}

/// One accumulated update at `lr_at(state.iter)`; advances the iteration.
pub fn train_step(
    net: &NetDef,
    state: &mut TrainState,
    cfg: &SolverConfig,
    batches: &[(Tensor<f32>, Tensor<f32>)],
) -> Result<f64, SolverError> {
    let loss = accumulate_gradients(net, state, batches)?;
    sgd_step(&mut state.params, lr_at(cfg, state.iter)?, cfg)?;
    state.iter += 1;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartEvent {
    pub diverged_at: u64,
    pub resumed_from: u64,
    pub snapshot: PathBuf,
    pub old_seed: u64,
    pub new_seed: u64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub val: Option<&'a DatasetHandle>,
    pub eval_batch: usize,
    /// Replaces the training loss at this iteration with NaN, once.
    pub inject_nonfinite_at: Option<u64>,
    pub on_row: Option<&'a mut dyn FnMut(&LogRow)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub final_snapshot: PathBuf,
    pub restarts: Vec<RestartEvent>,
}

pub const LOG_FILE: &str = "log.csv";
pub const FINAL_SNAPSHOT: &str = "final.bnfs";

pub fn snapshot_path(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("snapshot_iter_{iter:08}.bnfs"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SolverError + '_ {
    move |source| SolverError::Io { path: path.to_path_buf(), source }
}

fn write_log_file(path: &Path, rows: &[LogRow]) -> Result<BufWriter<File>, SolverError> {
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    writeln!(w, "{LOG_HEADER}").map_err(io(path))?;
    for r in rows {
        writeln!(w, "{}", r.to_csv()).map_err(io(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(w)
}

struct Run<'a, 'o> {
    net: &'a NetDef,
    cfg: &'a SolverConfig,
    data: &'a DatasetHandle,
    out_dir: &'a Path,
    opts: &'a mut TrainOptions<'o>,
    log: Vec<LogRow>,
    log_file: BufWriter<File>,
    last_snapshot: PathBuf,
    per_epoch: u64,
}

impl Run<'_, '_> {
    fn save(&mut self, state: &TrainState, path: PathBuf) -> Result<(), SolverError> {
        save_snapshot(&state.snapshot(self.cfg), &path)?;
        self.last_snapshot = path;
        Ok(())
    }

    fn segment(&mut self, state: &mut TrainState) -> Result<(), SolverError> {
        let cfg = self.cfg;
        let (bs, eff) = (cfg.batch_size, cfg.effective_batch());
        let mut perm: Option<(u64, Vec<usize>)> = None;
        while state.iter < cfg.max_iter {
            let i = state.iter;
            let epoch = i / self.per_epoch;
            let within = (i % self.per_epoch) as usize;
            if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
                perm = Some((epoch, epoch_permutation(self.data.len(), epoch, state.epoch_order_seed)));
            }
            let order = &perm.as_ref().expect("set above").1;
            let mut batches = Vec::with_capacity(cfg.iter_size);
            for s in 0..cfg.iter_size {
                let start = within * eff + s * bs;
                let (x, y, _) = self.data.assemble(&order[start..start + bs], Augment::RandomCrop(&mut state.rng))?;
                batches.push((x, y));
            }
            let mut loss = accumulate_gradients(self.net, state, &batches)?;
            if self.opts.inject_nonfinite_at == Some(i) {
                self.opts.inject_nonfinite_at = None;
                loss = f64::NAN;
            }
            let history: Vec<f64> = state.loss_history.iter().copied().collect();
            let diverged = SolverError::Diverged { iter: i, snapshot: self.last_snapshot.clone() };
            if detect_divergence(&history, cfg.divergence_window, cfg.divergence_factor, cfg.divergence_floor, loss) {
                return Err(diverged);
            }
            let lr = lr_at(cfg, i)?;
            match sgd_step(&mut state.params, lr, cfg) {
                Err(SolverError::NonFinite(_)) => return Err(diverged),
                other => other?,
            }
            state.push_loss(loss, cfg.divergence_window);
            state.iter = i + 1;
            let done = state.iter;
            let mut row = LogRow { iter: i, epoch, lr, train_loss: loss, val_top1: None, val_top5: None };
            if let Some(val) = self.opts.val {
                if done.is_multiple_of(self.per_epoch * cfg.eval_every) || done == cfg.max_iter {
                    let r = evaluate(self.net, &state.params, val, self.opts.eval_batch.max(1), None)?;
                    row.val_top1 = Some(r.top1_error);
                    row.val_top5 = Some(r.top5_error);
                }
            }
            writeln!(self.log_file, "{}", row.to_csv()).map_err(io(&self.out_dir.join(LOG_FILE)))?;
            if let Some(cb) = self.opts.on_row.as_deref_mut() {
                cb(&row);
            }
            self.log.push(row);
            if cfg.snapshot_every > 0 && done.is_multiple_of(cfg.snapshot_every) && done < cfg.max_iter {
                self.save(state, snapshot_path(self.out_dir, done))?;
            }
        }
        Ok(())
    }
}

/// Trains from a fresh initialization, writing `log.csv`, periodic
/// snapshots and `final.bnfs` into `out_dir`. On divergence the run resumes
/// from the last snapshot with shuffle seed `seed + restarts + 1`, at most
/// `max_restarts` times.
pub fn train(
    net: &NetDef,
    cfg: &SolverConfig,
    data: &DatasetHandle,
    out_dir: &Path,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome, SolverError> {
    cfg.validate()?;
    check_batch_gate(net, cfg)?;
    let expect = (net.input.c, net.input.h, net.input.w);
    if expect != (3, data.crop, data.crop) {
        return Err(SolverError::Config(format!(
            "net input {}x{}x{} does not match 3x{c}x{c} crops",
            expect.0,
            expect.1,
            expect.2,
            c = data.crop
        )));
    }
    let per_epoch = iters_per_epoch(data.len(), cfg.effective_batch());
    if per_epoch == 0 {
        return Err(SolverError::Config(format!(
            "{} images cannot fill one effective batch of {}",
            data.len(),
            cfg.effective_batch()
        )));
    }
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut state = TrainState::new(net, cfg)?;
    let mut run = Run {
        net,
        cfg,
        data,
        out_dir,
        opts: &mut opts,
        log: Vec::new(),
        log_file: write_log_file(&log_path, &[])?,
        last_snapshot: PathBuf::new(),
        per_epoch,
    };
    run.save(&state, snapshot_path(out_dir, 0))?;
    let mut restarts = Vec::new();
    loop {
        match run.segment(&mut state) {
            Ok(()) => break,
            Err(SolverError::Diverged { iter, snapshot }) => {
                if restarts.len() >= cfg.max_restarts {
                    run.log_file.flush().map_err(io(&log_path))?;
                    return Err(SolverError::DivergenceAborted { iter, restarts: restarts.len() });
                }
                let snap = load_snapshot(&snapshot)?;
                if snap.config_digest != cfg.digest() {
                    return Err(SolverError::Mismatch("snapshot was written with a different configuration".into()));
                }
                let new_seed = cfg.seed.wrapping_add(restarts.len() as u64 + 1);
                let old_seed = state.epoch_order_seed;
                state = restart_from(&snap, net, new_seed)?;
                log::warn!("divergence at iteration {iter}; restarting from iteration {} with seed {new_seed}", snap.iter);
                run.log.retain(|r| r.iter < snap.iter);
                run.log_file = write_log_file(&log_path, &run.log)?;
                restarts.push(RestartEvent { diverged_at: iter, resumed_from: snap.iter, snapshot, old_seed, new_seed });
            }
            Err(e) => return Err(e),
        }
    }
    run.log_file.flush().map_err(io(&log_path))?;
    let final_snapshot = out_dir.join(FINAL_SNAPSHOT);
    save_snapshot(&state.snapshot(cfg), &final_snapshot)?;
    Ok(TrainOutcome { state, log: run.log, final_snapshot, restarts })
}
