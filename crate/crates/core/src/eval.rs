//! Top-k error, single-crop validation, training logs and curve export.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::{Augment, CropRecord, DataError, DatasetHandle};
use crate::layers::{net_infer, LayerError, ParamSet};
use crate::netdef::{LayerKind, NetDef};
use crate::tensor::{topk_indices, Real, Tensor};

pub const LOG_HEADER: &str = "iter,epoch,lr,train_loss,val_top1,val_top5";
pub const CURVE_HEADER: &str = "iter,epoch,lr,val_top1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Argument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Error fractions over a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub top1_error: f64,
    pub top5_error: f64,
    pub sample_count: usize,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "top-1 error {}  top-5 error {}  ({} images)",
            percent(self.top1_error),
            percent(self.top5_error),
            self.sample_count
        )
    }
}

/// `0.399` renders as `39.9%`.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

fn rows<'a, T: Real>(scores: &'a Tensor<T>, labels: &Tensor<T>) -> Result<(usize, Vec<(&'a [T], usize)>), EvalError> {
    let n = scores.shape()[0];
    let k = scores.len() / n;
    if labels.len() != n {
        return Err(EvalError::Argument(format!("{} labels for {n} score rows", labels.len())));
    }
    let out = scores
        .data()
        .chunks(k)
        .zip(labels.data())
        .map(|(row, &l)| {
            let l = l.as_f64();
            if l < 0.0 || l.fract() != 0.0 || l >= k as f64 {
                Err(EvalError::Argument(format!("label {l} outside 0..{k}")))
            } else {
                Ok((row, l as usize))
            }
        })
        .collect::<Result<_, _>>()?;
    Ok((k, out))
}

/// Number of rows whose label is among the `k` highest scores.
pub fn topk_hits<T: Real>(scores: &Tensor<T>, labels: &Tensor<T>, k: usize) -> Result<usize, EvalError> {
    let (classes, rows) = rows(scores, labels)?;
    if k == 0 || k > classes {
        return Err(EvalError::Argument(format!("k = {k} must be in 1..={classes}")));
    }
    let mut hits = 0;
    for (row, label) in rows {
        let top = topk_indices(row, k).map_err(|e| EvalError::Argument(e.to_string()))?;
        hits += top.contains(&label) as usize;
    }
    Ok(hits)
}

/// Fraction of rows whose label is not among the `k` highest scores.
pub fn topk_error<T: Real>(scores: &Tensor<T>, labels: &Tensor<T>, k: usize) -> Result<f64, EvalError> {
    let n = scores.shape()[0];
    Ok((n - topk_hits(scores, labels, k)?) as f64 / n as f64)
}

/// Blob holding the class scores: the first bottom of the loss or accuracy layer.
pub fn score_blob(net: &NetDef) -> Result<&str, EvalError> {
    net.layers
        .iter()
        .find(|l| matches!(l.kind, LayerKind::SoftmaxLoss | LayerKind::Accuracy))
        .map(|l| l.bottoms[0].as_str())
        .ok_or_else(|| EvalError::Argument(format!("net '{}' has no softmax_loss or accuracy head", net.name)))
}

/// Single center crop per image, batches in dataset order, bn layers on
/// running statistics. `probe` sees the crops of every forward pass.
pub fn evaluate(
    net: &NetDef,
    params: &ParamSet<f32>,
    data: &DatasetHandle,
    batch: usize,
    mut probe: Option<&mut dyn FnMut(&[CropRecord])>,
) -> Result<EvalResult, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Argument("empty dataset".into()));
    }
    if batch == 0 {
        return Err(EvalError::Argument("batch must be positive".into()));
    }
    let blob = score_blob(net)?;
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut top1, mut top5) = (0usize, 0usize);
    for chunk in order.chunks(batch) {
        let (x, labels, records) = data.assemble::<rand_chacha::ChaCha8Rng>(chunk, Augment::CenterCrop)?;
        let out = net_infer(net, params, &x, Some(&labels))?;
        if let Some(p) = probe.as_deref_mut() {
            p(&records);
        }
        let scores = &out.blobs[blob];
        let classes = scores.len() / chunk.len();
        top1 += topk_hits(scores, &labels, 1)?;
        top5 += topk_hits(scores, &labels, classes.min(5))?;
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        top1_error: (data.len() - top1) as f64 / n,
        top5_error: (data.len() - top5) as f64 / n,
        sample_count: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub arch: String,
    pub bn_top1: f64,
    pub baseline_top1: Option<f64>,
    pub bn_top5: f64,
    pub baseline_top5: Option<f64>,
}

/// Published ILSVRC-2012 single-crop errors; metadata only, far out of reach
/// of desk-scale runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub rows: Vec<ReferenceRow>,
}

pub const REFERENCE_CSV: &str = include_str!("../data/reference_table.csv");

impl ReferenceTable {
    pub fn get(&self, arch: &str) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.arch == arch)
    }
}

pub fn reference_numbers() -> ReferenceTable {
    let cell = |s: &str| (!s.is_empty()).then(|| s.parse::<f64>().expect("committed table is numeric"));
    let rows = REFERENCE_CSV
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ReferenceRow {
                arch: f[0].to_string(),
                bn_top1: cell(f[1]).expect("bn column filled"),
                baseline_top1: cell(f[2]),
                bn_top5: cell(f[3]).expect("bn column filled"),
                baseline_top5: cell(f[4]),
            }
        })
        .collect();
    ReferenceTable { rows }
}

/// One training-log row. Validation columns are empty between evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl LogRow {
    /// Shortest round-trip decimal for every float.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_top1),
            opt(self.val_top5)
        )
    }
}

pub fn write_log(rows: &[LogRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, header)) if header.trim_end() == LOG_HEADER => {}
        Some((_, header)) => {
            return Err(EvalError::Parse { line: 1, msg: format!("expected header '{LOG_HEADER}', found '{header}'") })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| EvalError::Parse { line: line_no, msg };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str, name: &str| s.parse::<f64>().map_err(|_| bad(format!("bad {name} '{s}'")));
        let int = |s: &str, name: &str| s.parse::<u64>().map_err(|_| bad(format!("bad {name} '{s}'")));
        let maybe = |s: &str, name: &str| if s.is_empty() { Ok(None) } else { num(s, name).map(Some) };
        rows.push(LogRow {
            iter: int(f[0], "iter")?,
            epoch: int(f[1], "epoch")?,
            lr: num(f[2], "lr")?,
            train_loss: num(f[3], "train_loss")?,
            val_top1: maybe(f[4], "val_top1")?,
            val_top5: maybe(f[5], "val_top5")?,
        });
    }
    Ok(rows)
}

/// Error and learning-rate series, one row per log row.
pub fn curve_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.epoch, r.lr, opt(r.val_top1)));
    }
    out
}

pub fn emit_curve(rows: &[LogRow], path: &Path) -> Result<(), EvalError> {
    fs::write(path, curve_csv(rows)).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}
