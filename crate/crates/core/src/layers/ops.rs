//! Forward and backward kernels for the non-normalization layers.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::LayerError;
use crate::netdef::PoolMode;
use crate::tensor::{gemm, gemm_nt, gemm_tn, PatchGeometry, Real, Shape4, Tensor};

#[derive(Debug, Clone)]
pub struct ConvTape<T: Real> {
    geom: PatchGeometry,
    input: Shape4,
    /// Patch matrix of every image, `rows x cols` each.
    patches: Vec<Vec<T>>,
}

pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvTape<T>), LayerError> {
    let s = x.shape4()?;
    let out_c = weight.shape()[0];
    let geom = PatchGeometry::new(s.c, s.h, s.w, kernel, stride, pad)?;
    if weight.shape() != [out_c, s.c, kernel, kernel] {
        return Err(LayerError::Shape(format!(
            "conv weight {:?} does not match input {s} with kernel {kernel}",
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_c {
            return Err(LayerError::Shape(format!("conv bias has {} entries, expected {out_c}", b.len())));
        }
    }
    let (rows, cols) = (geom.rows(), geom.cols());
    let per_image: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(s.item_len())
        .map(|image| {
            let mut patches = vec![T::zero(); rows * cols];
            geom.unroll(image, &mut patches);
            let mut out = vec![T::zero(); out_c * cols];
            gemm(out_c, rows, cols, weight.data(), &patches, &mut out);
            if let Some(b) = bias {
                for (o, chunk) in out.chunks_mut(cols).enumerate() {
                    let bv = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v = *v + bv);
                }
            }
            (patches, out)
        })
        .collect();
    let mut y = Vec::with_capacity(s.n * out_c * cols);
    let mut patches = Vec::with_capacity(s.n);
    for (p, out) in per_image {
        y.extend_from_slice(&out);
        patches.push(p);
    }
    let out_shape = Shape4 { n: s.n, c: out_c, h: geom.out_h, w: geom.out_w };
    Ok((Tensor::from_shape4(out_shape, y)?, ConvTape { geom, input: s, patches }))
}

/// Returns `(dx, dweight, dbias)`; `dbias` is summed over batch and space.
pub fn conv_backward<T: Real>(
    dy: &Tensor<T>,
    tape: &ConvTape<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), LayerError> {
    let g = &tape.geom;
    let out_c = weight.shape()[0];
    let (rows, cols) = (g.rows(), g.cols());
    if dy.len() != tape.input.n * out_c * cols {
        return Err(LayerError::Shape(format!("conv output gradient {:?} does not match tape", dy.shape())));
    }
    let per_image: Vec<(Vec<T>, Vec<T>)> = dy
        .data()
        .par_chunks(out_c * cols)
        .zip(tape.patches.par_iter())
        .map(|(dyn_, patches)| {
            let mut dw = vec![T::zero(); out_c * rows];
            gemm_nt(out_c, cols, rows, dyn_, patches, &mut dw);
            let mut dpatches = vec![T::zero(); rows * cols];
            gemm_tn(rows, out_c, cols, weight.data(), dyn_, &mut dpatches);
            let mut dx = vec![T::zero(); tape.input.item_len()];
            g.fold(&dpatches, &mut dx);
            (dw, dx)
        })
        .collect();
    let mut dweight = vec![T::zero(); out_c * rows];
    let mut dx = Vec::with_capacity(tape.input.len());
    for (dw, dxi) in per_image {
        for (acc, v) in dweight.iter_mut().zip(&dw) {
            *acc = *acc + *v;
        }
        dx.extend_from_slice(&dxi);
    }
    let mut dbias = vec![T::zero(); out_c];
    for image in dy.data().chunks(out_c * cols) {
        for (o, chunk) in image.chunks(cols).enumerate() {
            dbias[o] = dbias[o] + chunk.iter().copied().sum::<T>();
        }
    }
    Ok((
        Tensor::from_shape4(tape.input, dx)?,
        Tensor::new(weight.shape().to_vec(), dweight)?,
        dbias,
    ))
}

#[derive(Debug, Clone)]
pub struct FcTape<T: Real> {
    input: Tensor<T>,
}

/// `y = x W^T + b` with `x` flattened to `[N, F]`; `y` is `[N, O, 1, 1]`.
pub fn fc_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, FcTape<T>), LayerError> {
    let s = x.shape4()?;
    let (out, features) = (weight.shape()[0], weight.shape()[1]);
    if s.item_len() != features {
        return Err(LayerError::Shape(format!(
            "fc weight {:?} expects {features} features, input {s} has {}",
            weight.shape(),
            s.item_len()
        )));
    }
    let mut y = vec![T::zero(); s.n * out];
    gemm_nt(s.n, features, out, x.data(), weight.data(), &mut y);
    if let Some(b) = bias {
        for row in y.chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
    }
    Ok((Tensor::new(vec![s.n, out, 1, 1], y)?, FcTape { input: x.clone() }))
}

pub fn fc_backward<T: Real>(
    dy: &Tensor<T>,
    tape: &FcTape<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), LayerError> {
    let (out, features) = (weight.shape()[0], weight.shape()[1]);
    let n = tape.input.shape()[0];
    if dy.len() != n * out {
        return Err(LayerError::Shape(format!("fc output gradient {:?} does not match tape", dy.shape())));
    }
    let mut dw = vec![T::zero(); out * features];
    gemm_tn(out, n, features, dy.data(), tape.input.data(), &mut dw);
    let mut dx = vec![T::zero(); n * features];
    gemm(n, out, features, dy.data(), weight.data(), &mut dx);
    let mut db = vec![T::zero(); out];
    for row in dy.data().chunks(out) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::new(tape.input.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        db,
    ))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let y = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
    (Tensor::new(x.shape().to_vec(), y).expect("same shape"), mask)
}

pub fn relu_backward<T: Real>(dy: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let dx = dy.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
    Tensor::new(dy.shape().to_vec(), dx).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct PoolTape {
    mode: PoolMode,
    input: Shape4,
    output: Shape4,
    kernel: usize,
    stride: usize,
    pad: usize,
    /// Source index of each max-pool output (`usize::MAX` when the window is all padding).
    argmax: Vec<usize>,
}

impl PoolTape {
    pub(crate) fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Max or average pooling. Average pooling divides by `kernel * kernel`
/// including padded taps; max pooling ignores padding and keeps the first
/// maximum in scan order.
pub fn pool_forward<T: Real>(
    x: &Tensor<T>,
    mode: PoolMode,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, PoolTape), LayerError> {
    let s = x.shape4()?;
    let geom = PatchGeometry::new(1, s.h, s.w, kernel, stride, pad)?;
    let out = Shape4 { n: s.n, c: s.c, h: geom.out_h, w: geom.out_w };
    let mut y = vec![T::zero(); out.len()];
    let mut argmax = if mode == PoolMode::Max { vec![usize::MAX; out.len()] } else { Vec::new() };
    let area = T::lit((kernel * kernel) as f64);
    for plane in 0..s.n * s.c {
        let src = &x.data()[plane * s.h * s.w..(plane + 1) * s.h * s.w];
        for oh in 0..out.h {
            for ow in 0..out.w {
                let o = (plane * out.h + oh) * out.w + ow;
                let mut best: Option<(T, usize)> = None;
                let mut sum = T::zero();
                for ki in 0..kernel {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih as usize >= s.h {
                        continue;
                    }
                    for kj in 0..kernel {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw as usize >= s.w {
                            continue;
                        }
                        let idx = ih as usize * s.w + iw as usize;
                        let v = src[idx];
                        sum = sum + v;
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                match mode {
                    PoolMode::Max => {
                        if let Some((v, idx)) = best {
                            y[o] = v;
                            argmax[o] = plane * s.h * s.w + idx;
                        }
                    }
                    PoolMode::Avg => y[o] = sum / area,
                }
            }
        }
    }
    Ok((Tensor::from_shape4(out, y)?, PoolTape { mode, input: s, output: out, kernel, stride, pad, argmax }))
}

pub fn pool_backward<T: Real>(dy: &Tensor<T>, tape: &PoolTape) -> Result<Tensor<T>, LayerError> {
    let (s, out) = (tape.input, tape.output);
    if dy.len() != out.len() {
        return Err(LayerError::Shape(format!("pool output gradient {:?} does not match tape", dy.shape())));
    }
    let mut dx = vec![T::zero(); s.len()];
    match tape.mode {
        PoolMode::Max => {
            for (&g, &src) in dy.data().iter().zip(&tape.argmax) {
                if src != usize::MAX {
                    dx[src] = dx[src] + g;
                }
            }
        }
        PoolMode::Avg => {
            let area = T::lit((tape.kernel * tape.kernel) as f64);
            for plane in 0..s.n * s.c {
                for oh in 0..out.h {
                    for ow in 0..out.w {
                        let g = dy.data()[(plane * out.h + oh) * out.w + ow] / area;
                        for ki in 0..tape.kernel {
                            let ih = (oh * tape.stride + ki) as isize - tape.pad as isize;
                            if ih < 0 || ih as usize >= s.h {
                                continue;
                            }
                            for kj in 0..tape.kernel {
                                let iw = (ow * tape.stride + kj) as isize - tape.pad as isize;
                                if iw < 0 || iw as usize >= s.w {
                                    continue;
                                }
                                let i = (plane * s.h + ih as usize) * s.w + iw as usize;
                                dx[i] = dx[i] + g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_shape4(s, dx)?)
}

pub fn eltwise_add_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    if a.shape() != b.shape() {
        return Err(LayerError::Shape(format!("eltwise_add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let y = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::new(a.shape().to_vec(), y)?)
}

/// Both inputs receive the output gradient unchanged.
pub fn eltwise_add_backward<T: Real>(dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (dy.clone(), dy.clone())
}

/// Inverted dropout: in training, kept units are scaled by `1 / (1 - ratio)`.
/// Returns the per-element multiplier when a mask was drawn.
pub fn dropout_forward<T: Real>(
    x: &Tensor<T>,
    ratio: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> (Tensor<T>, Option<Vec<T>>) {
    if !training || ratio == 0.0 {
        return (x.clone(), None);
    }
    let keep = T::lit(1.0 / (1.0 - ratio));
    let scale: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() >= ratio { keep } else { T::zero() })
        .collect();
    let y = x.data().iter().zip(&scale).map(|(&v, &m)| v * m).collect();
    (Tensor::new(x.shape().to_vec(), y).expect("same shape"), Some(scale))
}

pub fn dropout_backward<T: Real>(dy: &Tensor<T>, scale: Option<&[T]>) -> Tensor<T> {
    match scale {
        None => dy.clone(),
        Some(m) => {
            let dx = dy.data().iter().zip(m).map(|(&g, &s)| g * s).collect();
            Tensor::new(dy.shape().to_vec(), dx).expect("same shape")
        }
    }
}

/// Converts a label tensor holding class indices.
pub fn label_indices<T: Real>(labels: &Tensor<T>, n: usize, classes: usize) -> Result<Vec<usize>, LayerError> {
    if labels.len() != n {
        return Err(LayerError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    labels
        .data()
        .iter()
        .map(|&v| {
            let f = v.as_f64();
            if f.fract() != 0.0 || f < 0.0 || f >= classes as f64 {
                Err(LayerError::Shape(format!("label {f} outside 0..{classes}")))
            } else {
                Ok(f as usize)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SoftmaxTape<T: Real> {
    probs: Vec<T>,
    labels: Vec<usize>,
    shape: Vec<usize>,
    classes: usize,
}

/// Softmax followed by the cross-entropy averaged over the batch.
pub fn softmax_loss_forward<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<(T, SoftmaxTape<T>), LayerError> {
    let s = logits.shape4()?;
    let k = s.item_len();
    let labels = label_indices(labels, s.n, k)?;
    let mut probs = vec![T::zero(); logits.len()];
    let mut loss = 0f64;
    for ((row, p), &label) in logits.data().chunks(k).zip(probs.chunks_mut(k)).zip(&labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        for (pv, v) in p.iter_mut().zip(row) {
            *pv = T::lit((v.as_f64() - max).exp() / sum);
        }
        loss += sum.ln() + max - row[label].as_f64();
    }
    Ok((
        T::lit(loss / s.n as f64),
        SoftmaxTape { probs, labels, shape: logits.shape().to_vec(), classes: k },
    ))
}

/// Gradient of `upstream * loss` with respect to the logits.
pub fn softmax_loss_backward<T: Real>(tape: &SoftmaxTape<T>, upstream: T) -> Tensor<T> {
    let n = tape.labels.len();
    let scale = upstream / T::lit(n as f64);
    let mut d = tape.probs.clone();
    for (row, &label) in d.chunks_mut(tape.classes).zip(&tape.labels) {
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|v| *v = *v * scale);
    }
    Tensor::new(tape.shape.clone(), d).expect("same shape")
}

/// Fraction of rows whose label is among the `top_k` highest scores.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &Tensor<T>, top_k: usize) -> Result<f64, LayerError> {
    let s = logits.shape4()?;
    let k = s.item_len();
    let labels = label_indices(labels, s.n, k)?;
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks(k).zip(&labels) {
        if crate::tensor::topk_indices(row, top_k)?.contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.n as f64)
}
