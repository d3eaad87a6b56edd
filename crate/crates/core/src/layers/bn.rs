//! Batch normalization.
//!
//! Statistics are per channel: over `{N, H, W}` for `[N, C, H, W]` inputs and
//! over `{N}` for `[N, F]` inputs. In batch-statistics training the layer
//! normalizes with the biased moments of the current batch,
//!
//! ```text
//! y = gamma * (x - mean_B) / sqrt(var_B + eps) + beta
//! ```
//!
//! and folds them into the running estimates with an exponential update whose
//! variance term carries the unbiased `m / (m - 1)` correction. At inference,
//! and in global-statistics mode, the running estimates replace the batch
//! moments and are left untouched.

use super::{LayerError, Param};
use crate::tensor::{moments, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    BatchStats,
    GlobalStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Real> BatchNormState<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and running variance 1.
    pub fn new(channels: usize, eps: T, momentum: T, mode: BnMode) -> Self {
        let vec = |v: T| Tensor::filled(vec![channels], v).expect("positive channel count");
        BatchNormState {
            gamma: Param::new(vec(T::one()), false),
            beta: Param::new(vec(T::zero()), false),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            eps: U::lit(self.eps.as_f64()),
            momentum: U::lit(self.momentum.as_f64()),
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnTape<T: Real> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    channels: usize,
    spatial: usize,
}

/// Batch moments to fold into the running estimates.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn layout<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize, Vec<usize>), LayerError> {
    let (n, c, spatial, axes) = match *x.shape() {
        [n, c, h, w] => (n, c, h * w, vec![0, 2, 3]),
        [n, f] => (n, f, 1, vec![0]),
        _ => return Err(LayerError::Shape(format!("bn expects a 2-D or 4-D input, got {:?}", x.shape()))),
    };
    if c != channels {
        return Err(LayerError::Shape(format!("bn state has {channels} channels, input {:?} has {c}", x.shape())));
    }
    Ok((n, spatial, axes))
}

/// Normalizes without touching `state`; returns the batch moments to apply
/// when batch statistics were used.
pub fn bn_apply<T: Real>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, BnTape<T>, Option<BnUpdate<T>>), LayerError> {
    let c = state.channels();
    let (n, spatial, axes) = layout(x, c)?;
    let m = n * spatial;
    let batch_stats = training && state.mode == BnMode::BatchStats;
    let (mean, var) = if batch_stats {
        if m < 2 {
            return Err(LayerError::Stats(format!(
                "batch statistics need at least 2 values per channel, got {m}"
            )));
        }
        let (mean, var) = moments(x, &axes)?;
        (mean.into_data(), var.into_data())
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::lit(1.0 / (v.as_f64() + state.eps.as_f64()).sqrt()))
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for (i, ((&xv, xh), yv)) in x.data().iter().zip(xhat.iter_mut()).zip(y.iter_mut()).enumerate() {
        let ch = (i / spatial) % c;
        *xh = (xv - mean[ch]) * inv_std[ch];
        *yv = state.gamma.value.data()[ch] * *xh + state.beta.value.data()[ch];
    }
    let update = batch_stats.then_some(BnUpdate { mean, var, count: m });
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnTape { xhat, inv_std, batch_stats, channels: c, spatial },
        update,
    ))
}

/// Folds batch moments into the running estimates.
pub fn bn_update_running<T: Real>(state: &mut BatchNormState<T>, update: &BnUpdate<T>) {
    let mom = state.momentum.as_f64();
    let correction = update.count as f64 / (update.count as f64 - 1.0);
    for ch in 0..state.channels() {
        let rm = state.running_mean[ch].as_f64();
        let rv = state.running_var[ch].as_f64();
        state.running_mean[ch] = T::lit((1.0 - mom) * rm + mom * update.mean[ch].as_f64());
        state.running_var[ch] = T::lit((1.0 - mom) * rv + mom * correction * update.var[ch].as_f64());
    }
}

pub fn bn_forward<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, BnTape<T>), LayerError> {
    let (y, tape, update) = bn_apply(x, state, training)?;
    if let Some(u) = update {
        bn_update_running(state, &u);
    }
    Ok((y, tape))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    tape: &BnTape<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), LayerError> {
    let c = tape.channels;
    if dy.len() != tape.xhat.len() || state.channels() != c {
        return Err(LayerError::Contract(format!(
            "bn tape holds {} values over {c} channels, gradient has {}",
            tape.xhat.len(),
            dy.len()
        )));
    }
    let spatial = tape.spatial;
    let mut sum_dy = vec![0f64; c];
    let mut sum_dy_xhat = vec![0f64; c];
    for (i, (&g, &xh)) in dy.data().iter().zip(&tape.xhat).enumerate() {
        let ch = (i / spatial) % c;
        sum_dy[ch] += g.as_f64();
        sum_dy_xhat[ch] += g.as_f64() * xh.as_f64();
    }
    let m = (tape.xhat.len() / c) as f64;
    let gamma = state.gamma.value.data();
    let mut dx = vec![T::zero(); dy.len()];
    for (i, ((&g, &xh), d)) in dy.data().iter().zip(&tape.xhat).zip(dx.iter_mut()).enumerate() {
        let ch = (i / spatial) % c;
        let scale = gamma[ch].as_f64() * tape.inv_std[ch].as_f64();
        *d = if tape.batch_stats {
            T::lit(scale * (g.as_f64() - sum_dy[ch] / m - xh.as_f64() * sum_dy_xhat[ch] / m))
        } else {
            T::lit(scale * g.as_f64())
        };
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        sum_dy_xhat.into_iter().map(T::lit).collect(),
        sum_dy.into_iter().map(T::lit).collect(),
    ))
}
