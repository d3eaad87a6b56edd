//! Layer math and whole-net execution.

pub mod bn;
pub mod ops;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::netdef::{infer_shapes, LayerKind, NetDef, NetDefError, LABEL_BLOB};
use crate::tensor::{Real, Tensor, TensorError};
pub use bn::{bn_apply, bn_backward, bn_forward, bn_update_running, BatchNormState, BnMode, BnTape, BnUpdate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("layer '{0}' ({1}) is unsupported at runtime")]
    Unsupported(String, LayerKind),
    #[error(transparent)]
    NetDef(#[from] NetDefError),
}

impl From<TensorError> for LayerError {
    fn from(e: TensorError) -> Self {
        LayerError::Shape(e.to_string())
    }
}

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Real = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        Param { grad: value.zeros_like(), velocity: value.zeros_like(), value, decay }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param { value: self.value.cast(), grad: self.grad.cast(), velocity: self.velocity.cast(), decay: self.decay }
    }

    fn add_grad(&mut self, g: &[T]) {
        for (acc, &v) in self.grad.data_mut().iter_mut().zip(g) {
            *acc = *acc + v;
        }
    }
}

/// Every learnable parameter of a net plus the state of each bn layer.
///
/// Weights are named `<layer>.weight` and `<layer>.bias`; bn scale and shift
/// are reported as `<layer>.gamma` and `<layer>.beta`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Real = f32> {
    pub params: BTreeMap<String, Param<T>>,
    pub bn: BTreeMap<String, BatchNormState<T>>,
}

impl<T: Real> ParamSet<T> {
    /// He-normal weights, zero biases, unit bn scale and default running stats.
    pub fn init(net: &NetDef, seed: u64) -> Result<Self, LayerError> {
        let shapes = infer_shapes(net, 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::default();
        for layer in &net.layers {
            let input = |i: usize| shapes[&layer.bottoms[i]];
            match layer.kind {
                LayerKind::Conv | LayerKind::Fc => {
                    let s = input(0);
                    let (out, shape) = if layer.kind == LayerKind::Conv {
                        let (o, k) = (layer.int("out_channels"), layer.int("kernel"));
                        (o, vec![o, s.c, k, k])
                    } else {
                        let o = layer.int("out_features");
                        (o, vec![o, s.item_len()])
                    };
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| T::lit(std * Distribution::<f64>::sample(&StandardNormal, &mut rng)))
                        .collect();
                    set.params.insert(format!("{}.weight", layer.name), Param::new(Tensor::new(shape, data)?, true));
                    if layer.flag("bias_flag") {
                        set.params.insert(format!("{}.bias", layer.name), Param::new(Tensor::zeros(vec![out])?, false));
                    }
                }
                LayerKind::Bn => {
                    let mode = if layer.flag("global_stats") { BnMode::GlobalStats } else { BnMode::BatchStats };
                    let eps = layer.num("eps").unwrap_or(1e-5);
                    let momentum = layer.num("momentum").unwrap_or(0.1);
                    set.bn.insert(
                        layer.name.clone(),
                        BatchNormState::new(input(0).c, T::lit(eps), T::lit(momentum), mode),
                    );
                }
                _ => {}
            }
        }
        Ok(set)
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.learnables_mut() {
            p.grad = p.grad.zeros_like();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, p)| (k.clone(), p.cast())).collect(),
            bn: self.bn.iter().map(|(k, s)| (k.clone(), s.cast())).collect(),
        }
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn.values_mut().for_each(|s| s.mode = mode);
    }

    /// Learnable tensors in name order: weights and biases, then bn scale and shift.
    pub fn learnables(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = self.params.iter().map(|(k, p)| (k.clone(), p)).collect();
        for (k, s) in &self.bn {
            out.push((format!("{k}.gamma"), &s.gamma));
            out.push((format!("{k}.beta"), &s.beta));
        }
        out
    }

    pub fn learnables_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<(String, &mut Param<T>)> = self.params.iter_mut().map(|(k, p)| (k.clone(), p)).collect();
        for (k, s) in self.bn.iter_mut() {
            out.push((format!("{k}.gamma"), &mut s.gamma));
            out.push((format!("{k}.beta"), &mut s.beta));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.learnables().iter().map(|(_, p)| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
enum LayerCache<T: Real> {
    Conv(ops::ConvTape<T>),
    Fc(ops::FcTape<T>),
    Relu(Vec<bool>),
    Pool(ops::PoolTape),
    Bn(BnTape<T>),
    Dropout(Option<Vec<T>>),
    Softmax(ops::SoftmaxTape<T>),
    None,
}

/// Forward intermediates of one training pass, one cache per layer.
#[derive(Debug, Clone)]
pub struct LayerTape<T: Real = f32> {
    net: NetDef,
    caches: Vec<LayerCache<T>>,
    input_shape: Vec<usize>,
    consumed: bool,
}

impl<T: Real> LayerTape<T> {
    /// Relu masks and max-pool selections; equal signatures mean the same
    /// piecewise-linear region.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for cache in &self.caches {
            match cache {
                LayerCache::Relu(mask) => sig.extend(mask.iter().map(|&m| m as usize)),
                LayerCache::Pool(t) => sig.extend_from_slice(t.argmax()),
                _ => {}
            }
        }
        sig
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real = f32> {
    pub loss: Option<T>,
    /// Every blob produced by the pass, the input included.
    pub blobs: BTreeMap<String, Tensor<T>>,
    pub tape: Option<LayerTape<T>>,
}

impl<T: Real> ForwardOutput<T> {
    /// Value of the first accuracy layer, if the net has one.
    pub fn accuracy(&self, net: &NetDef) -> Option<f64> {
        let layer = net.layers.iter().find(|l| l.kind == LayerKind::Accuracy)?;
        self.blobs.get(&layer.top).map(|t| t.data()[0].as_f64())
    }
}

#[allow(clippy::type_complexity)]
fn run<T: Real>(
    net: &NetDef,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    labels: Option<&Tensor<T>>,
    training: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<(ForwardOutput<T>, Vec<(String, BnUpdate<T>)>), LayerError> {
    let s = batch.shape4()?;
    let expect = net.input.shape(s.n);
    if batch.ndim() != 4 || s != expect {
        return Err(LayerError::Shape(format!("input batch {:?} does not match net input {expect}", batch.shape())));
    }
    let mut rng = rng;
    let mut blobs: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    blobs.insert(net.input.blob.clone(), batch.clone());
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut updates = Vec::new();
    let mut loss = None;
    for layer in &net.layers {
        let fetch = |i: usize| -> Result<&Tensor<T>, LayerError> {
            let name = &layer.bottoms[i];
            if name == LABEL_BLOB {
                return labels.ok_or_else(|| LayerError::Contract(format!("layer '{}' needs labels", layer.name)));
            }
            blobs
                .get(name)
                .ok_or_else(|| LayerError::Contract(format!("blob '{name}' is not available")))
        };
        let x = fetch(0)?;
        let weight = || {
            params
                .params
                .get(&format!("{}.weight", layer.name))
                .map(|p| &p.value)
                .ok_or_else(|| LayerError::Contract(format!("no weight for layer '{}'", layer.name)))
        };
        let bias = params.params.get(&format!("{}.bias", layer.name)).map(|p| &p.value);
        let (y, cache) = match layer.kind {
            LayerKind::Conv => {
                let (y, t) = ops::conv_forward(x, weight()?, bias, layer.int("kernel"), layer.int("stride"), layer.int("pad"))?;
                (y, LayerCache::Conv(t))
            }
            LayerKind::Fc => {
                let (y, t) = ops::fc_forward(x, weight()?, bias)?;
                (y, LayerCache::Fc(t))
            }
            LayerKind::Relu => {
                let (y, m) = ops::relu_forward(x);
                (y, LayerCache::Relu(m))
            }
            LayerKind::Pool => {
                let (y, t) = ops::pool_forward(x, layer.pool_mode(), layer.int("kernel"), layer.int("stride"), layer.int("pad"))?;
                (y, LayerCache::Pool(t))
            }
            LayerKind::Bn => {
                let state = params
                    .bn
                    .get(&layer.name)
                    .ok_or_else(|| LayerError::Contract(format!("no bn state for layer '{}'", layer.name)))?;
                let (y, t, u) = bn_apply(x, state, training)?;
                if let Some(u) = u {
                    updates.push((layer.name.clone(), u));
                }
                (y, LayerCache::Bn(t))
            }
            LayerKind::Dropout => {
                let (y, m) = match rng.as_deref_mut() {
                    Some(r) if training => ops::dropout_forward(x, layer.num("ratio").unwrap_or(0.5), true, r),
                    _ => (x.clone(), None),
                };
                (y, LayerCache::Dropout(m))
            }
            LayerKind::Lrn => return Err(LayerError::Unsupported(layer.name.clone(), LayerKind::Lrn)),
            LayerKind::EltwiseAdd => (ops::eltwise_add_forward(x, fetch(1)?)?, LayerCache::None),
            LayerKind::SoftmaxLoss => {
                let (l, t) = ops::softmax_loss_forward(x, fetch(1)?)?;
                loss = Some(l);
                (Tensor::filled(vec![1, 1, 1, 1], l)?, LayerCache::Softmax(t))
            }
            LayerKind::Accuracy => {
                let k = layer.num("top_k").map(|v| v as usize).unwrap_or(1);
                let acc = ops::accuracy(x, fetch(1)?, k)?;
                (Tensor::filled(vec![1, 1, 1, 1], T::lit(acc))?, LayerCache::None)
            }
        };
        blobs.insert(layer.top.clone(), y);
        caches.push(cache);
    }
    let tape = training.then(|| LayerTape { net: net.clone(), caches, input_shape: batch.shape().to_vec(), consumed: false });
    Ok((ForwardOutput { loss, blobs, tape }, updates))
}

/// Runs the layers in order. In training mode bn layers in batch-statistics
/// mode normalize with batch moments and fold them into their running
/// estimates once the pass has completed; a tape is returned for backward.
pub fn net_forward<T: Real>(
    net: &NetDef,
    params: &mut ParamSet<T>,
    batch: &Tensor<T>,
    labels: Option<&Tensor<T>>,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput<T>, LayerError> {
    let (out, updates) = run(net, params, batch, labels, training, Some(rng))?;
    for (name, u) in updates {
        bn_update_running(params.bn.get_mut(&name).expect("state exists"), &u);
    }
    Ok(out)
}

/// Inference pass: running statistics, no dropout, no state change.
pub fn net_infer<T: Real>(
    net: &NetDef,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    labels: Option<&Tensor<T>>,
) -> Result<ForwardOutput<T>, LayerError> {
    Ok(run(net, params, batch, labels, false, None)?.0)
}

/// Training-mode pass that leaves `params` untouched.
pub fn net_forward_pure<T: Real>(
    net: &NetDef,
    params: &ParamSet<T>,
    batch: &Tensor<T>,
    labels: Option<&Tensor<T>>,
    rng: &mut dyn RngCore,
) -> Result<ForwardOutput<T>, LayerError> {
    Ok(run(net, params, batch, labels, true, Some(rng))?.0)
}

pub fn net_backward<T: Real>(tape: &mut LayerTape<T>, params: &mut ParamSet<T>) -> Result<Tensor<T>, LayerError> {
    net_backward_scaled(tape, params, T::one())
}

/// Back-propagates `upstream * loss`, adding parameter gradients into
/// `params` and returning the gradient with respect to the input batch.
pub fn net_backward_scaled<T: Real>(
    tape: &mut LayerTape<T>,
    params: &mut ParamSet<T>,
    upstream: T,
) -> Result<Tensor<T>, LayerError> {
    backward(tape, params, upstream, None)
}

/// Back-propagates a gradient given directly on `blob`, with no loss term.
pub fn net_backward_from<T: Real>(
    tape: &mut LayerTape<T>,
    params: &mut ParamSet<T>,
    blob: &str,
    grad: Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    backward(tape, params, T::zero(), Some((blob, grad)))
}

fn backward<T: Real>(
    tape: &mut LayerTape<T>,
    params: &mut ParamSet<T>,
    upstream: T,
    seed: Option<(&str, Tensor<T>)>,
) -> Result<Tensor<T>, LayerError> {
    if tape.consumed {
        return Err(LayerError::Contract("tape has already been used for a backward pass".into()));
    }
    tape.consumed = true;
    let net = &tape.net;
    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    if let Some((blob, g)) = seed {
        grads.insert(blob.to_string(), g);
    }
    let accumulate = |grads: &mut BTreeMap<String, Tensor<T>>, blob: &str, g: Tensor<T>| {
        if blob == LABEL_BLOB {
            return;
        }
        match grads.get_mut(blob) {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
            None => {
                grads.insert(blob.to_string(), g);
            }
        }
    };
    for (layer, cache) in net.layers.iter().zip(&tape.caches).rev() {
        if let LayerCache::Softmax(t) = cache {
            if upstream == T::zero() {
                continue;
            }
            accumulate(&mut grads, &layer.bottoms[0], ops::softmax_loss_backward(t, upstream));
            continue;
        }
        let Some(dy) = grads.remove(&layer.top) else { continue };
        let weight_grads = |params: &mut ParamSet<T>, dw: &Tensor<T>, db: &[T]| {
            if let Some(p) = params.params.get_mut(&format!("{}.weight", layer.name)) {
                p.add_grad(dw.data());
            }
            if let Some(p) = params.params.get_mut(&format!("{}.bias", layer.name)) {
                p.add_grad(db);
            }
        };
        match cache {
            LayerCache::Conv(t) => {
                let w = params.params[&format!("{}.weight", layer.name)].value.clone();
                let (dx, dw, db) = ops::conv_backward(&dy, t, &w)?;
                weight_grads(params, &dw, &db);
                accumulate(&mut grads, &layer.bottoms[0], dx);
            }
            LayerCache::Fc(t) => {
                let w = params.params[&format!("{}.weight", layer.name)].value.clone();
                let (dx, dw, db) = ops::fc_backward(&dy, t, &w)?;
                weight_grads(params, &dw, &db);
                accumulate(&mut grads, &layer.bottoms[0], dx);
            }
            LayerCache::Relu(mask) => accumulate(&mut grads, &layer.bottoms[0], ops::relu_backward(&dy, mask)),
            LayerCache::Pool(t) => accumulate(&mut grads, &layer.bottoms[0], ops::pool_backward(&dy, t)?),
            LayerCache::Bn(t) => {
                let state = params.bn.get_mut(&layer.name).expect("state exists");
                let (dx, dg, db) = bn_backward(&dy, t, state)?;
                state.gamma.add_grad(&dg);
                state.beta.add_grad(&db);
                accumulate(&mut grads, &layer.bottoms[0], dx);
            }
            LayerCache::Dropout(m) => accumulate(&mut grads, &layer.bottoms[0], ops::dropout_backward(&dy, m.as_deref())),
            LayerCache::None if layer.kind == LayerKind::EltwiseAdd => {
                let (a, b) = ops::eltwise_add_backward(&dy);
                accumulate(&mut grads, &layer.bottoms[0], a);
                accumulate(&mut grads, &layer.bottoms[1], b);
            }
            LayerCache::None | LayerCache::Softmax(_) => {}
        }
    }
    match grads.remove(&net.input.blob) {
        Some(g) => Ok(g),
        None => Ok(Tensor::zeros(tape.input_shape.clone())?),
    }
}
