//! Central finite-difference checks of the hand-written backward passes.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::layers::{net_backward_from, net_backward_scaled, net_forward_pure, LayerError, ParamSet};
use crate::netdef::{infer_shapes, InputSpec, LayerKind, LayerSpec, NetDef, LABEL_BLOB};
use crate::tensor::{Real, Tensor};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub kind: String,
    pub checked: usize,
    /// Coordinates whose probe crossed a relu or max-pool kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GradCheckRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:<14} {:>7} {:>7} {:>12.3e} {:>9.1e} {}",
            self.name,
            self.kind,
            self.checked,
            self.skipped,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub fn table_header() -> String {
    format!(
        "{:<24} {:<14} {:>7} {:>7} {:>12} {:>9} status",
        "layer", "kind", "checked", "skipped", "max_rel_err", "tolerance"
    )
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: DEFAULT_STEP, tolerance: NET_TOLERANCE, batch: 4, seed: 0 }
    }
}

/// Scalar objective of a check: the softmax loss when the net has one,
/// otherwise a fixed random projection of the last layer's output.
struct Objective<T: Real> {
    net: NetDef,
    labels: Option<Tensor<T>>,
    projection: Option<(String, Tensor<T>)>,
    dropout_seed: u64,
}

impl<T: Real> Objective<T> {
    fn eval(&self, params: &ParamSet<T>, batch: &Tensor<T>) -> Result<(f64, Vec<usize>), LayerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let out = net_forward_pure(&self.net, params, batch, self.labels.as_ref(), &mut rng)?;
        let sig = out.tape.as_ref().map(|t| t.kink_signature()).unwrap_or_default();
        let value = match &self.projection {
            Some((blob, r)) => out.blobs[blob].dot(r)?,
            None => out.loss.map(|l| l.as_f64()).unwrap_or(0.0),
        };
        Ok((value, sig))
    }
}

fn random_tensor<T: Real>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| T::lit(StandardNormal.sample(rng))).collect()).expect("positive shape")
}

/// Moves biases, bn scale/shift and running stats away from their trivial
/// initial values so every gradient path carries signal.
fn perturb_params<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) {
    for (name, p) in params.params.iter_mut() {
        if name.ends_with(".bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.5..0.5)));
        }
    }
    for s in params.bn.values_mut() {
        s.gamma.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(0.5..1.5)));
        s.beta.value.data_mut().iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.5..0.5)));
        s.running_mean.iter_mut().for_each(|v| *v = T::lit(rng.random_range(-0.5..0.5)));
        s.running_var.iter_mut().for_each(|v| *v = T::lit(rng.random_range(0.5..2.0)));
    }
}

fn param_mut<'a, T: Real>(params: &'a mut ParamSet<T>, name: &str) -> &'a mut Tensor<T> {
    params
        .learnables_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, p)| &mut p.value)
        .expect("known parameter")
}

struct Tally {
    checked: usize,
    skipped: usize,
    worst: f64,
}

/// Checks the gradient of every parameter and of the input batch.
///
/// Returns one row per layer holding parameters, plus one for the input.
pub fn check_net<T: Real>(net: &NetDef, opts: CheckOptions) -> Result<Vec<GradCheckRow>, LayerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ParamSet::<T>::init(net, opts.seed)?;
    perturb_params(&mut params, &mut rng);
    let shapes = infer_shapes(net, opts.batch)?;
    let batch = random_tensor::<T>(net.input.shape(opts.batch).dims().to_vec(), &mut rng);
    let loss_layer = net.layers.iter().find(|l| l.kind == LayerKind::SoftmaxLoss);
    let labels = net
        .layers
        .iter()
        .find(|l| l.bottoms.iter().any(|b| b == LABEL_BLOB))
        .map(|l| {
            let classes = shapes[&l.bottoms[0]].item_len();
            let data = (0..opts.batch).map(|_| T::lit(rng.random_range(0..classes) as f64)).collect();
            Tensor::new(vec![opts.batch], data).expect("positive batch")
        });
    let projection = match loss_layer {
        Some(_) => None,
        None => {
            let last = net.layers.last().ok_or_else(|| LayerError::Contract("net has no layers".into()))?;
            Some((last.top.clone(), random_tensor::<T>(shapes[&last.top].dims().to_vec(), &mut rng)))
        }
    };
    let objective = Objective { net: net.clone(), labels, projection, dropout_seed: rng.random() };

    let mut fwd_rng = ChaCha8Rng::seed_from_u64(objective.dropout_seed);
    let out = net_forward_pure(net, &params, &batch, objective.labels.as_ref(), &mut fwd_rng)?;
    let mut tape = out.tape.expect("training pass records a tape");
    let baseline = tape.kink_signature();
    let mut grads = params.clone();
    grads.zero_grads();
    let dx = match &objective.projection {
        Some((blob, r)) => net_backward_from(&mut tape, &mut grads, blob, r.clone())?,
        None => net_backward_scaled(&mut tape, &mut grads, T::one())?,
    };

    let h = T::lit(opts.step);
    let two_h = 2.0 * opts.step;
    let mut per_layer: BTreeMap<String, Tally> = BTreeMap::new();
    let mut record = |layer: &str, analytic: f64, numeric: Option<f64>| {
        let t = per_layer.entry(layer.to_string()).or_insert(Tally { checked: 0, skipped: 0, worst: 0.0 });
        match numeric {
            Some(n) => {
                t.checked += 1;
                t.worst = t.worst.max(rel_error(analytic, n));
            }
            None => t.skipped += 1,
        }
    };

    let names: Vec<(String, Vec<T>)> =
        grads.learnables().into_iter().map(|(n, p)| (n, p.grad.data().to_vec())).collect();
    let mut work = params.clone();
    for (name, analytic) in &names {
        let layer = name.rsplit_once('.').map(|(l, _)| l).unwrap_or(name);
        for (i, a) in analytic.iter().enumerate() {
            let orig = param_mut(&mut work, name).data()[i];
            param_mut(&mut work, name).data_mut()[i] = orig + h;
            let (up, s_up) = objective.eval(&work, &batch)?;
            param_mut(&mut work, name).data_mut()[i] = orig - h;
            let (down, s_down) = objective.eval(&work, &batch)?;
            param_mut(&mut work, name).data_mut()[i] = orig;
            let smooth = s_up == baseline && s_down == baseline;
            record(layer, a.as_f64(), smooth.then(|| (up - down) / two_h));
        }
    }
    let mut probe = batch.clone();
    for i in 0..batch.len() {
        let orig = batch.data()[i];
        probe.data_mut()[i] = orig + h;
        let (up, s_up) = objective.eval(&work, &probe)?;
        probe.data_mut()[i] = orig - h;
        let (down, s_down) = objective.eval(&work, &probe)?;
        probe.data_mut()[i] = orig;
        let smooth = s_up == baseline && s_down == baseline;
        record(&net.input.blob, dx.data()[i].as_f64(), smooth.then(|| (up - down) / two_h));
    }

    let kind_of = |layer: &str| {
        net.layer(layer).map(|l| l.kind.to_string()).unwrap_or_else(|| "input".to_string())
    };
    let mut rows: Vec<GradCheckRow> = per_layer
        .into_iter()
        .map(|(name, t)| GradCheckRow {
            kind: kind_of(&name),
            name,
            checked: t.checked,
            skipped: t.skipped,
            max_rel_error: t.worst,
            tolerance: opts.tolerance,
        })
        .collect();
    let order = |name: &str| net.layers.iter().position(|l| l.name == name).map_or(0, |p| p + 1);
    rows.sort_by_key(|r| order(&r.name));
    Ok(rows)
}

/// One-layer nets covering every differentiable layer kind.
pub fn isolated_layer_nets() -> Vec<(String, NetDef)> {
    let single = |name: &str, input: InputSpec, layers: Vec<LayerSpec>| {
        (name.to_string(), NetDef { name: name.to_string(), input, layers })
    };
    let img = || InputSpec::new("data", 3, 6, 6);
    let conv = |k: usize, s: usize, p: usize, bias: usize| {
        LayerSpec::new("layer", LayerKind::Conv, &["data"], "out")
            .with("kernel", k)
            .with("stride", s)
            .with("pad", p)
            .with("out_channels", 4usize)
            .with("bias_flag", bias)
    };
    let pool = |mode: &str, k: usize, s: usize, p: usize| {
        let mut l = LayerSpec::new("layer", LayerKind::Pool, &["data"], "out")
            .with("kernel", k)
            .with("stride", s)
            .with("pad", p);
        l.params.insert("mode".into(), crate::netdef::ParamValue::Word(mode.into()));
        l
    };
    let bn = |global: bool| {
        let l = crate::transform::bn_layer("layer", "data");
        let l = LayerSpec { top: "out".into(), ..l };
        if global {
            l.with("global_stats", 1usize)
        } else {
            l
        }
    };
    vec![
        single("conv_k3_s1_p1", img(), vec![conv(3, 1, 1, 1)]),
        single("conv_k2_s2_p0", img(), vec![conv(2, 2, 0, 0)]),
        single(
            "fc",
            img(),
            vec![LayerSpec::new("layer", LayerKind::Fc, &["data"], "out").with("out_features", 5usize).with("bias_flag", 1usize)],
        ),
        single("relu", img(), vec![LayerSpec::new("layer", LayerKind::Relu, &["data"], "out")]),
        single("pool_max_k3_s2_p1", img(), vec![pool("max", 3, 2, 1)]),
        single("pool_avg_k2_s2", img(), vec![pool("avg", 2, 2, 0)]),
        single("bn_batch_stats", img(), vec![bn(false)]),
        single("bn_global_stats", img(), vec![bn(true)]),
        single(
            "bn_features",
            InputSpec::new("data", 6, 1, 1),
            vec![LayerSpec { top: "out".into(), ..crate::transform::bn_layer("layer", "data") }],
        ),
        single(
            "eltwise_add",
            img(),
            vec![
                LayerSpec::new("branch", LayerKind::Relu, &["data"], "r"),
                LayerSpec::new("layer", LayerKind::EltwiseAdd, &["data", "r"], "out"),
            ],
        ),
        single(
            "dropout",
            img(),
            vec![LayerSpec::new("layer", LayerKind::Dropout, &["data"], "out").with("ratio", 0.3)],
        ),
        single(
            "softmax_loss",
            InputSpec::new("data", 7, 1, 1),
            vec![LayerSpec::new("layer", LayerKind::SoftmaxLoss, &["data", LABEL_BLOB], "loss")],
        ),
    ]
}

/// Checks each isolated-layer net; one row per case, worst over its tensors.
pub fn check_layer_kinds<T: Real>(opts: CheckOptions) -> Result<Vec<GradCheckRow>, LayerError> {
    let mut rows = Vec::new();
    for (case, net) in isolated_layer_nets() {
        let sub = check_net::<T>(&net, opts)?;
        let kind = net.layer("layer").map(|l| l.kind.to_string()).unwrap_or_default();
        rows.push(GradCheckRow {
            name: case,
            kind,
            checked: sub.iter().map(|r| r.checked).sum(),
            skipped: sub.iter().map(|r| r.skipped).sum(),
            max_rel_error: sub.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            tolerance: opts.tolerance,
        });
    }
    Ok(rows)
}
