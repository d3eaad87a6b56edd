//! Batch-normalization surgery on network definitions, and generators for the
//! AlexNet-, VGG- and ResNet-style graphs.
//!
//! [`insert_batchnorm`] applies, in order:
//!
//! 1. a bn between every conv and a relu reading it (and between a conv and its
//!    eltwise_add when that add is the conv's only consumer);
//! 2. the same for every fc followed by a relu;
//! 3. removal of every lrn layer, rewiring its consumers to its input;
//! 4. removal of every dropout layer, likewise;
//! 5. optionally, a bn on the input blob replacing mean subtraction.
//!
//! A classifier fc that feeds the loss directly gets no bn.

use thiserror::Error;

use crate::layers::BnMode;
use crate::netdef::{infer_shapes, InputSpec, LayerKind, LayerSpec, NetDef, NetDefError, ParamValue, LABEL_BLOB};
use crate::tensor::window_out;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("already transformed: net contains bn layer(s) {0:?}")]
    AlreadyTransformed(Vec<String>),
    #[error("name collision: '{0}' already exists in the net")]
    NameCollision(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    NetDef(#[from] NetDefError),
}

/// Every edit made by [`insert_batchnorm`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteReport {
    /// `(new bn layer, layer it follows)` for the conv/fc rules.
    pub inserted: Vec<(String, String)>,
    pub removed: Vec<(String, LayerKind)>,
    pub input_bn_added: bool,
}

impl std::fmt::Display for RewriteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (bn, pred) in &self.inserted {
            writeln!(f, "inserted {bn} after {pred}")?;
        }
        for (name, kind) in &self.removed {
            writeln!(f, "removed {name} ({kind})")?;
        }
        if self.input_bn_added {
            writeln!(f, "added input bn")?;
        }
        Ok(())
    }
}

pub fn bn_layer(name: &str, bottom: &str) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Bn, &[bottom], name)
        .with("eps", DEFAULT_BN_EPS)
        .with("momentum", DEFAULT_BN_MOMENTUM)
}

fn name_taken(net: &NetDef, name: &str) -> bool {
    name == net.input.blob || name == LABEL_BLOB || net.layers.iter().any(|l| l.name == name || l.top == name)
}

fn rewire(layers: &mut [LayerSpec], targets: &[usize], from: &str, to: &str) {
    for &j in targets {
        for b in layers[j].bottoms.iter_mut().filter(|b| *b == from) {
            *b = to.to_string();
        }
    }
}

/// Deletes every layer of `kind`, connecting its consumers to its input.
pub fn splice_out(net: &NetDef, kind: LayerKind) -> (NetDef, Vec<(String, LayerKind)>) {
    let mut out = net.clone();
    let mut removed = Vec::new();
    while let Some(i) = out.layers.iter().position(|l| l.kind == kind) {
        let layer = out.layers.remove(i);
        let consumers = out.consumers(&layer.top);
        rewire(&mut out.layers, &consumers, &layer.top, &layer.bottoms[0]);
        removed.push((layer.name, layer.kind));
    }
    (out, removed)
}

pub fn insert_batchnorm(net: &NetDef, add_input_bn: bool) -> Result<(NetDef, RewriteReport), TransformError> {
    net.validate()?;
    let existing: Vec<String> = net.layers.iter().filter(|l| l.kind == LayerKind::Bn).map(|l| l.name.clone()).collect();
    if !existing.is_empty() {
        return Err(TransformError::AlreadyTransformed(existing));
    }
    let mut out = net.clone();
    let mut report = RewriteReport::default();

    let mut i = 0;
    while i < out.layers.len() {
        let l = &out.layers[i];
        if l.kind.is_weighted() {
            let consumers = out.consumers(&l.top);
            let relus: Vec<usize> = consumers.iter().copied().filter(|&j| out.layers[j].kind == LayerKind::Relu).collect();
            let targets = if !relus.is_empty() {
                relus
            } else if l.kind == LayerKind::Conv
                && consumers.len() == 1
                && out.layers[consumers[0]].kind == LayerKind::EltwiseAdd
            {
                consumers
            } else {
                Vec::new()
            };
            if !targets.is_empty() {
                let (pred, top) = (l.name.clone(), l.top.clone());
                let bn = format!("{pred}_bn");
                if name_taken(&out, &bn) {
                    return Err(TransformError::NameCollision(bn));
                }
                rewire(&mut out.layers, &targets, &top, &bn);
                out.layers.insert(i + 1, bn_layer(&bn, &top));
                report.inserted.push((bn, pred));
                i += 1;
            }
        }
        i += 1;
    }

    for kind in [LayerKind::Lrn, LayerKind::Dropout] {
        let (spliced, removed) = splice_out(&out, kind);
        out = spliced;
        report.removed.extend(removed);
    }

    if add_input_bn {
        let input = out.input.blob.clone();
        let bn = format!("{input}_bn");
        if name_taken(&out, &bn) {
            return Err(TransformError::NameCollision(bn));
        }
        let consumers = out.consumers(&input);
        rewire(&mut out.layers, &consumers, &input, &bn);
        out.layers.insert(0, bn_layer(&bn, &input));
        report.input_bn_added = true;
    }

    out.validate()?;
    Ok((out, report))
}

/// Number of weighted (conv/fc) layers on the deepest input-to-output path.
///
/// This is the depth used in names like "ResNet-10": projection shortcuts run
/// beside the main path and are not counted.
pub fn weighted_depth(net: &NetDef) -> usize {
    let mut depth = std::collections::HashMap::new();
    depth.insert(net.input.blob.as_str(), 0usize);
    depth.insert(LABEL_BLOB, 0);
    let mut best = 0;
    for l in &net.layers {
        let d = l.bottoms.iter().map(|b| depth.get(b.as_str()).copied().unwrap_or(0)).max().unwrap_or(0)
            + usize::from(l.kind.is_weighted());
        best = best.max(d);
        depth.insert(&l.top, d);
    }
    best
}

/// Incremental graph construction that tracks the current blob and its geometry.
struct Builder {
    layers: Vec<LayerSpec>,
    top: String,
    c: usize,
    h: usize,
    w: usize,
}

impl Builder {
    fn new(input: &InputSpec) -> Self {
        Builder { layers: Vec::new(), top: input.blob.clone(), c: input.c, h: input.h, w: input.w }
    }

    fn push(&mut self, layer: LayerSpec) {
        self.top = layer.top.clone();
        self.layers.push(layer);
    }

    fn spatial(&mut self, name: &str, k: usize, s: usize, p: usize) -> Result<(), TransformError> {
        let geo = |e: crate::tensor::TensorError| TransformError::Geometry(format!("layer '{name}': {e}"));
        if s > 1 && (self.h < s || self.w < s) {
            return Err(TransformError::Geometry(format!(
                "layer '{name}': cannot downsample a {}x{} map by stride {s}",
                self.h, self.w
            )));
        }
        self.h = window_out(self.h, k, s, p).map_err(geo)?;
        self.w = window_out(self.w, k, s, p).map_err(geo)?;
        Ok(())
    }

    fn conv(&mut self, name: &str, out: usize, k: usize, s: usize, p: usize, bias: bool) -> Result<(), TransformError> {
        self.spatial(name, k, s, p)?;
        self.c = out;
        let bottom = self.top.clone();
        self.push(
            LayerSpec::new(name, LayerKind::Conv, &[&bottom], name)
                .with("out_channels", out)
                .with("kernel", k)
                .with("stride", s)
                .with("pad", p)
                .with("bias_flag", usize::from(bias)),
        );
        Ok(())
    }

    fn pool(&mut self, name: &str, mode: &str, k: usize, s: usize, p: usize) -> Result<(), TransformError> {
        self.spatial(name, k, s, p)?;
        let bottom = self.top.clone();
        let mut layer = LayerSpec::new(name, LayerKind::Pool, &[&bottom], name)
            .with("mode", ParamValue::Word(mode.into()))
            .with("kernel", k)
            .with("stride", s);
        if p > 0 {
            layer = layer.with("pad", p);
        }
        self.push(layer);
        Ok(())
    }

    fn fc(&mut self, name: &str, out: usize) {
        let bottom = self.top.clone();
        self.push(
            LayerSpec::new(name, LayerKind::Fc, &[&bottom], name)
                .with("out_features", out)
                .with("bias_flag", 1usize),
        );
        self.c = out;
        self.h = 1;
        self.w = 1;
    }

    fn simple(&mut self, name: &str, kind: LayerKind) {
        let bottom = self.top.clone();
        self.push(LayerSpec::new(name, kind, &[&bottom], name));
    }

    /// A bn named after the current top.
    fn bn(&mut self) {
        let bottom = self.top.clone();
        self.push(bn_layer(&format!("{bottom}_bn"), &bottom));
    }

    fn lrn(&mut self, name: &str) {
        let bottom = self.top.clone();
        self.push(
            LayerSpec::new(name, LayerKind::Lrn, &[&bottom], name)
                .with("local_size", 5usize)
                .with("alpha", 1e-4)
                .with("beta", 0.75),
        );
    }

    fn dropout(&mut self, name: &str) {
        let bottom = self.top.clone();
        self.push(LayerSpec::new(name, LayerKind::Dropout, &[&bottom], name).with("ratio", 0.5));
    }

    fn heads(&mut self) {
        let scores = self.top.clone();
        self.layers.push(LayerSpec::new("loss", LayerKind::SoftmaxLoss, &[&scores, LABEL_BLOB], "loss"));
        self.layers.push(LayerSpec::new("accuracy", LayerKind::Accuracy, &[&scores, LABEL_BLOB], "accuracy"));
    }

    fn finish(self, name: String, input: &InputSpec) -> Result<NetDef, TransformError> {
        let net = NetDef { name, input: input.clone(), layers: self.layers };
        net.validate()?;
        infer_shapes(&net, 1).map_err(|e| TransformError::Geometry(e.to_string()))?;
        Ok(net)
    }
}

fn check_common(classes: usize, input: &InputSpec) -> Result<(), TransformError> {
    if classes == 0 {
        return Err(TransformError::Geometry("class count must be positive".into()));
    }
    if input.c == 0 || input.h == 0 || input.w == 0 {
        return Err(TransformError::Geometry("input dimensions must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlainArch {
    AlexnetStyle,
    VggStyle,
}

fn scaled(width: usize, scale: f64) -> Result<usize, TransformError> {
    let v = (width as f64 * scale).round();
    if !(v >= 1.0) {
        return Err(TransformError::Geometry(format!("scale {scale} leaves no channels for width {width}")));
    }
    Ok(v as usize)
}

/// Plain (non-residual) nets. `with_bn = false` gives the classic form with
/// lrn (AlexNet) and dropout; `with_bn = true` gives the batch-normalized form
/// with an input bn, identical to rewriting the classic form.
///
/// `scale` multiplies every channel and hidden-unit count.
pub fn generate_plain(
    arch: PlainArch,
    scale: f64,
    classes: usize,
    input: &InputSpec,
    with_bn: bool,
) -> Result<NetDef, TransformError> {
    check_common(classes, input)?;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(TransformError::Geometry(format!("scale must be positive, got {scale}")));
    }
    let mut b = Builder::new(input);
    if with_bn {
        b.bn();
    }
    let conv_relu = |b: &mut Builder, conv: &str, relu: &str, out: usize, k: usize, s: usize, p: usize| {
        b.conv(conv, scaled(out, scale)?, k, s, p, true)?;
        if with_bn {
            b.bn();
        }
        b.simple(relu, LayerKind::Relu);
        Ok::<_, TransformError>(())
    };
    let fc_relu_drop = |b: &mut Builder, i: usize| {
        b.fc(&format!("fc{i}"), scaled(4096, scale)?);
        if with_bn {
            b.bn();
        }
        b.simple(&format!("relu{i}"), LayerKind::Relu);
        if !with_bn {
            b.dropout(&format!("drop{i}"));
        }
        Ok::<_, TransformError>(())
    };
    let name = match arch {
        PlainArch::AlexnetStyle => {
            conv_relu(&mut b, "conv1", "relu1", 96, 11, 4, 0)?;
            if !with_bn {
                b.lrn("norm1");
            }
            b.pool("pool1", "max", 3, 2, 0)?;
            conv_relu(&mut b, "conv2", "relu2", 256, 5, 1, 2)?;
            if !with_bn {
                b.lrn("norm2");
            }
            b.pool("pool2", "max", 3, 2, 0)?;
            conv_relu(&mut b, "conv3", "relu3", 384, 3, 1, 1)?;
            conv_relu(&mut b, "conv4", "relu4", 384, 3, 1, 1)?;
            conv_relu(&mut b, "conv5", "relu5", 256, 3, 1, 1)?;
            b.pool("pool5", "max", 3, 2, 0)?;
            "alexnet_style"
        }
        PlainArch::VggStyle => {
            let stages: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
            for (s, &(width, convs)) in stages.iter().enumerate() {
                for i in 1..=convs {
                    let id = format!("{}_{i}", s + 1);
                    conv_relu(&mut b, &format!("conv{id}"), &format!("relu{id}"), width, 3, 1, 1)?;
                }
                b.pool(&format!("pool{}", s + 1), "max", 2, 2, 0)?;
            }
            "vgg_style"
        }
    };
    fc_relu_drop(&mut b, 6)?;
    fc_relu_drop(&mut b, 7)?;
    b.fc("fc8", classes);
    b.heads();
    b.finish(name.to_string(), input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockType {
    /// Two 3x3 convolutions (ResNet-10/18/34).
    Basic,
    /// 1x1 / 3x3 / 1x1 with 4x expansion (ResNet-50 and deeper).
    Bottleneck,
}

/// Residual nets: a stem (7x7/2 conv, bn, relu, 3x3/2 max pool), then one
/// stage per entry of `stage_blocks` (width doubling and stride 2 from the
/// second stage on), global average pooling and an fc classifier. Shortcuts
/// are identity, or a 1x1 conv + bn projection where the shape changes.
pub fn generate_resnet(
    stage_blocks: &[usize],
    base_width: usize,
    classes: usize,
    input: &InputSpec,
    block: BlockType,
) -> Result<NetDef, TransformError> {
    check_common(classes, input)?;
    if stage_blocks.is_empty() || stage_blocks.contains(&0) {
        return Err(TransformError::Geometry("every stage needs at least one block".into()));
    }
    if base_width == 0 {
        return Err(TransformError::Geometry("base width must be positive".into()));
    }
    let mut b = Builder::new(input);
    b.conv("conv1", base_width, 7, 2, 3, false)?;
    b.bn();
    b.simple("conv1_relu", LayerKind::Relu);
    b.pool("pool1", "max", 3, 2, 1)?;

    let expansion = match block {
        BlockType::Basic => 1,
        BlockType::Bottleneck => 4,
    };
    for (s, &blocks) in stage_blocks.iter().enumerate() {
        let width = base_width << s;
        for k in 0..blocks {
            let stride = if s > 0 && k == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", s + 1, k + 1);
            let (entry, entry_c, entry_h, entry_w) = (b.top.clone(), b.c, b.h, b.w);
            match block {
                BlockType::Basic => {
                    b.conv(&format!("{p}_conv1"), width, 3, stride, 1, false)?;
                    b.bn();
                    b.simple(&format!("{p}_relu1"), LayerKind::Relu);
                    b.conv(&format!("{p}_conv2"), width, 3, 1, 1, false)?;
                    b.bn();
                }
                BlockType::Bottleneck => {
                    b.conv(&format!("{p}_conv1"), width, 1, 1, 0, false)?;
                    b.bn();
                    b.simple(&format!("{p}_relu1"), LayerKind::Relu);
                    b.conv(&format!("{p}_conv2"), width, 3, stride, 1, false)?;
                    b.bn();
                    b.simple(&format!("{p}_relu2"), LayerKind::Relu);
                    b.conv(&format!("{p}_conv3"), width * expansion, 1, 1, 0, false)?;
                    b.bn();
                }
            }
            let main = b.top.clone();
            let (out_c, out_h, out_w) = (b.c, b.h, b.w);
            let shortcut = if stride != 1 || entry_c != out_c {
                b.top = entry;
                b.c = entry_c;
                b.h = entry_h;
                b.w = entry_w;
                b.conv(&format!("{p}_proj"), out_c, 1, stride, 0, false)?;
                b.bn();
                b.top.clone()
            } else {
                entry
            };
            let add = format!("{p}_add");
            b.push(LayerSpec::new(&add, LayerKind::EltwiseAdd, &[&main, &shortcut], &add));
            b.c = out_c;
            b.h = out_h;
            b.w = out_w;
            b.simple(&format!("{p}_relu"), LayerKind::Relu);
        }
    }
    if b.h != b.w {
        return Err(TransformError::Geometry(format!("final feature map {}x{} is not square", b.h, b.w)));
    }
    let k = b.h;
    b.pool("pool_global", "avg", k, 1, 0)?;
    b.fc("fc", classes);
    b.heads();
    let depth: String = stage_blocks.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("-");
    b.finish(format!("resnet_{depth}"), input)
}

/// Forces every bn layer of a net into the given mode before checking.
pub fn set_bn_mode(net: &NetDef, mode: BnMode) -> NetDef {
    let mut net = net.clone();
    for l in net.layers.iter_mut().filter(|l| l.kind == LayerKind::Bn) {
        match mode {
            BnMode::GlobalStats => {
                l.params.insert("global_stats".into(), 1usize.into());
            }
            BnMode::BatchStats => {
                l.params.remove("global_stats");
            }
        }
    }
    net
}
