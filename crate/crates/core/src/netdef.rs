//! The `.ndef` network definition language.
//!
//! A definition is line oriented; `#` starts a comment:
//!
//! ```text
//! name tiny
//! input data 3 8 8
//! layer c1 conv data c1 bias_flag=1 kernel=3 out_channels=4 pad=1 stride=1
//! layer r1 relu c1 r1
//! layer fc fc r1 fc bias_flag=1 out_features=10
//! layer loss softmax_loss fc+label loss
//! ```
//!
//! Blobs are single-assignment: every layer writes a fresh top, so there are
//! no in-place layers. The class labels of a batch are always available as
//! the blob named [`LABEL_BLOB`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{window_out, Shape4};

/// Name of the implicit blob that carries class labels.
pub const LABEL_BLOB: &str = "label";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetDefError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid net: {0}")]
    Invalid(String),
    #[error("shape inference failed at layer '{layer}': {msg}")]
    Shape { layer: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Conv,
    Fc,
    Relu,
    Pool,
    Bn,
    Dropout,
    Lrn,
    EltwiseAdd,
    SoftmaxLoss,
    Accuracy,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Conv,
        LayerKind::Fc,
        LayerKind::Relu,
        LayerKind::Pool,
        LayerKind::Bn,
        LayerKind::Dropout,
        LayerKind::Lrn,
        LayerKind::EltwiseAdd,
        LayerKind::SoftmaxLoss,
        LayerKind::Accuracy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Bn => "bn",
            LayerKind::Dropout => "dropout",
            LayerKind::Lrn => "lrn",
            LayerKind::EltwiseAdd => "eltwise_add",
            LayerKind::SoftmaxLoss => "softmax_loss",
            LayerKind::Accuracy => "accuracy",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            LayerKind::EltwiseAdd | LayerKind::SoftmaxLoss | LayerKind::Accuracy => 2,
            _ => 1,
        }
    }

    /// Conv and fc carry learnable multiplicative weights.
    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }

    fn required(self) -> &'static [&'static str] {
        match self {
            LayerKind::Conv => &["bias_flag", "kernel", "out_channels", "pad", "stride"],
            LayerKind::Fc => &["bias_flag", "out_features"],
            LayerKind::Pool => &["kernel", "mode", "stride"],
            LayerKind::Bn => &["eps", "momentum"],
            LayerKind::Dropout => &["ratio"],
            LayerKind::Lrn => &["alpha", "beta", "local_size"],
            _ => &[],
        }
    }

    fn optional(self) -> &'static [&'static str] {
        match self {
            LayerKind::Pool => &["pad"],
            LayerKind::Bn => &["global_stats"],
            LayerKind::Accuracy => &["top_k"],
            _ => &[],
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown layer kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Num(f64),
    Word(String),
}

impl ParamValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            ParamValue::Num(v) => Some(*v),
            ParamValue::Word(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Num(v) => write!(f, "{v}"),
            ParamValue::Word(w) => f.write_str(w),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Num(v)
    }
}

impl From<usize> for ParamValue {
    fn from(v: usize) -> Self {
        ParamValue::Num(v as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub bottoms: Vec<String>,
    pub top: String,
    pub params: BTreeMap<String, ParamValue>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, bottoms: &[&str], top: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            bottoms: bottoms.iter().map(|s| s.to_string()).collect(),
            top: top.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<ParamValue>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(ParamValue::as_num)
    }

    /// Integer parameter; the layer is assumed validated.
    pub fn int(&self, key: &str) -> usize {
        self.num(key).map(|v| v as usize).unwrap_or(0)
    }

    pub fn flag(&self, key: &str) -> bool {
        self.num(key).is_some_and(|v| v != 0.0)
    }

    pub fn pool_mode(&self) -> PoolMode {
        match self.params.get("mode") {
            Some(ParamValue::Word(w)) if w == "avg" => PoolMode::Avg,
            _ => PoolMode::Max,
        }
    }

    fn check_params(&self) -> Result<(), String> {
        let required = self.kind.required();
        let optional = self.kind.optional();
        for key in required {
            if !self.params.contains_key(*key) {
                return Err(format!("{} layer '{}' is missing parameter '{key}'", self.kind, self.name));
            }
        }
        for (key, value) in &self.params {
            if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
                return Err(format!("{} layer '{}' does not take parameter '{key}'", self.kind, self.name));
            }
            let bad = |what: &str| Err(format!("layer '{}': {key}={value} must be {what}", self.name));
            let num = match (key.as_str(), value) {
                ("mode", ParamValue::Word(w)) if w == "max" || w == "avg" => continue,
                ("mode", _) => return bad("'max' or 'avg'"),
                (_, ParamValue::Word(_)) => return bad("a number"),
                (_, ParamValue::Num(v)) => *v,
            };
            let is_int = num.fract() == 0.0;
            match key.as_str() {
                "out_channels" | "out_features" | "kernel" | "stride" | "local_size" | "top_k" => {
                    if !(is_int && num >= 1.0) {
                        return bad("a positive integer");
                    }
                }
                "pad" => {
                    if !(is_int && num >= 0.0) {
                        return bad("a non-negative integer");
                    }
                }
                "bias_flag" | "global_stats" => {
                    if num != 0.0 && num != 1.0 {
                        return bad("0 or 1");
                    }
                }
                "eps" => {
                    if num <= 0.0 {
                        return bad("positive");
                    }
                }
                "momentum" => {
                    if !(num > 0.0 && num <= 1.0) {
                        return bad("in (0, 1]");
                    }
                }
                "ratio"
                    if !(0.0..1.0).contains(&num) => {
                        return bad("in [0, 1)");
                    }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSpec {
    pub blob: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl InputSpec {
    pub fn new(blob: impl Into<String>, c: usize, h: usize, w: usize) -> Self {
        InputSpec { blob: blob.into(), c, h, w }
    }

    pub fn shape(&self, batch: usize) -> Shape4 {
        Shape4 { n: batch, c: self.c, h: self.h, w: self.w }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetDef {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

impl NetDef {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Index of the layer producing `blob`, if any.
    pub fn producer(&self, blob: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.top == blob)
    }

    /// Indices of layers reading `blob`, in execution order.
    pub fn consumers(&self, blob: &str) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.bottoms.iter().any(|b| b == blob))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn validate(&self) -> Result<(), NetDefError> {
        self.check().map_err(|(_, msg)| NetDefError::Invalid(msg))
    }

    /// Structural validation; errors carry the offending layer index.
    fn check(&self) -> Result<(), (Option<usize>, String)> {
        if !valid_ident(&self.name) {
            return Err((None, format!("invalid net name '{}'", self.name)));
        }
        if !valid_ident(&self.input.blob) || self.input.blob == LABEL_BLOB {
            return Err((None, format!("invalid input blob name '{}'", self.input.blob)));
        }
        if self.input.c == 0 || self.input.h == 0 || self.input.w == 0 {
            return Err((None, "input dimensions must be positive".into()));
        }
        let mut names = HashSet::new();
        let mut blobs: HashSet<&str> = [self.input.blob.as_str(), LABEL_BLOB].into_iter().collect();
        let mut losses = 0;
        for (i, l) in self.layers.iter().enumerate() {
            let err = |msg: String| Err((Some(i), msg));
            if !valid_ident(&l.name) {
                return err(format!("invalid layer name '{}'", l.name));
            }
            if !names.insert(l.name.as_str()) {
                return err(format!("duplicate layer name '{}'", l.name));
            }
            if l.bottoms.len() != l.kind.arity() {
                return err(format!(
                    "{} layer '{}' takes {} bottom(s), got {}",
                    l.kind,
                    l.name,
                    l.kind.arity(),
                    l.bottoms.len()
                ));
            }
            for (j, b) in l.bottoms.iter().enumerate() {
                if !blobs.contains(b.as_str()) {
                    return err(format!("layer '{}' reads undefined blob '{b}'", l.name));
                }
                let label_slot = matches!(l.kind, LayerKind::SoftmaxLoss | LayerKind::Accuracy) && j == 1;
                if label_slot != (b == LABEL_BLOB) {
                    return err(if label_slot {
                        format!("layer '{}' must read labels from '{LABEL_BLOB}'", l.name)
                    } else {
                        format!("layer '{}' cannot read '{LABEL_BLOB}' as data", l.name)
                    });
                }
            }
            if !valid_ident(&l.top) {
                return err(format!("invalid top name '{}'", l.top));
            }
            if !blobs.insert(l.top.as_str()) {
                return err(format!("layer '{}' writes blob '{}' which already exists", l.name, l.top));
            }
            if l.kind == LayerKind::SoftmaxLoss {
                losses += 1;
                if losses > 1 {
                    return err("at most one softmax_loss layer is allowed".into());
                }
            }
            l.check_params().or_else(err)?;
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Option<ParamValue> {
    if let Ok(v) = raw.parse::<f64>() {
        return v.is_finite().then_some(ParamValue::Num(v));
    }
    (raw.chars().all(|c| c.is_ascii_alphabetic() || c == '_') && !raw.is_empty())
        .then(|| ParamValue::Word(raw.to_string()))
}

pub fn parse(text: &str) -> Result<NetDef, NetDefError> {
    let mut name: Option<String> = None;
    let mut input: Option<InputSpec> = None;
    let mut layers = Vec::new();
    let mut layer_lines = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("");
        let toks: Vec<&str> = content.split_whitespace().collect();
        let Some(&head) = toks.first() else { continue };
        let err = |msg: String| NetDefError::Parse { line, msg };
        match head {
            "name" => {
                if name.is_some() {
                    return Err(err("'name' given twice".into()));
                }
                if toks.len() != 2 {
                    return Err(err("expected 'name <id>'".into()));
                }
                name = Some(toks[1].to_string());
            }
            "input" => {
                if input.is_some() {
                    return Err(err("'input' given twice".into()));
                }
                if toks.len() != 5 {
                    return Err(err("expected 'input <blob> <C> <H> <W>'".into()));
                }
                let dim = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad dimension '{s}'")));
                input = Some(InputSpec::new(toks[1], dim(toks[2])?, dim(toks[3])?, dim(toks[4])?));
            }
            "layer" => {
                if toks.len() < 5 {
                    return Err(err("expected 'layer <name> <kind> <bottom[+bottom2]> <top> [k=v ...]'".into()));
                }
                if input.is_none() || name.is_none() {
                    return Err(err("'name' and 'input' must precede layers".into()));
                }
                let kind: LayerKind = toks[2].parse().map_err(err)?;
                let mut params = BTreeMap::new();
                for kv in &toks[5..] {
                    let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("expected key=value, got '{kv}'")))?;
                    let value = parse_value(v).ok_or_else(|| err(format!("bad value in '{kv}'")))?;
                    if params.insert(k.to_string(), value).is_some() {
                        return Err(err(format!("parameter '{k}' given twice")));
                    }
                }
                layers.push(LayerSpec {
                    name: toks[1].to_string(),
                    kind,
                    bottoms: toks[3].split('+').map(str::to_string).collect(),
                    top: toks[4].to_string(),
                    params,
                });
                layer_lines.push(line);
            }
            other => return Err(err(format!("unknown directive '{other}'"))),
        }
    }
    let missing = |what: &str| NetDefError::Parse { line: last_line.max(1), msg: format!("missing '{what}' line") };
    let net = NetDef {
        name: name.ok_or_else(|| missing("name"))?,
        input: input.ok_or_else(|| missing("input"))?,
        layers,
    };
    net.check().map_err(|(layer, msg)| NetDefError::Parse {
        line: layer.map(|i| layer_lines[i]).unwrap_or(1),
        msg,
    })?;
    Ok(net)
}

/// Canonical text: fixed field order, parameters sorted by key, LF endings.
pub fn serialize(net: &NetDef) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name {}", net.name);
    let i = &net.input;
    let _ = writeln!(out, "input {} {} {} {}", i.blob, i.c, i.h, i.w);
    for l in &net.layers {
        let _ = write!(out, "layer {} {} {} {}", l.name, l.kind, l.bottoms.join("+"), l.top);
        for (k, v) in &l.params {
            let _ = write!(out, " {k}={v}");
        }
        out.push('\n');
    }
    out
}

pub fn infer_shapes(net: &NetDef, batch: usize) -> Result<BTreeMap<String, Shape4>, NetDefError> {
    if batch == 0 {
        return Err(NetDefError::Invalid("batch size must be positive".into()));
    }
    net.validate()?;
    let mut shapes: HashMap<&str, Shape4> = HashMap::new();
    let input = net.input.shape(batch);
    shapes.insert(&net.input.blob, input);
    shapes.insert(LABEL_BLOB, Shape4 { n: batch, c: 1, h: 1, w: 1 });
    let scalar = Shape4 { n: 1, c: 1, h: 1, w: 1 };
    for l in &net.layers {
        let fail = |msg: String| NetDefError::Shape { layer: l.name.clone(), msg };
        let x = shapes[l.bottoms[0].as_str()];
        let out = match l.kind {
            LayerKind::Conv | LayerKind::Pool => {
                let (k, s) = (l.int("kernel"), l.int("stride"));
                let p = l.int("pad");
                let oh = window_out(x.h, k, s, p).map_err(|e| fail(e.to_string()))?;
                let ow = window_out(x.w, k, s, p).map_err(|e| fail(e.to_string()))?;
                let c = if l.kind == LayerKind::Conv { l.int("out_channels") } else { x.c };
                Shape4 { n: batch, c, h: oh, w: ow }
            }
            LayerKind::Fc => Shape4 { n: batch, c: l.int("out_features"), h: 1, w: 1 },
            LayerKind::Relu | LayerKind::Bn | LayerKind::Dropout | LayerKind::Lrn => x,
            LayerKind::EltwiseAdd => {
                let y = shapes[l.bottoms[1].as_str()];
                if x != y {
                    return Err(fail(format!("eltwise_add inputs differ: {x} vs {y}")));
                }
                x
            }
            LayerKind::SoftmaxLoss | LayerKind::Accuracy => {
                if x.h != 1 || x.w != 1 {
                    return Err(fail(format!("expects class scores of shape Nx{}x1x1, got {x}", x.c)));
                }
                if l.kind == LayerKind::Accuracy && l.num("top_k").map_or(1, |v| v as usize) > x.c {
                    return Err(fail(format!("top_k exceeds {} classes", x.c)));
                }
                scalar
            }
        };
        shapes.insert(&l.top, out);
    }
    Ok(shapes.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}
