//! Layer graph, the encoder-decoder builder, and complexity accounting.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{QuantParams, Tensor};

/// Width/depth parameters of the encoder-decoder network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub base_filters: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// 32 filters, 4 levels, 25 spectral channels, 5 classes.
    pub const FULL: ArchConfig = ArchConfig {
        base_filters: 32,
        depth: 4,
        in_channels: 25,
        num_classes: 5,
    };

    pub fn new(base_filters: usize, depth: usize, in_channels: usize, num_classes: usize) -> Self {
        Self {
            base_filters,
            depth,
            in_channels,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.depth == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("architecture fields must be positive: {self:?}")));
        }
        if self.depth > 6 {
            return Err(Error::Config(format!("depth {} exceeds 6", self.depth)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Integer form of a convolution: `W_int` with `z_w = 0`, and a 32-bit bias at
/// scale `s_w·s_x` that already contains the `−z_x·ΣW_int` correction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvQuant {
    pub input: QuantParams,
    pub weight: QuantParams,
    pub bias: QuantParams,
    pub weight_int: Tensor<i32>,
    pub bias_int: Vec<i64>,
}

/// Weight `[O, I, k, k]` plus per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
    pub quant: Option<ConvQuant>,
}

impl ConvParams {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out_ch, in_ch, kernel, kernel]),
            bias: vec![0.0; out_ch],
            quant: None,
        }
    }

    pub fn from_parts(weight: Tensor<f32>, bias: Vec<f32>) -> Result<Self> {
        match weight.shape() {
            [o, _, kh, kw] if *o == bias.len() && kh == kw => Ok(Self {
                weight,
                bias,
                quant: None,
            }),
            s => Err(Error::Shape(format!(
                "weight {s:?} incompatible with {} biases",
                bias.len()
            ))),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Elements per output channel (`I·k·k`).
    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.data().iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - 1e-3; channels],
            eps: 1e-3,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::Shape(format!("batch norm `{name}` has ragged parameter vectors")));
        }
        if self.var.iter().any(|&v| !(v + self.eps > 0.0)) {
            return Err(Error::Config(format!("batch norm `{name}` has var + eps <= 0")));
        }
        let finite = [&self.gamma, &self.beta, &self.mean, &self.var]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite || !self.eps.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(())
    }

    /// Per-channel `(a, b)` with `BN(x) = a·x + b`, computed in `f64`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|i| {
                let inv = 1.0 / (self.var[i] as f64 + self.eps as f64).sqrt();
                let a = self.gamma[i] as f64 * inv;
                (a, self.beta[i] as f64 - a * self.mean[i] as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// 3×3, stride 1, zero padding 1.
    Conv2d(ConvParams),
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool2x2,
    /// 2×2, stride 2, no padding.
    TransposedConv2x2(ConvParams),
    Concat,
    /// 1×1 convolution producing class logits.
    Classifier(ConvParams),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::TransposedConv2x2(_) => "tconv2x2",
            Layer::Concat => "concat",
            Layer::Classifier(_) => "classifier",
        }
    }

    pub fn conv(&self) -> Option<&ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::TransposedConv2x2(p) | Layer::Classifier(p) => Some(p),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::TransposedConv2x2(p) | Layer::Classifier(p) => Some(p),
            _ => None,
        }
    }

    /// Spatial kernel size the layer requires, if it carries weights.
    pub fn expected_kernel(&self) -> Option<usize> {
        match self {
            Layer::Conv2d(_) => Some(3),
            Layer::TransposedConv2x2(_) => Some(2),
            Layer::Classifier(_) => Some(1),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueRef {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<ValueRef>,
    /// Grid of this node's output activation, once quantized.
    pub act_quant: Option<QuantParams>,
}

/// Preprocessing the model expects applied to raw cubes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preprocess {
    pub l1_normalize: bool,
    pub clip: Option<Vec<f32>>,
    /// Divide each channel by its clip value after clipping.
    pub rescale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    pub input: InputSpec,
    pub num_classes: usize,
    pub input_quant: Option<QuantParams>,
    pub preprocess: Preprocess,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub trainable: u64,
}

/// Multiply-accumulates plus elementwise work. `ops = 2·MACs + elementwise`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub macs: u64,
    pub elementwise: u64,
}

impl OpCount {
    pub fn ops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

impl ModelGraph {
    pub fn empty(input: InputSpec, num_classes: usize) -> Self {
        Self {
            nodes: Vec::new(),
            input,
            num_classes,
            input_quant: None,
            preprocess: Preprocess::default(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer, inputs: Vec<ValueRef>) -> ValueRef {
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs,
            act_quant: None,
        });
        ValueRef::Node(self.nodes.len() - 1)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn output(&self) -> Option<usize> {
        self.nodes.len().checked_sub(1)
    }

    /// Node indices consuming each node's output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for r in &n.inputs {
                if let ValueRef::Node(j) = r {
                    out[*j].push(i);
                }
            }
        }
        out
    }

    pub fn is_quantized(&self) -> bool {
        self.input_quant.is_some()
    }

    pub fn shape_of(&self, shapes: &[[usize; 3]], r: ValueRef) -> [usize; 3] {
        match r {
            ValueRef::Input => [self.input.channels, self.input.height, self.input.width],
            ValueRef::Node(i) => shapes[i],
        }
    }

    /// `[C, H, W]` of every node output for the declared input spec.
    pub fn infer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        self.infer_shapes_for(self.input.height, self.input.width)
    }

    pub fn infer_shapes_for(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.nodes.len());
        let input = [self.input.channels, height, width];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<[usize; 3]> = node
                .inputs
                .iter()
                .map(|r| match *r {
                    ValueRef::Input => Ok(input),
                    ValueRef::Node(j) if j < i => Ok(shapes[j]),
                    ValueRef::Node(j) => Err(Error::Graph(format!(
                        "`{}` consumes node {j}, which is not earlier in topological order",
                        node.name
                    ))),
                })
                .collect::<Result<_>>()?;
            let err = |msg: String| Error::Shape(format!("`{}`: {msg}", node.name));
            let single = |ins: &[[usize; 3]]| -> Result<[usize; 3]> {
                match ins {
                    [s] => Ok(*s),
                    _ => Err(err(format!("expects one input, got {}", ins.len()))),
                }
            };
            let shape = match &node.layer {
                Layer::Conv2d(p) | Layer::Classifier(p) | Layer::TransposedConv2x2(p) => {
                    let [c, h, w] = single(&ins)?;
                    let k = node.layer.expected_kernel().unwrap();
                    if p.kernel() != k || p.weight.shape()[3] != k {
                        return Err(err(format!("kernel must be {k}x{k}, got {:?}", p.weight.shape())));
                    }
                    if p.in_channels() != c {
                        return Err(err(format!("expects {} input channels, got {c}", p.in_channels())));
                    }
                    if p.bias.len() != p.out_channels() {
                        return Err(err("bias length differs from output channels".into()));
                    }
                    match node.layer {
                        Layer::TransposedConv2x2(_) => [p.out_channels(), 2 * h, 2 * w],
                        _ => [p.out_channels(), h, w],
                    }
                }
                Layer::BatchNorm(bn) => {
                    let s = single(&ins)?;
                    if bn.channels() != s[0] {
                        return Err(err(format!("{} channels vs input {}", bn.channels(), s[0])));
                    }
                    s
                }
                Layer::Relu => single(&ins)?,
                Layer::MaxPool2x2 => {
                    let [c, h, w] = single(&ins)?;
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(err(format!("odd spatial size {h}x{w}")));
                    }
                    [c, h / 2, w / 2]
                }
                Layer::Concat => {
                    if ins.len() < 2 {
                        return Err(err("concat needs at least two inputs".into()));
                    }
                    let (h, w) = (ins[0][1], ins[0][2]);
                    if ins.iter().any(|s| s[1] != h || s[2] != w) {
                        return Err(err(format!("spatial mismatch {ins:?}")));
                    }
                    [ins.iter().map(|s| s[0]).sum(), h, w]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Structural checks: topological order, reachability, one classifier
    /// as the final output, consistent shapes.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.infer_shapes()?;
        let mut reachable = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.is_empty() {
                return Err(Error::Graph(format!("`{}` has no inputs", n.name)));
            }
            reachable[i] = n.inputs.iter().all(|r| match r {
                ValueRef::Input => true,
                ValueRef::Node(j) => reachable[*j],
            });
            if !reachable[i] {
                return Err(Error::Graph(format!("`{}` unreachable from the input", n.name)));
            }
        }
        let classifiers: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.layer, Layer::Classifier(_)))
            .map(|(i, _)| i)
            .collect();
        if classifiers.len() != 1 || Some(classifiers[0]) != self.output() {
            return Err(Error::Graph("exactly one classifier must be the final node".into()));
        }
        let out = shapes[classifiers[0]];
        if out[0] != self.num_classes {
            return Err(Error::Graph(format!(
                "classifier emits {} channels for {} classes",
                out[0], self.num_classes
            )));
        }
        let mut names: Vec<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Graph("duplicate node names".into()));
        }
        Ok(())
    }

    /// Total parameters include BN moving statistics; trainable ones do not.
    pub fn count_params(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for n in &self.nodes {
            match &n.layer {
                Layer::Conv2d(p) | Layer::TransposedConv2x2(p) | Layer::Classifier(p) => {
                    let k = (p.weight.len() + p.bias.len()) as u64;
                    c.total += k;
                    c.trainable += k;
                }
                Layer::BatchNorm(bn) => {
                    let ch = bn.channels() as u64;
                    c.total += 4 * ch;
                    c.trainable += 2 * ch;
                }
                _ => {}
            }
        }
        c
    }

    /// Work for one `height × width` input. A MAC is one multiply plus one add;
    /// elementwise ops count BN as 2 per element, ReLU as 1, and each 2×2 max
    /// as 3 comparisons.
    pub fn count_ops(&self, height: usize, width: usize) -> Result<OpCount> {
        let shapes = self.infer_shapes_for(height, width)?;
        let mut c = OpCount::default();
        for (i, n) in self.nodes.iter().enumerate() {
            let [oc, oh, ow] = shapes[i];
            let out_elems = (oc * oh * ow) as u64;
            match &n.layer {
                Layer::Conv2d(p) | Layer::Classifier(p) => {
                    c.macs += out_elems * p.fan_in() as u64;
                }
                Layer::TransposedConv2x2(p) => {
                    // every output pixel sees exactly one input pixel per channel
                    c.macs += out_elems * p.in_channels() as u64;
                }
                Layer::BatchNorm(_) => c.elementwise += 2 * out_elems,
                Layer::Relu => c.elementwise += out_elems,
                Layer::MaxPool2x2 => c.elementwise += 3 * out_elems,
                Layer::Concat => {}
            }
        }
        Ok(c)
    }

    /// He-uniform weights, small random biases and BN statistics.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in &mut self.nodes {
            match &mut n.layer {
                Layer::Conv2d(p) | Layer::TransposedConv2x2(p) | Layer::Classifier(p) => {
                    let bound = (6.0 / p.fan_in() as f32).sqrt();
                    for w in p.weight.data_mut() {
                        *w = rng.random_range(-bound..bound);
                    }
                    for b in &mut p.bias {
                        *b = rng.random_range(-0.1..0.1);
                    }
                }
                Layer::BatchNorm(bn) => {
                    for i in 0..bn.channels() {
                        bn.gamma[i] = rng.random_range(0.5..1.5);
                        bn.beta[i] = rng.random_range(-0.2..0.2);
                        bn.mean[i] = rng.random_range(-0.2..0.2);
                        bn.var[i] = rng.random_range(0.5..1.5);
                    }
                }
                _ => {}
            }
        }
    }
}

fn conv_bn_relu(m: &mut ModelGraph, prefix: &str, tag: &str, x: ValueRef, cin: usize, cout: usize) -> ValueRef {
    let c = m.push(
        format!("{prefix}.conv_{tag}"),
        Layer::Conv2d(ConvParams::zeros(cout, cin, 3)),
        vec![x],
    );
    let b = m.push(
        format!("{prefix}.bn_{tag}"),
        Layer::BatchNorm(BatchNormParams::identity(cout)),
        vec![c],
    );
    m.push(format!("{prefix}.relu_{tag}"), Layer::Relu, vec![b])
}

/// Encoder-decoder FCN: per encoder level two Conv3x3→BN→ReLU blocks then a
/// 2×2 max-pool, filters doubling per level, a bottleneck of two more blocks,
/// and a mirrored decoder of 2×2 transposed convolutions, skip concatenations
/// and two blocks per level, ending in a 1×1 classifier.
///
/// Weights start at zero and BN at identity; see [`ModelGraph::init_random`].
pub fn build_fcn(cfg: &ArchConfig, height: usize, width: usize) -> Result<ModelGraph> {
    cfg.validate()?;
    let unit = 1usize << cfg.depth;
    if height == 0 || width == 0 || height % unit != 0 || width % unit != 0 {
        return Err(Error::Config(format!(
            "input {height}x{width} is not a multiple of 2^{} = {unit}",
            cfg.depth
        )));
    }
    let input = InputSpec {
        height,
        width,
        channels: cfg.in_channels,
    };
    let mut m = ModelGraph::empty(input, cfg.num_classes);
    let mut x = ValueRef::Input;
    let mut ch = cfg.in_channels;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let f = cfg.base_filters << level;
        let p = format!("enc{level}");
        x = conv_bn_relu(&mut m, &p, "a", x, ch, f);
        x = conv_bn_relu(&mut m, &p, "b", x, f, f);
        skips.push((x, f));
        x = m.push(format!("{p}.pool"), Layer::MaxPool2x2, vec![x]);
        ch = f;
    }
    let f = cfg.base_filters << cfg.depth;
    x = conv_bn_relu(&mut m, "mid", "a", x, ch, f);
    x = conv_bn_relu(&mut m, "mid", "b", x, f, f);
    ch = f;
    for level in (0..cfg.depth).rev() {
        let (skip, sf) = skips[level];
        let p = format!("dec{level}");
        let up = m.push(
            format!("{p}.up"),
            Layer::TransposedConv2x2(ConvParams::zeros(sf, ch, 2)),
            vec![x],
        );
        let cat = m.push(format!("{p}.cat"), Layer::Concat, vec![skip, up]);
        x = conv_bn_relu(&mut m, &p, "a", cat, 2 * sf, sf);
        x = conv_bn_relu(&mut m, &p, "b", x, sf, sf);
        ch = sf;
    }
    m.push(
        "head",
        Layer::Classifier(ConvParams::zeros(cfg.num_classes, ch, 1)),
        vec![x],
    );
    m.validate()?;
    Ok(m)
}
