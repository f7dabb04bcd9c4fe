//! Post-training quantization of a float graph, and the fake-quant oracle.
//!
//! Weights are symmetric signed, inputs symmetric signed, activations unsigned
//! with a zero-point (zero for ReLU outputs unless anchoring is disabled), and
//! biases wide signed at `s_w·s_x` with `−z_x·ΣW_int` folded in.

use std::fmt::Write as _;

use crate::calibration::{
    anchored, asymmetric_at, asymmetric_params, minmax_bits_for_max, minmax_fraction_bits,
    minmse_fraction_bits, window, MseAccumulator,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::manifest::{format_qparams, Record};
use crate::model::{ConvParams, ConvQuant, Layer, ModelGraph, ValueRef};
use crate::reference::{self, concat, forward_trace, run_graph, Prediction};
use crate::tensor::{
    dequantize_value, fake_quantize_value, pow2, quantize_affine, quantize_value, QuantParams,
    RoundMode, Tensor,
};
use crate::transforms::fold_batch_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizationRecipe {
    pub data_bits: u32,
    pub bias_bits: u32,
    pub weight_minmse: bool,
    pub activation_minmse: bool,
    /// Put ReLU outputs on a zero-anchored unsigned grid.
    pub anchor_relu: bool,
}

impl Default for QuantizationRecipe {
    fn default() -> Self {
        Self {
            data_bits: 8,
            bias_bits: 32,
            weight_minmse: true,
            activation_minmse: true,
            anchor_relu: true,
        }
    }
}

impl QuantizationRecipe {
    /// Range-preserving Min-Max everywhere.
    pub fn minmax() -> Self {
        Self {
            weight_minmse: false,
            activation_minmse: false,
            ..Self::default()
        }
    }

    /// Whether the result must run on 32-bit integer accumulators.
    pub fn integer_target(&self) -> bool {
        self.data_bits <= 8 && self.bias_bits <= 32
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=24).contains(&self.data_bits) || !(8..=48).contains(&self.bias_bits) {
            return Err(Error::Config(format!(
                "unsupported widths: data {} bias {}",
                self.data_bits, self.bias_bits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub input: QuantParams,
    pub weight: QuantParams,
    pub output: Option<QuantParams>,
    pub shift: Option<i32>,
    pub headroom: i64,
    pub weight_saturated: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantReport {
    pub layers: Vec<LayerReport>,
    pub warnings: Vec<String>,
}

impl QuantReport {
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("QREP1 1\n");
        for l in &self.layers {
            let mut r = Record::new("layer")
                .arg(&l.name)
                .set("in", format_qparams(&l.input))
                .set("w", format_qparams(&l.weight))
                .set("headroom", l.headroom)
                .set("wsat", l.weight_saturated);
            if let Some(q) = &l.output {
                r = r.set("out", format_qparams(q));
            }
            if let Some(s) = l.shift {
                r = r.set("shift", s);
            }
            writeln!(out, "{r}").unwrap();
        }
        for w in &self.warnings {
            writeln!(out, "# {w}").unwrap();
        }
        out
    }
}

fn value_params(m: &ModelGraph, r: ValueRef) -> Result<QuantParams> {
    match r {
        ValueRef::Input => m.input_quant.ok_or_else(|| Error::MissingQParams("input".into())),
        ValueRef::Node(j) => m.nodes[j]
            .act_quant
            .ok_or_else(|| Error::MissingQParams(m.nodes[j].name.clone())),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ActKind {
    Anchored,
    Free,
}

/// Folds any remaining BatchNorm, then assigns every tensor a grid using the
/// calibration cubes (raw; the model's preprocessing is applied here).
pub fn quantize_model(
    m: &ModelGraph,
    calib: &[Tensor<f32>],
    recipe: &QuantizationRecipe,
) -> Result<(ModelGraph, QuantReport)> {
    recipe.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    if m.is_quantized() {
        return Err(Error::Config("model is already quantized".into()));
    }
    let mut q = if m.nodes.iter().any(|n| matches!(n.layer, Layer::BatchNorm(_))) {
        fold_batch_norm(m)?
    } else {
        m.clone()
    };
    q.validate()?;
    let bits = recipe.data_bits;
    let mut report = QuantReport::default();
    let inputs: Vec<Tensor<f32>> = calib
        .iter()
        .map(|c| reference::preprocess(&q.preprocess, c))
        .collect::<Result<_>>()?;

    let all_inputs: Vec<f32> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    q.input_quant = Some(QuantParams::symmetric(minmax_fraction_bits(&all_inputs, bits, true)?, bits));
    drop(all_inputs);

    let consumers = q.consumers();
    let kinds: Vec<Option<ActKind>> = q
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| match n.layer {
            Layer::Conv2d(_) | Layer::TransposedConv2x2(_) => {
                let relu_next = matches!(consumers[i][..], [r] if matches!(q.nodes[r].layer, Layer::Relu));
                Some(if relu_next && recipe.anchor_relu {
                    ActKind::Anchored
                } else {
                    ActKind::Free
                })
            }
            _ => None,
        })
        .collect();

    // pass 1: float ranges of every node output
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); q.nodes.len()];
    for x in &inputs {
        for (i, y) in forward_trace(&q, x)?.iter().enumerate() {
            let r = &mut ranges[i];
            for &v in y.data() {
                r.0 = r.0.min(v as f64);
                r.1 = r.1.max(v as f64);
            }
        }
    }

    let minmax_grid = |i: usize| -> QuantParams {
        let (lo, hi) = ranges[i];
        match kinds[i] {
            Some(ActKind::Anchored) => anchored(minmax_bits_for_max(hi.max(0.0), bits, false), bits, false),
            _ => asymmetric_params(lo, hi, bits),
        }
    };
    let mut grids: Vec<Option<QuantParams>> = (0..q.nodes.len())
        .map(|i| kinds[i].map(|_| minmax_grid(i)))
        .collect();
    for (i, g) in grids.iter().enumerate() {
        let (lo, hi) = ranges[i];
        let degenerate = match kinds[i] {
            Some(ActKind::Anchored) => hi <= 0.0,
            Some(ActKind::Free) => lo >= 0.0 && hi <= 0.0,
            None => false,
        };
        if g.is_some() && degenerate {
            let msg = format!("`{}`: all-zero calibration activations, default grid", q.nodes[i].name);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }

    // pass 2: streaming MSE over a window around each Min-Max grid
    if recipe.activation_minmse {
        let mut accs: Vec<Option<MseAccumulator>> = (0..q.nodes.len())
            .map(|i| {
                let g = grids[i]?;
                let (lo, _) = ranges[i];
                let cands = window(g.fraction_bits)
                    .map(|f| match kinds[i] {
                        Some(ActKind::Anchored) => anchored(f, bits, false),
                        _ => asymmetric_at(lo, f, bits),
                    })
                    .collect();
                Some(MseAccumulator::new(cands, RoundMode::HalfUp))
            })
            .collect();
        for x in &inputs {
            for (i, y) in forward_trace(&q, x)?.iter().enumerate() {
                if let Some(acc) = &mut accs[i] {
                    if kinds[i] == Some(ActKind::Anchored) {
                        let relu: Vec<f32> = y.data().iter().map(|v| v.max(0.0)).collect();
                        acc.push(&relu);
                    } else {
                        acc.push(y.data());
                    }
                }
            }
        }
        for (i, acc) in accs.into_iter().enumerate() {
            if let Some(acc) = acc {
                grids[i] = Some(acc.best());
            }
        }
    }

    // propagate grids in topological order
    for i in 0..q.nodes.len() {
        let grid = match &q.nodes[i].layer {
            Layer::Conv2d(_) | Layer::TransposedConv2x2(_) => grids[i],
            Layer::Relu | Layer::MaxPool2x2 => Some(value_params(&q, q.nodes[i].inputs[0])?),
            Layer::Concat => {
                let ins: Vec<QuantParams> = q.nodes[i]
                    .inputs
                    .iter()
                    .map(|r| value_params(&q, *r))
                    .collect::<Result<_>>()?;
                let (lo, hi) = ranges[i];
                let f = ins
                    .iter()
                    .map(|p| p.fraction_bits)
                    .chain([asymmetric_params(lo, hi, bits).fraction_bits])
                    .min()
                    .unwrap();
                Some(asymmetric_at(lo, f, bits))
            }
            Layer::Classifier(_) => None,
            Layer::BatchNorm(_) => unreachable!("folded above"),
        };
        q.nodes[i].act_quant = grid;
    }

    // weights and biases
    for i in 0..q.nodes.len() {
        let Some(p) = q.nodes[i].layer.conv() else { continue };
        let xq = value_params(&q, q.nodes[i].inputs[0])?;
        let (cq, layer) = quantize_conv(&q.nodes[i].name, p, xq, q.nodes[i].act_quant, recipe)?;
        report.layers.push(layer);
        q.nodes[i].layer.conv_mut().unwrap().quant = Some(cq);
    }
    q.validate()?;
    Ok((q, report))
}

/// Integer weights and bias of one convolution reading grid `xq` and writing
/// grid `out` (`None` for the classifier accumulators).
///
/// For kernels with a single spatial phase the `−z_x·ΣW_int` term is folded
/// into the bias. A transposed convolution sees a different weight subset at
/// each output parity, so its engine subtracts `z_x` from the input instead.
pub fn quantize_conv(
    name: &str,
    p: &ConvParams,
    xq: QuantParams,
    out: Option<QuantParams>,
    recipe: &QuantizationRecipe,
) -> Result<(ConvQuant, LayerReport)> {
    let bits = recipe.data_bits;
    let wdata = p.weight.data();
    let fw = if recipe.weight_minmse {
        minmse_fraction_bits(wdata, bits, true)?
    } else {
        minmax_fraction_bits(wdata, bits, true)?
    };
    let wq = QuantParams::symmetric(fw, bits);
    let wint = quantize_affine(&p.weight, &wq);
    let bq = QuantParams::symmetric(fw + xq.fraction_bits, recipe.bias_bits);
    let per = p.fan_in();
    let (blo, bhi) = bq.range();
    let xmax = {
        let (lo, hi) = xq.range();
        lo.abs().max(hi.abs())
    };
    let fold_z = if p.kernel() == 2 { 0 } else { xq.zero_point as i64 };
    let mut bias_int = Vec::with_capacity(p.out_channels());
    let mut headroom = 0i64;
    for (o, &b) in p.bias.iter().enumerate() {
        let (bv, sat) = quantize_value(b as f64, &bq, RoundMode::HalfAwayFromZero);
        let row = &wint.values.data()[o * per..(o + 1) * per];
        let wsum: i64 = row.iter().map(|&w| w as i64).sum();
        let folded = bv - fold_z * wsum;
        if sat || folded < blo || folded > bhi {
            return Err(Error::BiasOverflow(name.to_string()));
        }
        let abs_sum: i64 = row.iter().map(|&w| (w as i64).abs()).sum();
        headroom = headroom.max(abs_sum * xmax + folded.abs());
        bias_int.push(folded);
    }
    if recipe.integer_target() && headroom > i32::MAX as i64 {
        return Err(Error::AccumulatorHeadroom {
            layer: name.to_string(),
            bound: headroom,
        });
    }
    let shift = out.map(|y| fw + xq.fraction_bits - y.fraction_bits);
    if let Some(s) = shift {
        if !(-31..=31).contains(&s) {
            return Err(Error::ShiftRange {
                layer: name.to_string(),
                shift: s,
            });
        }
    }
    let report = LayerReport {
        name: name.to_string(),
        input: xq,
        weight: wq,
        output: out,
        shift,
        headroom,
        weight_saturated: wint.saturated,
    };
    let cq = ConvQuant {
        input: xq,
        weight: wq,
        bias: bq,
        weight_int: wint.values,
        bias_int,
    };
    Ok((cq, report))
}

fn conv_quant<'a>(m: &'a ModelGraph, i: usize) -> Result<&'a ConvQuant> {
    m.nodes[i]
        .layer
        .conv()
        .and_then(|p| p.quant.as_ref())
        .ok_or_else(|| Error::MissingQParams(m.nodes[i].name.clone()))
}

/// Float evaluation in `f64` on dequantized parameters, snapping every
/// activation to its grid with the integer engine's rounding.
fn fake_quant_node(m: &ModelGraph, i: usize, ins: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
    let node = &m.nodes[i];
    let x = ins[0];
    let mut y = match &node.layer {
        Layer::Conv2d(p) | Layer::Classifier(p) | Layer::TransposedConv2x2(p) => {
            let cq = conv_quant(m, i)?;
            let (c, h, w) = x.chw()?;
            if c != p.in_channels() {
                return Err(Error::Shape(format!("expects {} channels, got {c}", p.in_channels())));
            }
            let wf: Vec<f64> = cq
                .weight_int
                .data()
                .iter()
                .map(|&v| dequantize_value(v as i64, &cq.weight))
                .collect();
            let bf: Vec<f64> = p
                .bias
                .iter()
                .map(|&b| fake_quantize_value(b as f64, &cq.bias, RoundMode::HalfAwayFromZero))
                .collect();
            match node.layer {
                Layer::TransposedConv2x2(_) => Tensor::from_vec(
                    vec![p.out_channels(), 2 * h, 2 * w],
                    kernels::transposed_conv2x2(x.data(), (c, h, w), &wf, &bf),
                )?,
                _ => Tensor::from_vec(
                    vec![p.out_channels(), h, w],
                    kernels::conv_same(x.data(), (c, h, w), &wf, &bf, p.kernel(), 0.0),
                )?,
            }
        }
        Layer::Relu => x.map(|&v| v.max(0.0)),
        Layer::MaxPool2x2 => {
            let (c, h, w) = x.chw()?;
            Tensor::from_vec(vec![c, h / 2, w / 2], kernels::maxpool2x2(x.data(), (c, h, w)))?
        }
        Layer::Concat => concat(ins)?,
        Layer::BatchNorm(_) => return Err(Error::Unsupported("batch norm in a quantized graph".into())),
    };
    if let Some(g) = &node.act_quant {
        for v in y.data_mut() {
            *v = fake_quantize_value(*v, g, RoundMode::HalfUp);
        }
    } else if !matches!(node.layer, Layer::Classifier(_)) {
        return Err(Error::MissingQParams(node.name.clone()));
    }
    Ok(y)
}

fn fake_quant_input(m: &ModelGraph, cube: &Tensor<f32>) -> Result<Tensor<f64>> {
    let iq = m.input_quant.ok_or_else(|| Error::MissingQParams("input".into()))?;
    let x = reference::preprocess(&m.preprocess, cube)?;
    Ok(x.map(|&v| fake_quantize_value(v as f64, &iq, RoundMode::HalfAwayFromZero)))
}

/// Logits (in real units) and labels of the fake-quantized graph.
pub fn fake_quant_forward(m: &ModelGraph, cube: &Tensor<f32>) -> Result<(Tensor<f64>, Vec<u8>)> {
    let x = fake_quant_input(m, cube)?;
    let logits = run_graph(m, x, |i, ins| fake_quant_node(m, i, ins), |_, _| Ok(()))?;
    let (c, h, w) = logits.chw()?;
    let labels = kernels::argmax_planes(logits.data(), c, h * w);
    Ok((logits, labels))
}

pub fn fake_quant_prediction(m: &ModelGraph, cube: &Tensor<f32>) -> Result<Prediction> {
    let (logits, labels) = fake_quant_forward(m, cube)?;
    Ok(Prediction {
        logits: logits.map(|&v| v as f32),
        labels,
    })
}

/// Integer image of every node output: grid indices for activations and
/// accumulator values (at `s_w·s_x`) for the classifier.
pub fn fake_quant_trace(m: &ModelGraph, cube: &Tensor<f32>) -> Result<Vec<Tensor<i32>>> {
    let x = fake_quant_input(m, cube)?;
    let mut trace = Vec::with_capacity(m.nodes.len());
    run_graph(
        m,
        x,
        |i, ins| fake_quant_node(m, i, ins),
        |i, y| {
            let (scale_bits, zero) = match &m.nodes[i].act_quant {
                Some(g) => (g.fraction_bits, g.zero_point as f64),
                None => {
                    let cq = conv_quant(m, i)?;
                    (cq.bias.fraction_bits, 0.0)
                }
            };
            let k = pow2(scale_bits);
            trace.push(y.map(|&v| (v * k + zero) as i32));
            Ok(())
        },
    )?;
    Ok(trace)
}
