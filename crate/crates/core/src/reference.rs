//! Floating-point reference engine.

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{ConvParams, Layer, ModelGraph, Preprocess, ValueRef};
use crate::tensor::Tensor;

/// Per-pixel L1 normalisation of a `[C, H, W]` cube. All-zero spectra stay zero.
pub fn l1_normalize(cube: &mut Tensor<f32>) -> Result<()> {
    let (c, h, w) = cube.chw()?;
    let px = h * w;
    let data = cube.data_mut();
    for p in 0..px {
        let norm: f64 = (0..c).map(|k| data[k * px + p].abs() as f64).sum();
        if norm > 0.0 {
            for k in 0..c {
                data[k * px + p] = (data[k * px + p] as f64 / norm) as f32;
            }
        }
    }
    Ok(())
}

/// Applies the model's preprocessing to a raw cube.
pub fn preprocess(p: &Preprocess, cube: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut x = cube.clone();
    if p.l1_normalize {
        l1_normalize(&mut x)?;
    }
    if let Some(clip) = &p.clip {
        let (c, h, w) = x.chw()?;
        if clip.len() != c {
            return Err(Error::Shape(format!("{} clip values for {c} channels", clip.len())));
        }
        let px = h * w;
        for (k, plane) in x.data_mut().chunks_mut(px).enumerate() {
            let cv = clip[k];
            for v in plane.iter_mut() {
                *v = v.min(cv);
                if p.rescale && cv > 0.0 {
                    *v /= cv;
                }
            }
        }
    }
    Ok(x)
}

fn check_conv(p: &ConvParams, c: usize, name: &str) -> Result<()> {
    if p.in_channels() != c {
        return Err(Error::Shape(format!(
            "{name} expects {} input channels, got {c}",
            p.in_channels()
        )));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Evaluates one layer on `[C, H, W]` inputs.
pub fn eval_layer(layer: &Layer, inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let kind = layer.kind_name();
    let single = || -> Result<&Tensor<f32>> {
        match inputs {
            [x] => Ok(*x),
            _ => Err(Error::Shape(format!("{kind} expects one input, got {}", inputs.len()))),
        }
    };
    match layer {
        Layer::Conv2d(p) | Layer::Classifier(p) => {
            let x = single()?;
            let (c, h, w) = x.chw()?;
            check_conv(p, c, kind)?;
            let k = layer.expected_kernel().unwrap();
            if p.kernel() != k {
                return Err(Error::Shape(format!("{kind} needs a {k}x{k} kernel")));
            }
            let y = kernels::conv_same(x.data(), (c, h, w), p.weight.data(), &p.bias, k, 0.0);
            Tensor::from_vec(vec![p.out_channels(), h, w], y)
        }
        Layer::TransposedConv2x2(p) => {
            let x = single()?;
            let (c, h, w) = x.chw()?;
            check_conv(p, c, kind)?;
            let y = kernels::transposed_conv2x2(x.data(), (c, h, w), p.weight.data(), &p.bias);
            Tensor::from_vec(vec![p.out_channels(), 2 * h, 2 * w], y)
        }
        Layer::BatchNorm(bn) => {
            let x = single()?;
            let (c, h, w) = x.chw()?;
            bn.validate(kind)?;
            if bn.channels() != c {
                return Err(Error::Shape(format!("batchnorm over {} channels, got {c}", bn.channels())));
            }
            let mut y = x.clone();
            for (plane, (a, b)) in y.data_mut().chunks_mut(h * w).zip(bn.affine()) {
                let (a, b) = (a as f32, b as f32);
                for v in plane {
                    *v = a * *v + b;
                }
            }
            Ok(y)
        }
        Layer::Relu => Ok(single()?.map(|&v| v.max(0.0))),
        Layer::MaxPool2x2 => {
            let x = single()?;
            let (c, h, w) = x.chw()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Shape(format!("max-pool over odd size {h}x{w}")));
            }
            Tensor::from_vec(vec![c, h / 2, w / 2], kernels::maxpool2x2(x.data(), (c, h, w)))
        }
        Layer::Concat => concat(inputs),
    }
}

/// Channel concatenation, generic over the sample type.
pub fn concat<T: Clone>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if inputs.len() < 2 {
        return Err(Error::Shape("concat needs at least two inputs".into()));
    }
    let (_, h, w) = inputs[0].chw()?;
    let mut c = 0;
    let mut data = Vec::new();
    for x in inputs {
        let (ci, hi, wi) = x.chw()?;
        if (hi, wi) != (h, w) {
            return Err(Error::Shape(format!("concat of {h}x{w} with {hi}x{wi}")));
        }
        c += ci;
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(vec![c, h, w], data)
}

/// Index after which each value (input first, then nodes) is no longer read.
pub(crate) fn last_uses(m: &ModelGraph) -> (usize, Vec<usize>) {
    let mut input_last = 0;
    let mut last: Vec<usize> = (0..m.nodes.len()).collect();
    for (i, n) in m.nodes.iter().enumerate() {
        for r in &n.inputs {
            match *r {
                ValueRef::Input => input_last = i,
                ValueRef::Node(j) => last[j] = last[j].max(i),
            }
        }
    }
    (input_last, last)
}

/// Runs the graph on an already preprocessed input and hands every node output
/// to `visit` in topological order. Values are freed after their last use.
pub fn run_graph<T: Clone>(
    m: &ModelGraph,
    input: Tensor<T>,
    mut eval: impl FnMut(usize, &[&Tensor<T>]) -> Result<Tensor<T>>,
    mut visit: impl FnMut(usize, &Tensor<T>) -> Result<()>,
) -> Result<Tensor<T>> {
    if m.nodes.is_empty() {
        return Err(Error::Graph("model has no nodes".into()));
    }
    let (c, _, _) = input.chw()?;
    if c != m.input.channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, model expects {}",
            m.input.channels
        )));
    }
    let (input_last, last) = last_uses(m);
    let mut input = Some(input);
    let mut values: Vec<Option<Tensor<T>>> = vec![None; m.nodes.len()];
    for (i, node) in m.nodes.iter().enumerate() {
        let ins: Vec<&Tensor<T>> = node
            .inputs
            .iter()
            .map(|r| match *r {
                ValueRef::Input => input.as_ref(),
                ValueRef::Node(j) => values.get(j).and_then(Option::as_ref),
            })
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Graph(format!("`{}` reads an unavailable value", node.name)))?;
        let y = eval(i, &ins).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("`{}`: {msg}", node.name)),
            other => other,
        })?;
        visit(i, &y)?;
        values[i] = Some(y);
        if input_last <= i {
            input = None;
        }
        for (j, &l) in last.iter().enumerate().take(i) {
            if l <= i {
                values[j] = None;
            }
        }
    }
    Ok(values.pop().flatten().unwrap())
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor<f32>,
    /// `[H·W]` class indices, row-major.
    pub labels: Vec<u8>,
}

/// Preprocesses `cube` and runs the float graph.
pub fn forward(m: &ModelGraph, cube: &Tensor<f32>) -> Result<Prediction> {
    let x = preprocess(&m.preprocess, cube)?;
    let logits = run_graph(m, x, |i, ins| eval_layer(&m.nodes[i].layer, ins), |_, _| Ok(()))?;
    let (c, h, w) = logits.chw()?;
    let labels = kernels::argmax_planes(logits.data(), c, h * w);
    Ok(Prediction { logits, labels })
}

/// Every node output for a preprocessed input, in node order.
pub fn forward_trace(m: &ModelGraph, x: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    let mut trace = Vec::with_capacity(m.nodes.len());
    run_graph(
        m,
        x.clone(),
        |i, ins| eval_layer(&m.nodes[i].layer, ins),
        |_, y| {
            trace.push(y.clone());
            Ok(())
        },
    )?;
    Ok(trace)
}
