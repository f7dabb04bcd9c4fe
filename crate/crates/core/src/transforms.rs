//! Function-preserving rewrites applied before quantization.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::manifest::{self, Record};
use crate::model::{Layer, ModelGraph, ValueRef};

/// Drops the flagged nodes, pointing their readers at `redirect[i]`.
fn compact(m: &ModelGraph, remove: &[bool], redirect: &[ValueRef]) -> ModelGraph {
    let resolve = |mut r: ValueRef| {
        while let ValueRef::Node(j) = r {
            if !remove[j] {
                break;
            }
            r = redirect[j];
        }
        r
    };
    let mut new_index = vec![usize::MAX; m.nodes.len()];
    let mut out = ModelGraph {
        nodes: Vec::new(),
        ..m.clone()
    };
    for (i, node) in m.nodes.iter().enumerate() {
        if remove[i] {
            continue;
        }
        let mut node = node.clone();
        for r in &mut node.inputs {
            *r = match resolve(*r) {
                ValueRef::Node(j) => ValueRef::Node(new_index[j]),
                ValueRef::Input => ValueRef::Input,
            };
        }
        new_index[i] = out.nodes.len();
        out.nodes.push(node);
    }
    out
}

fn ensure_float(m: &ModelGraph, what: &str) -> Result<()> {
    if m.is_quantized() {
        return Err(Error::Config(format!("{what} requires a float model")));
    }
    Ok(())
}

/// Merges every BatchNorm into the convolution feeding it.
pub fn fold_batch_norm(m: &ModelGraph) -> Result<ModelGraph> {
    ensure_float(m, "batch-norm folding")?;
    let consumers = m.consumers();
    let mut folded = m.clone();
    let mut remove = vec![false; m.nodes.len()];
    let mut redirect: Vec<ValueRef> = (0..m.nodes.len()).map(ValueRef::Node).collect();
    for (i, node) in m.nodes.iter().enumerate() {
        let Layer::BatchNorm(bn) = &node.layer else { continue };
        bn.validate(&node.name)?;
        let j = match node.inputs[..] {
            [ValueRef::Node(j)] if m.nodes[j].layer.conv().is_some() && consumers[j] == [i] => j,
            _ => return Err(Error::BatchNormNotAfterConv(node.name.clone())),
        };
        let p = folded.nodes[j].layer.conv_mut().unwrap();
        let per = p.fan_in();
        for (o, (a, b)) in bn.affine().into_iter().enumerate() {
            for w in &mut p.weight.data_mut()[o * per..(o + 1) * per] {
                *w = (a * *w as f64) as f32;
            }
            p.bias[o] = (a * p.bias[o] as f64 + b) as f32;
        }
        remove[i] = true;
        redirect[i] = ValueRef::Node(j);
    }
    Ok(compact(&folded, &remove, &redirect))
}

/// `(γ, β)` per output channel of every convolution that fed a BatchNorm,
/// describing its pre-activation distribution after folding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    pub layers: BTreeMap<String, Vec<(f64, f64)>>,
}

impl BnStats {
    /// Must be taken before [`fold_batch_norm`].
    pub fn collect(m: &ModelGraph) -> Self {
        let mut layers = BTreeMap::new();
        for node in &m.nodes {
            if let (Layer::BatchNorm(bn), [ValueRef::Node(j)]) = (&node.layer, &node.inputs[..]) {
                let stats = bn
                    .gamma
                    .iter()
                    .zip(&bn.beta)
                    .map(|(&g, &b)| (g as f64, b as f64))
                    .collect();
                layers.insert(m.nodes[*j].name.clone(), stats);
            }
        }
        Self { layers }
    }

    /// Follows the channel scaling equalization applied to each first layer.
    pub fn apply_equalization(&mut self, report: &EqualizationReport) {
        for pair in &report.pairs {
            if let Some(stats) = self.layers.get_mut(&pair.first) {
                for (st, &s) in stats.iter_mut().zip(&pair.scales) {
                    st.0 /= s;
                    st.1 /= s;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairReport {
    pub first: String,
    pub second: String,
    pub scales: Vec<f64>,
    pub spread_before: f64,
    pub spread_after: f64,
    /// Per-channel ranges of both layers right after this pair was equalized.
    pub ranges_after: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EqualizationReport {
    pub pairs: Vec<PairReport>,
}

pub const CLE_MAGIC: &str = "CLE1";

impl EqualizationReport {
    pub fn to_manifest(&self) -> String {
        let mut out = format!("{CLE_MAGIC} 1\n");
        for p in &self.pairs {
            let r = Record::new("pair")
                .set("first", &p.first)
                .set("second", &p.second)
                .set("spread_before", p.spread_before)
                .set("spread_after", p.spread_after)
                .set("scales", manifest::format_list(&p.scales, ','));
            writeln!(out, "{r}").unwrap();
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let records = manifest::parse_records(text);
        let mut pairs = Vec::new();
        for r in manifest::expect_header(&records, CLE_MAGIC, 1)? {
            if r.tag != "pair" {
                continue;
            }
            pairs.push(PairReport {
                first: r.get("first")?.to_string(),
                second: r.get("second")?.to_string(),
                scales: manifest::parse_list(r.get("scales")?, ',')?,
                spread_before: r.parse("spread_before")?,
                spread_after: r.parse("spread_after")?,
                ranges_after: Vec::new(),
            });
        }
        Ok(Self { pairs })
    }
}

/// Conv-like node `i` whose only reader is a ReLU whose only reader is another
/// conv-like node: returns `(relu, second)`.
fn relu_pair(m: &ModelGraph, consumers: &[Vec<usize>], i: usize) -> Option<(usize, usize)> {
    m.nodes[i].layer.conv()?;
    let [r] = consumers[i][..] else { return None };
    if !matches!(m.nodes[r].layer, Layer::Relu) {
        return None;
    }
    let [j] = consumers[r][..] else { return None };
    m.nodes[j].layer.conv()?;
    Some((r, j))
}

/// Max |w| per output channel.
pub fn output_channel_ranges(m: &ModelGraph, i: usize) -> Vec<f64> {
    let p = m.nodes[i].layer.conv().unwrap();
    p.weight
        .data()
        .chunks(p.fan_in())
        .map(|ch| ch.iter().fold(0f64, |a, &w| a.max(w.abs() as f64)))
        .collect()
}

/// Max |w| per input channel.
pub fn input_channel_ranges(m: &ModelGraph, j: usize) -> Vec<f64> {
    let p = m.nodes[j].layer.conv().unwrap();
    let (ci, kk) = (p.in_channels(), p.kernel() * p.kernel());
    let mut r = vec![0f64; ci];
    for (idx, &w) in p.weight.data().iter().enumerate() {
        let c = (idx / kk) % ci;
        r[c] = r[c].max(w.abs() as f64);
    }
    r
}

/// Max channel range over the smallest nonzero one; 1 for all-zero tensors.
pub fn range_spread(ranges: &[f64]) -> f64 {
    let hi = ranges.iter().cloned().fold(0.0, f64::max);
    let lo = ranges.iter().cloned().filter(|&r| r > 0.0).fold(f64::INFINITY, f64::min);
    if lo.is_finite() {
        hi / lo
    } else {
        1.0
    }
}

/// One sweep over the eligible conv → ReLU → conv pairs in node order.
pub fn cross_layer_equalize(m: &ModelGraph) -> Result<(ModelGraph, EqualizationReport)> {
    ensure_float(m, "equalization")?;
    let consumers = m.consumers();
    for (i, node) in m.nodes.iter().enumerate() {
        if let Layer::BatchNorm(_) = node.layer {
            if let ([ValueRef::Node(c)], [r]) = (&node.inputs[..], &consumers[i][..]) {
                if matches!(m.nodes[*r].layer, Layer::Relu) {
                    return Err(Error::NotReluPair(m.nodes[*c].name.clone(), m.nodes[*r].name.clone()));
                }
            }
            return Err(Error::BatchNormNotAfterConv(node.name.clone()));
        }
    }
    let mut out = m.clone();
    let mut report = EqualizationReport::default();
    for i in 0..m.nodes.len() {
        let Some((_, j)) = relu_pair(m, &consumers, i) else { continue };
        let r1 = output_channel_ranges(&out, i);
        let r2 = input_channel_ranges(&out, j);
        let scales: Vec<f64> = r1
            .iter()
            .zip(&r2)
            .map(|(&a, &b)| if a * b > 0.0 { (a / b).sqrt() } else { 1.0 })
            .collect();
        let spread_before = range_spread(&r1).max(range_spread(&r2));
        {
            let p1 = out.nodes[i].layer.conv_mut().unwrap();
            let per = p1.fan_in();
            for (o, &s) in scales.iter().enumerate() {
                for w in &mut p1.weight.data_mut()[o * per..(o + 1) * per] {
                    *w = (*w as f64 / s) as f32;
                }
                p1.bias[o] = (p1.bias[o] as f64 / s) as f32;
            }
        }
        {
            let p2 = out.nodes[j].layer.conv_mut().unwrap();
            let (ci, kk) = (p2.in_channels(), p2.kernel() * p2.kernel());
            for (idx, w) in p2.weight.data_mut().iter_mut().enumerate() {
                *w = (*w as f64 * scales[(idx / kk) % ci]) as f32;
            }
        }
        let a1 = output_channel_ranges(&out, i);
        let a2 = input_channel_ranges(&out, j);
        report.pairs.push(PairReport {
            first: m.nodes[i].name.clone(),
            second: m.nodes[j].name.clone(),
            scales,
            spread_before,
            spread_after: range_spread(&a1).max(range_spread(&a2)),
            ranges_after: a1.into_iter().zip(a2).collect(),
        });
    }
    Ok((out, report))
}

/// Shifts `c = max(0, β − 3|γ|)` out of each first layer's bias and into the
/// following layer. Only pairs whose second layer is a 1×1 classifier are
/// rewritten, since a padded or strided consumer would see the shift
/// unevenly at borders.
pub fn absorb_bias(m: &ModelGraph, stats: &BnStats) -> Result<(ModelGraph, usize)> {
    ensure_float(m, "bias absorption")?;
    let consumers = m.consumers();
    let mut out = m.clone();
    let mut absorbed = 0;
    for i in 0..m.nodes.len() {
        let Some((_, j)) = relu_pair(m, &consumers, i) else { continue };
        if !matches!(m.nodes[j].layer, Layer::Classifier(_)) {
            continue;
        }
        let name = &m.nodes[i].name;
        let st = stats
            .layers
            .get(name)
            .ok_or_else(|| Error::MissingBnStats(name.clone()))?;
        let shift: Vec<f64> = st.iter().map(|&(g, b)| (b - 3.0 * g.abs()).max(0.0)).collect();
        let p1 = out.nodes[i].layer.conv_mut().unwrap();
        if shift.len() != p1.out_channels() {
            return Err(Error::Shape(format!("`{name}` statistics cover {} channels", shift.len())));
        }
        for (b, &c) in p1.bias.iter_mut().zip(&shift) {
            *b = (*b as f64 - c) as f32;
        }
        let p2 = out.nodes[j].layer.conv_mut().unwrap();
        let ci = p2.in_channels();
        for o in 0..p2.out_channels() {
            let row = &p2.weight.data()[o * ci..(o + 1) * ci];
            let gain: f64 = row.iter().zip(&shift).map(|(&w, &c)| w as f64 * c).sum();
            p2.bias[o] = (p2.bias[o] as f64 + gain) as f32;
        }
        absorbed += shift.iter().filter(|&&c| c > 0.0).count();
    }
    Ok((out, absorbed))
}

/// Toggles division of each clipped input channel by its clip value, scaling
/// the matching input weights of every layer reading the input so the
/// network computes the same function.
pub fn set_input_rescale(m: &ModelGraph, rescale: bool) -> Result<ModelGraph> {
    ensure_float(m, "input rescaling")?;
    let clip = m
        .preprocess
        .clip
        .clone()
        .ok_or_else(|| Error::Config("input rescaling needs clip values".into()))?;
    let mut out = m.clone();
    if m.preprocess.rescale == rescale {
        return Ok(out);
    }
    for node in &mut out.nodes {
        if !node.inputs.contains(&ValueRef::Input) {
            continue;
        }
        let name = node.name.clone();
        let p = match &mut node.layer {
            Layer::Conv2d(p) | Layer::Classifier(p) | Layer::TransposedConv2x2(p) => p,
            _ => return Err(Error::Unsupported(format!("`{name}` reads the input without weights"))),
        };
        if p.in_channels() != clip.len() {
            return Err(Error::Shape(format!("{} clip values for `{name}`", clip.len())));
        }
        let (ci, kk) = (p.in_channels(), p.kernel() * p.kernel());
        for (idx, w) in p.weight.data_mut().iter_mut().enumerate() {
            let c = clip[(idx / kk) % ci] as f64;
            *w = if rescale { *w as f64 * c } else { *w as f64 / c } as f32;
        }
    }
    out.preprocess.rescale = rescale;
    Ok(out)
}
