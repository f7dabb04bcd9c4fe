//! Integer inference: 8-bit operands, 32-bit accumulators, shift-only
//! requantization, and an emulation of two int8 products sharing one wide
//! multiplier.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{ConvQuant, Layer, ModelGraph};
use crate::reference::{self, concat, run_graph};
use crate::tensor::{quantize_affine, QuantParams, Tensor};

/// Round-half-up right shift by `k`, or exact left shift for `k ≤ 0`.
pub fn round_shift(acc: i64, k: i32) -> Result<i64> {
    if !(-31..=31).contains(&k) {
        return Err(Error::ShiftRange {
            layer: String::new(),
            shift: k,
        });
    }
    Ok(shift_unchecked(acc, k))
}

#[inline]
fn shift_unchecked(acc: i64, k: i32) -> i64 {
    if k >= 1 {
        (acc + (1i64 << (k - 1))) >> k
    } else {
        acc << (-k)
    }
}

/// Lane offset of the packed operand.
pub const LANE_SHIFT: u32 = 18;

/// Both products `a1·w` and `a2·w` from one multiplication of the packed
/// operand `(a1 << 18) + a2` by `w`.
#[inline]
pub fn pack_two_int8_mac(a1: i8, a2: i8, w: i8) -> (i32, i32) {
    let packed = ((a1 as i64) << LANE_SHIFT) + a2 as i64;
    let prod = packed * w as i64;
    let lo_bits = 64 - LANE_SHIFT;
    let p2 = (prod << lo_bits) >> lo_bits;
    let p1 = (prod >> LANE_SHIFT) + (p2 < 0) as i64;
    (p1 as i32, p2 as i32)
}

/// Checks every `(a1, a2, w)` in `[−128, 127]³`; returns `(passed, total)`.
pub fn verify_packed_mac() -> (u64, u64) {
    let passed = (-128i32..=127)
        .into_par_iter()
        .map(|a1| {
            let mut ok = 0u64;
            for a2 in -128i32..=127 {
                for w in -128i32..=127 {
                    let (p1, p2) = pack_two_int8_mac(a1 as i8, a2 as i8, w as i8);
                    ok += (p1 == a1 * w && p2 == a2 * w) as u64;
                }
            }
            ok
        })
        .sum();
    (passed, 1 << 24)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntOptions {
    /// Route convolution products through [`pack_two_int8_mac`], pairing
    /// horizontally adjacent pixels.
    pub packed_mac: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSaturation {
    pub name: String,
    pub low: u64,
    pub high: u64,
    pub total: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SaturationReport {
    pub input: LayerSaturation,
    pub layers: Vec<LayerSaturation>,
}

impl SaturationReport {
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("SAT1 1\n");
        for l in std::iter::once(&self.input).chain(&self.layers) {
            writeln!(out, "layer {} low={} high={} total={}", l.name, l.low, l.high, l.total).unwrap();
        }
        out
    }

    /// Element-wise sum, for aggregating over a corpus.
    pub fn merge(&mut self, other: &SaturationReport) {
        if self.layers.is_empty() && self.input.name.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in std::iter::once(&mut self.input)
            .chain(self.layers.iter_mut())
            .zip(std::iter::once(&other.input).chain(&other.layers))
        {
            a.low += b.low;
            a.high += b.high;
            a.total += b.total;
        }
    }
}

fn requantize(acc: &mut [i32], k: i32, to: &QuantParams, sat: &mut LayerSaturation) {
    let (lo, hi) = to.range();
    let z = to.zero_point as i64;
    for v in acc.iter_mut() {
        let y = shift_unchecked(*v as i64, k) + z;
        *v = if y < lo {
            sat.low += 1;
            lo
        } else if y > hi {
            sat.high += 1;
            hi
        } else {
            y
        } as i32;
    }
    sat.total += acc.len() as u64;
}

/// Moves grid indices from one grid to another of coarser or equal scale.
fn regrid(values: &mut [i32], from: &QuantParams, to: &QuantParams, sat: &mut LayerSaturation) {
    let z = from.zero_point;
    for v in values.iter_mut() {
        *v -= z;
    }
    requantize(values, from.fraction_bits - to.fraction_bits, to, sat);
}

fn check_engine_model(m: &ModelGraph) -> Result<()> {
    let iq = m.input_quant.ok_or_else(|| Error::MissingQParams("input".into()))?;
    let narrow = |q: &QuantParams| q.bit_width <= 8;
    if !narrow(&iq) {
        return Err(Error::Unsupported("integer engine needs 8-bit inputs".into()));
    }
    for n in &m.nodes {
        if let Some(g) = &n.act_quant {
            if !narrow(g) {
                return Err(Error::Unsupported(format!("`{}`: activation wider than 8 bits", n.name)));
            }
        }
        if let Some(p) = n.layer.conv() {
            let cq = p.quant.as_ref().ok_or_else(|| Error::MissingQParams(n.name.clone()))?;
            if !narrow(&cq.weight) || cq.bias.bit_width > 32 {
                return Err(Error::Unsupported(format!("`{}`: operand widths exceed 8/32 bits", n.name)));
            }
        }
    }
    Ok(())
}

fn to_i32(v: &[i64], name: &str) -> Result<Vec<i32>> {
    v.iter()
        .map(|&b| i32::try_from(b).map_err(|_| Error::BiasOverflow(name.to_string())))
        .collect()
}

/// Accumulators `Σ W_int·x_int + b_int` of a convolution-like layer.
pub fn int_conv_acc(layer: &Layer, cq: &ConvQuant, x: &Tensor<i32>, opts: IntOptions, name: &str) -> Result<Tensor<i32>> {
    let (c, h, w) = x.chw()?;
    let p = layer.conv().ok_or_else(|| Error::Unsupported(format!("`{name}` is not a convolution")))?;
    if p.in_channels() != c {
        return Err(Error::Shape(format!("`{name}` expects {} channels, got {c}", p.in_channels())));
    }
    let (xlo, xhi) = cq.input.range();
    if let Some(&bad) = x.data().iter().find(|&&v| (v as i64) < xlo || (v as i64) > xhi) {
        return Err(Error::OutOfRange {
            value: bad as i64,
            lo: xlo,
            hi: xhi,
        });
    }
    let wt = cq.weight_int.data();
    let bias = to_i32(&cq.bias_int, name)?;
    let z = cq.input.zero_point;
    let o = p.out_channels();
    match layer {
        Layer::TransposedConv2x2(_) => {
            let data = if opts.packed_mac {
                packed_tconv(x.data(), (c, h, w), wt, &bias, &cq.input)
            } else {
                let centred: Vec<i32> = x.data().iter().map(|&v| v - z).collect();
                kernels::transposed_conv2x2(&centred, (c, h, w), wt, &bias)
            };
            Tensor::from_vec(vec![o, 2 * h, 2 * w], data)
        }
        _ => {
            let k = p.kernel();
            let data = if opts.packed_mac {
                packed_conv(x.data(), (c, h, w), wt, &bias, k, &cq.input)
            } else {
                kernels::conv_same(x.data(), (c, h, w), wt, &bias, k, z)
            };
            Tensor::from_vec(vec![o, h, w], data)
        }
    }
}

/// Offset that turns a grid index into an int8 operand.
fn operand_offset(q: &QuantParams) -> i32 {
    if q.signed {
        0
    } else {
        1 << (q.bit_width - 1)
    }
}

/// Same-padded convolution evaluated two pixels per multiply. Operands are
/// offset into int8 and the offset's contribution is restored per channel.
fn packed_conv(
    input: &[i32],
    (c, h, w): (usize, usize, usize),
    weight: &[i32],
    bias: &[i32],
    k: usize,
    xq: &QuantParams,
) -> Vec<i32> {
    let o = bias.len();
    let off = operand_offset(xq);
    let p = (k - 1) / 2;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut padded = vec![(xq.zero_point - off) as i8; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                padded[(ch * ph + y + p) * pw + x + p] = (input[(ch * h + y) * w + x] - off) as i8;
            }
        }
    }
    let per = c * k * k;
    let planes: Vec<Vec<i32>> = (0..o)
        .into_par_iter()
        .map(|oc| {
            let wsum: i32 = weight[oc * per..(oc + 1) * per].iter().sum();
            let mut out = vec![bias[oc] + off * wsum; h * w];
            for ch in 0..c {
                let plane = &padded[ch * ph * pw..][..ph * pw];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((oc * c + ch) * k + ky) * k + kx] as i8;
                        for y in 0..h {
                            let src = &plane[(y + ky) * pw + kx..][..w];
                            let dst = &mut out[y * w..][..w];
                            let mut x = 0;
                            while x + 1 < w {
                                let (p1, p2) = pack_two_int8_mac(src[x], src[x + 1], wv);
                                dst[x] += p1;
                                dst[x + 1] += p2;
                                x += 2;
                            }
                            if x < w {
                                dst[x] += src[x] as i32 * wv as i32;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    planes.concat()
}

/// Transposed convolution evaluated two pixels per multiply; the correction
/// `(offset − z_x)·Σ_c W[o, c, dy, dx]` depends on the output parity.
fn packed_tconv(
    input: &[i32],
    (c, h, w): (usize, usize, usize),
    weight: &[i32],
    bias: &[i32],
    xq: &QuantParams,
) -> Vec<i32> {
    let o = bias.len();
    let off = operand_offset(xq);
    let shifted: Vec<i8> = input.iter().map(|&v| (v - off) as i8).collect();
    let (oh, ow) = (2 * h, 2 * w);
    let planes: Vec<Vec<i32>> = (0..o)
        .into_par_iter()
        .map(|oc| {
            let mut out = vec![0i32; oh * ow];
            for dy in 0..2 {
                for dx in 0..2 {
                    let wsum: i32 = (0..c).map(|ch| weight[((oc * c + ch) * 2 + dy) * 2 + dx]).sum();
                    let base = bias[oc] + (off - xq.zero_point) * wsum;
                    for y in 0..h {
                        for x in 0..w {
                            out[(2 * y + dy) * ow + 2 * x + dx] = base;
                        }
                    }
                }
            }
            for ch in 0..c {
                let plane = &shifted[ch * h * w..][..h * w];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = weight[((oc * c + ch) * 2 + dy) * 2 + dx] as i8;
                        for y in 0..h {
                            let src = &plane[y * w..][..w];
                            let row = &mut out[(2 * y + dy) * ow..][..ow];
                            let mut x = 0;
                            while x + 1 < w {
                                let (p1, p2) = pack_two_int8_mac(src[x], src[x + 1], wv);
                                row[2 * x + dx] += p1;
                                row[2 * x + 2 + dx] += p2;
                                x += 2;
                            }
                            if x < w {
                                row[2 * x + dx] += src[x] as i32 * wv as i32;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    planes.concat()
}

/// Convolution plus requantization onto `out` (or raw accumulators if `None`).
pub fn int_conv2d(
    layer: &Layer,
    cq: &ConvQuant,
    out: Option<&QuantParams>,
    x: &Tensor<i32>,
    opts: IntOptions,
    name: &str,
) -> Result<(Tensor<i32>, LayerSaturation)> {
    let mut acc = int_conv_acc(layer, cq, x, opts, name)?;
    let mut sat = LayerSaturation {
        name: name.to_string(),
        ..Default::default()
    };
    if let Some(g) = out {
        let k = cq.weight.fraction_bits + cq.input.fraction_bits - g.fraction_bits;
        if !(-31..=31).contains(&k) {
            return Err(Error::ShiftRange {
                layer: name.to_string(),
                shift: k,
            });
        }
        requantize(acc.data_mut(), k, g, &mut sat);
    }
    Ok((acc, sat))
}

fn int_node(
    m: &ModelGraph,
    i: usize,
    ins: &[&Tensor<i32>],
    opts: IntOptions,
    grids: &[QuantParams],
) -> Result<(Tensor<i32>, LayerSaturation)> {
    let node = &m.nodes[i];
    let x = ins[0];
    let mut sat = LayerSaturation {
        name: node.name.clone(),
        ..Default::default()
    };
    let out = node.act_quant.as_ref();
    let in_grid = grids[0];
    let mut y = match &node.layer {
        Layer::Conv2d(p) | Layer::Classifier(p) | Layer::TransposedConv2x2(p) => {
            let cq = p.quant.as_ref().ok_or_else(|| Error::MissingQParams(node.name.clone()))?;
            return int_conv2d(&node.layer, cq, out, x, opts, &node.name);
        }
        Layer::Relu => {
            let z = in_grid.zero_point;
            x.map(|&v| v.max(z))
        }
        Layer::MaxPool2x2 => {
            let (c, h, w) = x.chw()?;
            Tensor::from_vec(vec![c, h / 2, w / 2], kernels::maxpool2x2(x.data(), (c, h, w)))?
        }
        Layer::Concat => {
            let to = out.ok_or_else(|| Error::MissingQParams(node.name.clone()))?;
            let parts: Vec<Tensor<i32>> = ins
                .iter()
                .zip(grids)
                .map(|(t, g)| {
                    let mut t = (*t).clone();
                    regrid(t.data_mut(), g, to, &mut sat);
                    t
                })
                .collect();
            let refs: Vec<&Tensor<i32>> = parts.iter().collect();
            return Ok((concat(&refs)?, sat));
        }
        Layer::BatchNorm(_) => return Err(Error::Unsupported("batch norm in a quantized graph".into())),
    };
    let to = out.ok_or_else(|| Error::MissingQParams(node.name.clone()))?;
    if *to != in_grid {
        regrid(y.data_mut(), &in_grid, to, &mut sat);
    }
    Ok((y, sat))
}

fn input_grids(m: &ModelGraph, i: usize) -> Result<Vec<QuantParams>> {
    m.nodes[i]
        .inputs
        .iter()
        .map(|r| match r {
            crate::model::ValueRef::Input => m.input_quant.ok_or_else(|| Error::MissingQParams("input".into())),
            crate::model::ValueRef::Node(j) => m.nodes[*j]
                .act_quant
                .ok_or_else(|| Error::MissingQParams(m.nodes[*j].name.clone())),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct IntOutput {
    pub labels: Vec<u8>,
    /// Classifier accumulators at scale `s_w·s_x`.
    pub logits: Tensor<i32>,
    pub saturation: SaturationReport,
}

fn run_int(
    m: &ModelGraph,
    cube: &Tensor<f32>,
    opts: IntOptions,
    mut visit: impl FnMut(usize, &Tensor<i32>),
) -> Result<IntOutput> {
    check_engine_model(m)?;
    let iq = m.input_quant.unwrap();
    let x = reference::preprocess(&m.preprocess, cube)?;
    let xq = quantize_affine(&x, &iq);
    let mut report = SaturationReport {
        input: LayerSaturation {
            name: "input".into(),
            high: xq.saturated as u64,
            total: xq.values.len() as u64,
            low: 0,
        },
        layers: Vec::with_capacity(m.nodes.len()),
    };
    let logits = run_graph(
        m,
        xq.values,
        |i, ins| {
            let grids = input_grids(m, i)?;
            let (y, sat) = int_node(m, i, ins, opts, &grids)?;
            report.layers.push(sat);
            Ok(y)
        },
        |i, y| {
            visit(i, y);
            Ok(())
        },
    )?;
    let (c, h, w) = logits.chw()?;
    let labels = kernels::argmax_planes(logits.data(), c, h * w);
    Ok(IntOutput {
        labels,
        logits,
        saturation: report,
    })
}

/// Integer inference of a quantized graph on a raw cube.
pub fn int_forward(m: &ModelGraph, cube: &Tensor<f32>, opts: IntOptions) -> Result<IntOutput> {
    run_int(m, cube, opts, |_, _| {})
}

/// Every node output: grid indices, and accumulators for the classifier.
pub fn int_trace(m: &ModelGraph, cube: &Tensor<f32>, opts: IntOptions) -> Result<Vec<Tensor<i32>>> {
    let mut trace = Vec::with_capacity(m.nodes.len());
    run_int(m, cube, opts, |_, y| trace.push(y.clone()))?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_fcn, ArchConfig, ConvParams};
    use crate::quantizer::{fake_quant_forward, fake_quant_trace, quantize_model, QuantizationRecipe};
    use crate::tensor::QuantParams;
    use proptest::prelude::*;

    #[test]
    fn round_shift_examples() {
        assert_eq!(round_shift(36, 2).unwrap(), 9);
        assert_eq!(round_shift(-6, 2).unwrap(), -1);
        assert_eq!(round_shift(-5, 1).unwrap(), -2);
        assert_eq!(round_shift(3, -2).unwrap(), 12);
        assert_eq!(round_shift(3, 0).unwrap(), 3);
        assert!(round_shift(1, 32).is_err());
        assert!(round_shift(1, -32).is_err());
    }

    #[test]
    fn packed_mac_examples() {
        assert_eq!(pack_two_int8_mac(0, 0, 77), (0, 0));
        assert_eq!(pack_two_int8_mac(1, 1, 1), (1, 1));
        assert_eq!(pack_two_int8_mac(-128, 127, -128), (16384, -16256));
        assert_eq!(pack_two_int8_mac(-128, -128, -128), (16384, 16384));
        assert_eq!(pack_two_int8_mac(127, -128, 127), (16129, -16256));
    }

    proptest! {
        #[test]
        fn packed_mac_matches_products(a1 in any::<i8>(), a2 in any::<i8>(), w in any::<i8>()) {
            let (p1, p2) = pack_two_int8_mac(a1, a2, w);
            prop_assert_eq!(p1, a1 as i32 * w as i32);
            prop_assert_eq!(p2, a2 as i32 * w as i32);
        }

        #[test]
        fn round_shift_is_floor_of_half_up(acc in -(1i64 << 40)..(1i64 << 40), k in 1i32..=31) {
            let exact = (acc as f64 / (1u64 << k) as f64 + 0.5).floor() as i64;
            prop_assert_eq!(round_shift(acc, k).unwrap(), exact);
        }
    }

    fn quantized(seed: u64, recipe: &QuantizationRecipe) -> (ModelGraph, Vec<Tensor<f32>>) {
        let mut m = build_fcn(&ArchConfig::new(4, 2, 3, 3), 8, 12).unwrap();
        m.init_random(seed);
        let cubes: Vec<Tensor<f32>> = (0..3)
            .map(|k| {
                let data = (0..3 * 8 * 12)
                    .map(|i| (((i * 7919 + k * 104729 + seed as usize) % 997) as f32) / 997.0)
                    .collect();
                Tensor::from_vec(vec![3, 8, 12], data).unwrap()
            })
            .collect();
        let (q, _) = quantize_model(&m, &cubes[..2], recipe).unwrap();
        (q, cubes)
    }

    #[test]
    fn one_by_one_hand_example() {
        // W_int = 5, x_int = 7, b_int = 1, shift 2 → (36 + 2) >> 2 = 9
        let cq = ConvQuant {
            input: QuantParams::unsigned(3, 0, 8),
            weight: QuantParams::symmetric(3, 8),
            bias: QuantParams::symmetric(6, 32),
            weight_int: Tensor::from_vec(vec![1, 1, 1, 1], vec![5]).unwrap(),
            bias_int: vec![1],
        };
        let layer = Layer::Classifier(ConvParams::zeros(1, 1, 1));
        let x = Tensor::from_vec(vec![1, 1, 1], vec![7]).unwrap();
        let out = QuantParams::unsigned(4, 0, 8);
        for packed in [false, true] {
            let (y, _) = int_conv2d(&layer, &cq, Some(&out), &x, IntOptions { packed_mac: packed }, "c").unwrap();
            assert_eq!(y.data(), &[9]);
        }
        let zero = Tensor::from_vec(vec![1, 1, 1], vec![0]).unwrap();
        let cq0 = ConvQuant { bias_int: vec![0], ..cq };
        let (y, _) = int_conv2d(&layer, &cq0, Some(&out), &zero, IntOptions::default(), "c").unwrap();
        assert_eq!(y.data(), &[0]);
    }

    #[test]
    fn engines_agree_bit_exactly() {
        for (seed, recipe) in [
            (1, QuantizationRecipe::default()),
            (2, QuantizationRecipe::minmax()),
            (
                3,
                QuantizationRecipe {
                    anchor_relu: false,
                    ..QuantizationRecipe::default()
                },
            ),
        ] {
            let (q, cubes) = quantized(seed, &recipe);
            for x in &cubes {
                let fq = fake_quant_trace(&q, x).unwrap();
                let plain = int_trace(&q, x, IntOptions::default()).unwrap();
                let packed = int_trace(&q, x, IntOptions { packed_mac: true }).unwrap();
                for (i, n) in q.nodes.iter().enumerate() {
                    assert_eq!(plain[i], fq[i], "seed {seed} node {}", n.name);
                    assert_eq!(packed[i], plain[i], "packed, node {}", n.name);
                }
                let (_, labels) = fake_quant_forward(&q, x).unwrap();
                assert_eq!(int_forward(&q, x, IntOptions::default()).unwrap().labels, labels);
            }
        }
    }

    #[test]
    fn rejects_float_models() {
        let mut m = build_fcn(&ArchConfig::new(2, 1, 1, 2), 2, 2).unwrap();
        m.init_random(0);
        let x = Tensor::from_vec(vec![1, 2, 2], vec![0.1; 4]).unwrap();
        assert!(matches!(
            int_forward(&m, &x, IntOptions::default()),
            Err(Error::MissingQParams(_))
        ));
    }

    #[test]
    fn maxpool_commutes_with_quantization() {
        let q = QuantParams::unsigned(5, 3, 8);
        let x = Tensor::from_vec(vec![1, 2, 4], vec![0.3, -0.1, 2.0, 1.7, 0.31, 0.0, 9.0, 1.69]).unwrap();
        let pooled = reference::eval_layer(&Layer::MaxPool2x2, &[&x]).unwrap();
        let a = quantize_affine(&pooled, &q).values;
        let qx = quantize_affine(&x, &q).values;
        let b = kernels::maxpool2x2(qx.data(), (1, 2, 4));
        assert_eq!(a.data(), &b[..]);
    }

    #[test]
    fn saturation_report_text() {
        let (q, cubes) = quantized(4, &QuantizationRecipe::default());
        let out = int_forward(&q, &cubes[2], IntOptions::default()).unwrap();
        assert_eq!(out.saturation.layers.len(), q.nodes.len());
        let text = out.saturation.to_manifest();
        assert!(text.starts_with("SAT1 1\nlayer input "));
        let mut agg = SaturationReport::default();
        agg.merge(&out.saturation);
        agg.merge(&out.saturation);
        assert_eq!(agg.input.total, 2 * out.saturation.input.total);
    }
}
