//! Glue shared by the command line and end-to-end tests: engine dispatch,
//! corpus evaluation, calibration and the transform chain.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::calibration::{adaptive_clip_values, collect_channel_stats, ChannelHistogram, ClipSpec, HistogramConfig};
use crate::error::{Error, Result};
use crate::int_engine::{int_forward, IntOptions, SaturationReport};
use crate::metrics::{ConfusionMatrix, IGNORE_LABEL};
use crate::model::ModelGraph;
use crate::quantizer::fake_quant_forward;
use crate::reference::{forward, l1_normalize};
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::transforms::{absorb_bias, cross_layer_equalize, fold_batch_norm, BnStats, EqualizationReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Float,
    FakeQuant,
    Int { packed: bool },
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Engine::Float),
            "fakequant" | "fake-quant" => Ok(Engine::FakeQuant),
            "int" => Ok(Engine::Int { packed: false }),
            "int-packed" => Ok(Engine::Int { packed: true }),
            _ => Err(Error::Config(format!("unknown engine `{s}`"))),
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Float => "float",
            Engine::FakeQuant => "fakequant",
            Engine::Int { packed: false } => "int",
            Engine::Int { packed: true } => "int-packed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineOutput {
    pub labels: Vec<u8>,
    pub saturation: Option<SaturationReport>,
}

pub fn predict(m: &ModelGraph, cube: &Tensor<f32>, engine: Engine) -> Result<EngineOutput> {
    if engine != Engine::Float && !m.is_quantized() {
        return Err(Error::Config(format!("engine `{engine}` needs a quantized model")));
    }
    Ok(match engine {
        Engine::Float => EngineOutput {
            labels: forward(m, cube)?.labels,
            saturation: None,
        },
        Engine::FakeQuant => EngineOutput {
            labels: fake_quant_forward(m, cube)?.1,
            saturation: None,
        },
        Engine::Int { packed } => {
            let out = int_forward(m, cube, IntOptions { packed_mac: packed })?;
            EngineOutput {
                labels: out.labels,
                saturation: Some(out.saturation),
            }
        }
    })
}

/// Label maps for every scene, in order.
pub fn predict_all(m: &ModelGraph, cubes: &[&Tensor<f32>], engine: Engine) -> Result<Vec<EngineOutput>> {
    cubes.par_iter().map(|c| predict(m, c, engine)).collect()
}

pub fn confusion(names: Vec<String>, preds: &[Vec<u8>], scenes: &[Scene]) -> Result<ConfusionMatrix> {
    if preds.len() != scenes.len() {
        return Err(Error::Shape(format!("{} predictions for {} scenes", preds.len(), scenes.len())));
    }
    let mut cm = ConfusionMatrix::new(names);
    for (p, s) in preds.iter().zip(scenes) {
        cm.accumulate(p, &s.labels.labels, IGNORE_LABEL)?;
    }
    Ok(cm)
}

pub fn evaluate(m: &ModelGraph, scenes: &[Scene], names: Vec<String>, engine: Engine) -> Result<ConfusionMatrix> {
    let cubes: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.cube).collect();
    let preds: Vec<Vec<u8>> = predict_all(m, &cubes, engine)?.into_iter().map(|o| o.labels).collect();
    confusion(names, &preds, scenes)
}

pub fn normalized(cube: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut x = cube.clone();
    l1_normalize(&mut x)?;
    Ok(x)
}

/// Per-channel histograms of L1-normalised raw cubes.
pub fn calibration_histograms(raw: &[&Tensor<f32>], cfg: &HistogramConfig) -> Result<Vec<ChannelHistogram>> {
    let cubes = raw.par_iter().map(|c| normalized(c)).collect::<Result<Vec<_>>>()?;
    collect_channel_stats(&cubes, cfg)
}

/// Histograms over `[0, 1]`, where every L1-normalised sample lies.
pub fn normalized_histogram_config() -> HistogramConfig {
    HistogramConfig {
        bins: 4096,
        range: Some((0.0, 1.0)),
    }
}

pub fn clip_from_cubes(raw: &[&Tensor<f32>], coverage: f64) -> Result<ClipSpec> {
    let hists = calibration_histograms(raw, &normalized_histogram_config())?;
    adaptive_clip_values(&hists, coverage)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformOptions {
    pub fold: bool,
    pub cle: bool,
    pub absorb: bool,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            fold: true,
            cle: true,
            absorb: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformLog {
    pub folded: bool,
    pub equalization: Option<EqualizationReport>,
    pub absorbed_channels: usize,
}

/// Fold, then equalize, then absorb. Equalization and absorption need a
/// folded graph; absorption additionally needs the batch-norm statistics.
pub fn apply_transforms(m: &ModelGraph, opts: TransformOptions) -> Result<(ModelGraph, TransformLog)> {
    let has_bn = m
        .nodes
        .iter()
        .any(|n| matches!(n.layer, crate::model::Layer::BatchNorm(_)));
    if (opts.cle || opts.absorb) && has_bn && !opts.fold {
        return Err(Error::Config("equalization and absorption require batch-norm folding".into()));
    }
    let mut stats = BnStats::collect(m);
    let mut log = TransformLog::default();
    let mut g = m.clone();
    if opts.fold {
        g = fold_batch_norm(&g)?;
        log.folded = has_bn;
    }
    if opts.cle {
        let (e, report) = cross_layer_equalize(&g)?;
        stats.apply_equalization(&report);
        g = e;
        log.equalization = Some(report);
    }
    if opts.absorb && !stats.layers.is_empty() {
        let (a, n) = absorb_bias(&g, &stats)?;
        g = a;
        log.absorbed_channels = n;
    }
    Ok((g, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{compute_metrics, ClassWeights};
    use crate::model::ArchConfig;
    use crate::quantizer::{quantize_model, QuantizationRecipe};
    use crate::scene::{generate_corpus, matched_filter_model, SceneConfig};

    #[test]
    fn engine_names_roundtrip() {
        for e in [Engine::Float, Engine::FakeQuant, Engine::Int { packed: false }, Engine::Int { packed: true }] {
            assert_eq!(e.to_string().parse::<Engine>().unwrap(), e);
        }
        assert!("gpu".parse::<Engine>().is_err());
    }

    #[test]
    fn quantized_engines_agree_on_scenes() {
        let cfg = SceneConfig {
            height: 32,
            width: 48,
            ..SceneConfig::default()
        };
        let scenes = generate_corpus(&cfg, 3, 4).unwrap();
        let raw: Vec<&Tensor<f32>> = scenes.iter().map(|s| &s.cube).collect();
        let clip = clip_from_cubes(&raw, 0.9995).unwrap();
        let m = matched_filter_model(&cfg, &ArchConfig::new(8, 2, 25, 5), Some(&clip)).unwrap();
        let (t, _) = apply_transforms(&m, TransformOptions::default()).unwrap();
        let owned: Vec<Tensor<f32>> = scenes.iter().map(|s| s.cube.clone()).collect();
        let (q, _) = quantize_model(&t, &owned, &QuantizationRecipe::default()).unwrap();
        let names = cfg.class_names();
        let a = evaluate(&q, &scenes, names.clone(), Engine::FakeQuant).unwrap();
        let b = evaluate(&q, &scenes, names.clone(), Engine::Int { packed: true }).unwrap();
        assert_eq!(a, b);
        let f = evaluate(&m, &scenes, names, Engine::Float).unwrap();
        let gf = compute_metrics(&f, &ClassWeights::InverseFrequency).unwrap().global.iou;
        let gq = compute_metrics(&b, &ClassWeights::InverseFrequency).unwrap().global.iou;
        assert!(gf - gq <= 0.005, "float {gf} int {gq}");
        assert!(predict(&m, &scenes[0].cube, Engine::Int { packed: false }).is_err());
    }

    #[test]
    fn transform_order_enforced() {
        let mut m = crate::model::build_fcn(&ArchConfig::new(4, 1, 3, 2), 4, 4).unwrap();
        m.init_random(1);
        let opts = TransformOptions {
            fold: false,
            ..Default::default()
        };
        assert!(apply_transforms(&m, opts).is_err());
        let (g, log) = apply_transforms(&m, TransformOptions::default()).unwrap();
        assert!(log.folded);
        assert!(!g.nodes.iter().any(|n| matches!(n.layer, crate::model::Layer::BatchNorm(_))));
    }
}
