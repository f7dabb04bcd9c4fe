//! Pipeline stages. Each stage reads its inputs from the output directory,
//! writes its artifacts there, and records a JSON run summary.

use std::fs;
use std::path::{Path, PathBuf};

use hsiq::calibration::{histograms_to_csv, histograms_to_manifest, minmax_bits_for_max, ClipSpec};
use hsiq::int_engine::{verify_packed_mac, SaturationReport};
use hsiq::metrics::{compute_metrics, ClassWeights, ConfusionMatrix, Metrics};
use hsiq::model::{build_fcn, load_model, save_model, ArchConfig, ModelGraph};
use hsiq::perf::{perf_report, MEASURED_FPS};
use hsiq::pipeline::{
    apply_transforms, calibration_histograms, confusion, normalized_histogram_config, predict_all, Engine,
};
use hsiq::quantizer::quantize_model;
use hsiq::scene::{
    matched_filter_model, read_corpus, read_labels, write_corpus, write_labels, Corpus, LabelMap, Scene,
    CORPUS_FILE,
};
use hsiq::tensor::Tensor;
use hsiq::transforms::set_input_rescale;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, Config};
use crate::error::CliError;

/// Salt separating the calibration split's seed from the evaluation split's.
const CALIB_SALT: u64 = 0xca11_b8a7_e000_0001;

pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.out.join("corpus")
    }
    pub fn calib_corpus(&self) -> PathBuf {
        self.out.join("calib_corpus")
    }
    pub fn calib(&self) -> PathBuf {
        self.out.join("calib")
    }
    pub fn clip(&self) -> PathBuf {
        self.calib().join("clip.txt")
    }
    pub fn models(&self) -> PathBuf {
        self.out.join("models")
    }
    pub fn float_model(&self) -> PathBuf {
        self.models().join("float.fcnq")
    }
    pub fn transformed_model(&self) -> PathBuf {
        self.models().join("transformed.fcnq")
    }
    pub fn int_model(&self) -> PathBuf {
        self.models().join("int8.fcnq")
    }
    pub fn predictions(&self, e: Engine) -> PathBuf {
        self.out.join("pred").join(e.to_string())
    }
    pub fn eval(&self, e: Engine) -> PathBuf {
        self.out.join("eval").join(e.to_string())
    }
    pub fn perf(&self) -> PathBuf {
        self.out.join("perf")
    }
    pub fn summary(&self, name: &str) -> PathBuf {
        self.out.join("summaries").join(format!("{name}.json"))
    }
}

fn require(p: &Path) -> Result<&Path, CliError> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Missing(p.to_path_buf()))
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    require(&dir.join(CORPUS_FILE))?;
    Ok(read_corpus(dir)?)
}

fn load(p: &Path) -> Result<ModelGraph, CliError> {
    Ok(load_model(require(p)?)?)
}

fn file_hash(p: &Path) -> Result<String, CliError> {
    Ok(hex(&Sha256::digest(fs::read(p)?)))
}

fn model_files(p: &Path) -> Vec<PathBuf> {
    vec![p.to_path_buf(), p.with_extension("bin")]
}

/// Writes `<out>/summaries/<name>.json`; artifact paths are relative to `out`.
fn summarize(cfg: &Config, name: &str, results: Value, artifacts: &[PathBuf]) -> Result<Value, CliError> {
    let layout = Layout::new(&cfg.out);
    let mut files = Map::new();
    let mut sorted: Vec<&PathBuf> = artifacts.iter().collect();
    sorted.sort();
    for a in sorted {
        let rel = a.strip_prefix(&cfg.out).unwrap_or(a);
        files.insert(rel.to_string_lossy().replace('\\', "/"), Value::String(file_hash(a)?));
    }
    let summary = json!({
        "command": name,
        "config_sha256": cfg.hash,
        "seed": cfg.seed,
        "artifacts": files,
        "results": results,
    });
    let path = layout.summary(name);
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(&path, serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    Ok(summary)
}

fn corpus_files(c: &Corpus) -> Vec<PathBuf> {
    let mut v = vec![c.dir.join(CORPUS_FILE), c.dir.join(hsiq::scene::SCENE_FILE)];
    for e in &c.entries {
        v.push(c.dir.join(&e.cube));
        v.push(c.dir.join(&e.labels));
    }
    v
}

pub fn gen(cfg: &Config) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let test = write_corpus(&l.corpus(), &cfg.scene, cfg.seed, cfg.scenes)?;
    let calib = write_corpus(&l.calib_corpus(), &cfg.scene, cfg.seed ^ CALIB_SALT, cfg.calib_scenes)?;
    let mut files = corpus_files(&test);
    files.extend(corpus_files(&calib));
    let results = json!({
        "scenes": cfg.scenes,
        "calib_scenes": cfg.calib_scenes,
        "height": cfg.scene.height,
        "width": cfg.scene.width,
        "channels": cfg.scene.channels,
        "classes": cfg.scene.class_names(),
    });
    summarize(cfg, "gen", results, &files)
}

fn raw_cubes(scenes: &[Scene]) -> Vec<&Tensor<f32>> {
    scenes.iter().map(|s| &s.cube).collect()
}

pub fn calib(cfg: &Config) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let scenes = load_corpus(&l.calib_corpus())?.load_all()?;
    let hists = calibration_histograms(&raw_cubes(&scenes), &normalized_histogram_config())?;
    let clip = hsiq::calibration::adaptive_clip_values(&hists, cfg.coverage)?;
    fs::create_dir_all(l.calib())?;
    let files = vec![l.calib().join("histograms.txt"), l.calib().join("histograms.csv"), l.clip()];
    fs::write(&files[0], histograms_to_manifest(&hists))?;
    fs::write(&files[1], histograms_to_csv(&hists))?;
    fs::write(&files[2], clip.to_manifest())?;
    let raw_max = hists.iter().map(|h| h.max).fold(0.0, f64::max);
    let clip_max = clip.clip.iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
    let bits = cfg.recipe.data_bits;
    let results = json!({
        "coverage": cfg.coverage,
        "max_unclipped": raw_max,
        "max_clipped": clip_max,
        "fraction_bits_unclipped": minmax_bits_for_max(raw_max, bits, true),
        "fraction_bits_clipped": minmax_bits_for_max(clip_max, bits, true),
        "clip": clip.clip,
    });
    summarize(cfg, "calib", results, &files)
}

fn clip_spec(cfg: &Config, l: &Layout) -> Result<Option<ClipSpec>, CliError> {
    if !cfg.clip {
        return Ok(None);
    }
    if !l.clip().exists() {
        calib(cfg)?;
    }
    Ok(Some(ClipSpec::from_manifest(&fs::read_to_string(l.clip())?)?))
}

fn arch_of(cfg: &Config, c: &Corpus) -> ArchConfig {
    cfg.arch(c.config.channels, c.config.num_classes())
}

pub fn build(cfg: &Config) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let corpus = load_corpus(&l.corpus())?;
    let arch = arch_of(cfg, &corpus);
    let clip = clip_spec(cfg, &l)?;
    let mut m = matched_filter_model(&corpus.config, &arch, clip.as_ref())?;
    if cfg.rescale {
        m = set_input_rescale(&m, true)?;
    }
    fs::create_dir_all(l.models())?;
    save_model(&m, &l.float_model())?;
    let params = m.count_params();
    let ops = m.count_ops(m.input.height, m.input.width)?;
    let results = json!({
        "base_filters": arch.base_filters,
        "depth": arch.depth,
        "params_total": params.total,
        "params_trainable": params.trainable,
        "macs": ops.macs,
        "ops": ops.ops(),
        "clipped": clip.is_some(),
        "rescaled": cfg.rescale,
    });
    summarize(cfg, "build", results, &model_files(&l.float_model()))
}

pub fn transform(cfg: &Config, model: Option<&Path>) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let src = model.map_or_else(|| l.float_model(), Path::to_path_buf);
    let m = load(&src)?;
    let (t, log) = apply_transforms(&m, cfg.transforms)?;
    fs::create_dir_all(l.models())?;
    save_model(&t, &l.transformed_model())?;
    let mut files = model_files(&l.transformed_model());
    let mut pairs = Vec::new();
    if let Some(rep) = &log.equalization {
        let p = l.models().join("equalization.txt");
        fs::write(&p, rep.to_manifest())?;
        files.push(p);
        for pr in &rep.pairs {
            pairs.push(json!({
                "first": pr.first,
                "second": pr.second,
                "spread_before": pr.spread_before,
                "spread_after": pr.spread_after,
            }));
        }
    }
    let results = json!({
        "folded": log.folded,
        "equalized_pairs": pairs,
        "absorbed_channels": log.absorbed_channels,
        "fold": cfg.transforms.fold,
        "cle": cfg.transforms.cle,
        "bias_absorb": cfg.transforms.absorb,
    });
    summarize(cfg, "transform", results, &files)
}

pub fn quantize(cfg: &Config, model: Option<&Path>) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let src = match model {
        Some(p) => p.to_path_buf(),
        None if l.transformed_model().exists() => l.transformed_model(),
        None => l.float_model(),
    };
    let m = load(&src)?;
    let calib: Vec<Tensor<f32>> = load_corpus(&l.calib_corpus())?
        .load_all()?
        .into_iter()
        .map(|s| s.cube)
        .collect();
    let (q, report) = quantize_model(&m, &calib, &cfg.recipe)?;
    fs::create_dir_all(l.models())?;
    save_model(&q, &l.int_model())?;
    let rep_path = l.models().join("quant_report.txt");
    fs::write(&rep_path, report.to_manifest())?;
    let mut files = model_files(&l.int_model());
    files.push(rep_path);
    let results = json!({
        "source": src.file_name().map(|s| s.to_string_lossy().into_owned()),
        "data_bits": cfg.recipe.data_bits,
        "bias_bits": cfg.recipe.bias_bits,
        "minmse": cfg.recipe.weight_minmse,
        "input_grid": hsiq::manifest::format_qparams(q.input_quant.as_ref().unwrap()),
        "layers": report.layers.len(),
        "warnings": report.warnings,
    });
    summarize(cfg, "quantize", results, &files)
}

fn engine_model(l: &Layout, engine: Engine) -> PathBuf {
    match engine {
        Engine::Float => l.float_model(),
        _ => l.int_model(),
    }
}

pub fn infer(cfg: &Config, engine: Engine, model: Option<&Path>) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let m = load(&model.map_or_else(|| engine_model(&l, engine), Path::to_path_buf))?;
    let corpus = load_corpus(&l.corpus())?;
    let scenes = corpus.load_all()?;
    let outputs = predict_all(&m, &raw_cubes(&scenes), engine)?;
    let dir = l.predictions(engine);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut sat = SaturationReport::default();
    for ((e, o), s) in corpus.entries.iter().zip(&outputs).zip(&scenes) {
        let p = dir.join(&e.labels);
        write_labels(
            &p,
            &LabelMap {
                labels: o.labels.clone(),
                ..s.labels.clone()
            },
        )?;
        files.push(p);
        if let Some(r) = &o.saturation {
            sat.merge(r);
        }
    }
    let mut results = json!({ "engine": engine.to_string(), "scenes": scenes.len() });
    if matches!(engine, Engine::Int { .. }) {
        let p = dir.join("saturation.txt");
        fs::write(&p, sat.to_manifest())?;
        files.push(p);
        let clipped: u64 = sat.layers.iter().map(|s| s.low + s.high).sum::<u64>() + sat.input.high;
        results["saturated_values"] = json!(clipped);
    }
    summarize(cfg, &format!("infer_{engine}"), results, &files)
}

fn metrics_for(
    l: &Layout,
    corpus: &Corpus,
    scenes: &[Scene],
    engine: Engine,
) -> Result<(ConfusionMatrix, Metrics), CliError> {
    let dir = l.predictions(engine);
    let preds = corpus
        .entries
        .iter()
        .map(|e| Ok(read_labels(require(&dir.join(&e.labels))?)?.labels))
        .collect::<Result<Vec<_>, CliError>>()?;
    let cm = confusion(corpus.config.class_names(), &preds, scenes)?;
    let metrics = compute_metrics(&cm, &ClassWeights::InverseFrequency)?;
    Ok((cm, metrics))
}

pub fn eval(cfg: &Config, engine: Engine) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let corpus = load_corpus(&l.corpus())?;
    let scenes = corpus.load_all()?;
    let (cm, metrics) = metrics_for(&l, &corpus, &scenes, engine)?;
    let out = l.eval(engine);
    fs::create_dir_all(&out)?;
    let files = vec![out.join("metrics.csv"), out.join("metrics.txt"), out.join("confusion.csv")];
    fs::write(&files[0], metrics.to_csv())?;
    fs::write(&files[1], metrics.to_table())?;
    fs::write(&files[2], cm.to_csv())?;
    let mut results = json!({
        "engine": engine.to_string(),
        "pixels": metrics.pixels,
        "global_iou": metrics.global.iou,
        "global_recall": metrics.global.recall,
        "weighted_iou": metrics.weighted.iou,
        "per_class_iou": metrics
            .classes
            .iter()
            .map(|c| (c.name.clone(), json!(c.scores.map(|s| s.iou))))
            .collect::<Map<_, _>>(),
    });
    if engine != Engine::Float && l.predictions(Engine::Float).exists() {
        let (_, float) = metrics_for(&l, &corpus, &scenes, Engine::Float)?;
        results["float_global_iou"] = json!(float.global.iou);
        results["iou_gap_pp"] = json!(100.0 * (float.global.iou - metrics.global.iou));
    }
    print!("{}", metrics.to_table());
    summarize(cfg, &format!("eval_{engine}"), results, &files)
}

pub fn perf(cfg: &Config) -> Result<Value, CliError> {
    let l = Layout::new(&cfg.out);
    let reference = build_fcn(&ArchConfig::FULL, 208, 400)?;
    let ref_ops = reference.count_ops(208, 400)?;
    let mut text = String::from("# reference model: 32 filters, depth 4, 25 channels, 5 classes, 208x400\n");
    let ref_report = perf_report(&ref_ops, &cfg.dpu, Some(cfg.fps))?;
    text += &ref_report.to_text();
    let mut csv = String::new();
    for (i, line) in ref_report.to_csv().lines().enumerate() {
        csv += &format!("{},{line}\n", if i == 0 { "model" } else { "reference" });
    }
    let mut results = json!({
        "peak_ops": ref_report.peak,
        "peak": hsiq::perf::format_ops(ref_report.peak),
        "efficiency": cfg.dpu.efficiency,
        "reference_macs": ref_ops.macs,
        "reference_ops": ref_ops.ops(),
        "measured_fps": MEASURED_FPS,
        "reference_effective_ops": ref_report.rows.iter()
            .map(|r| (r.convention.name().to_string(), json!(r.effective_at_fps)))
            .collect::<Map<_, _>>(),
    });
    if l.float_model().exists() {
        let m = load(&l.float_model())?;
        let ops = m.count_ops(m.input.height, m.input.width)?;
        let rep = perf_report(&ops, &cfg.dpu, None)?;
        text += &format!("# built model, {}x{}\n", m.input.height, m.input.width);
        text += &rep.to_text();
        for line in rep.to_csv().lines().skip(1) {
            csv += &format!("built,{line}\n");
        }
        results["built_latency_s"] = json!(rep.rows.iter().map(|r| r.latency).collect::<Vec<_>>());
    }
    fs::create_dir_all(l.perf())?;
    let files = vec![l.perf().join("perf.txt"), l.perf().join("perf.csv")];
    fs::write(&files[0], &text)?;
    fs::write(&files[1], &csv)?;
    print!("{text}");
    summarize(cfg, "perf", results, &files)
}

pub fn verify_mac(cfg: &Config) -> Result<Value, CliError> {
    let (passed, total) = verify_packed_mac();
    let ok = passed == total;
    println!("{passed}/{total} {}", if ok { "OK" } else { "FAILED" });
    let summary = summarize(cfg, "verify_mac", json!({ "passed": passed, "total": total }), &[])?;
    if !ok {
        return Err(CliError::Verify(format!("{} packed products differ", total - passed)));
    }
    Ok(summary)
}

/// Every stage in order, inferring and evaluating in float and `cfg.engine`.
pub fn pipeline(cfg: &Config) -> Result<Value, CliError> {
    gen(cfg)?;
    if cfg.clip {
        calib(cfg)?;
    }
    build(cfg)?;
    transform(cfg, None)?;
    quantize(cfg, None)?;
    infer(cfg, Engine::Float, None)?;
    eval(cfg, Engine::Float)?;
    let mut results = json!({});
    if cfg.engine != Engine::Float {
        infer(cfg, cfg.engine, None)?;
        let e = eval(cfg, cfg.engine)?;
        results = e["results"].clone();
    }
    perf(cfg)?;
    summarize(cfg, "pipeline", results, &[])
}
