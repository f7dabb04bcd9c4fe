use hsiq::metrics::{compute_metrics, ClassWeights};
use hsiq::model::{load_model, save_model, ArchConfig};
use hsiq::pipeline::{apply_transforms, clip_from_cubes, evaluate, predict, Engine, TransformOptions};
use hsiq::quantizer::{quantize_model, QuantizationRecipe};
use hsiq::scene::{generate_corpus, matched_filter_model, read_corpus, write_corpus, SceneConfig, CLASS_NAMES};

fn small() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 48,
        ..SceneConfig::default()
    }
}

fn names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn float_to_int8_keeps_segmentation_quality() {
    let cfg = small();
    let scenes = generate_corpus(&cfg, 5, 4).unwrap();
    let calib: Vec<_> = generate_corpus(&cfg, 6, 3).unwrap().into_iter().map(|s| s.cube).collect();
    let clip = clip_from_cubes(&calib.iter().collect::<Vec<_>>(), 0.9995).unwrap();
    let m = matched_filter_model(&cfg, &ArchConfig::new(8, 2, 25, 5), Some(&clip)).unwrap();
    let (t, log) = apply_transforms(&m, TransformOptions::default()).unwrap();
    assert!(log.folded);
    let (q, _) = quantize_model(&t, &calib, &QuantizationRecipe::default()).unwrap();

    let iou = |model, engine| {
        let cm = evaluate(model, &scenes, names(), engine).unwrap();
        compute_metrics(&cm, &ClassWeights::InverseFrequency).unwrap().global.iou
    };
    let f = iou(&m, Engine::Float);
    let i = iou(&q, Engine::Int { packed: false });
    assert!(f > 0.95, "float IoU {f}");
    assert!(f - i < 0.005, "float {f} int {i}");
    assert!(predict(&m, &scenes[0].cube, Engine::Int { packed: true }).is_err());
}

#[test]
fn artifacts_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let corpus = write_corpus(dir.path(), &cfg, 9, 2).unwrap();
    let back = read_corpus(dir.path()).unwrap();
    assert_eq!(back.entries.len(), 2);
    let a = corpus.load_scene(1).unwrap();
    let b = back.load_scene(1).unwrap();
    assert_eq!(a.cube, b.cube);
    assert_eq!(a.labels.labels, b.labels.labels);

    let cubes: Vec<_> = back.load_all().unwrap().into_iter().map(|s| s.cube).collect();
    let clip = clip_from_cubes(&cubes.iter().collect::<Vec<_>>(), 0.999).unwrap();
    let m = matched_filter_model(&cfg, &ArchConfig::new(6, 1, 25, 5), Some(&clip)).unwrap();
    let (t, _) = apply_transforms(&m, TransformOptions::default()).unwrap();
    let (q, _) = quantize_model(&t, &cubes, &QuantizationRecipe::default()).unwrap();
    let path = dir.path().join("q.fcnq");
    save_model(&q, &path).unwrap();
    let r = load_model(&path).unwrap();
    let e = Engine::Int { packed: true };
    assert_eq!(
        predict(&q, &cubes[0], e).unwrap().labels,
        predict(&r, &cubes[0], e).unwrap().labels
    );
}
