//! Synthetic hyperspectral road scenes, their file formats, and an analytic
//! nearest-signature model built on the encoder-decoder graph.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::calibration::ClipSpec;
use crate::error::{Error, Result};
use crate::manifest::{self, Record};
use crate::metrics::IGNORE_LABEL;
use crate::model::{build_fcn, ArchConfig, ConvParams, ModelGraph, Preprocess};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["Tarmac", "Road Marks", "Vegetation", "Sky", "Others"];

/// Mixing weight of the upsampled deep path in each decoder level of
/// [`matched_filter_model`].
pub const DEEP_PATH_GAIN: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSignature {
    pub name: String,
    /// L1-normalised mean spectrum.
    pub mean: Vec<f32>,
    /// Multiplier on [`SceneConfig::noise`] for this class.
    pub noise_scale: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: Vec<ClassSignature>,
    /// Per-channel noise std in normalised units.
    pub noise: f32,
    /// Lag-one correlation of the noise across neighbouring channels.
    pub correlation: f32,
    /// Region brightness varies uniformly in `1 ± illumination`.
    pub illumination: f32,
    /// Mean raw pixel sum (sensor counts).
    pub radiance: f32,
    pub rectangles: usize,
    pub min_rect: usize,
    /// Fraction of pixels that keep their label; the rest become 255.
    pub label_density: f64,
    /// Probability that a pixel carries a specular spike.
    pub outlier_rate: f64,
    /// Spike height as a multiple of the pixel's raw sum.
    pub outlier_gain: f32,
    /// Minimum pairwise signature distance in units of `noise`.
    pub margin: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            channels: 25,
            classes: default_signatures(25, 0x5eed),
            noise: 0.004,
            correlation: 0.5,
            illumination: 0.3,
            radiance: 4000.0,
            rectangles: 6,
            min_rect: 8,
            label_density: 0.9,
            outlier_rate: 2e-4,
            outlier_gain: 500.0,
            margin: 8.0,
        }
    }
}

impl SceneConfig {
    /// Signatures pulled towards their mean and frequent specular spikes:
    /// separable in float, not on a grid sized for the spikes.
    pub fn stress() -> Self {
        let mut cfg = Self::default();
        cfg.classes = contract_signatures(&cfg.classes, 0.15);
        cfg.noise = 0.0005;
        cfg.outlier_rate = 5e-4;
        cfg.outlier_gain = 2000.0;
        cfg
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "degenerate scene {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if self.classes.is_empty() || self.classes.len() > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("{} classes", self.classes.len())));
        }
        for c in &self.classes {
            if c.mean.len() != self.channels {
                return Err(Error::Config(format!(
                    "signature `{}` has {} channels, expected {}",
                    c.name,
                    c.mean.len(),
                    self.channels
                )));
            }
            if c.mean.iter().any(|&v| !(v >= 0.0)) || !(c.noise_scale >= 0.0) {
                return Err(Error::Config(format!("signature `{}` is negative", c.name)));
            }
        }
        if !(self.noise >= 0.0)
            || !(0.0..1.0).contains(&self.correlation)
            || !(0.0..1.0).contains(&self.illumination)
            || !(self.radiance > 0.0)
            || !(0.0..=1.0).contains(&self.label_density)
            || !(0.0..=1.0).contains(&self.outlier_rate)
            || !(self.outlier_gain >= 0.0)
        {
            return Err(Error::Config("scene parameter out of range".into()));
        }
        if self.min_rect == 0 {
            return Err(Error::Config("min_rect must be positive".into()));
        }
        let sep = self.min_separation();
        if self.classes.len() > 1 && sep < self.margin * self.noise {
            return Err(Error::Config(format!(
                "signature separation {sep:.5} below {} x noise {}",
                self.margin, self.noise
            )));
        }
        Ok(())
    }

    /// Smallest L2 distance between two class signatures.
    pub fn min_separation(&self) -> f32 {
        let mut best = f32::INFINITY;
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                let d: f32 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    pub fn to_manifest(&self) -> String {
        let mut out = format!("{SCENE_MAGIC} 1\n");
        let r = Record::new("scene")
            .set("height", self.height)
            .set("width", self.width)
            .set("channels", self.channels)
            .set("noise", self.noise)
            .set("correlation", self.correlation)
            .set("illumination", self.illumination)
            .set("radiance", self.radiance)
            .set("rectangles", self.rectangles)
            .set("min_rect", self.min_rect)
            .set("label_density", self.label_density)
            .set("outlier_rate", self.outlier_rate)
            .set("outlier_gain", self.outlier_gain)
            .set("margin", self.margin);
        writeln!(out, "{r}").unwrap();
        for c in &self.classes {
            let r = Record::new("class")
                .arg(c.name.replace(' ', "_"))
                .set("noise_scale", c.noise_scale)
                .set("mean", manifest::format_list(&c.mean, ','));
            writeln!(out, "{r}").unwrap();
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let records = manifest::parse_records(text);
        let body = manifest::expect_header(&records, SCENE_MAGIC, 1)?;
        let s = body
            .iter()
            .find(|r| r.tag == "scene")
            .ok_or_else(|| Error::Truncated("scene manifest without a `scene` record".into()))?;
        let classes = body
            .iter()
            .filter(|r| r.tag == "class")
            .map(|r| {
                Ok(ClassSignature {
                    name: r.parse_arg::<String>(0)?.replace('_', " "),
                    noise_scale: r.parse("noise_scale")?,
                    mean: manifest::parse_list(r.get("mean")?, ',')?,
                })
            })
            .collect::<Result<_>>()?;
        let cfg = Self {
            height: s.parse("height")?,
            width: s.parse("width")?,
            channels: s.parse("channels")?,
            classes,
            noise: s.parse("noise")?,
            correlation: s.parse("correlation")?,
            illumination: s.parse("illumination")?,
            radiance: s.parse("radiance")?,
            rectangles: s.parse("rectangles")?,
            min_rect: s.parse("min_rect")?,
            label_density: s.parse("label_density")?,
            outlier_rate: s.parse("outlier_rate")?,
            outlier_gain: s.parse("outlier_gain")?,
            margin: s.parse("margin")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const SCENE_MAGIC: &str = "SCENE1";

/// Smooth positive spectra: a flat floor plus two Gaussian bumps per class,
/// normalised to unit sum.
pub fn default_signatures(channels: usize, seed: u64) -> Vec<ClassSignature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CLASS_NAMES
        .iter()
        .map(|name| {
            let mut s = vec![1.0f64; channels];
            for _ in 0..2 {
                let centre = rng.random_range(0.0..channels as f64);
                let width = rng.random_range(1.0..2.0);
                let amp = rng.random_range(0.5..1.2);
                for (c, v) in s.iter_mut().enumerate() {
                    let d = (c as f64 - centre) / width;
                    *v += amp * (-0.5 * d * d).exp();
                }
            }
            let sum: f64 = s.iter().sum();
            ClassSignature {
                name: name.to_string(),
                mean: s.iter().map(|v| (v / sum) as f32).collect(),
                noise_scale: 1.0,
            }
        })
        .collect()
}

/// `s̄ + λ(s_k − s̄)`: same centroid, separation scaled by `lambda`.
pub fn contract_signatures(classes: &[ClassSignature], lambda: f32) -> Vec<ClassSignature> {
    let c = classes[0].mean.len();
    let k = classes.len() as f32;
    let centroid: Vec<f32> = (0..c).map(|i| classes.iter().map(|s| s.mean[i]).sum::<f32>() / k).collect();
    classes
        .iter()
        .map(|s| ClassSignature {
            mean: s.mean.iter().zip(&centroid).map(|(v, m)| m + lambda * (v - m)).collect(),
            ..s.clone()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "{} labels for {}x{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(&l) = self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= self.classes)
        {
            return Err(Error::Label {
                label: l,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Raw `[C, H, W]` radiance.
    pub cube: Tensor<f32>,
    pub labels: LabelMap,
}

/// Random class rectangles over a random background, filled with noisy
/// signatures at per-region brightness. Deterministic in `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let k = cfg.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut region = vec![0u16; h * w];
    let mut region_class = vec![rng.random_range(0..k)];
    for r in 0..cfg.rectangles {
        let rh = rng.random_range(cfg.min_rect.min(h)..=(h / 2).max(cfg.min_rect.min(h)));
        let rw = rng.random_range(cfg.min_rect.min(w)..=(w / 2).max(cfg.min_rect.min(w)));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        region_class.push(rng.random_range(0..k));
        for y in y0..y0 + rh {
            region[y * w + x0..y * w + x0 + rw].fill(r as u16 + 1);
        }
    }
    let gain: Vec<f32> = region_class
        .iter()
        .map(|_| cfg.radiance * (1.0 + cfg.illumination * rng.random_range(-1.0f32..=1.0)))
        .collect();

    let px = h * w;
    let mut data = vec![0f32; c * px];
    let mut labels = vec![0u8; px];
    let rho = cfg.correlation;
    let innov = (1.0 - rho * rho).sqrt();
    let mut spec = vec![0f32; c];
    for p in 0..px {
        let r = region[p] as usize;
        let class = &cfg.classes[region_class[r]];
        let sigma = cfg.noise * class.noise_scale;
        let mut n = 0f32;
        for (i, v) in spec.iter_mut().enumerate() {
            let e: f32 = StandardNormal.sample(&mut rng);
            n = if i == 0 { e } else { rho * n + innov * e };
            *v = (class.mean[i] + sigma * n).max(0.0) * gain[r];
        }
        if cfg.outlier_rate > 0.0 && rng.random_bool(cfg.outlier_rate) {
            let sum: f32 = spec.iter().sum();
            spec[rng.random_range(0..c)] += cfg.outlier_gain * sum;
        }
        for (i, v) in spec.iter().enumerate() {
            data[i * px + p] = *v;
        }
        labels[p] = if cfg.label_density >= 1.0 || rng.random_bool(cfg.label_density) {
            region_class[r] as u8
        } else {
            IGNORE_LABEL
        };
    }
    Ok(Scene {
        cube: Tensor::from_vec(vec![c, h, w], data)?,
        labels: LabelMap {
            height: h,
            width: w,
            classes: k,
            labels,
        },
    })
}

/// Seed of the `i`-th scene of a corpus.
pub fn scene_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn generate_corpus(cfg: &SceneConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, scene_seed(seed, i)))
        .collect()
}

/// Nearest-signature classifier expressed as an encoder-decoder graph.
///
/// The first convolution scores every class against the (clipped) signatures
/// with an affine matched filter shifted to be non-negative. All later layers
/// pass those scores through as identities, and each decoder level adds the
/// upsampled deep path at [`DEEP_PATH_GAIN`]. Unused channels stay zero.
pub fn matched_filter_model(cfg: &SceneConfig, arch: &ArchConfig, clip: Option<&ClipSpec>) -> Result<ModelGraph> {
    cfg.validate()?;
    let k = cfg.num_classes();
    if arch.in_channels != cfg.channels || arch.num_classes != k {
        return Err(Error::Config(format!(
            "architecture expects {} channels / {} classes, scene has {} / {k}",
            arch.in_channels, arch.num_classes, cfg.channels
        )));
    }
    if arch.base_filters < k {
        return Err(Error::Config(format!(
            "{} base filters cannot carry {k} class scores",
            arch.base_filters
        )));
    }
    if let Some(cs) = clip {
        if cs.clip.len() != cfg.channels {
            return Err(Error::Shape(format!(
                "{} clip values for {} channels",
                cs.clip.len(),
                cfg.channels
            )));
        }
    }
    let templates: Vec<Vec<f64>> = cfg
        .classes
        .iter()
        .map(|s| {
            s.mean
                .iter()
                .enumerate()
                .map(|(i, &v)| clip.map_or(v, |cs| v.min(cs.clip[i])) as f64)
                .collect()
        })
        .collect();
    let (weights, bias) = matched_filter(&templates);

    let mut m = build_fcn(arch, cfg.height, cfg.width)?;
    m.preprocess = Preprocess {
        l1_normalize: true,
        clip: clip.map(|cs| cs.clip.clone()),
        rescale: false,
    };
    for node in &mut m.nodes {
        let first = node.name == "enc0.conv_a";
        let mixer = node.name.starts_with("dec") && node.name.ends_with(".conv_a");
        let Some(p) = node.layer.conv_mut() else { continue };
        if first {
            for (o, (row, b)) in weights.iter().zip(&bias).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    set_tap(p, o, c, v as f32);
                }
                p.bias[o] = *b as f32;
            }
        } else if mixer {
            let half = p.in_channels() / 2;
            for o in 0..k {
                set_tap(p, o, o, 1.0);
                set_tap(p, o, half + o, DEEP_PATH_GAIN);
            }
        } else {
            for o in 0..k {
                set_tap(p, o, o, 1.0);
            }
        }
    }
    m.validate()?;
    Ok(m)
}

/// Centre tap for odd kernels, every tap for the 2×2 transposed kernel.
fn set_tap(p: &mut ConvParams, o: usize, c: usize, v: f32) {
    let (cin, k) = (p.in_channels(), p.kernel());
    let base = (o * cin + c) * k * k;
    let w = p.weight.data_mut();
    if k % 2 == 1 {
        w[base + (k / 2) * k + k / 2] = v;
    } else {
        w[base..base + k * k].fill(v);
    }
}

/// Rows `γ(t_k − t̄)`, biases `β − γ(|t_k|² − |t̄|²)/2`, scaled so the scores of
/// the templates themselves span `[0.25, 1.25]`.
fn matched_filter(templates: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = templates.len();
    let c = templates[0].len();
    let mean: Vec<f64> = (0..c).map(|i| templates.iter().map(|t| t[i]).sum::<f64>() / k as f64).collect();
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let rows: Vec<Vec<f64>> = templates
        .iter()
        .map(|t| t.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let bias: Vec<f64> = templates.iter().map(|t| -(sq(t) - sq(&mean)) / 2.0).collect();
    let score = |o: usize, x: &[f64]| rows[o].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[o];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for o in 0..k {
        for t in templates {
            let s = score(o, t);
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    let gamma = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    let shift = 0.25 - gamma * lo;
    (
        rows.iter().map(|r| r.iter().map(|v| v * gamma).collect()).collect(),
        bias.iter().map(|b| b * gamma + shift).collect(),
    )
}

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";

fn header(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<[usize; 3]> {
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!("{what} header")));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!("{what}: bad magic")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    }
    Ok(dims)
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], dims: [usize; 3]) -> Result<()> {
    out.extend_from_slice(magic);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// `HSC1`, then `H W C` as u32 LE, then channel-major f32 LE samples.
pub fn encode_cube(cube: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = cube.chw()?;
    let mut out = Vec::with_capacity(16 + 4 * cube.len());
    write_header(&mut out, CUBE_MAGIC, [h, w, c])?;
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<Tensor<f32>> {
    let [h, w, c] = header(bytes, CUBE_MAGIC, "cube")?;
    let n = h * w * c;
    let payload = &bytes[16..];
    if payload.len() != 4 * n {
        return Err(Error::Truncated(format!(
            "cube {h}x{w}x{c} needs {} payload bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::from_vec(vec![c, h, w], data)
}

/// `LBL1`, then `H W classes` as u32 LE, then one byte per pixel.
pub fn encode_labels(l: &LabelMap) -> Result<Vec<u8>> {
    l.validate()?;
    let mut out = Vec::with_capacity(16 + l.labels.len());
    write_header(&mut out, LABEL_MAGIC, [l.height, l.width, l.classes])?;
    out.extend_from_slice(&l.labels);
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let [height, width, classes] = header(bytes, LABEL_MAGIC, "labels")?;
    let payload = &bytes[16..];
    if payload.len() != height * width {
        return Err(Error::Truncated(format!(
            "labels {height}x{width} need {} bytes, found {}",
            height * width,
            payload.len()
        )));
    }
    let l = LabelMap {
        height,
        width,
        classes,
        labels: payload.to_vec(),
    };
    l.validate()?;
    Ok(l)
}

pub fn write_cube(path: &Path, cube: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_cube(cube)?)?)
}

pub fn read_cube(path: &Path) -> Result<Tensor<f32>> {
    decode_cube(&fs::read(path)?)
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    Ok(fs::write(path, encode_labels(l)?)?)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&fs::read(path)?)
}

pub const CORPUS_MAGIC: &str = "CORPUS1";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const SCENE_FILE: &str = "scene.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub cube: String,
    pub labels: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dir: PathBuf,
    pub config: SceneConfig,
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load_scene(&self, i: usize) -> Result<Scene> {
        let e = &self.entries[i];
        Ok(Scene {
            cube: read_cube(&self.dir.join(&e.cube))?,
            labels: read_labels(&self.dir.join(&e.labels))?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Scene>> {
        (0..self.entries.len()).into_par_iter().map(|i| self.load_scene(i)).collect()
    }
}

/// Writes `count` scenes plus `scene.txt` and `corpus.txt` into `dir`.
pub fn write_corpus(dir: &Path, cfg: &SceneConfig, seed: u64, count: usize) -> Result<Corpus> {
    fs::create_dir_all(dir)?;
    let entries: Vec<CorpusEntry> = (0..count)
        .into_par_iter()
        .map(|i| {
            let s = scene_seed(seed, i);
            let scene = generate_scene(cfg, s)?;
            let e = CorpusEntry {
                cube: format!("scene_{i:04}.hsc"),
                labels: format!("scene_{i:04}.lbl"),
                seed: s,
            };
            write_cube(&dir.join(&e.cube), &scene.cube)?;
            write_labels(&dir.join(&e.labels), &scene.labels)?;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    fs::write(dir.join(SCENE_FILE), cfg.to_manifest())?;
    let mut text = format!("{CORPUS_MAGIC} 1\n");
    writeln!(text, "{}", Record::new("corpus").set("seed", seed).set("count", count)).unwrap();
    for e in &entries {
        let r = Record::new("scene")
            .set("cube", &e.cube)
            .set("labels", &e.labels)
            .set("seed", e.seed);
        writeln!(text, "{r}").unwrap();
    }
    fs::write(dir.join(CORPUS_FILE), text)?;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        config: cfg.clone(),
        seed,
        entries,
    })
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let config = SceneConfig::from_manifest(&fs::read_to_string(dir.join(SCENE_FILE))?)?;
    let records = manifest::parse_records(&fs::read_to_string(dir.join(CORPUS_FILE))?);
    let body = manifest::expect_header(&records, CORPUS_MAGIC, 1)?;
    let head = body
        .iter()
        .find(|r| r.tag == "corpus")
        .ok_or_else(|| Error::Truncated("corpus manifest without a `corpus` record".into()))?;
    let entries = body
        .iter()
        .filter(|r| r.tag == "scene")
        .map(|r| {
            Ok(CorpusEntry {
                cube: r.get("cube")?.to_string(),
                labels: r.get("labels")?.to_string(),
                seed: r.parse("seed")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        config,
        seed: head.parse("seed")?,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{adaptive_clip_values, collect_channel_stats, minmax_fraction_bits, HistogramConfig};
    use crate::metrics::{compute_metrics, ClassWeights, ConfusionMatrix};
    use crate::reference::{forward, l1_normalize};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Just};

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 48,
            ..SceneConfig::default()
        }
    }

    fn normalized(s: &Scene) -> Tensor<f32> {
        let mut x = s.cube.clone();
        l1_normalize(&mut x).unwrap();
        x
    }

    fn eval(m: &ModelGraph, scenes: &[Scene]) -> crate::metrics::Metrics {
        let mut cm = ConfusionMatrix::new(CLASS_NAMES.iter().map(|s| s.to_string()).collect());
        for s in scenes {
            let p = forward(m, &s.cube).unwrap();
            cm.accumulate(&p.labels, &s.labels.labels, IGNORE_LABEL).unwrap();
        }
        compute_metrics(&cm, &ClassWeights::InverseFrequency).unwrap()
    }

    #[test]
    fn signatures_are_valid() {
        let cfg = SceneConfig::default();
        cfg.validate().unwrap();
        SceneConfig::stress().validate().unwrap();
        for c in &cfg.classes {
            let s: f32 = c.mean.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(cfg.class_names()[1], "Road Marks");
    }

    #[test]
    fn noiseless_single_class_is_the_signature() {
        let mut cfg = small();
        cfg.classes.truncate(1);
        cfg.noise = 0.0;
        cfg.illumination = 0.0;
        cfg.outlier_rate = 0.0;
        cfg.radiance = 1.0;
        let s = generate_scene(&cfg, 3).unwrap();
        let px = cfg.height * cfg.width;
        for (c, plane) in s.cube.data().chunks(px).enumerate() {
            assert!(plane.iter().all(|&v| v == cfg.classes[0].mean[c]));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn degenerate_dims_rejected() {
        let cfg = SceneConfig {
            height: 0,
            ..small()
        };
        assert!(generate_scene(&cfg, 0).is_err());
        let mut cfg = small();
        cfg.noise = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn label_density_masks_pixels() {
        let mut cfg = small();
        cfg.label_density = 0.5;
        let s = generate_scene(&cfg, 5).unwrap();
        let masked = s.labels.labels.iter().filter(|&&l| l == IGNORE_LABEL).count() as f64;
        let frac = masked / s.labels.labels.len() as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn normalized_histogram_peaks_near_inverse_channel_count() {
        let cfg = SceneConfig::default();
        let mut counts = vec![0u64; 100];
        for s in generate_corpus(&cfg, 1, 4).unwrap() {
            for &v in normalized(&s).data() {
                if v < 0.2 {
                    counts[(v / 0.002) as usize] += 1;
                }
            }
        }
        let peak = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0;
        let centre = (peak as f32 + 0.5) * 0.002;
        assert!((centre - 0.04).abs() <= 0.01, "peak at {centre}");
    }

    #[test]
    fn clipping_recovers_fraction_bits() {
        let scenes = generate_corpus(&SceneConfig::default(), 9, 6).unwrap();
        let cubes: Vec<Tensor<f32>> = scenes.iter().map(normalized).collect();
        let all: Vec<f32> = cubes.iter().flat_map(|c| c.data().to_vec()).collect();
        let f_raw = minmax_fraction_bits(&all, 8, true).unwrap();
        let hists = collect_channel_stats(&cubes, &HistogramConfig::default()).unwrap();
        let clip = adaptive_clip_values(&hists, 0.9995).unwrap();
        let clipped: Vec<f32> = cubes.iter().flat_map(|c| clip.apply(c).unwrap().into_data()).collect();
        let f_clip = minmax_fraction_bits(&clipped, 8, true).unwrap();
        assert_eq!(f_raw, 6);
        assert!(f_clip >= f_raw + 3, "{f_clip} vs {f_raw}");
    }

    #[test]
    fn matched_filter_noiseless_is_exact() {
        let mut cfg = small();
        cfg.noise = 0.0;
        cfg.outlier_rate = 0.0;
        let arch = ArchConfig::new(8, 2, 25, 5);
        let m = matched_filter_model(&cfg, &arch, None).unwrap();
        let scenes = generate_corpus(&cfg, 2, 3).unwrap();
        let r = eval(&m, &scenes);
        assert_eq!(r.global.iou, 1.0);
    }

    #[test]
    fn matched_filter_default_benchmark() {
        let cfg = SceneConfig::default();
        let scenes = generate_corpus(&cfg, 21, 6).unwrap();
        let cubes: Vec<Tensor<f32>> = scenes.iter().map(normalized).collect();
        let clip = adaptive_clip_values(&collect_channel_stats(&cubes, &HistogramConfig::default()).unwrap(), 0.9995)
            .unwrap();
        let m = matched_filter_model(&cfg, &ArchConfig::new(8, 2, 25, 5), Some(&clip)).unwrap();
        let r = eval(&m, &scenes);
        for c in &r.classes {
            if let Some(s) = c.scores {
                assert!(s.iou >= 0.95, "{}: {}", c.name, s.iou);
            }
        }
    }

    #[test]
    fn permuting_signatures_permutes_labels() {
        let mut cfg = small();
        cfg.outlier_rate = 0.0;
        let arch = ArchConfig::new(8, 2, 25, 5);
        let scene = generate_scene(&cfg, 4).unwrap();
        let a = forward(&matched_filter_model(&cfg, &arch, None).unwrap(), &scene.cube).unwrap();
        let mut swapped = cfg.clone();
        swapped.classes.swap(0, 3);
        let b = forward(&matched_filter_model(&swapped, &arch, None).unwrap(), &scene.cube).unwrap();
        let perm = [3u8, 1, 2, 0, 4];
        for (x, y) in a.labels.iter().zip(&b.labels) {
            assert_eq!(perm[*x as usize], *y);
        }
    }

    #[test]
    fn model_checks() {
        let cfg = small();
        assert!(matched_filter_model(&cfg, &ArchConfig::new(4, 2, 25, 5), None).is_err());
        assert!(matched_filter_model(&cfg, &ArchConfig::new(8, 2, 24, 5), None).is_err());
        let bad = ClipSpec {
            clip: vec![1.0; 3],
            coverage: 1.0,
        };
        assert!(matched_filter_model(&cfg, &ArchConfig::new(8, 2, 25, 5), Some(&bad)).is_err());
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let c = write_corpus(dir.path(), &cfg, 77, 3).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.load_scene(1).unwrap(), generate_scene(&cfg, scene_seed(77, 1)).unwrap());
    }

    #[test]
    fn file_format_errors() {
        let cube = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_cube(&cube).unwrap();
        assert_eq!(&bytes[..4], b"HSC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert!(matches!(decode_cube(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cube(&bad), Err(Error::Format(_))));
        let l = LabelMap {
            height: 1,
            width: 3,
            classes: 2,
            labels: vec![0, 1, 2],
        };
        assert!(matches!(encode_labels(&l), Err(Error::Label { label: 2, .. })));
    }

    proptest! {
        #[test]
        fn cube_roundtrip(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1e3f32..1e3)).collect();
            let cube = Tensor::from_vec(vec![c, h, w], data).unwrap();
            prop_assert_eq!(decode_cube(&encode_cube(&cube).unwrap()).unwrap(), cube);
        }

        #[test]
        fn labels_roundtrip(labels in prop::collection::vec(prop_oneof![0u8..5, Just(255u8)], 12)) {
            let l = LabelMap { height: 3, width: 4, classes: 5, labels };
            prop_assert_eq!(decode_labels(&encode_labels(&l).unwrap()).unwrap(), l);
        }

        #[test]
        fn normalized_scenes_sum_to_one(seed in 0u64..1000) {
            let cfg = SceneConfig { height: 8, width: 8, rectangles: 2, min_rect: 2, ..SceneConfig::default() };
            let x = normalized(&generate_scene(&cfg, seed).unwrap());
            for p in 0..64 {
                let s: f32 = (0..25).map(|c| x.data()[c * 64 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
