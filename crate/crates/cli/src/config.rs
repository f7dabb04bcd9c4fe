//! Flat `key = value` run configuration. Flags override the file, which
//! overrides the defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hsiq::model::ArchConfig;
use hsiq::perf::DpuArch;
use hsiq::pipeline::{Engine, TransformOptions};
use hsiq::quantizer::QuantizationRecipe;
use hsiq::scene::SceneConfig;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Keys that do not influence any artifact and stay out of the config hash.
const UNHASHED: [&str; 2] = ["out", "threads"];

const DEFAULTS: &[(&str, &str)] = &[
    ("out", "out"),
    ("threads", "0"),
    ("seed", "1"),
    ("preset", "default"),
    ("height", "0"),
    ("width", "0"),
    ("scenes", "20"),
    ("calib_scenes", "8"),
    ("base_filters", "8"),
    ("depth", "2"),
    ("clip", "true"),
    ("coverage", "0.9995"),
    ("rescale", "false"),
    ("fold", "true"),
    ("cle", "true"),
    ("bias_absorb", "true"),
    ("minmse", "true"),
    ("anchor_relu", "true"),
    ("data_bits", "8"),
    ("bias_bits", "32"),
    ("engine", "int"),
    ("ops_per_cycle", "4096"),
    ("clock_hz", "300000000"),
    ("efficiency", "measured"),
    ("fps", "14.14"),
];

#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut s = Self::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|_| CliError::Missing(p.to_path_buf()))?;
            s.merge_text(&text)?;
        }
        Ok(s)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Config(format!("bad value `{raw}` for `{key}`")))
    }

    /// Canonical `key=value` lines of every artifact-relevant setting.
    pub fn canonical(&self) -> String {
        self.values
            .iter()
            .filter(|(k, _)| !UNHASHED.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn resolve(&self) -> Result<Config, CliError> {
        let preset = self.raw("preset");
        let mut scene = match preset {
            "default" => SceneConfig::default(),
            "stress" => SceneConfig::stress(),
            _ => return Err(CliError::Config(format!("unknown preset `{preset}`"))),
        };
        let (h, w): (usize, usize) = (self.get("height")?, self.get("width")?);
        if h > 0 {
            scene.height = h;
        }
        if w > 0 {
            scene.width = w;
        }
        scene.validate()?;
        let recipe = QuantizationRecipe {
            data_bits: self.get("data_bits")?,
            bias_bits: self.get("bias_bits")?,
            weight_minmse: self.get("minmse")?,
            activation_minmse: self.get("minmse")?,
            anchor_relu: self.get("anchor_relu")?,
        };
        recipe.validate()?;
        let coverage: f64 = self.get("coverage")?;
        if !(coverage > 0.0 && coverage <= 1.0) {
            return Err(CliError::Config(format!("coverage {coverage} outside (0, 1]")));
        }
        let mut dpu = DpuArch::default();
        dpu.ops_per_cycle = self.get("ops_per_cycle")?;
        dpu.clock_hz = self.get("clock_hz")?;
        if self.raw("efficiency") != "measured" {
            dpu.efficiency = self.get("efficiency")?;
        }
        dpu.validate()?;
        let scenes: usize = self.get("scenes")?;
        let calib_scenes: usize = self.get("calib_scenes")?;
        if scenes == 0 || calib_scenes == 0 {
            return Err(CliError::Config("scene counts must be positive".into()));
        }
        Ok(Config {
            out: PathBuf::from(self.raw("out")),
            threads: self.get("threads")?,
            seed: self.get("seed")?,
            scene,
            scenes,
            calib_scenes,
            base_filters: self.get("base_filters")?,
            depth: self.get("depth")?,
            clip: self.get("clip")?,
            coverage,
            rescale: self.get("rescale")?,
            transforms: TransformOptions {
                fold: self.get("fold")?,
                cle: self.get("cle")?,
                absorb: self.get("bias_absorb")?,
            },
            recipe,
            engine: self.raw("engine").parse()?,
            dpu,
            fps: self.get("fps")?,
            hash: self.hash(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    pub out: PathBuf,
    pub threads: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub scenes: usize,
    pub calib_scenes: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub clip: bool,
    pub coverage: f64,
    pub rescale: bool,
    pub transforms: TransformOptions,
    pub recipe: QuantizationRecipe,
    pub engine: Engine,
    pub dpu: DpuArch,
    pub fps: f64,
    pub hash: String,
}

impl Config {
    pub fn arch(&self, channels: usize, classes: usize) -> ArchConfig {
        ArchConfig::new(self.base_filters, self.depth, channels, classes)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
