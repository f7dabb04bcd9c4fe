mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, Settings};
use error::CliError;

/// Post-training quantization and integer inference for hyperspectral
/// segmentation networks.
#[derive(Parser)]
#[command(name = "hsiq", version)]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// float, fakequant, int or int-packed.
    #[arg(long, global = true)]
    engine: Option<String>,
    /// Fraction of samples kept below each channel's clip value.
    #[arg(long, global = true)]
    coverage: Option<f64>,
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    scenes: Option<usize>,
    #[arg(long, global = true)]
    no_fold: bool,
    #[arg(long, global = true)]
    no_cle: bool,
    #[arg(long, global = true)]
    no_bias_absorb: bool,
    #[arg(long, global = true)]
    no_clip: bool,
    /// Min-Max ranges instead of Min-MSE.
    #[arg(long, global = true)]
    minmax: bool,
    /// Any configuration key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic evaluation and calibration corpora.
    Gen,
    /// Channel histograms and adaptive clip values.
    Calib,
    /// Construct the float matched-filter model.
    Build,
    /// Batch-norm folding, cross-layer equalization, bias absorption.
    Transform {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Quantize {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Label maps for the evaluation corpus.
    Infer {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Segmentation metrics of stored predictions.
    Eval,
    /// Throughput estimate on the MAC array.
    Perf,
    /// Exhaustive check of the packed dual 8-bit multiply.
    VerifyMac,
    /// Every stage in order.
    Pipeline,
}

fn settings(o: &Overrides) -> Result<Settings, CliError> {
    let mut s = Settings::load(o.config.as_deref())?;
    let mut set = |k: &str, v: String| s.set(k, &v);
    if let Some(v) = &o.out {
        set("out", v.display().to_string())?;
    }
    if let Some(v) = o.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = o.threads {
        set("threads", v.to_string())?;
    }
    if let Some(v) = &o.engine {
        set("engine", v.clone())?;
    }
    if let Some(v) = o.coverage {
        set("coverage", v.to_string())?;
    }
    if let Some(v) = &o.preset {
        set("preset", v.clone())?;
    }
    if let Some(v) = o.scenes {
        set("scenes", v.to_string())?;
    }
    for (flag, key) in [
        (o.no_fold, "fold"),
        (o.no_cle, "cle"),
        (o.no_bias_absorb, "bias_absorb"),
        (o.no_clip, "clip"),
        (o.minmax, "minmse"),
    ] {
        if flag {
            set(key, "false".into())?;
        }
    }
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k.trim(), v.trim())?;
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg: Config = settings(&cli.opts)?.resolve()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Gen => commands::gen(&cfg),
        Cmd::Calib => commands::calib(&cfg),
        Cmd::Build => commands::build(&cfg),
        Cmd::Transform { model } => commands::transform(&cfg, model.as_deref()),
        Cmd::Quantize { model } => commands::quantize(&cfg, model.as_deref()),
        Cmd::Infer { model } => commands::infer(&cfg, cfg.engine, model.as_deref()),
        Cmd::Eval => commands::eval(&cfg, cfg.engine),
        Cmd::Perf => commands::perf(&cfg),
        Cmd::VerifyMac => commands::verify_mac(&cfg),
        Cmd::Pipeline => commands::pipeline(&cfg),
    }?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hsiq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
