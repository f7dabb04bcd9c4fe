//! Throughput accounting for a fixed-width MAC array coprocessor.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::OpCount;

/// Frame rate measured for the reference 32-filter, 4-level model on the
/// 4096-MAC array at 300 MHz, and that model's operation count.
pub const MEASURED_FPS: f64 = 14.14;
pub const MEASURED_MODEL_OPS: f64 = 31.761e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpuArch {
    pub ops_per_cycle: u64,
    pub clock_hz: f64,
    /// Sustained fraction of peak.
    pub efficiency: f64,
}

impl Default for DpuArch {
    /// 8·16·16 lanes at 300 MHz, efficiency fitted to [`MEASURED_FPS`].
    fn default() -> Self {
        let mut a = Self {
            ops_per_cycle: 4096,
            clock_hz: 3.0e8,
            efficiency: 1.0,
        };
        a.efficiency = MEASURED_MODEL_OPS * MEASURED_FPS / peak_ops(&a);
        a
    }
}

impl DpuArch {
    pub fn new(ops_per_cycle: u64, clock_hz: f64, efficiency: f64) -> Result<Self> {
        let a = Self {
            ops_per_cycle,
            clock_hz,
            efficiency,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops_per_cycle == 0 || !(self.clock_hz > 0.0) || !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::Config(format!(
                "invalid array: {} ops/cycle, {} Hz, efficiency {}",
                self.ops_per_cycle, self.clock_hz, self.efficiency
            )));
        }
        Ok(())
    }
}

pub fn peak_ops(arch: &DpuArch) -> f64 {
    arch.ops_per_cycle as f64 * arch.clock_hz
}

/// Seconds per frame at the sustained rate.
pub fn estimate_latency(model_ops: f64, arch: &DpuArch) -> Result<f64> {
    arch.validate()?;
    if !(model_ops > 0.0) {
        return Err(Error::Config(format!("model ops must be positive, got {model_ops}")));
    }
    Ok(model_ops / (peak_ops(arch) * arch.efficiency))
}

pub fn effective_ops(model_ops: f64, fps: f64) -> Result<f64> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("frame rate must be positive, got {fps}")));
    }
    Ok(model_ops * fps)
}

/// Three decimals with an SI prefix: `1.229 TOPs`.
pub fn format_ops(v: f64) -> String {
    let (scale, unit) = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")]
        .into_iter()
        .find(|(s, _)| v.abs() >= *s)
        .unwrap_or((1.0, ""));
    format!("{:.3} {unit}OPs", v / scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpConvention {
    /// One op per multiply-accumulate; elementwise work ignored.
    MacAsOne,
    /// Two ops per multiply-accumulate plus elementwise work.
    MacAsTwo,
}

impl OpConvention {
    pub fn ops(self, c: &OpCount) -> f64 {
        match self {
            OpConvention::MacAsOne => c.macs as f64,
            OpConvention::MacAsTwo => c.ops() as f64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpConvention::MacAsOne => "mac=1",
            OpConvention::MacAsTwo => "mac=2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfRow {
    pub convention: OpConvention,
    pub model_ops: f64,
    pub latency_bound: f64,
    pub latency: f64,
    pub fps: f64,
    pub effective_at_fps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfReport {
    pub arch: DpuArch,
    pub peak: f64,
    pub measured_fps: Option<f64>,
    pub rows: Vec<PerfRow>,
}

/// Both op conventions for one model; `measured_fps` adds the effective rate.
pub fn perf_report(ops: &OpCount, arch: &DpuArch, measured_fps: Option<f64>) -> Result<PerfReport> {
    arch.validate()?;
    let ideal = DpuArch { efficiency: 1.0, ..*arch };
    let rows = [OpConvention::MacAsOne, OpConvention::MacAsTwo]
        .into_iter()
        .map(|convention| {
            let model_ops = convention.ops(ops);
            let latency = estimate_latency(model_ops, arch)?;
            Ok(PerfRow {
                convention,
                model_ops,
                latency_bound: estimate_latency(model_ops, &ideal)?,
                latency,
                fps: 1.0 / latency,
                effective_at_fps: measured_fps.map(|f| effective_ops(model_ops, f)).transpose()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PerfReport {
        arch: *arch,
        peak: peak_ops(arch),
        measured_fps,
        rows,
    })
}

impl PerfReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "array: {} ops/cycle at {:.1} MHz, efficiency {:.4}",
            self.arch.ops_per_cycle,
            self.arch.clock_hz / 1e6,
            self.arch.efficiency
        )
        .unwrap();
        writeln!(out, "peak: {}", format_ops(self.peak)).unwrap();
        for r in &self.rows {
            write!(
                out,
                "{}: model {} per frame, latency bound {:.2} ms, latency {:.2} ms ({:.2} fps)",
                r.convention.name(),
                format_ops(r.model_ops).trim_end_matches('s'),
                1e3 * r.latency_bound,
                1e3 * r.latency,
                r.fps
            )
            .unwrap();
            if let (Some(e), Some(f)) = (r.effective_at_fps, self.measured_fps) {
                write!(out, ", effective {} at {f} fps", format_ops(e)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("convention,model_ops,peak_ops,latency_bound_s,latency_s,fps,effective_ops\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.convention.name(),
                r.model_ops,
                self.peak,
                r.latency_bound,
                r.latency,
                r.fps,
                r.effective_at_fps.map(|e| e.to_string()).unwrap_or_default()
            )
            .unwrap();
        }
        out
    }
}
