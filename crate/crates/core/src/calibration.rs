//! Range analysis: per-channel histograms, adaptive clipping and fraction-bit
//! selection.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{self, Record};
use crate::tensor::{pow2, quantize_value, QuantParams, RoundMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramConfig {
    pub bins: usize,
    /// Fixed `[lo, hi]`; `None` spans the observed range of each channel.
    pub range: Option<(f64, f64)>,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self { bins: 2048, range: None }
    }
}

/// Uniform histogram of one channel. Samples outside `[lo, hi]` land in the
/// end bins; `min`/`max` always hold the exact extremes.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelHistogram {
    pub channel: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub min: f64,
    pub max: f64,
    pub samples: u64,
}

impl ChannelHistogram {
    pub fn new(channel: usize, lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            channel,
            lo,
            hi: hi.max(lo),
            counts: vec![0; bins.max(1)],
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            samples: 0,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edge(&self, b: usize) -> f64 {
        if b >= self.bins() {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * b as f64 / self.bins() as f64
    }

    /// Largest `b` with `edge(b) ≤ x`, clamped to the valid bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.bins();
        let width = self.hi - self.lo;
        if width <= 0.0 || x <= self.lo {
            return 0;
        }
        let mut b = (((x - self.lo) / width) * n as f64).floor().min((n - 1) as f64) as usize;
        while b > 0 && x < self.edge(b) {
            b -= 1;
        }
        while b + 1 < n && x >= self.edge(b + 1) {
            b += 1;
        }
        b
    }

    pub fn push(&mut self, x: f64) {
        let b = self.bin_of(x);
        self.counts[b] += 1;
        self.min = self.min.min(x);
        self.max = self.max.max(x);
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &ChannelHistogram) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi || self.bins() != other.bins() {
            return Err(Error::Shape("histograms with different bin edges".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.samples += other.samples;
        Ok(())
    }

    /// Smallest bin upper edge whose cumulative mass reaches `coverage`,
    /// capped at the observed maximum.
    pub fn coverage_edge(&self, coverage: f64) -> Result<f64> {
        if self.samples == 0 {
            return Err(Error::Empty(format!("histogram of channel {}", self.channel)));
        }
        let need = (coverage * self.samples as f64).ceil() as u64;
        let mut acc = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            acc += c;
            if acc >= need {
                let top = if b + 1 == self.bins() { self.hi } else { self.edge(b + 1) };
                return Ok(top.min(self.max));
            }
        }
        Ok(self.max)
    }
}

fn channel_planes(cube: &Tensor<f32>) -> Result<(usize, usize)> {
    let (c, h, w) = cube.chw()?;
    Ok((c, h * w))
}

/// Histograms aggregating every pixel of every cube, one per channel.
pub fn collect_channel_stats(cubes: &[Tensor<f32>], cfg: &HistogramConfig) -> Result<Vec<ChannelHistogram>> {
    let first = cubes.first().ok_or_else(|| Error::Empty("no calibration cubes".into()))?;
    let (c, _) = channel_planes(first)?;
    for cube in cubes {
        let (ci, _) = channel_planes(cube)?;
        if ci != c {
            return Err(Error::Shape(format!("cube with {ci} channels among {c}-channel cubes")));
        }
    }
    let hists = (0..c)
        .into_par_iter()
        .map(|k| {
            fn plane(cube: &Tensor<f32>, k: usize, c: usize) -> &[f32] {
                let px = cube.len() / c;
                &cube.data()[k * px..(k + 1) * px]
            }
            let (lo, hi) = cfg.range.unwrap_or_else(|| {
                cubes.iter().flat_map(|t| plane(t, k, c).iter()).fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)),
                )
            });
            let mut h = ChannelHistogram::new(k, lo, hi, cfg.bins);
            for cube in cubes {
                for &v in plane(cube, k, c) {
                    h.push(v as f64);
                }
            }
            h
        })
        .collect();
    Ok(hists)
}

pub fn histograms_to_csv(hists: &[ChannelHistogram]) -> String {
    let mut out = String::from("channel,bin_lo,bin_hi,count\n");
    for h in hists {
        for (b, &n) in h.counts.iter().enumerate() {
            writeln!(out, "{},{},{},{}", h.channel, h.edge(b), h.edge(b + 1), n).unwrap();
        }
    }
    out
}

pub const HIST_MAGIC: &str = "HIST1";

pub fn histograms_to_manifest(hists: &[ChannelHistogram]) -> String {
    let mut out = format!("{HIST_MAGIC} 1\n");
    for h in hists {
        let r = Record::new("hist")
            .arg(h.channel)
            .set("lo", h.lo)
            .set("hi", h.hi)
            .set("min", h.min)
            .set("max", h.max)
            .set("samples", h.samples)
            .set("counts", manifest::format_list(&h.counts, ','));
        writeln!(out, "{r}").unwrap();
    }
    out
}

pub fn histograms_from_manifest(text: &str) -> Result<Vec<ChannelHistogram>> {
    let records = manifest::parse_records(text);
    manifest::expect_header(&records, HIST_MAGIC, 1)?
        .iter()
        .filter(|r| r.tag == "hist")
        .map(|r| {
            let h = ChannelHistogram {
                channel: r.parse_arg(0)?,
                lo: r.parse("lo")?,
                hi: r.parse("hi")?,
                counts: manifest::parse_list(r.get("counts")?, ',')?,
                min: r.parse("min")?,
                max: r.parse("max")?,
                samples: r.parse("samples")?,
            };
            if h.counts.iter().sum::<u64>() != h.samples {
                return Err(Error::Format(format!("histogram {} counts do not sum", h.channel)));
            }
            Ok(h)
        })
        .collect()
}

/// Per-channel upper clip values.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub clip: Vec<f32>,
    pub coverage: f64,
}

pub const CLIP_MAGIC: &str = "CLIP1";

impl ClipSpec {
    /// `x → min(x, c_k)` per channel.
    pub fn apply(&self, cube: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, px) = channel_planes(cube)?;
        if c != self.clip.len() {
            return Err(Error::Shape(format!("{} clip values for {c} channels", self.clip.len())));
        }
        let mut out = cube.clone();
        for (plane, &cv) in out.data_mut().chunks_mut(px).zip(&self.clip) {
            for v in plane {
                *v = v.min(cv);
            }
        }
        Ok(out)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = format!("{CLIP_MAGIC} 1\n");
        let r = Record::new("clip")
            .set("coverage", self.coverage)
            .set("values", manifest::format_list(&self.clip, ','));
        writeln!(out, "{r}").unwrap();
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let records = manifest::parse_records(text);
        let body = manifest::expect_header(&records, CLIP_MAGIC, 1)?;
        let r = body
            .iter()
            .find(|r| r.tag == "clip")
            .ok_or_else(|| Error::Truncated("clip manifest without a `clip` record".into()))?;
        let spec = Self {
            coverage: r.parse("coverage")?,
            clip: manifest::parse_list(r.get("values")?, ',')?,
        };
        if spec.clip.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Format("clip values must be positive".into()));
        }
        Ok(spec)
    }
}

pub fn adaptive_clip_values(hists: &[ChannelHistogram], coverage: f64) -> Result<ClipSpec> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0, 1]")));
    }
    if hists.is_empty() {
        return Err(Error::Empty("no histograms".into()));
    }
    let clip = hists
        .iter()
        .map(|h| {
            let c = h.coverage_edge(coverage)?;
            if c > 0.0 {
                Ok(c as f32)
            } else {
                Err(Error::Config(format!("channel {} has no positive mass to clip", h.channel)))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ClipSpec { clip, coverage })
}

fn grid_max(bits: u32, signed: bool) -> f64 {
    if signed {
        ((1u64 << (bits - 1)) - 1) as f64
    } else {
        ((1u64 << bits) - 1) as f64
    }
}

/// Largest `f` with `m ≤ q_max · 2^(−f)`; `bits − 1` when `m = 0`.
pub fn minmax_bits_for_max(m: f64, bits: u32, signed: bool) -> i32 {
    if !(m > 0.0) || !m.is_finite() {
        return bits as i32 - 1;
    }
    let qmax = grid_max(bits, signed);
    let mut f = (qmax / m).log2().floor() as i32;
    while m > qmax * pow2(-f) {
        f -= 1;
    }
    while m <= qmax * pow2(-(f + 1)) {
        f += 1;
    }
    f
}

/// Magnitude the grid must cover: `max|x|` when signed, `max(x, 0)` otherwise.
pub fn covered_max(data: &[f32], signed: bool) -> f64 {
    data.iter().fold(0f64, |a, &x| {
        let v = if signed { x.abs() } else { x.max(0.0) };
        a.max(v as f64)
    })
}

pub fn minmax_fraction_bits(data: &[f32], bits: u32, signed: bool) -> Result<i32> {
    if data.is_empty() {
        return Err(Error::Empty("range of an empty tensor".into()));
    }
    Ok(minmax_bits_for_max(covered_max(data, signed), bits, signed))
}

/// Zero-anchored grid for `bits`/`signed` at fraction bits `f`.
pub fn anchored(f: i32, bits: u32, signed: bool) -> QuantParams {
    if signed {
        QuantParams::symmetric(f, bits)
    } else {
        QuantParams::unsigned(f, 0, bits)
    }
}

/// Streaming sum of squared quantization errors for a fixed candidate set.
#[derive(Clone, Debug)]
pub struct MseAccumulator {
    pub candidates: Vec<QuantParams>,
    pub sse: Vec<f64>,
    pub mode: RoundMode,
    pub count: u64,
}

impl MseAccumulator {
    pub fn new(candidates: Vec<QuantParams>, mode: RoundMode) -> Self {
        let n = candidates.len();
        Self {
            candidates,
            sse: vec![0.0; n],
            mode,
            count: 0,
        }
    }

    pub fn push(&mut self, data: &[f32]) {
        let mode = self.mode;
        self.sse
            .par_iter_mut()
            .zip(&self.candidates)
            .for_each(|(acc, q)| {
                let mut s = 0.0;
                for &x in data {
                    let x = x as f64;
                    let (v, _) = quantize_value(x, q, mode);
                    let e = x - (v - q.zero_point as i64) as f64 * q.scale();
                    s += e * e;
                }
                *acc += s;
            });
        self.count += data.len() as u64;
    }

    /// Lowest error; ties go to the larger fraction-bit count.
    pub fn best(&self) -> QuantParams {
        let mut best = 0;
        for i in 1..self.candidates.len() {
            let better = self.sse[i] < self.sse[best]
                || (self.sse[i] == self.sse[best]
                    && self.candidates[i].fraction_bits > self.candidates[best].fraction_bits);
            if better {
                best = i;
            }
        }
        self.candidates[best]
    }
}

pub const MSE_WINDOW: (i32, i32) = (-4, 8);

pub fn window(f_minmax: i32) -> impl Iterator<Item = i32> {
    (f_minmax + MSE_WINDOW.0)..=(f_minmax + MSE_WINDOW.1)
}

/// Sum of squared errors of quantizing `data` onto `q` (half away from zero).
pub fn quantization_sse(data: &[f32], q: &QuantParams) -> f64 {
    let mut acc = MseAccumulator::new(vec![*q], RoundMode::HalfAwayFromZero);
    acc.push(data);
    acc.sse[0]
}

pub fn minmse_fraction_bits(data: &[f32], bits: u32, signed: bool) -> Result<i32> {
    let f_mm = minmax_fraction_bits(data, bits, signed)?;
    let mut acc = MseAccumulator::new(
        window(f_mm).map(|f| anchored(f, bits, signed)).collect(),
        RoundMode::HalfAwayFromZero,
    );
    acc.push(data);
    Ok(acc.best().fraction_bits)
}

/// Unsigned grid with a zero-point: the finest `f` whose grid, with
/// `z = round(−lo·2^f)`, covers `[min(lo, 0), max(hi, 0)]`.
pub fn asymmetric_params(lo: f64, hi: f64, bits: u32) -> QuantParams {
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    if hi - lo <= 0.0 || !(hi - lo).is_finite() {
        return QuantParams::unsigned(bits as i32 - 1, 0, bits);
    }
    let mut f = minmax_bits_for_max(hi - lo, bits, false) + 1;
    loop {
        let q = asymmetric_at(lo, f, bits);
        let (rlo, rhi) = q.real_range();
        if rlo <= lo && rhi >= hi {
            return q;
        }
        f -= 1;
    }
}

/// Unsigned grid at `f` whose zero-point places `lo` at the bottom.
pub fn asymmetric_at(lo: f64, f: i32, bits: u32) -> QuantParams {
    let zmax = ((1u64 << bits) - 1) as f64;
    let z = (-lo.min(0.0) * pow2(f)).round().clamp(0.0, zmax) as i32;
    QuantParams::unsigned(f, z, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_vec(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn constant_channel_histogram() {
        let t = cube(1, 4, 4, |_| 0.04);
        let h = &collect_channel_stats(&[t], &HistogramConfig::default()).unwrap()[0];
        assert_eq!((h.min, h.max), (0.04f32 as f64, 0.04f32 as f64));
        assert_eq!(h.counts.iter().filter(|&&n| n > 0).count(), 1);
        assert_eq!(h.samples, 16);
        let clip = adaptive_clip_values(std::slice::from_ref(h), 0.9995).unwrap();
        assert_eq!(clip.clip, vec![0.04]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(
            collect_channel_stats(&[], &HistogramConfig::default()),
            Err(Error::Empty(_))
        ));
        assert!(adaptive_clip_values(&[], 0.5).is_err());
        let h = ChannelHistogram::new(0, 0.0, 1.0, 8);
        assert!(h.coverage_edge(0.5).is_err());
    }

    #[test]
    fn uniform_quantile() {
        // evenly spaced samples stand in for uniform[0, 1]
        let n = 100_000;
        let t = cube(1, 1, n, |i| (i as f32 + 0.5) / n as f32);
        let hists = collect_channel_stats(&[t], &HistogramConfig::default()).unwrap();
        let c = adaptive_clip_values(&hists, 0.9995).unwrap().clip[0] as f64;
        assert!((c - 0.9995).abs() <= 1.0 / 2048.0 + 1e-6, "clip {c}");
        let full = adaptive_clip_values(&hists, 1.0).unwrap().clip[0];
        assert_eq!(full, (n as f32 - 0.5) / n as f32);
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_bits_for_max(0.1495, 8, true), 9);
        assert_eq!(minmax_bits_for_max(1.0, 8, true), 6);
        assert_eq!(minmax_bits_for_max(127.0, 8, true), 0);
        assert_eq!(minmax_fraction_bits(&[0.0, 0.0], 8, true).unwrap(), 7);
        assert!(minmax_fraction_bits(&[], 8, true).is_err());
    }

    #[test]
    fn minmse_exact_grid() {
        let data: Vec<f32> = (-127..=127).map(|i| i as f32 / 128.0).collect();
        assert_eq!(minmse_fraction_bits(&data, 8, true).unwrap(), 7);
        assert_eq!(quantization_sse(&data, &QuantParams::symmetric(7, 8)), 0.0);
    }

    /// Exhaustive evaluation over a wide range of `f`, independent of the window.
    fn brute_force(data: &[f32]) -> i32 {
        let mut best = (f64::INFINITY, 0);
        for f in -10..30 {
            let sse: f64 = data
                .iter()
                .map(|&x| {
                    let v = ((x as f64) * pow2(f)).round().clamp(-128.0, 127.0);
                    (x as f64 - v * pow2(-f)).powi(2)
                })
                .sum();
            if sse <= best.0 {
                best = (sse, f);
            }
        }
        best.1
    }

    #[test]
    fn minmse_outlier_cases() {
        let mut data = vec![0.01f32; 999];
        data.push(10.0);
        let f = minmse_fraction_bits(&data, 8, true).unwrap();
        assert_eq!(f, brute_force(&data));
        assert_eq!(f, 3);

        let mut data = vec![0.01f32; 999];
        data.push(0.5);
        let f = minmse_fraction_bits(&data, 8, true).unwrap();
        assert_eq!(f, brute_force(&data));
        assert_eq!(minmax_fraction_bits(&data, 8, true).unwrap(), 7);
        assert_eq!(f, 8);
        // the chosen grid saturates the outlier
        assert!(0.5 > 127.0 * pow2(-f));
    }

    #[test]
    fn asymmetric_grid_covers_range() {
        let q = asymmetric_params(-0.5, 1.5, 8);
        let (lo, hi) = q.real_range();
        assert!(lo <= -0.5 && hi >= 1.5);
        let finer = asymmetric_at(-0.5, q.fraction_bits + 1, 8).real_range();
        assert!(finer.0 > -0.5 || finer.1 < 1.5);
        let z = asymmetric_params(0.0, 2.0, 8);
        assert_eq!(z.zero_point, 0);
        assert_eq!(z.fraction_bits, minmax_bits_for_max(2.0, 8, false));
    }

    #[test]
    fn clip_spec_round_trip_and_apply() {
        let spec = ClipSpec {
            clip: vec![0.0711, 0.1495],
            coverage: 0.9995,
        };
        let back = ClipSpec::from_manifest(&spec.to_manifest()).unwrap();
        assert_eq!(back, spec);
        let t = cube(2, 1, 2, |i| [0.05, 0.5, 0.2, 0.1][i]);
        assert_eq!(spec.apply(&t).unwrap().data(), &[0.05, 0.0711, 0.1495, 0.1]);
    }

    #[test]
    fn histogram_text_forms() {
        let t = cube(2, 2, 2, |i| i as f32 * 0.1);
        let hists = collect_channel_stats(&[t], &HistogramConfig { bins: 4, range: None }).unwrap();
        let back = histograms_from_manifest(&histograms_to_manifest(&hists)).unwrap();
        assert_eq!(back, hists);
        let csv = histograms_to_csv(&hists);
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert!(csv.starts_with("channel,bin_lo,bin_hi,count\n0,"));
    }
}
