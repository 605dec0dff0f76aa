//! Parameter and FLOP accounting, compression ratios and wall-time capture.
//!
//! Convention: one multiply-accumulate counts as one FLOP, summed over all timesteps.
//! Conv, shortcut and classifier MACs are counted; batchnorm is not. Spike sparsity is
//! ignored, so the figures are dense upper bounds.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{cross_entropy, Network};
use crate::tensor::DenseTensor;
use crate::train::{ConvDesc, ModelMode, ModelSpec, TtSnn};
use crate::ttlayers::BranchStep;

pub const CONVENTION: &str =
    "1 MAC = 1 FLOP, summed over timesteps; conv + shortcut + classifier MACs, batchnorm excluded; dense (no spike sparsity)";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    /// "dense", "tt" or "classifier".
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
}

/// `baseline / current`, so compression shows up as a ratio above 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub params: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub convention: String,
    pub model: String,
    pub mode: ModelMode,
    pub timesteps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    pub layers: Vec<LayerCount>,
    pub totals: Totals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratios: Option<Ratios>,
}

fn tt_rank(desc: &ConvDesc, spec: &ModelSpec, ranks: &[usize]) -> Result<Option<usize>> {
    let (Some(_), Some(idx)) = (spec.mode.tt_mode(), desc.tt_index) else {
        return Ok(None);
    };
    match ranks.get(idx) {
        Some(0) => Err(Error::Config(format!("{}: rank must be positive", desc.name))),
        Some(&r) => Ok(Some(r)),
        None => Err(Error::Config(format!("rank list has {} entries, {} needs index {idx}", ranks.len(), desc.name))),
    }
}

/// Dense `O*I*K*K`; TT `I*r + 2*r*K*r + r*O`; plus `2*I` batchnorm affine when present.
fn layer_params(d: &ConvDesc, rank: Option<usize>) -> u64 {
    let (i, o, k) = (d.in_channels as u64, d.out_channels as u64, d.kernel as u64);
    let conv = match rank {
        None => o * i * k * k,
        Some(r) => {
            let r = r as u64;
            i * r + 2 * r * k * r + r * o
        }
    };
    conv + if d.has_bn { 2 * i } else { 0 }
}

/// MACs of one conv at one timestep. The TT stride sits in the first 1x1 core, so every
/// sub-convolution runs at the output resolution.
fn layer_flops_step(d: &ConvDesc, rank: Option<usize>, step: BranchStep) -> u64 {
    let (i, o, k) = (d.in_channels as u64, d.out_channels as u64, d.kernel as u64);
    let hw = (d.out_hw.0 * d.out_hw.1) as u64;
    match rank {
        None => o * i * k * k * hw,
        Some(r) => {
            let r = r as u64;
            let branches = u64::from(step.uses_vertical()) + u64::from(step.uses_horizontal());
            (i * r + branches * r * k * r + r * o) * hw
        }
    }
}

/// Per-layer counts for `spec` with one uniform rank per decomposable layer. Ranks are
/// ignored in baseline mode.
pub fn count_report(spec: &ModelSpec, ranks: &[usize]) -> Result<CountReport> {
    let resolved = spec.resolve()?;
    if spec.mode != ModelMode::Baseline && ranks.len() != resolved.num_decomposable() {
        return Err(Error::Config(format!(
            "rank list has {} entries but the model has {} decomposable layers",
            ranks.len(),
            resolved.num_decomposable()
        )));
    }
    let schedule = spec.htt_schedule()?.filter(|_| spec.mode == ModelMode::Htt);
    let steps: Vec<BranchStep> = match &schedule {
        Some(s) => s.steps().to_vec(),
        None => vec![BranchStep::Full; spec.timesteps],
    };
    let mut layers = Vec::with_capacity(resolved.convs.len() + 1);
    for d in &resolved.convs {
        let rank = tt_rank(d, spec, ranks)?;
        layers.push(LayerCount {
            name: d.name.clone(),
            kind: if rank.is_some() { "tt" } else { "dense" }.into(),
            rank,
            params: layer_params(d, rank),
            flops: steps.iter().map(|&s| layer_flops_step(d, rank, s)).sum(),
        });
    }
    let (c, k) = (resolved.classifier_features as u64, resolved.num_classes as u64);
    layers.push(LayerCount {
        name: "classifier".into(),
        kind: "classifier".into(),
        rank: None,
        params: c * k + k,
        flops: c * k * spec.timesteps as u64,
    });
    let totals = Totals { params: layers.iter().map(|l| l.params).sum(), flops: layers.iter().map(|l| l.flops).sum() };
    Ok(CountReport {
        convention: CONVENTION.into(),
        model: spec.name.clone(),
        mode: spec.mode,
        timesteps: spec.timesteps,
        schedule: schedule.map(|s| s.pattern()),
        layers,
        totals,
        ratios: None,
    })
}

pub fn count_params(spec: &ModelSpec, ranks: &[usize]) -> Result<u64> {
    Ok(count_report(spec, ranks)?.totals.params)
}

pub fn count_flops(spec: &ModelSpec, ranks: &[usize]) -> Result<u64> {
    Ok(count_report(spec, ranks)?.totals.flops)
}

/// Counts for an initialised model, using the ranks it actually carries.
pub fn count_model(model: &TtSnn) -> Result<CountReport> {
    let ranks: Vec<usize> = model.ranks.iter().map(|r| r.rank).collect();
    let mut spec = model.spec.clone();
    if model.merged {
        spec.mode = ModelMode::Baseline;
    }
    count_report(&spec, &ranks)
}

/// Median of timed forward+backward passes on one fixed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTime {
    pub repeats: usize,
    pub median_seconds: f64,
    pub min_seconds: f64,
}

pub fn measure_wall_time(
    net: &Network<f32>,
    x: &DenseTensor<f32>,
    labels: &[usize],
    repeats: usize,
) -> Result<WallTime> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let fw = net.forward_train(x)?;
        let (_, d) = cross_entropy(&fw.logits, labels)?;
        std::hint::black_box(net.backward(&fw.tape, &d)?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    Ok(WallTime { repeats, median_seconds: median, min_seconds: times[0] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub convention: String,
    pub baseline: CountReport,
    pub compressed: CountReport,
    pub ratios: Ratios,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<WallTimeDelta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallTimeDelta {
    pub baseline: WallTime,
    pub compressed: WallTime,
    /// `compressed - baseline` median seconds.
    pub delta_seconds: f64,
}

/// Both reports must describe the same architecture: the same layer names in order and the
/// same timestep count.
pub fn compression_report(
    baseline: &CountReport,
    compressed: &CountReport,
    wall: Option<(WallTime, WallTime)>,
) -> Result<CompressionReport> {
    let names = |r: &CountReport| r.layers.iter().map(|l| l.name.clone()).collect::<Vec<_>>();
    if names(baseline) != names(compressed) || baseline.timesteps != compressed.timesteps {
        return Err(Error::Contract(format!(
            "architecture mismatch between '{}' and '{}'",
            baseline.model, compressed.model
        )));
    }
    let ratio = |a: u64, b: u64| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
    let ratios = Ratios {
        params: ratio(baseline.totals.params, compressed.totals.params),
        flops: ratio(baseline.totals.flops, compressed.totals.flops),
    };
    let mut compressed = compressed.clone();
    compressed.ratios = Some(ratios);
    Ok(CompressionReport {
        convention: CONVENTION.into(),
        baseline: baseline.clone(),
        compressed,
        ratios,
        wall_time: wall.map(|(b, c)| WallTimeDelta {
            delta_seconds: c.median_seconds - b.median_seconds,
            baseline: b,
            compressed: c,
        }),
    })
}

/// Per-layer table followed by totals.
pub fn render_counts(r: &CountReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# {} ({}, T={}){}",
        r.model,
        r.mode,
        r.timesteps,
        r.schedule.as_ref().map(|p| format!(", schedule {p}")).unwrap_or_default()
    );
    let _ = writeln!(s, "# {}", r.convention);
    let w = r.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(s, "{:<w$}  {:<10}  {:>5}  {:>12}  {:>15}", "layer", "kind", "rank", "params", "flops");
    for l in &r.layers {
        let rank = l.rank.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<w$}  {:<10}  {:>5}  {:>12}  {:>15}", l.name, l.kind, rank, l.params, l.flops);
    }
    let _ = writeln!(s, "{:<w$}  {:<10}  {:>5}  {:>12}  {:>15}", "total", "", "", r.totals.params, r.totals.flops);
    if let Some(q) = r.ratios {
        let _ = writeln!(s, "ratios vs baseline: params {:.2}x, flops {:.2}x", q.params, q.flops);
    }
    s
}

/// Two-row summary in millions of parameters and GFLOPs.
pub fn render_compression(c: &CompressionReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", c.convention);
    let _ = writeln!(s, "{:<24}  {:>18}  {:>18}", "model", "params (M)", "FLOPs (G)");
    let row = |r: &CountReport| format!("{} {}", r.model, r.mode);
    let _ = writeln!(
        s,
        "{:<24}  {:>18.2}  {:>18.3}",
        row(&c.baseline),
        c.baseline.totals.params as f64 / 1e6,
        c.baseline.totals.flops as f64 / 1e9
    );
    let _ = writeln!(
        s,
        "{:<24}  {:>18}  {:>18}",
        row(&c.compressed),
        format!("{:.2} ({:.2}x)", c.compressed.totals.params as f64 / 1e6, c.ratios.params),
        format!("{:.3} ({:.2}x)", c.compressed.totals.flops as f64 / 1e9, c.ratios.flops)
    );
    if let Some(w) = &c.wall_time {
        let _ = writeln!(
            s,
            "wall time (median of {}): {:.4}s -> {:.4}s ({:+.4}s)",
            w.baseline.repeats, w.baseline.median_seconds, w.compressed.median_seconds, w.delta_seconds
        );
    }
    s
}
