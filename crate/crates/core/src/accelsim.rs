//! Analytic energy/cycle model of SNN training accelerators.
//!
//! Two designs are modelled for one image across all timesteps, forward and BPTT backward:
//! a single compute engine that runs every sub-convolution layer by layer, and a four-cluster
//! pipeline where cluster 1 runs the spike-input 1x1 core, clusters 2 and 3 the two spatial
//! branches, an adder array merges them and cluster 4 runs the last 1x1 core.
//!
//! Counting is at tile granularity: MACs, scratchpad bytes, global-buffer bytes with
//! capacity-based spills to DRAM, DRAM bytes and LIF updates. Absolute Joules are
//! model-relative; the ratios between designs and modes are what the model is for.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{ConvRole, ModelMode, ModelSpec};
use crate::ttlayers::BranchStep;

const PJ: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSplit {
    pub weight: f64,
    pub input: f64,
    pub output: f64,
    pub membrane: f64,
    pub gradient: f64,
}

impl Default for BufferSplit {
    fn default() -> Self {
        Self { weight: 0.2, input: 0.2, output: 0.2, membrane: 0.2, gradient: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub n_clusters: usize,
    pub pes_per_cluster: usize,
    pub scratchpad_bytes: usize,
    pub global_buffer_kb: usize,
    pub accumulator_bits: usize,
    pub multiplier_bits: usize,
    pub clock_mhz: f64,
    #[serde(default)]
    pub buffer_split: BufferSplit,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            pes_per_cluster: 32,
            scratchpad_bytes: 32,
            global_buffer_kb: 272,
            accumulator_bits: 16,
            multiplier_bits: 8,
            clock_mhz: 400.0,
            buffer_split: BufferSplit::default(),
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.n_clusters,
            self.pes_per_cluster,
            self.scratchpad_bytes,
            self.global_buffer_kb,
            self.accumulator_bits,
            self.multiplier_bits,
        ];
        if ints.contains(&0) || !(self.clock_mhz > 0.0) {
            return Err(Error::Config("hardware parameters must all be positive".into()));
        }
        if self.n_clusters != 4 {
            return Err(Error::Config("the pipelined design needs exactly 4 clusters".into()));
        }
        let s = &self.buffer_split;
        let parts = [s.weight, s.input, s.output, s.membrane, s.gradient];
        if parts.iter().any(|v| !(*v >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("buffer split fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    fn total_pes(&self) -> usize {
        self.n_clusters * self.pes_per_cluster
    }

    fn cap(&self, fraction: f64) -> f64 {
        (self.global_buffer_kb * 1024) as f64 * fraction
    }

    fn acc_bytes(&self) -> f64 {
        self.accumulator_bits as f64 / 8.0
    }

    fn weight_bytes(&self) -> f64 {
        self.multiplier_bits as f64 / 8.0
    }
}

/// Energy per event in picojoules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    pub name: String,
    /// 8-bit multiply-accumulate.
    pub mac_pj: f64,
    /// 16-bit add (adder arrays, gradient accumulation).
    pub accumulate_pj: f64,
    /// Accumulate-only PE in cluster 1, charged per nonzero input spike.
    pub spike_accumulate_pj: f64,
    pub lif_update_pj: f64,
    pub scratchpad_pj_per_byte: f64,
    pub sram_pj_per_byte: f64,
    pub dram_pj_per_byte: f64,
    /// Leakage and clock tree of the whole chip, charged every cycle.
    pub static_pj_per_cycle: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        Self::preset("default-28nm").expect("built-in preset")
    }
}

impl EnergyTable {
    pub const PRESETS: [&'static str; 1] = ["default-28nm"];

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default-28nm" => Some(Self {
                name: name.into(),
                mac_pj: 0.2,
                accumulate_pj: 0.05,
                spike_accumulate_pj: 0.03,
                lif_update_pj: 0.1,
                scratchpad_pj_per_byte: 0.1,
                sram_pj_per_byte: 1.5,
                dram_pj_per_byte: 160.0,
                static_pj_per_cycle: 50.0,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mac_pj,
            self.accumulate_pj,
            self.spike_accumulate_pj,
            self.lif_update_pj,
            self.scratchpad_pj_per_byte,
            self.sram_pj_per_byte,
            self.dram_pj_per_byte,
            self.static_pj_per_cycle,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("energy entries must be finite and non-negative".into()));
        }
        if !(self.dram_pj_per_byte > self.sram_pj_per_byte && self.sram_pj_per_byte > self.scratchpad_pj_per_byte) {
            return Err(Error::Config("energy table must satisfy DRAM > SRAM > scratchpad per byte".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// `Some(r)` for a TT layer with uniform rank r.
    pub rank: Option<usize>,
    pub spike_input: bool,
    /// A LIF layer consumes this conv's output.
    pub lif_after: bool,
    /// The first layer never needs an input gradient.
    pub needs_input_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub mode: ModelMode,
    pub timesteps: usize,
    /// Branch step per timestep; only HTT has half steps.
    pub schedule: Vec<BranchStep>,
    /// Fraction of nonzero input spikes seen by spike-input layers.
    #[serde(default = "default_density")]
    pub spike_density: f64,
    pub layers: Vec<WorkloadLayer>,
    pub classifier_features: usize,
    pub num_classes: usize,
}

fn default_density() -> f64 {
    0.15
}

impl WorkloadSpec {
    /// One image, all timesteps. `ranks` is ignored for the baseline.
    pub fn from_model(spec: &ModelSpec, ranks: &[usize]) -> Result<Self> {
        let resolved = spec.resolve()?;
        let tt = spec.mode.tt_mode().is_some();
        if tt && ranks.len() != resolved.num_decomposable() {
            return Err(Error::Config(format!(
                "rank list has {} entries but the model has {} decomposable layers",
                ranks.len(),
                resolved.num_decomposable()
            )));
        }
        let schedule = match spec.htt_schedule()?.filter(|_| spec.mode == ModelMode::Htt) {
            Some(s) => s.steps().to_vec(),
            None => vec![BranchStep::Full; spec.timesteps],
        };
        let layers = resolved
            .convs
            .iter()
            .map(|d| WorkloadLayer {
                name: d.name.clone(),
                in_channels: d.in_channels,
                out_channels: d.out_channels,
                kernel: d.kernel,
                stride: d.stride,
                in_hw: d.in_hw,
                out_hw: d.out_hw,
                rank: d.tt_index.filter(|_| tt).map(|i| ranks[i]),
                spike_input: d.role != ConvRole::Stem,
                lif_after: d.role != ConvRole::Shortcut,
                needs_input_grad: d.role != ConvRole::Stem,
            })
            .collect();
        let w = Self {
            name: spec.name.clone(),
            mode: spec.mode,
            timesteps: spec.timesteps,
            schedule,
            spike_density: default_density(),
            layers,
            classifier_features: resolved.classifier_features,
            num_classes: resolved.num_classes,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn empty(mode: ModelMode, timesteps: usize) -> Self {
        Self {
            name: "empty".into(),
            mode,
            timesteps,
            schedule: vec![BranchStep::Full; timesteps],
            spike_density: default_density(),
            layers: Vec::new(),
            classifier_features: 0,
            num_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() != self.timesteps {
            return Err(Error::Config(format!(
                "schedule has {} steps for T = {}",
                self.schedule.len(),
                self.timesteps
            )));
        }
        if self.mode != ModelMode::Htt && self.schedule.iter().any(|s| s.is_half()) {
            return Err(Error::Config("half steps are only valid in HTT mode".into()));
        }
        if !(0.0..=1.0).contains(&self.spike_density) {
            return Err(Error::Config("spike density must lie in [0, 1]".into()));
        }
        for l in &self.layers {
            if l.rank == Some(0) || l.in_channels == 0 || l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(format!("{}: dimensions and rank must be positive", l.name)));
            }
            if l.rank.is_some() && self.mode == ModelMode::Baseline {
                return Err(Error::Config(format!("{}: baseline workloads have no TT layers", l.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    SingleEngine,
    Multicluster,
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Design::SingleEngine => "single-engine",
            Design::Multicluster => "multicluster",
        })
    }
}

impl std::str::FromStr for Design {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-engine" | "single" => Ok(Design::SingleEngine),
            "multicluster" | "multi" => Ok(Design::Multicluster),
            _ => Err(Error::Config(format!("unknown design '{s}' (single-engine, multicluster)"))),
        }
    }
}

/// Joules per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub compute: f64,
    pub global_buffer: f64,
    pub scratchpad: f64,
    pub dram: f64,
    pub lif: f64,
    pub leakage: f64,
}

impl Breakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.global_buffer + self.scratchpad + self.dram + self.lif + self.leakage
    }

    fn add(&mut self, o: &Breakdown) {
        self.compute += o.compute;
        self.global_buffer += o.global_buffer;
        self.scratchpad += o.scratchpad;
        self.dram += o.dram;
        self.lif += o.lif;
        self.leakage += o.leakage;
    }
}

/// Raw event counts behind the energy figures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventCounts {
    pub macs: f64,
    pub spike_accumulates: f64,
    pub accumulates: f64,
    pub lif_updates: f64,
    pub scratchpad_bytes: f64,
    pub sram_bytes: f64,
    pub dram_bytes: f64,
}

impl EventCounts {
    fn add(&mut self, o: &EventCounts) {
        self.macs += o.macs;
        self.spike_accumulates += o.spike_accumulates;
        self.accumulates += o.accumulates;
        self.lif_updates += o.lif_updates;
        self.scratchpad_bytes += o.scratchpad_bytes;
        self.sram_bytes += o.sram_bytes;
        self.dram_bytes += o.dram_bytes;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub name: String,
    pub energy_j: f64,
    pub breakdown: Breakdown,
    pub cycles: u64,
    pub events: EventCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub design: Design,
    pub workload: String,
    pub mode: ModelMode,
    pub timesteps: usize,
    pub energy_table: String,
    pub units: String,
    pub energy_j: f64,
    pub breakdown: Breakdown,
    pub cycles: u64,
    pub latency_s: f64,
    pub cluster_utilization: Vec<f64>,
    /// Compute energy per timestep and cluster (four entries per timestep).
    pub cluster_compute_j: Vec<Vec<f64>>,
    pub events: EventCounts,
    pub layers: Vec<LayerTrace>,
}

/// Accumulates events for one layer, converting them to energy at the end.
struct Tally<'a> {
    hw: &'a HardwareConfig,
    et: &'a EnergyTable,
    ev: EventCounts,
    compute_pj: f64,
    cycles: u64,
    busy: [u64; 4],
    cluster_pj: Vec<[f64; 4]>,
}

impl<'a> Tally<'a> {
    fn new(hw: &'a HardwareConfig, et: &'a EnergyTable, t: usize) -> Self {
        Self {
            hw,
            et,
            ev: EventCounts::default(),
            compute_pj: 0.0,
            cycles: 0,
            busy: [0; 4],
            cluster_pj: vec![[0.0; 4]; t],
        }
    }

    /// Full multiply-accumulates; each reads two operand bytes from the scratchpads.
    fn macs(&mut self, n: f64, t: usize, cluster: Option<usize>) {
        self.ev.macs += n;
        self.ev.scratchpad_bytes += 2.0 * n;
        let e = n * self.et.mac_pj;
        self.compute_pj += e;
        self.charge(e, t, cluster);
    }

    /// Accumulate-only operations gated by input spikes.
    fn spike_accs(&mut self, n: f64, t: usize, cluster: Option<usize>) {
        self.ev.spike_accumulates += n;
        self.ev.scratchpad_bytes += 2.0 * n;
        let e = n * self.et.spike_accumulate_pj;
        self.compute_pj += e;
        self.charge(e, t, cluster);
    }

    fn accs(&mut self, n: f64) {
        self.ev.accumulates += n;
        self.compute_pj += n * self.et.accumulate_pj;
    }

    /// `None` spreads the energy evenly over all clusters (whole-array mapping).
    fn charge(&mut self, e: f64, t: usize, cluster: Option<usize>) {
        match cluster {
            Some(c) => self.cluster_pj[t][c] += e,
            None => self.cluster_pj[t].iter_mut().for_each(|v| *v += e / 4.0),
        }
    }

    fn sram(&mut self, bytes: f64) {
        self.ev.sram_bytes += bytes;
    }

    fn dram(&mut self, bytes: f64) {
        self.ev.dram_bytes += bytes;
    }

    fn spad(&mut self, bytes: f64) {
        self.ev.scratchpad_bytes += bytes;
    }

    /// A tensor written once then read `reads` times through a buffer of `cap` bytes. The part
    /// that does not fit spills: it is written to and read back from DRAM instead.
    fn staged(&mut self, bytes: f64, cap: f64, reads: f64) {
        let on_chip = bytes.min(cap);
        let spill = bytes - on_chip;
        self.sram(on_chip * (1.0 + reads));
        self.dram(spill * (1.0 + reads));
    }

    /// A layer output consumed tile by tile by the LIF array or the residual adder: one write
    /// and one read in the output buffer, never spilled.
    fn fused(&mut self, bytes: f64) {
        self.sram(2.0 * bytes);
    }

    /// Kept for the backward pass: always written to and read back from DRAM once.
    fn stash(&mut self, bytes: f64) {
        self.dram(2.0 * bytes);
    }

    fn lif(&mut self, neurons: f64) {
        self.ev.lif_updates += neurons;
    }

    fn finish(self, name: &str) -> (LayerTrace, [u64; 4], Vec<[f64; 4]>) {
        let et = self.et;
        let b = Breakdown {
            compute: self.compute_pj * PJ,
            global_buffer: self.ev.sram_bytes * et.sram_pj_per_byte * PJ,
            scratchpad: self.ev.scratchpad_bytes * et.scratchpad_pj_per_byte * PJ,
            dram: self.ev.dram_bytes * et.dram_pj_per_byte * PJ,
            lif: self.ev.lif_updates * et.lif_update_pj * PJ,
            leakage: self.cycles as f64 * et.static_pj_per_cycle * PJ,
        };
        let trace =
            LayerTrace { name: name.into(), energy_j: b.total(), breakdown: b, cycles: self.cycles, events: self.ev };
        let cluster = self.cluster_pj.iter().map(|c| c.map(|v| v * PJ)).collect();
        (trace, self.busy, cluster)
    }
}

/// One convolution (or TT sub-convolution) for a single timestep.
#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    in_elems: usize,
    out_hw: usize,
    spike_input: bool,
}

impl Conv {
    fn macs(&self) -> f64 {
        (self.cout * self.cin * self.kh * self.kw * self.out_hw) as f64
    }

    fn weights(&self) -> f64 {
        (self.cout * self.cin * self.kh * self.kw) as f64
    }

    fn out_elems(&self) -> f64 {
        (self.cout * self.out_hw) as f64
    }

    fn in_bytes(&self, hw: &HardwareConfig) -> f64 {
        if self.spike_input {
            self.in_elems as f64 / 8.0
        } else {
            self.in_elems as f64 * hw.acc_bytes()
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Sub-convolutions of a TT layer: 1x1 (stride), Kx1, 1xK, 1x1.
fn tt_subconvs(l: &WorkloadLayer, r: usize) -> [Conv; 4] {
    let hw = l.out_hw.0 * l.out_hw.1;
    let in_hw = l.in_hw.0 * l.in_hw.1;
    let k = l.kernel;
    [
        Conv {
            cin: l.in_channels,
            cout: r,
            kh: 1,
            kw: 1,
            in_elems: l.in_channels * in_hw,
            out_hw: hw,
            spike_input: l.spike_input,
        },
        Conv { cin: r, cout: r, kh: k, kw: 1, in_elems: r * hw, out_hw: hw, spike_input: false },
        Conv { cin: r, cout: r, kh: 1, kw: k, in_elems: r * hw, out_hw: hw, spike_input: false },
        Conv { cin: r, cout: l.out_channels, kh: 1, kw: 1, in_elems: r * hw, out_hw: hw, spike_input: false },
    ]
}

fn dense_conv(l: &WorkloadLayer) -> Conv {
    Conv {
        cin: l.in_channels,
        cout: l.out_channels,
        kh: l.kernel,
        kw: l.kernel,
        in_elems: l.in_channels * l.in_hw.0 * l.in_hw.1,
        out_hw: l.out_hw.0 * l.out_hw.1,
        spike_input: l.spike_input,
    }
}

/// Weights come from DRAM once per pass: a weight tile stays resident while all timesteps
/// stream through it. SRAM re-reads follow the tiling reuse factor `passes` per timestep.
fn weight_pass(tl: &mut Tally, w_bytes: f64, passes: f64, t_count: usize) {
    tl.dram(w_bytes);
    tl.sram(w_bytes * (1.0 + passes * t_count as f64));
}

/// Weight gradients accumulate over timesteps in the gradient buffer (read-modify-write per
/// timestep) and are written to DRAM once, followed by the optimizer update in DRAM.
fn weight_grad(tl: &mut Tally, n_weights: f64, t_count: usize) {
    let bytes = n_weights * tl.hw.acc_bytes();
    tl.sram(2.0 * bytes * t_count as f64);
    tl.dram(bytes);
    tl.accs(n_weights * t_count as f64);
    // momentum SGD update: read gradient, weight and velocity, write velocity and weight
    tl.dram(bytes * 3.0 + n_weights * tl.hw.weight_bytes() * 2.0);
    tl.macs(2.0 * n_weights, 0, None);
}

/// Which clusters a conv occupies: one cluster, or the whole array.
#[derive(Clone, Copy)]
enum Place {
    Array,
    Cluster(usize),
}

impl Place {
    fn pes(self, hw: &HardwareConfig) -> usize {
        match self {
            Place::Array => hw.total_pes(),
            Place::Cluster(_) => hw.pes_per_cluster,
        }
    }

    fn cluster(self) -> Option<usize> {
        match self {
            Place::Array => None,
            Place::Cluster(c) => Some(c),
        }
    }
}

/// One conv at one timestep, forward or backward (weight gradient, plus input gradient when
/// `need_dx`). Inputs are re-streamed from SRAM once per group of output channels mapped onto
/// the PEs. On cluster 1 spike inputs only trigger accumulates for nonzero spikes.
fn conv_step(tl: &mut Tally, c: &Conv, t: usize, backward: bool, need_dx: bool, place: Place, density: f64) -> u64 {
    let hw = tl.hw;
    let pes = place.pes(hw);
    let macs = c.macs();
    let in_b = c.in_bytes(hw);
    let out_b = c.out_elems() * hw.acc_bytes();
    let gated = matches!(place, Place::Cluster(0)) && c.spike_input;
    let one = ceil_div(macs as usize, pes) as u64;
    // forward conv, or the weight gradient (x against dy)
    if gated {
        tl.spike_accs(macs * density, t, place.cluster());
    } else {
        tl.macs(macs, t, place.cluster());
    }
    tl.sram(in_b * ceil_div(c.cout, pes) as f64);
    let mut cycles = one;
    if backward {
        tl.sram(out_b * ceil_div(c.cin, pes) as f64);
        if need_dx {
            tl.macs(macs, t, place.cluster());
            tl.sram(out_b * ceil_div(c.cin, pes) as f64);
            cycles += one;
        }
    }
    match place {
        Place::Cluster(cl) => tl.busy[cl] += cycles,
        Place::Array => tl.busy.iter_mut().for_each(|b| *b += cycles),
    }
    cycles
}

/// LIF array after a conv: one update per neuron and timestep forward, the surrogate as one
/// MAC per neuron backward. The membrane is carried across timesteps in the membrane buffer;
/// the spike maps (all timesteps) go to the input buffer for the next layer; membrane and
/// spikes are stashed for BPTT.
fn lif_layer(tl: &mut Tally, neurons: f64, t_count: usize) {
    let hw = tl.hw;
    let mem_bytes = neurons * hw.acc_bytes();
    for t in 0..t_count {
        tl.lif(neurons);
        tl.staged(mem_bytes, hw.cap(hw.buffer_split.membrane), 1.0);
        tl.stash(mem_bytes + neurons / 8.0);
        tl.macs(neurons, t, None);
    }
    tl.staged(neurons * t_count as f64 / 8.0, hw.cap(hw.buffer_split.input), 1.0);
    tl.cycles += (ceil_div(neurons as usize, hw.total_pes()) * 2 * t_count) as u64;
}

/// Activation gradient (all timesteps) handed from a layer to its predecessor.
fn grad_handoff(tl: &mut Tally, elems: f64, t_count: usize) {
    let hw = tl.hw;
    tl.staged(elems * t_count as f64 * hw.acc_bytes(), hw.cap(hw.buffer_split.gradient), 1.0);
}

fn simulate_dense_layer(tl: &mut Tally, l: &WorkloadLayer, w: &WorkloadSpec) {
    let c = dense_conv(l);
    let t_count = w.timesteps;
    let hw = tl.hw;
    let pes = hw.total_pes();
    let w_b = c.weights() * hw.weight_bytes();
    weight_pass(tl, w_b, ceil_div(c.out_hw, pes) as f64, t_count);
    for t in 0..t_count {
        tl.cycles += conv_step(tl, &c, t, false, false, Place::Array, w.spike_density);
    }
    // conv output to the LIF array or the residual adder
    tl.fused(c.out_elems() * t_count as f64 * hw.acc_bytes());
    weight_pass(tl, w_b, ceil_div(c.in_elems / c.cin, pes) as f64, t_count);
    for t in (0..t_count).rev() {
        tl.cycles += conv_step(tl, &c, t, true, l.needs_input_grad, Place::Array, w.spike_density);
    }
    weight_grad(tl, c.weights(), t_count);
    if l.needs_input_grad {
        grad_handoff(tl, c.in_elems as f64, t_count);
    }
}

/// Each sub-convolution is mapped as its own layer and runs all timesteps before the next,
/// so an intermediate holds T maps. Intermediates pass through the output buffer, spilling
/// what does not fit, and are recomputed from the layer input in backward rather than
/// stashed. With `split_branch` the two parallel branches are serialised and the first branch
/// output makes a DRAM round trip before the merge at every full timestep, forward and
/// backward. With `gate_first` the spike-input core runs on the accumulate-only cluster 1.
fn simulate_tt_sequential(
    tl: &mut Tally,
    l: &WorkloadLayer,
    r: usize,
    w: &WorkloadSpec,
    split_branch: bool,
    gate_first: bool,
) {
    let hw = tl.hw;
    let subs = tt_subconvs(l, r);
    let t_count = w.timesteps;
    let tf = t_count as f64;
    let map_b = (r * l.out_hw.0 * l.out_hw.1) as f64 * hw.acc_bytes();
    let inter_b = map_b * tf;
    let out_cap = hw.cap(hw.buffer_split.output);
    let grad_cap = hw.cap(hw.buffer_split.gradient);
    let place = |i: usize| if i == 0 && gate_first { Place::Cluster(0) } else { Place::Array };
    let branch_reads =
        w.schedule.iter().map(|s| s.uses_vertical() as usize + s.uses_horizontal() as usize).sum::<usize>() as f64 / tf;
    let n_full = w.schedule.iter().filter(|s| !s.is_half()).count() as f64;
    let runs = |i: usize, step: BranchStep| match i {
        1 => !split_branch || step.uses_vertical(),
        2 => !split_branch || step.uses_horizontal(),
        _ => true,
    };
    let round_trip = |tl: &mut Tally| {
        if split_branch {
            tl.dram(2.0 * n_full * map_b);
            tl.accs(n_full * map_b / hw.acc_bytes());
        }
    };
    // forward through the first three cores with their intermediates
    let forward = |tl: &mut Tally| {
        for (i, c) in subs.iter().enumerate().take(3) {
            for (t, &step) in w.schedule.iter().enumerate() {
                if runs(i, step) {
                    tl.cycles += conv_step(tl, c, t, false, false, place(i), w.spike_density);
                }
            }
        }
        if split_branch {
            tl.staged(inter_b, out_cap, branch_reads);
            tl.staged(inter_b, out_cap, 1.0);
        } else {
            (0..3).for_each(|_| tl.staged(inter_b, out_cap, 1.0));
        }
        round_trip(tl);
    };

    for (i, c) in subs.iter().enumerate() {
        weight_pass(tl, c.weights() * hw.weight_bytes(), ceil_div(c.out_hw, place(i).pes(hw)) as f64, t_count);
    }
    forward(tl);
    for t in 0..t_count {
        tl.cycles += conv_step(tl, &subs[3], t, false, false, place(3), w.spike_density);
    }
    tl.fused(subs[3].out_elems() * tf * hw.acc_bytes());

    // backward recomputes the chain, then walks it in reverse
    forward(tl);
    for i in (0..4).rev() {
        let c = &subs[i];
        let need_dx = i > 0 || l.needs_input_grad;
        weight_pass(
            tl,
            c.weights() * hw.weight_bytes(),
            ceil_div(c.in_elems / c.cin, place(i).pes(hw)) as f64,
            t_count,
        );
        for (t, &step) in w.schedule.iter().enumerate().rev() {
            if runs(i, step) {
                tl.cycles += conv_step(tl, c, t, true, need_dx, place(i), w.spike_density);
            }
        }
        weight_grad(tl, c.weights(), t_count);
    }
    if split_branch {
        tl.staged(inter_b, grad_cap, branch_reads);
        tl.staged(inter_b, grad_cap, 1.0);
    } else {
        (0..3).for_each(|_| tl.staged(inter_b, grad_cap, 1.0));
    }
    round_trip(tl);
    if l.needs_input_grad {
        grad_handoff(tl, subs[0].in_elems as f64, t_count);
    }
}

/// The four-cluster pipeline for one TT layer (PTT or HTT), one timestep at a time. The
/// cluster 1 output passes through the output buffer to both branch clusters; branch outputs
/// meet in the adder array and stream into cluster 4 without touching the global buffer. Only
/// o1 and the merged sum are kept for BPTT. A cluster whose branch is skipped at a half
/// timestep does no work.
fn simulate_tt_pipelined(tl: &mut Tally, l: &WorkloadLayer, r: usize, w: &WorkloadSpec) {
    let hw = tl.hw;
    let subs = tt_subconvs(l, r);
    let t_count = w.timesteps;
    let pes = hw.pes_per_cluster;
    let inter = (r * l.out_hw.0 * l.out_hw.1) as f64;
    let inter_b = inter * hw.acc_bytes();
    let out_cap = hw.cap(hw.buffer_split.output);
    let density = w.spike_density;
    let fill = 4 * pes as u64;
    let cl = |i: usize| Place::Cluster(i);
    let branches = |step: BranchStep| [(1usize, step.uses_vertical()), (2usize, step.uses_horizontal())];

    // all four cores stay resident; their prefetch overlaps compute
    for c in &subs {
        weight_pass(tl, c.weights() * hw.weight_bytes(), ceil_div(c.out_hw, pes) as f64, t_count);
    }
    // clusters 1 to 3 for one timestep; o1 goes through the output buffer to both branches,
    // the branch outputs meet in the adder array
    let front = |tl: &mut Tally, t: usize, step: BranchStep| {
        let mut stage = conv_step(tl, &subs[0], t, false, false, cl(0), density);
        tl.staged(inter_b, out_cap, 1.0);
        let mut active = 0.0;
        for (i, on) in branches(step) {
            if on {
                stage = stage.max(conv_step(tl, &subs[i], t, false, false, cl(i), density));
                active += 1.0;
            }
        }
        tl.accs(inter * (active - 1.0));
        tl.spad(inter_b * active);
        stage
    };
    for (t, &step) in w.schedule.iter().enumerate() {
        let stage = front(tl, t, step).max(conv_step(tl, &subs[3], t, false, false, cl(3), density));
        tl.cycles += stage + fill;
    }
    tl.fused(subs[3].out_elems() * t_count as f64 * hw.acc_bytes());

    for c in &subs {
        weight_pass(tl, c.weights() * hw.weight_bytes(), ceil_div(c.in_elems / c.cin, pes) as f64, t_count);
    }
    for (t, &step) in w.schedule.iter().enumerate().rev() {
        // recompute o1 and the branch sum for this timestep
        tl.cycles += front(tl, t, step) + fill;
        // ds from cluster 4 streams to the active branches; their o1 gradients merge in the
        // adder array on the way to cluster 1
        let mut stage = conv_step(tl, &subs[3], t, true, true, cl(3), density);
        let mut active = 0.0;
        for (i, on) in branches(step) {
            if on {
                stage = stage.max(conv_step(tl, &subs[i], t, true, true, cl(i), density));
                active += 1.0;
            }
        }
        tl.spad(2.0 * inter_b * active);
        tl.accs(inter * (active - 1.0));
        stage = stage.max(conv_step(tl, &subs[0], t, true, l.needs_input_grad, cl(0), density));
        tl.cycles += stage + fill;
    }
    for c in &subs {
        weight_grad(tl, c.weights(), t_count);
    }
    if l.needs_input_grad {
        grad_handoff(tl, subs[0].in_elems as f64, t_count);
    }
}

fn classifier(tl: &mut Tally, w: &WorkloadSpec) {
    if w.num_classes == 0 {
        return;
    }
    let hw = tl.hw;
    let n = (w.classifier_features * w.num_classes) as f64;
    weight_pass(tl, n * hw.weight_bytes(), 1.0, w.timesteps);
    for t in 0..w.timesteps {
        tl.macs(n, t, None);
        tl.macs(2.0 * n, t, None);
        tl.cycles += 3 * ceil_div(n as usize, hw.total_pes()) as u64;
    }
    tl.busy.iter_mut().for_each(|b| *b += 3 * ceil_div(n as usize, hw.total_pes()) as u64 * w.timesteps as u64);
    weight_grad(tl, n, w.timesteps);
}

fn run(w: &WorkloadSpec, hw: &HardwareConfig, et: &EnergyTable, design: Design) -> Result<SimReport> {
    w.validate()?;
    hw.validate()?;
    et.validate()?;
    let mut layers = Vec::with_capacity(w.layers.len() + 1);
    let mut busy = [0u64; 4];
    let mut cluster = vec![[0.0f64; 4]; w.timesteps];
    let mut collect = |tl: Tally, name: &str, layers: &mut Vec<LayerTrace>| {
        let (trace, b, c) = tl.finish(name);
        for i in 0..4 {
            busy[i] += b[i];
        }
        for (acc, row) in cluster.iter_mut().zip(c) {
            for i in 0..4 {
                acc[i] += row[i];
            }
        }
        layers.push(trace);
    };
    for (li, l) in w.layers.iter().enumerate() {
        let mut tl = Tally::new(hw, et, w.timesteps);
        if li == 0 && !l.spike_input {
            // the analog input image is fetched once and reused every timestep
            tl.dram(l.in_channels as f64 * (l.in_hw.0 * l.in_hw.1) as f64 * hw.weight_bytes());
        }
        match (l.rank, design, w.mode) {
            (None, _, _) => simulate_dense_layer(&mut tl, l, w),
            (Some(r), Design::SingleEngine, ModelMode::Stt) => simulate_tt_sequential(&mut tl, l, r, w, false, false),
            (Some(r), Design::SingleEngine, _) => simulate_tt_sequential(&mut tl, l, r, w, true, false),
            (Some(r), Design::Multicluster, ModelMode::Stt) => simulate_tt_sequential(&mut tl, l, r, w, false, true),
            (Some(r), Design::Multicluster, _) => simulate_tt_pipelined(&mut tl, l, r, w),
        }
        if l.lif_after {
            lif_layer(&mut tl, (l.out_channels * l.out_hw.0 * l.out_hw.1) as f64, w.timesteps);
        }
        collect(tl, &l.name, &mut layers);
    }
    let mut tl = Tally::new(hw, et, w.timesteps);
    classifier(&mut tl, w);
    if w.num_classes > 0 {
        collect(tl, "classifier", &mut layers);
    }
    let mut breakdown = Breakdown::default();
    let mut events = EventCounts::default();
    let mut cycles = 0u64;
    for l in &layers {
        breakdown.add(&l.breakdown);
        events.add(&l.events);
        cycles += l.cycles;
    }
    let utilization =
        busy.iter().map(|&b| if cycles == 0 { 0.0 } else { (b as f64 / cycles as f64).min(1.0) }).collect();
    Ok(SimReport {
        design,
        workload: w.name.clone(),
        mode: w.mode,
        timesteps: w.timesteps,
        energy_table: et.name.clone(),
        units: "joules (model-relative)".into(),
        energy_j: breakdown.total(),
        breakdown,
        cycles,
        latency_s: cycles as f64 / (hw.clock_mhz * 1e6),
        cluster_utilization: utilization,
        cluster_compute_j: cluster.into_iter().map(|c| c.to_vec()).collect(),
        events,
        layers,
    })
}

/// The prior-art engine: every layer and sub-convolution runs in sequence, all timesteps of a
/// layer before the next; PTT/HTT branches are serialised with a DRAM round trip for the merge.
pub fn simulate_single_engine(w: &WorkloadSpec, hw: &HardwareConfig, et: &EnergyTable) -> Result<SimReport> {
    run(w, hw, et, Design::SingleEngine)
}

/// The four-cluster design. PTT and HTT use the branch pipeline; STT has no parallel branch to
/// exploit and runs its sub-convolutions layer-sequentially on the same hardware.
pub fn simulate_multicluster(w: &WorkloadSpec, hw: &HardwareConfig, et: &EnergyTable) -> Result<SimReport> {
    if w.mode == ModelMode::Baseline {
        return Err(Error::Mode("the multicluster design runs TT workloads (stt, ptt, htt)".into()));
    }
    run(w, hw, et, Design::Multicluster)
}

pub fn simulate(design: Design, w: &WorkloadSpec, hw: &HardwareConfig, et: &EnergyTable) -> Result<SimReport> {
    match design {
        Design::SingleEngine => simulate_single_engine(w, hw, et),
        Design::Multicluster => simulate_multicluster(w, hw, et),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub design: Design,
    pub mode: ModelMode,
    pub energy_j: f64,
    pub cycles: u64,
    /// Energy relative to the reference of its group.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingChecks {
    pub single_engine_stt_below_dense: bool,
    pub single_engine_ptt_above_stt: bool,
    pub multicluster_ptt_below_stt: bool,
    pub multicluster_htt_below_ptt: bool,
}

impl OrderingChecks {
    pub fn all(&self) -> bool {
        self.single_engine_stt_below_dense
            && self.single_engine_ptt_above_stt
            && self.multicluster_ptt_below_stt
            && self.multicluster_htt_below_ptt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignComparison {
    pub workload: String,
    pub energy_table: String,
    pub units: String,
    /// Single engine, relative to the dense baseline.
    pub single_engine: Vec<ComparisonEntry>,
    /// Multicluster, relative to STT on the same hardware.
    pub multicluster: Vec<ComparisonEntry>,
    pub checks: OrderingChecks,
}

impl DesignComparison {
    fn find(entries: &[ComparisonEntry], mode: ModelMode) -> &ComparisonEntry {
        entries.iter().find(|e| e.mode == mode).expect("every mode is simulated")
    }

    pub fn single(&self, mode: ModelMode) -> &ComparisonEntry {
        Self::find(&self.single_engine, mode)
    }

    pub fn multi(&self, mode: ModelMode) -> &ComparisonEntry {
        Self::find(&self.multicluster, mode)
    }
}

/// Runs the dense and all three TT variants of `spec` on both designs.
pub fn compare_designs(
    spec: &ModelSpec,
    ranks: &[usize],
    spike_density: f64,
    hw: &HardwareConfig,
    et: &EnergyTable,
) -> Result<DesignComparison> {
    let workload = |mode: ModelMode| -> Result<WorkloadSpec> {
        let mut s = spec.clone();
        s.mode = mode;
        let mut w = WorkloadSpec::from_model(&s, ranks)?;
        w.spike_density = spike_density;
        Ok(w)
    };
    let mut single = Vec::new();
    for mode in ModelMode::ALL {
        let r = simulate_single_engine(&workload(mode)?, hw, et)?;
        single.push(ComparisonEntry {
            design: Design::SingleEngine,
            mode,
            energy_j: r.energy_j,
            cycles: r.cycles,
            relative: 0.0,
        });
    }
    let mut multi = Vec::new();
    for mode in [ModelMode::Stt, ModelMode::Ptt, ModelMode::Htt] {
        let r = simulate_multicluster(&workload(mode)?, hw, et)?;
        multi.push(ComparisonEntry {
            design: Design::Multicluster,
            mode,
            energy_j: r.energy_j,
            cycles: r.cycles,
            relative: 0.0,
        });
    }
    let base = DesignComparison::find(&single, ModelMode::Baseline).energy_j;
    single.iter_mut().for_each(|e| e.relative = e.energy_j / base);
    let stt = DesignComparison::find(&multi, ModelMode::Stt).energy_j;
    multi.iter_mut().for_each(|e| e.relative = e.energy_j / stt);
    let e = |v: &[ComparisonEntry], m| DesignComparison::find(v, m).energy_j;
    let checks = OrderingChecks {
        single_engine_stt_below_dense: e(&single, ModelMode::Stt) < e(&single, ModelMode::Baseline),
        single_engine_ptt_above_stt: e(&single, ModelMode::Ptt) > e(&single, ModelMode::Stt),
        multicluster_ptt_below_stt: e(&multi, ModelMode::Ptt) < e(&multi, ModelMode::Stt),
        multicluster_htt_below_ptt: e(&multi, ModelMode::Htt) < e(&multi, ModelMode::Ptt),
    };
    Ok(DesignComparison {
        workload: spec.name.clone(),
        energy_table: et.name.clone(),
        units: "joules (model-relative)".into(),
        single_engine: single,
        multicluster: multi,
        checks,
    })
}

pub fn render_report(r: &SimReport) -> String {
    let mut s = String::new();
    let b = &r.breakdown;
    let _ = writeln!(
        s,
        "# {} on {} ({}, T={}), energy table {}",
        r.workload, r.design, r.mode, r.timesteps, r.energy_table
    );
    let _ = writeln!(s, "total energy   {:.6e} J (model-relative)", r.energy_j);
    for (k, v) in [
        ("compute", b.compute),
        ("global buffer", b.global_buffer),
        ("scratchpad", b.scratchpad),
        ("dram", b.dram),
        ("lif", b.lif),
        ("leakage", b.leakage),
    ] {
        let _ = writeln!(s, "  {k:<13} {v:.6e} J  {:5.1}%", 100.0 * v / r.energy_j.max(f64::MIN_POSITIVE));
    }
    let _ = writeln!(s, "cycles         {} ({:.3} ms)", r.cycles, r.latency_s * 1e3);
    let util: Vec<String> = r.cluster_utilization.iter().map(|u| format!("{:.2}", u)).collect();
    let _ = writeln!(s, "utilization    [{}]", util.join(", "));
    s
}

pub fn render_comparison(c: &DesignComparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} energy comparison, table {} ({})", c.workload, c.energy_table, c.units);
    let _ = writeln!(s, "single engine (relative to dense baseline)");
    for e in &c.single_engine {
        let _ =
            writeln!(s, "  {:<8} {:>12.6e} J  {:6.3}  {}", e.mode.to_string(), e.energy_j, e.relative, bar(e.relative));
    }
    let _ = writeln!(s, "multicluster (relative to STT on the same hardware)");
    for e in &c.multicluster {
        let _ =
            writeln!(s, "  {:<8} {:>12.6e} J  {:6.3}  {}", e.mode.to_string(), e.energy_j, e.relative, bar(e.relative));
    }
    let ck = &c.checks;
    let _ = writeln!(
        s,
        "checks: se stt<dense {}, se ptt>stt {}, mc ptt<stt {}, mc htt<ptt {}",
        ck.single_engine_stt_below_dense,
        ck.single_engine_ptt_above_stt,
        ck.multicluster_ptt_below_stt,
        ck.multicluster_htt_below_ptt
    );
    s
}

fn bar(v: f64) -> String {
    "#".repeat((v * 40.0).round().clamp(0.0, 80.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one(mode: ModelMode) -> WorkloadSpec {
        WorkloadSpec {
            name: "micro".into(),
            mode,
            timesteps: 1,
            schedule: vec![BranchStep::Full],
            spike_density: 0.15,
            layers: vec![WorkloadLayer {
                name: "c".into(),
                in_channels: 8,
                out_channels: 8,
                kernel: 1,
                stride: 1,
                in_hw: (4, 4),
                out_hw: (4, 4),
                rank: None,
                spike_input: true,
                lif_after: false,
                needs_input_grad: false,
            }],
            classifier_features: 0,
            num_classes: 0,
        }
    }

    #[test]
    fn empty_workload_costs_nothing() {
        let r = simulate_single_engine(
            &WorkloadSpec::empty(ModelMode::Baseline, 4),
            &HardwareConfig::default(),
            &EnergyTable::default(),
        )
        .unwrap();
        assert_eq!((r.energy_j, r.cycles), (0.0, 0));
    }

    #[test]
    fn micro_conv_mac_count() {
        let r = simulate_single_engine(
            &one_by_one(ModelMode::Baseline),
            &HardwareConfig::default(),
            &EnergyTable::default(),
        )
        .unwrap();
        // forward 1024, weight gradient 1024, no input gradient, 2 per weight in the update
        assert_eq!(r.events.macs, 2176.0);
        assert_eq!(r.breakdown.compute, (2176.0 * 0.2 + 64.0 * 0.05) * PJ);
        // weights fetched twice, gradient written, update reads 3 x 128 and writes 2 x 64
        assert_eq!(r.events.dram_bytes, 64.0 + 64.0 + 128.0 + 384.0 + 128.0);
    }

    #[test]
    fn energy_table_ordering_enforced() {
        let et = EnergyTable { sram_pj_per_byte: 500.0, ..Default::default() };
        assert!(et.validate().is_err());
        let mut hw = HardwareConfig::default();
        hw.buffer_split.weight = 0.5;
        assert!(hw.validate().is_err());
    }

    #[test]
    fn baseline_rejected_on_multicluster() {
        assert!(simulate_multicluster(
            &one_by_one(ModelMode::Baseline),
            &HardwareConfig::default(),
            &EnergyTable::default()
        )
        .is_err());
    }

    #[test]
    fn design_names_parse() {
        assert_eq!("multicluster".parse::<Design>().unwrap(), Design::Multicluster);
        assert_eq!(Design::SingleEngine.to_string(), "single-engine");
        assert!("gpu".parse::<Design>().is_err());
    }
}
