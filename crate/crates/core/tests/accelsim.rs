use std::path::PathBuf;

use proptest::prelude::*;
use ttsnn::accelsim::*;
use ttsnn::train::{ModelMode, ModelSpec};
use ttsnn::ttlayers::BranchStep;
use ttsnn::vbmf::PAPER_RESNET18;

fn r18_comparison() -> DesignComparison {
    let spec = ModelSpec::resnet18(ModelMode::Ptt, 4, 10);
    compare_designs(&spec, &PAPER_RESNET18, 0.15, &HardwareConfig::default(), &EnergyTable::default()).unwrap()
}

fn workload(mode: ModelMode) -> WorkloadSpec {
    let spec = ModelSpec::resnet18(mode, 4, 10);
    WorkloadSpec::from_model(&spec, &PAPER_RESNET18).unwrap()
}

/// A single 3x3 TT layer with no LIF and no classifier, so every compute event belongs to
/// one of the four cores.
fn single_tt_layer(mode: ModelMode, schedule: Vec<BranchStep>, density: f64) -> WorkloadSpec {
    WorkloadSpec {
        name: "one-layer".into(),
        mode,
        timesteps: schedule.len(),
        schedule,
        spike_density: density,
        layers: vec![WorkloadLayer {
            name: "tt".into(),
            in_channels: 16,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            in_hw: (8, 8),
            out_hw: (8, 8),
            rank: Some(4),
            spike_input: true,
            lif_after: false,
            needs_input_grad: true,
        }],
        classifier_features: 0,
        num_classes: 0,
    }
}

#[test]
fn resnet18_design_orderings() {
    let c = r18_comparison();
    let se_stt = c.single(ModelMode::Stt).relative;
    let mc_ptt = c.multi(ModelMode::Ptt).relative;
    assert!(se_stt <= 0.45, "single-engine STT/dense = {se_stt}");
    assert!(c.single(ModelMode::Ptt).energy_j > c.single(ModelMode::Stt).energy_j);
    assert!(mc_ptt <= 0.85, "multicluster PTT/STT = {mc_ptt}");
    assert!(c.multi(ModelMode::Htt).energy_j < c.multi(ModelMode::Ptt).energy_j);
    assert!(c.checks.all());
}

#[test]
fn pipeline_is_faster_than_sequential_stt() {
    let hw = HardwareConfig::default();
    let et = EnergyTable::default();
    let stt = simulate_multicluster(&workload(ModelMode::Stt), &hw, &et).unwrap();
    let ptt = simulate_multicluster(&workload(ModelMode::Ptt), &hw, &et).unwrap();
    assert!(ptt.cycles < stt.cycles);
}

#[test]
fn energy_is_conserved_across_layers_and_components() {
    let r =
        simulate_multicluster(&workload(ModelMode::Htt), &HardwareConfig::default(), &EnergyTable::default()).unwrap();
    let b = &r.breakdown;
    let parts = b.compute + b.global_buffer + b.scratchpad + b.dram + b.lif + b.leakage;
    assert!((parts - r.energy_j).abs() <= 1e-12 * r.energy_j);
    let per_layer: f64 = r.layers.iter().map(|l| l.energy_j).sum();
    assert!((per_layer - r.energy_j).abs() <= 1e-9 * r.energy_j);
    assert_eq!(r.layers.iter().map(|l| l.cycles).sum::<u64>(), r.cycles);
    // cluster attribution covers the MAC and spike-accumulate share of compute
    let et = EnergyTable::default();
    let charged: f64 = r.cluster_compute_j.iter().flatten().sum();
    let expected = (r.events.macs * et.mac_pj + r.events.spike_accumulates * et.spike_accumulate_pj) * 1e-12;
    assert!((charged - expected).abs() <= 1e-9 * expected);
}

#[test]
fn idle_branch_cluster_costs_nothing_at_half_steps() {
    let w = single_tt_layer(
        ModelMode::Htt,
        vec![BranchStep::Full, BranchStep::HalfVertical, BranchStep::HalfHorizontal],
        0.2,
    );
    let r = simulate_multicluster(&w, &HardwareConfig::default(), &EnergyTable::default()).unwrap();
    let c = &r.cluster_compute_j;
    assert!(c[0].iter().all(|&v| v > 0.0));
    assert!(c[1][1] > 0.0 && c[1][2] == 0.0);
    assert!(c[2][1] == 0.0 && c[2][2] > 0.0);
}

#[test]
fn zero_density_silences_forward_spike_work() {
    let w = single_tt_layer(ModelMode::Ptt, vec![BranchStep::Full; 2], 0.0);
    let r = simulate_multicluster(&w, &HardwareConfig::default(), &EnergyTable::default()).unwrap();
    assert_eq!(r.events.spike_accumulates, 0.0);
}

#[test]
fn simulation_is_deterministic() {
    let w = workload(ModelMode::Ptt);
    let a = simulate_multicluster(&w, &HardwareConfig::default(), &EnergyTable::default()).unwrap();
    let b = simulate_multicluster(&w, &HardwareConfig::default(), &EnergyTable::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn invalid_inputs_rejected() {
    let hw = HardwareConfig { n_clusters: 3, ..Default::default() };
    assert!(simulate_multicluster(&workload(ModelMode::Ptt), &hw, &EnergyTable::default()).is_err());
    let et = EnergyTable { mac_pj: f64::NAN, ..Default::default() };
    assert!(simulate_single_engine(&workload(ModelMode::Stt), &HardwareConfig::default(), &et).is_err());
    let mut w = workload(ModelMode::Htt);
    w.spike_density = 1.5;
    assert!(simulate_multicluster(&w, &HardwareConfig::default(), &EnergyTable::default()).is_err());
}

/// Relative comparison of every number in two JSON documents.
fn assert_json_close(a: &serde_json::Value, b: &serde_json::Value, path: &str) {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9 * x.abs().max(y.abs()), "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}: length");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                assert_json_close(u, v, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}: keys");
            for (k, u) in x {
                assert_json_close(u, &y[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

/// Set `UPDATE_GOLDEN=1` to rewrite the file after an intended model change.
#[test]
fn resnet18_comparison_matches_golden() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/resnet18_compare.json");
    let got = serde_json::to_value(r18_comparison()).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_json_close(&got, &want, "$");
}

fn scaled(et: &EnergyTable, which: usize, f: f64) -> EnergyTable {
    let mut e = et.clone();
    let slot = match which {
        0 => &mut e.mac_pj,
        1 => &mut e.accumulate_pj,
        2 => &mut e.spike_accumulate_pj,
        3 => &mut e.lif_update_pj,
        4 => &mut e.scratchpad_pj_per_byte,
        5 => &mut e.sram_pj_per_byte,
        6 => &mut e.dram_pj_per_byte,
        _ => &mut e.static_pj_per_cycle,
    };
    *slot *= f;
    e
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn energy_monotone_in_every_table_entry(which in 0usize..8, f in 1.0f64..1.5, mode in 0usize..3) {
        let mode = [ModelMode::Stt, ModelMode::Ptt, ModelMode::Htt][mode];
        let second = if mode == ModelMode::Htt { BranchStep::HalfVertical } else { BranchStep::Full };
        let w = single_tt_layer(mode, vec![BranchStep::Full, second], 0.3);
        let base = EnergyTable::default();
        let up = scaled(&base, which, f);
        prop_assume!(up.validate().is_ok());
        let hw = HardwareConfig::default();
        for design in [Design::SingleEngine, Design::Multicluster] {
            let a = simulate(design, &w, &hw, &base).unwrap();
            let b = simulate(design, &w, &hw, &up).unwrap();
            prop_assert!(b.energy_j >= a.energy_j);
            prop_assert_eq!(a.cycles, b.cycles);
        }
    }

    #[test]
    fn cluster_one_energy_affine_in_density(d in 0.0f64..1.0) {
        let hw = HardwareConfig::default();
        let et = EnergyTable::default();
        let c1 = |d: f64| {
            let r = simulate_multicluster(&single_tt_layer(ModelMode::Ptt, vec![BranchStep::Full; 2], d), &hw, &et).unwrap();
            r.cluster_compute_j.iter().map(|row| row[0]).sum::<f64>()
        };
        let (e0, e1, ed) = (c1(0.0), c1(1.0), c1(d));
        prop_assert!((ed - (e0 + d * (e1 - e0))).abs() <= 1e-9 * e1);
        // other clusters do not see the input spikes
        let other = |d: f64| {
            let r = simulate_multicluster(&single_tt_layer(ModelMode::Ptt, vec![BranchStep::Full; 2], d), &hw, &et).unwrap();
            r.cluster_compute_j.iter().map(|row| row[1] + row[2] + row[3]).sum::<f64>()
        };
        prop_assert_eq!(other(d), other(0.0));
    }

    #[test]
    fn more_half_steps_never_cost_more(n_half in 0usize..4) {
        let mut steps = vec![BranchStep::Full; 4];
        for s in steps.iter_mut().take(n_half) {
            *s = BranchStep::HalfVertical;
        }
        let mut fewer = steps.clone();
        if n_half > 0 {
            fewer[n_half - 1] = BranchStep::Full;
        }
        let hw = HardwareConfig::default();
        let et = EnergyTable::default();
        let a = simulate_multicluster(&single_tt_layer(ModelMode::Htt, steps, 0.2), &hw, &et).unwrap();
        let b = simulate_multicluster(&single_tt_layer(ModelMode::Htt, fewer, 0.2), &hw, &et).unwrap();
        prop_assert!(a.energy_j <= b.energy_j);
    }
}
