use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use ttsnn::accelsim::{
    compare_designs, render_comparison, render_report, simulate, Design, EnergyTable, HardwareConfig, SimReport,
    WorkloadSpec,
};
use ttsnn::metrics::{compression_report, count_model, count_report, render_counts, CountReport};
use ttsnn::snn::Network;
use ttsnn::tensor::io::{load_tensor, save_tensor};
use ttsnn::tensor::{circular_permute_last, tt_reconstruct, tt_svd, DenseTensor};
use ttsnn::train::{
    compare_on_probe, evaluate, finalize_merge, init_ttsnn, load_checkpoint, save_checkpoint, train, Dataset,
    DatasetSource, EpochLog, ModelMode, ModelSpec, RankRecord, Split, TtSnn,
};
use ttsnn::vbmf::{estimate_layer_rank, save_rank_list};

use crate::config::{data_root, ExperimentConfig, RankSource};
use crate::error::CliError;
use crate::output::RunDir;
use crate::{CompareArgs, CountArgs, DecomposeArgs, EvalArgs, ModelArgs, SimArgs, TrainArgs};

fn model_spec(m: &ModelArgs, mode: ModelMode) -> Result<ModelSpec, CliError> {
    Ok(ModelSpec::preset(&m.arch, mode, m.timesteps)?)
}

/// Concrete per-layer ranks: fixed lists directly, estimators by initialising the model.
fn resolve_ranks(spec: &ModelSpec, source: &RankSource, seed: u64) -> Result<Vec<usize>, CliError> {
    if spec.mode == ModelMode::Baseline {
        return Ok(Vec::new());
    }
    match source.fixed()? {
        Some(r) => Ok(r),
        None => Ok(init_ttsnn(spec, &source.policy()?, seed)?.ranks.iter().map(|r| r.rank).collect()),
    }
}

fn energy_table(name_or_path: &str) -> Result<EnergyTable, CliError> {
    let et = match EnergyTable::preset(name_or_path) {
        Some(t) => t,
        None => {
            let text = std::fs::read_to_string(name_or_path).map_err(|e| {
                CliError::validation(format!(
                    "energy table {name_or_path:?} is neither a preset ({}) nor a readable file: {e}",
                    EnergyTable::PRESETS.join(", ")
                ))
            })?;
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{name_or_path}: {e}")))?
        }
    };
    et.validate()?;
    Ok(et)
}

fn hardware(path: Option<&Path>) -> Result<HardwareConfig, CliError> {
    let hw = match path {
        None => HardwareConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read hardware config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
        }
    };
    hw.validate()?;
    Ok(hw)
}

fn golden<S: Serialize>(path: Option<&Path>, report: &S) -> Result<(), CliError> {
    let Some(p) = path else { return Ok(()) };
    if crate::golden::check_or_write(p, &serde_json::to_value(report)?)? {
        println!("matches golden {}", p.display());
    } else {
        println!("wrote golden {}", p.display());
    }
    Ok(())
}

pub fn count(a: &CountArgs) -> Result<(), CliError> {
    let spec = model_spec(&a.model, a.mode)?;
    let ranks = resolve_ranks(&spec, &a.ranks, a.common.seed)?;
    let mut report = count_report(&spec, &ranks)?;
    if spec.mode != ModelMode::Baseline {
        let dense = count_report(&ModelSpec { mode: ModelMode::Baseline, ..spec.clone() }, &[])?;
        report = compression_report(&dense, &report, None)?.compressed;
    }
    let out = RunDir::create(&a.common.out, a.common.no_timestamp)?;
    out.json("counts.json", &report)?;
    let text = render_counts(&report);
    out.text("counts.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// A simulation plus the run it is naturally compared against.
#[derive(Serialize)]
struct SimulateOutput {
    report: SimReport,
    paired: Option<Paired>,
}

#[derive(Serialize)]
struct Paired {
    mode: ModelMode,
    energy_j: f64,
    cycles: u64,
    /// `energy_j(report) / energy_j(paired)`.
    relative: f64,
}

/// HTT is paired with PTT, PTT with STT, and STT on the single engine with the dense baseline.
fn reference_mode(design: Design, mode: ModelMode) -> Option<ModelMode> {
    match (design, mode) {
        (_, ModelMode::Htt) => Some(ModelMode::Ptt),
        (_, ModelMode::Ptt) => Some(ModelMode::Stt),
        (Design::SingleEngine, ModelMode::Stt) => Some(ModelMode::Baseline),
        _ => None,
    }
}

/// Mean firing rate of the last logged epoch in a `train` report.
fn measured_density(path: &Path) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read train report {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    v["epochs"]
        .as_array()
        .and_then(|e| e.last())
        .and_then(|e| e["firing_rate"].as_f64())
        .ok_or_else(|| CliError::validation(format!("{}: no epochs[].firing_rate", path.display())))
}

pub fn simulate_cmd(a: &SimArgs) -> Result<(), CliError> {
    let density = match &a.density_from {
        Some(p) => measured_density(p)?,
        None => a.density,
    };
    if !(0.0..=1.0).contains(&density) {
        return Err(CliError::validation("spike density must lie in [0, 1]"));
    }
    let hw = hardware(a.hardware.as_deref())?;
    let et = energy_table(&a.energy_table)?;
    let base = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("cannot read model spec {}: {e}", p.display())))?;
            Some(
                serde_json::from_str::<ModelSpec>(&text)
                    .map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let run = |mode: ModelMode| -> Result<SimReport, CliError> {
        let spec = match &base {
            Some(s) => ModelSpec { mode, ..s.clone() },
            None => model_spec(&a.model, mode)?,
        };
        let ranks = resolve_ranks(&spec, &a.ranks, a.common.seed)?;
        let mut w = WorkloadSpec::from_model(&spec, &ranks)?;
        w.spike_density = density;
        Ok(simulate(a.design, &w, &hw, &et)?)
    };
    let report = run(a.mode)?;
    let paired = match reference_mode(a.design, a.mode) {
        Some(m) => {
            let r = run(m)?;
            Some(Paired { mode: m, energy_j: r.energy_j, cycles: r.cycles, relative: report.energy_j / r.energy_j })
        }
        None => None,
    };
    let mut text = render_report(&report);
    if let Some(p) = &paired {
        text.push_str(&format!("paired {} run: {:.6e} J, this run is {:.3}x of it\n", p.mode, p.energy_j, p.relative));
    }
    let out = RunDir::create(&a.common.out, a.common.no_timestamp)?;
    let result = SimulateOutput { report, paired };
    out.json("simulate.json", &result)?;
    out.text("simulate.txt", &text)?;
    print!("{text}");
    golden(a.golden.as_deref(), &result)
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let hw = hardware(a.hardware.as_deref())?;
    let et = energy_table(&a.energy_table)?;
    let spec = model_spec(&a.model, ModelMode::Ptt)?;
    let ranks = resolve_ranks(&spec, &a.ranks, a.common.seed)?;
    let c = compare_designs(&spec, &ranks, a.density, &hw, &et)?;
    let out = RunDir::create(&a.common.out, a.common.no_timestamp)?;
    out.json("compare.json", &c)?;
    let text = render_comparison(&c);
    out.text("compare.txt", &text)?;
    print!("{text}");
    golden(a.golden.as_deref(), &c)
}

#[derive(Serialize)]
struct TensorDecomposition {
    input: PathBuf,
    shape: Vec<usize>,
    requested: (usize, usize, usize),
    ranks: (usize, usize, usize),
    clamped: bool,
    /// `|W - W_tt|^2 / |W|^2` in the `(I, K, K, O)` layout.
    relative_sq_error: f64,
    /// Sum of squared discarded singular values over the three cuts, relative to `|W|^2`.
    discarded_bound: f64,
    dense_params: usize,
    tt_params: usize,
    cores: Vec<String>,
}

#[derive(Serialize)]
struct ModelDecomposition {
    model: String,
    mode: ModelMode,
    policy: String,
    seed: u64,
    ranks: Vec<RankRecord>,
    counts: CountReport,
}

fn tensor_ranks(source: &RankSource, w: &DenseTensor<f32>) -> Result<(usize, usize, usize), CliError> {
    match source {
        RankSource::List { ranks } => match ranks.as_slice() {
            [r] => Ok((*r, *r, *r)),
            [a, b, c] => Ok((*a, *b, *c)),
            _ => Err(CliError::validation("a single tensor takes one rank or three (r1,r2,r3)")),
        },
        RankSource::Vbmf | RankSource::Energy { .. } => {
            let est = estimate_layer_rank(w, &source.policy()?, 0)?;
            let (o, i, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let r = est.rank.clamp(1, i.min(o).min(i * k).min(k * o));
            Ok((r, r, r))
        }
        _ => Err(CliError::validation(
            "presets and rank files describe whole models; pass explicit ranks, vbmf or energy:<x>",
        )),
    }
}

pub fn decompose(a: &DecomposeArgs) -> Result<(), CliError> {
    let out = RunDir::create(&a.common.out, a.common.no_timestamp)?;
    if let Some(input) = &a.input {
        let w = load_tensor(input).map_err(|e| CliError::validation(format!("{}: {e}", input.display())))?;
        if w.ndim() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(CliError::validation(format!("expected an (O, I, K, K) kernel, got shape {:?}", w.shape())));
        }
        let ranks = tensor_ranks(&a.ranks, &w)?;
        let permuted = circular_permute_last(&w)?;
        let dec = tt_svd(&permuted, ranks)?;
        let recon = tt_reconstruct(&dec.cores)?;
        let norm_sq = permuted.frob_norm().powi(2).max(f64::MIN_POSITIVE);
        let mut files = Vec::new();
        for (name, t) in [("w1", &dec.cores.w1), ("w2", &dec.cores.w2), ("w3", &dec.cores.w3), ("w4", &dec.cores.w4)] {
            let f = format!("{name}.ttsn");
            save_tensor(&out.path.join(&f), t)?;
            files.push(f);
        }
        let r = dec.cores.ranks();
        let report = TensorDecomposition {
            input: input.clone(),
            shape: w.shape().to_vec(),
            requested: dec.requested,
            ranks: r,
            clamped: dec.clamped,
            relative_sq_error: recon.sub(&permuted)?.frob_norm().powi(2) / norm_sq,
            discarded_bound: dec.discarded_total() / norm_sq,
            dense_params: w.len(),
            tt_params: dec.cores.num_params(),
            cores: files,
        };
        out.json("decompose.json", &report)?;
        println!(
            "ranks {:?}, relative squared error {:.4e} (bound {:.4e}), params {} -> {}",
            r, report.relative_sq_error, report.discarded_bound, report.dense_params, report.tt_params
        );
        return Ok(());
    }
    let mode = if a.mode == ModelMode::Baseline {
        return Err(CliError::validation("decompose needs a TT mode (stt, ptt or htt)"));
    } else {
        a.mode
    };
    let spec = model_spec(&a.model, mode)?;
    let policy = a.ranks.policy()?;
    let model = init_ttsnn(&spec, &policy, a.common.seed)?;
    save_checkpoint(&model, &out.path.join("checkpoint"), 0, json!({}))?;
    let ranks: Vec<usize> = model.ranks.iter().map(|r| r.rank).collect();
    save_rank_list(&out.path.join("ranks.json"), &ranks)?;
    let report = ModelDecomposition {
        model: spec.name.clone(),
        mode,
        policy: policy.name().into(),
        seed: a.common.seed,
        ranks: model.ranks.clone(),
        counts: count_model(&model)?,
    };
    out.json("decompose.json", &report)?;
    for r in &model.ranks {
        println!(
            "{:12} rank {:4} (requested {:4}) energy {:.4}",
            r.layer, r.rank, r.requested, r.reconstruction_energy
        );
    }
    Ok(())
}

/// Agreement of two networks over a whole dataset, batch by batch.
fn probe_agreement(
    a: &Network<f32>,
    b: &Network<f32>,
    data: &Dataset,
    batch: usize,
) -> Result<serde_json::Value, CliError> {
    let (mut agree, mut n, mut max_diff) = (0.0, 0usize, 0.0f64);
    for idx in data.sequential_batches(batch) {
        let (x, _) = data.batch(&idx);
        let c = compare_on_probe(a, b, &x)?;
        agree += c.argmax_agreement * c.samples as f64;
        n += c.samples;
        max_diff = max_diff.max(c.max_abs_logit_diff);
    }
    Ok(json!({"samples": n, "argmax_agreement": agree / n.max(1) as f64, "max_abs_logit_diff": max_diff}))
}

#[derive(Serialize)]
struct TrainReport {
    config: ExperimentConfig,
    ranks: Vec<RankRecord>,
    counts: CountReport,
    epochs: Vec<EpochLog>,
    final_test_accuracy: f64,
    merged_test_accuracy: f64,
    merged_probe: serde_json::Value,
    elapsed_seconds: f64,
}

pub fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.common_seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    let out_path = a.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("ttsnn-out"));
    cfg.out_dir = Some(out_path.clone());
    cfg.validate()?;

    let root = data_root(a.data_dir.as_deref(), Some(&a.config));
    let mut source = cfg.data.clone();
    source.resolve(&root);
    let train_set = source.load(Split::Train)?;
    let test_set = source.load(Split::Test)?;
    let spec = cfg.model_spec()?;
    let out = RunDir::create(&out_path, a.no_timestamp)?;
    out.json("config.json", &cfg)?;

    let start = std::time::Instant::now();
    let mut model = init_ttsnn(&spec, &cfg.ranks.policy()?, cfg.seed)?;
    let mut log_file = std::fs::File::create(out.path.join("train_log.jsonl"))?;
    let eval_bs = cfg.eval_batch_size;
    let mut hook = |m: &TtSnn, log: &mut EpochLog| -> ttsnn::Result<()> {
        log.test_accuracy = Some(evaluate(&m.network, &test_set, eval_bs)?);
        let line = out.json_line(log).map_err(|e| ttsnn::Error::Input(e.to_string()))?;
        log_file.write_all(line.as_bytes())?;
        eprint!("{line}");
        Ok(())
    };
    let epochs = train(&mut model, &train_set, &cfg.train, Some(&mut hook))?;
    let last = epochs.last().map(|l| l.epoch).unwrap_or(0);
    let final_acc = epochs.last().and_then(|l| l.test_accuracy).unwrap_or(0.0);
    save_checkpoint(&model, &out.path.join("checkpoint"), last, json!({"test_accuracy": final_acc}))?;
    let merged = finalize_merge(&model)?;
    let merged_acc = evaluate(&merged.network, &test_set, eval_bs)?;
    save_checkpoint(&merged, &out.path.join("merged"), last, json!({"test_accuracy": merged_acc}))?;
    let probe = probe_agreement(&model.network, &merged.network, &test_set, eval_bs)?;
    let report = TrainReport {
        config: cfg,
        ranks: model.ranks.clone(),
        counts: count_model(&model)?,
        epochs,
        final_test_accuracy: final_acc,
        merged_test_accuracy: merged_acc,
        merged_probe: probe,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    };
    out.json("report.json", &report)?;
    println!(
        "test accuracy {:.4}, merged {:.4}, merged/unmerged argmax agreement {:.4}",
        final_acc, merged_acc, report.merged_probe["argmax_agreement"]
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, manifest) =
        load_checkpoint(&a.checkpoint).map_err(|e| CliError::validation(format!("{}: {e}", a.checkpoint.display())))?;
    let source: DatasetSource = match (&a.config, &a.data) {
        (Some(c), _) => ExperimentConfig::load(c)?.data,
        (None, Some(d)) => serde_json::from_str(d).map_err(|e| CliError::validation(format!("--data: {e}")))?,
        (None, None) => return Err(CliError::validation("pass --config or --data to name the evaluation set")),
    };
    let mut source = source;
    source.resolve(&data_root(a.data_dir.as_deref(), a.config.as_deref()));
    let data = source.load(a.split)?;
    let model = if a.merge && !model.merged { finalize_merge(&model)? } else { model };
    let acc = evaluate(&model.network, &data, a.batch_size)?;
    let report = json!({
        "checkpoint": a.checkpoint,
        "model": manifest.spec.name,
        "mode": manifest.mode,
        "merged": model.merged,
        "epoch": manifest.epoch,
        "split": a.split,
        "samples": data.len(),
        "accuracy": acc,
    });
    let out = RunDir::create(&a.common.out, a.common.no_timestamp)?;
    out.json("eval.json", &report)?;
    println!("accuracy {acc:.4} on {} samples", data.len());
    Ok(())
}
