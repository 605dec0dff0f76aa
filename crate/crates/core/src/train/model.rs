use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{BatchNorm, Block, ConvOp, Gate, Linear, Network, Unit};
use crate::tensor::io::{read_tensor, write_atomic, write_tensor};
use crate::tensor::{
    circular_permute_last, singular_values, tt_reconstruct, tt_svd, ConvGeometry, DenseTensor, TTConvCores,
};
use crate::ttlayers::{DenseConvLayer, TTConvLayer};
use crate::vbmf::{estimate_layer_rank, RankMethod, RankPolicy};

use super::spec::{ConvDesc, ConvRole, ModelMode, ModelSpec};

/// Rank bookkeeping for one decomposed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub layer: String,
    pub rank: usize,
    /// Rank asked for by the policy before the uniform-rank clamp.
    pub requested: usize,
    pub method: RankMethod,
    /// Fraction of squared singular values of the policy's unfolding kept by `rank`
    /// (absent for fixed lists).
    pub unfolding_energy: Option<f64>,
    /// `1 - |W - W_tt|^2 / |W|^2` of the initial TT-SVD.
    pub reconstruction_energy: f64,
}

/// A spiking network built from a [`ModelSpec`], together with its rank assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TtSnn {
    pub spec: ModelSpec,
    pub network: Network<f32>,
    pub ranks: Vec<RankRecord>,
    /// Whether TT layers have been merged back into dense kernels.
    pub merged: bool,
}

/// Largest `r` usable as `r1 = r2 = r3` for an `(O, I, K, K)` kernel.
pub fn max_uniform_rank(desc: &ConvDesc) -> usize {
    let (i, o, k) = (desc.in_channels, desc.out_channels, desc.kernel);
    i.min(o).min(i * k).min(k * o)
}

fn kaiming(desc: &ConvDesc, rng: &mut ChaCha8Rng) -> DenseTensor<f32> {
    let fan_in = desc.in_channels * desc.kernel * desc.kernel;
    DenseTensor::randn(
        &[desc.out_channels, desc.in_channels, desc.kernel, desc.kernel],
        (2.0 / fan_in as f64).sqrt(),
        rng,
    )
}

fn dense_layer(desc: &ConvDesc, w: DenseTensor<f32>) -> Result<DenseConvLayer<f32>> {
    let geometry = if desc.kernel == 1 {
        ConvGeometry::new(desc.stride, 0, 0)
    } else {
        ConvGeometry::same(desc.kernel, desc.stride)
    };
    DenseConvLayer::new(w, geometry)
}

/// Assembles a network, asking `make_conv` for every conv of the resolved spec in order.
fn assemble(
    spec: &ModelSpec,
    mut make_conv: impl FnMut(&ConvDesc) -> Result<ConvOp<f32>>,
    head: Linear<f32>,
) -> Result<Network<f32>> {
    let resolved = spec.resolve()?;
    let t = spec.timesteps;
    let mut stem = None;
    let mut blocks: Vec<Block<f32>> = Vec::new();
    let mut pending_a: Option<Unit<f32>> = None;
    for desc in &resolved.convs {
        let op = make_conv(desc)?;
        let unit = |op| Unit { bn: BatchNorm::new(desc.in_channels, t), conv: op };
        match desc.role {
            ConvRole::Stem => match op {
                ConvOp::Dense(l) => stem = Some(l),
                ConvOp::Tt(_) => return Err(Error::Config("the stem conv cannot be decomposed".into())),
            },
            ConvRole::Plain => blocks.push(Block::Plain(unit(op))),
            ConvRole::ResidualA => pending_a = Some(unit(op)),
            ConvRole::ResidualB => {
                let a = pending_a.take().ok_or_else(|| Error::Config("residual second conv without first".into()))?;
                blocks.push(Block::Residual { a, b: unit(op), shortcut: None });
            }
            ConvRole::Shortcut => match (blocks.last_mut(), op) {
                (Some(Block::Residual { shortcut, .. }), ConvOp::Dense(l)) => *shortcut = Some(l),
                _ => return Err(Error::Config("shortcut without residual block".into())),
            },
        }
    }
    let stem = stem.ok_or_else(|| Error::Config("missing stem".into()))?;
    let gate = Gate::Spike(spec.surrogate);
    Network::new(stem, blocks, head, spec.lif, gate, t)
}

// Logits are summed over timesteps, so the per-step scale is divided by T to keep the
// initial summed logits at unit scale.
fn init_head(features: usize, classes: usize, timesteps: usize, rng: &mut ChaCha8Rng) -> Linear<f32> {
    let std = 1.0 / (timesteps as f64 * features as f64).sqrt();
    Linear { weight: DenseTensor::randn(&[classes, features], std, rng), bias: DenseTensor::zeros(&[classes]) }
}

/// Builds the base model with Kaiming fan-in normal weights, assigns a rank to every
/// decomposable layer with `policy`, and replaces those layers by TT layers whose cores come
/// from TT-SVD of the initial dense weight. With `mode = baseline` nothing is replaced.
pub fn init_ttsnn(spec: &ModelSpec, policy: &RankPolicy, seed: u64) -> Result<TtSnn> {
    let resolved = spec.resolve()?;
    policy.validate()?;
    if let RankPolicy::FixedList { ranks } = policy {
        let need = resolved.num_decomposable();
        if spec.mode != ModelMode::Baseline && ranks.len() != need {
            return Err(Error::Config(format!(
                "rank list has {} entries but the model has {need} decomposable layers",
                ranks.len()
            )));
        }
    }
    let schedule = spec.htt_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let make = |desc: &ConvDesc| -> Result<ConvOp<f32>> {
        let w = kaiming(desc, &mut rng);
        let (Some(mode), Some(idx)) = (spec.mode.tt_mode(), desc.tt_index) else {
            return Ok(ConvOp::Dense(dense_layer(desc, w)?));
        };
        let est = estimate_layer_rank(&w, policy, idx)?;
        let r = est.rank.clamp(1, max_uniform_rank(desc));
        if r != est.rank {
            log::warn!("{}: rank {} clamped to {r}", desc.name, est.rank);
        }
        let permuted = circular_permute_last(&w)?;
        let dec = tt_svd(&permuted, (r, r, r))?;
        let recon = tt_reconstruct(&dec.cores)?;
        let err = recon.sub(&permuted)?.frob_norm().powi(2) / permuted.frob_norm().powi(2);
        let unfolding_energy = match policy {
            RankPolicy::FixedList { .. } => None,
            RankPolicy::Vbmf { unfolding } | RankPolicy::EnergyThreshold { unfolding, .. } => {
                let s = singular_values(&unfolding.apply(&w)?)?;
                let total: f64 = s.iter().map(|v| v * v).sum();
                let kept: f64 = s.iter().take(r).map(|v| v * v).sum();
                Some(if total > 0.0 { kept / total } else { 1.0 })
            }
        };
        records.push(RankRecord {
            layer: desc.name.clone(),
            rank: r,
            requested: est.rank,
            method: est.method,
            unfolding_energy,
            reconstruction_energy: 1.0 - err,
        });
        let sched = schedule.clone().filter(|_| spec.mode == ModelMode::Htt);
        Ok(ConvOp::Tt(TTConvLayer::new(dec.cores, mode, desc.stride, sched)?))
    };
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let head = init_head(resolved.classifier_features, resolved.num_classes, spec.timesteps, &mut head_rng);
    let network = assemble(spec, make, head)?;
    Ok(TtSnn { spec: spec.clone(), network, ranks: records, merged: false })
}

/// Network skeleton with the right shapes for loading a checkpoint.
fn skeleton(spec: &ModelSpec, ranks: &[usize], merged: bool) -> Result<Network<f32>> {
    let schedule = spec.htt_schedule()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let resolved = spec.resolve()?;
    let make = |desc: &ConvDesc| -> Result<ConvOp<f32>> {
        match (spec.mode.tt_mode(), desc.tt_index) {
            (Some(mode), Some(idx)) => {
                let r = *ranks.get(idx).ok_or_else(|| Error::Format(format!("no rank for {}", desc.name)))?;
                let cores = TTConvCores::random(desc.in_channels, desc.kernel, desc.out_channels, (r, r, r), &mut rng);
                let layer = TTConvLayer::new(cores, mode, desc.stride, schedule.clone())?;
                if merged {
                    Ok(ConvOp::Dense(layer.to_dense_layer()?))
                } else {
                    Ok(ConvOp::Tt(layer))
                }
            }
            _ => Ok(ConvOp::Dense(dense_layer(
                desc,
                DenseTensor::zeros(&[desc.out_channels, desc.in_channels, desc.kernel, desc.kernel]),
            )?)),
        }
    };
    let head = Linear {
        weight: DenseTensor::zeros(&[resolved.num_classes, resolved.classifier_features]),
        bias: DenseTensor::zeros(&[resolved.num_classes]),
    };
    assemble(spec, make, head)
}

/// Replaces every TT layer by its merged dense conv. Baseline models pass through unchanged.
pub fn finalize_merge(model: &TtSnn) -> Result<TtSnn> {
    Ok(TtSnn { network: model.network.merged()?, merged: true, ..model.clone() })
}

/// Agreement between two models on a probe batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub samples: usize,
    pub max_abs_logit_diff: f64,
    pub argmax_agreement: f64,
}

pub fn compare_on_probe(a: &Network<f32>, b: &Network<f32>, probe: &DenseTensor<f32>) -> Result<ProbeComparison> {
    let la = a.forward_eval(probe)?;
    let lb = b.forward_eval(probe)?;
    let pa = crate::snn::argmax_rows(&la);
    let pb = crate::snn::argmax_rows(&lb);
    let agree = pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
    Ok(ProbeComparison {
        samples: pa.len(),
        max_abs_logit_diff: la.max_abs_diff(&lb),
        argmax_agreement: agree as f64 / pa.len().max(1) as f64,
    })
}

pub const CHECKPOINT_FORMAT: &str = "ttsnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub kind: String,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub mode: ModelMode,
    pub merged: bool,
    pub ranks: Vec<RankRecord>,
    pub schedule: Option<String>,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes every parameter and running statistic as a tensor file, then the manifest.
/// Each file is written to a temporary name and renamed into place.
pub fn save_checkpoint(model: &TtSnn, dir: &Path, epoch: usize, metrics: serde_json::Value) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let params = model.network.params();
    let named: Vec<(String, DenseTensor<f32>, &str)> = model
        .network
        .param_names()
        .into_iter()
        .zip(params)
        .map(|(n, p)| (n, p.clone(), "param"))
        .chain(model.network.named_buffers().into_iter().map(|(n, t)| (n, t, "buffer")))
        .collect();
    for (name, t, kind) in named {
        let file = format!("{name}.ttsn");
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &t)?;
        write_atomic(&dir.join(&file), &bytes)?;
        entries.push(TensorEntry { name, file, shape: t.shape().to_vec(), kind: kind.into() });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        mode: model.spec.mode,
        merged: model.merged,
        ranks: model.ranks.clone(),
        schedule: model.spec.htt_schedule()?.map(|s| s.pattern()),
        epoch,
        metrics,
        tensors: entries,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TtSnn, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let ranks: Vec<usize> = manifest.ranks.iter().map(|r| r.rank).collect();
    let mut network = skeleton(&manifest.spec, &ranks, manifest.merged)?;
    let names = network.param_names();
    let mut buffers = Vec::new();
    {
        let mut params = network.params_mut();
        for e in &manifest.tensors {
            let t = read_tensor(&mut std::io::BufReader::new(std::fs::File::open(dir.join(&e.file))?))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("{}: shape differs from manifest", e.file)));
            }
            match e.kind.as_str() {
                "param" => {
                    let i = names
                        .iter()
                        .position(|n| n == &e.name)
                        .ok_or_else(|| Error::Format(format!("unknown parameter {}", e.name)))?;
                    if params[i].shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "{}: checkpoint shape {:?} vs model {:?}",
                            e.name,
                            t.shape(),
                            params[i].shape()
                        )));
                    }
                    *params[i] = t;
                }
                "buffer" => buffers.push((e.name.clone(), t)),
                other => return Err(Error::Format(format!("unknown tensor kind {other}"))),
            }
        }
    }
    network.load_buffers(&buffers)?;
    let model = TtSnn { spec: manifest.spec.clone(), network, ranks: manifest.ranks.clone(), merged: manifest.merged };
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vbmf::TINY6;

    fn fixed() -> RankPolicy {
        RankPolicy::FixedList { ranks: TINY6.to_vec() }
    }

    #[test]
    fn tiny6_layers_and_ranks() {
        let m = init_ttsnn(&ModelSpec::tiny6(ModelMode::Ptt, 4), &fixed(), 0).unwrap();
        assert_eq!(m.ranks.iter().map(|r| r.rank).collect::<Vec<_>>(), TINY6.to_vec());
        let tt = m.network.units().iter().filter(|u| matches!(u.conv, ConvOp::Tt(_))).count();
        assert_eq!(tt, 4);
    }

    #[test]
    fn baseline_is_dense() {
        let m = init_ttsnn(
            &ModelSpec::tiny6(ModelMode::Baseline, 2),
            &RankPolicy::Vbmf { unfolding: Default::default() },
            0,
        )
        .unwrap();
        assert!(m.ranks.is_empty());
        assert!(m.network.units().iter().all(|u| matches!(u.conv, ConvOp::Dense(_))));
        assert_eq!(finalize_merge(&m).unwrap().network, m.network);
    }

    #[test]
    fn rank_list_length_checked() {
        let p = RankPolicy::FixedList { ranks: vec![4, 4] };
        assert!(matches!(init_ttsnn(&ModelSpec::tiny6(ModelMode::Stt, 2), &p, 0), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_rank_clamped_to_uniform_bound() {
        let p = RankPolicy::FixedList { ranks: vec![100, 100, 100, 100] };
        let m = init_ttsnn(&ModelSpec::tiny6(ModelMode::Ptt, 2), &p, 0).unwrap();
        assert_eq!(m.ranks.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![16, 32, 32, 64]);
        // the middle cut can have rank up to min(IK, KO) > r, so even the clamped rank is lossy
        let small =
            init_ttsnn(&ModelSpec::tiny6(ModelMode::Ptt, 2), &RankPolicy::FixedList { ranks: vec![2; 4] }, 0).unwrap();
        for (big, small) in m.ranks.iter().zip(&small.ranks) {
            assert!(big.reconstruction_energy <= 1.0 + 1e-6);
            assert!(big.reconstruction_energy > small.reconstruction_energy);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for mode in ModelMode::ALL {
            let m = init_ttsnn(&ModelSpec::tiny6(mode, 2), &fixed(), 3).unwrap();
            for model in [m.clone(), finalize_merge(&m).unwrap()] {
                let sub = dir.path().join(format!("{mode}-{}", model.merged));
                save_checkpoint(&model, &sub, 1, serde_json::json!({"acc": 0.5})).unwrap();
                let (back, man) = load_checkpoint(&sub).unwrap();
                assert_eq!(back, model);
                assert_eq!(man.epoch, 1);
            }
        }
    }
}
