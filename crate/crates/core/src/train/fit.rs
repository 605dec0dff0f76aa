use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{argmax_rows, cross_entropy, Network};
use crate::tensor::DenseTensor;

use super::data::Dataset;
use super::model::TtSnn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    /// `lr_e = lr * (1 + cos(pi * e / epochs)) / 2`, stepped once per epoch.
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    /// Rescale the whole gradient when its global L2 norm exceeds this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Cosine,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        // lr = 0 is allowed: it freezes the weights, which is useful for diagnostics
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<DenseTensor<f32>>,
}

impl Sgd {
    pub fn new(net: &Network<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: net.params().iter().map(|p| DenseTensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network<f32>, grads: &[DenseTensor<f32>], lr: f64) -> Result<()> {
        let lr = lr as f32;
        let mut params = net.params_mut();
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Contract("gradient list does not match parameters".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [DenseTensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.frob_norm().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One record of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub firing_rate: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// Observer invoked after every epoch (logging, checkpointing, evaluation).
pub trait EpochHook {
    fn on_epoch(&mut self, model: &TtSnn, log: &mut EpochLog) -> Result<()>;
}

impl<F: FnMut(&TtSnn, &mut EpochLog) -> Result<()>> EpochHook for F {
    fn on_epoch(&mut self, model: &TtSnn, log: &mut EpochLog) -> Result<()> {
        self(model, log)
    }
}

/// Writes one JSON object per line.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Trains in place: per batch, forward all timesteps, cross-entropy of the timestep-summed
/// logits, BPTT, one SGD step. The learning rate follows the schedule per epoch. All
/// randomness (batch order) derives from `cfg.seed`.
pub fn train(
    model: &mut TtSnn,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: Option<&mut dyn EpochHook>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if data.num_classes != model.network.num_classes() {
        return Err(Error::Input(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes,
            model.network.num_classes()
        )));
    }
    let mut hook = hook;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(&model.network, cfg.momentum, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut correct, mut seen, mut rate_sum) = (0.0, 0usize, 0usize, 0.0);
        let batches = data.shuffled_batches(cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        for (bi, idx) in batches.into_iter().enumerate() {
            let (x, labels) = data.batch(&idx);
            let fw = model.network.forward_train(&x)?;
            let (loss, d) = cross_entropy(&fw.logits, &labels)?;
            if !loss.is_finite() {
                let at = model.network.first_non_finite(&x).unwrap_or_else(|| "loss".into());
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}; first non-finite value in {at}"
                )));
            }
            let mut grads = model.network.backward(&fw.tape, &d)?;
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(&mut model.network, &grads, lr)?;
            model.network.apply_bn_stats(&fw.bn_stats, x.shape()[0]);
            loss_sum += loss * labels.len() as f64;
            rate_sum += fw.tape.firing_rate();
            correct += argmax_rows(&fw.logits).iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
        }
        let mut log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            firing_rate: rate_sum / n_batches as f64,
            seconds: start.elapsed().as_secs_f64(),
            test_accuracy: None,
        };
        if let Some(h) = hook.as_deref_mut() {
            h.on_epoch(model, &mut log)?;
        }
        log::info!("epoch {} loss {:.4} acc {:.4}", log.epoch, log.loss, log.train_accuracy);
        logs.push(log);
    }
    Ok(logs)
}

/// Top-1 accuracy of the argmax over timestep-summed logits, with inference-mode BN.
pub fn evaluate(net: &Network<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    Ok(predict(net, data, batch_size)?.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64
        / data.len() as f64)
}

pub fn predict(net: &Network<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for idx in data.sequential_batches(batch_size) {
        let (x, _) = data.batch(&idx);
        out.extend(argmax_rows(&net.forward_eval(&x)?));
    }
    Ok(out)
}
