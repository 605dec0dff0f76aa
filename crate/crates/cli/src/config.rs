use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ttsnn::train::{DatasetSource, ModelMode, ModelSpec, TrainConfig};
use ttsnn::ttlayers::HttConfig;
use ttsnn::vbmf::{load_rank_list, rank_preset, RankPolicy, Unfolding};

use crate::error::CliError;

/// A preset architecture name or a full inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Inline(Box<ModelSpec>),
}

/// Where per-layer TT ranks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RankSource {
    Preset { name: String },
    List { ranks: Vec<usize> },
    File { path: PathBuf },
    Vbmf,
    Energy { threshold: f64 },
}

impl FromStr for RankSource {
    type Err = CliError;

    /// `vbmf`, `energy:0.95`, `@ranks.json`, `8,12,16,24`, or a preset name.
    fn from_str(s: &str) -> Result<Self, CliError> {
        let s = s.trim();
        if s == "vbmf" {
            return Ok(RankSource::Vbmf);
        }
        if let Some(v) = s.strip_prefix("energy:") {
            let threshold = v.parse().map_err(|_| CliError::validation(format!("bad energy threshold {v:?}")))?;
            return Ok(RankSource::Energy { threshold });
        }
        if let Some(p) = s.strip_prefix('@') {
            return Ok(RankSource::File { path: p.into() });
        }
        if s.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            let ranks = s
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| CliError::validation(format!("bad rank list {s:?}")))?;
            return Ok(RankSource::List { ranks });
        }
        Ok(RankSource::Preset { name: s.into() })
    }
}

impl RankSource {
    pub fn policy(&self) -> Result<RankPolicy, CliError> {
        let p = match self {
            RankSource::Preset { name } => RankPolicy::FixedList {
                ranks: rank_preset(name)
                    .ok_or_else(|| CliError::validation(format!("unknown rank preset {name:?}")))?,
            },
            RankSource::List { ranks } => RankPolicy::FixedList { ranks: ranks.clone() },
            RankSource::File { path } => RankPolicy::FixedList {
                ranks: load_rank_list(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?,
            },
            RankSource::Vbmf => RankPolicy::Vbmf { unfolding: Unfolding::default() },
            RankSource::Energy { threshold } => {
                RankPolicy::EnergyThreshold { energy: *threshold, unfolding: Unfolding::default() }
            }
        };
        p.validate()?;
        Ok(p)
    }

    /// Rank list without building a model, when the source is a fixed list.
    pub fn fixed(&self) -> Result<Option<Vec<usize>>, CliError> {
        match self.policy()? {
            RankPolicy::FixedList { ranks } => Ok(Some(ranks)),
            _ => Ok(None),
        }
    }
}

fn default_timesteps() -> usize {
    4
}

fn default_eval_batch() -> usize {
    200
}

/// One training experiment, as read from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelRef,
    pub mode: ModelMode,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    pub ranks: RankSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub htt: Option<HttConfig>,
    pub train: TrainConfig,
    pub data: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if self.timesteps == 0 || self.eval_batch_size == 0 {
            return Err(CliError::validation("timesteps and eval_batch_size must be positive"));
        }
        if self.htt.is_some() && self.mode != ModelMode::Htt {
            return Err(CliError::validation("an htt schedule is only meaningful with mode htt"));
        }
        self.ranks.policy()?;
        self.model_spec()?.validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let mut spec = match &self.model {
            ModelRef::Preset(name) => ModelSpec::preset(name, self.mode, self.timesteps)?,
            ModelRef::Inline(s) => {
                let mut s = (**s).clone();
                s.mode = self.mode;
                s.timesteps = self.timesteps;
                s
            }
        };
        if let Some(h) = self.htt {
            spec.htt = h;
        }
        Ok(spec)
    }
}

/// Root for relative dataset paths: explicit flag, then `TTSNN_DATA_DIR`, then the config's
/// own directory.
pub fn data_root(flag: Option<&Path>, config_path: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("TTSNN_DATA_DIR") {
        return PathBuf::from(p);
    }
    config_path.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "model": "tiny6",
        "mode": "ptt",
        "timesteps": 4,
        "ranks": {"kind": "preset", "name": "tiny6"},
        "train": {"epochs": 5, "batch_size": 25, "lr": 0.05},
        "data": {"format": "mnist-idx", "path": "mnist", "train_limit": 5000},
        "seed": 0
    }"#;

    #[test]
    fn config_round_trip_is_identity() {
        let a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        let text = serde_json::to_string(&a).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&b).unwrap(), text);
        a.validate().unwrap();
    }

    #[test]
    fn inline_spec_round_trips() {
        let mut a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        a.model = ModelRef::Inline(Box::new(ModelSpec::tiny6(ModelMode::Ptt, 4)));
        let b: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = SAMPLE.replace("\"seed\": 0", "\"seed\": 0, \"sed\": 1");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn rank_shorthands() {
        assert_eq!("vbmf".parse::<RankSource>().unwrap(), RankSource::Vbmf);
        assert_eq!("energy:0.9".parse::<RankSource>().unwrap(), RankSource::Energy { threshold: 0.9 });
        assert_eq!("4,8".parse::<RankSource>().unwrap(), RankSource::List { ranks: vec![4, 8] });
        assert_eq!("@r.json".parse::<RankSource>().unwrap(), RankSource::File { path: "r.json".into() });
        assert_eq!("paper-resnet18".parse::<RankSource>().unwrap().fixed().unwrap().unwrap().len(), 16);
        assert!("4,x".parse::<RankSource>().is_err());
        assert!("nope".parse::<RankSource>().unwrap().policy().is_err());
    }

    #[test]
    fn htt_schedule_requires_htt_mode() {
        let mut a: ExperimentConfig = serde_json::from_str(SAMPLE).unwrap();
        a.htt = Some(HttConfig::default());
        assert!(a.validate().is_err());
        a.mode = ModelMode::Htt;
        a.validate().unwrap();
    }
}
