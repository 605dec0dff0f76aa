use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{LIFParams, SurrogateSpec};
use crate::ttlayers::{HttConfig, HttSchedule, TtMode};

/// Execution mode of every decomposable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Baseline,
    Stt,
    Ptt,
    Htt,
}

impl ModelMode {
    pub fn tt_mode(self) -> Option<TtMode> {
        match self {
            ModelMode::Baseline => None,
            ModelMode::Stt => Some(TtMode::Stt),
            ModelMode::Ptt => Some(TtMode::Ptt),
            ModelMode::Htt => Some(TtMode::Htt),
        }
    }

    pub const ALL: [ModelMode; 4] = [ModelMode::Baseline, ModelMode::Stt, ModelMode::Ptt, ModelMode::Htt];
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Baseline => "baseline",
            ModelMode::Stt => "stt",
            ModelMode::Ptt => "ptt",
            ModelMode::Htt => "htt",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "dense" => Ok(ModelMode::Baseline),
            "stt" => Ok(ModelMode::Stt),
            "ptt" => Ok(ModelMode::Ptt),
            "htt" => Ok(ModelMode::Htt),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_kernel() -> usize {
    3
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `LIF -> BN -> conv`; the first layer of a model is the bare stem conv.
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        decomposable: bool,
    },
    /// Two convs with a skip connection; a 1x1 projection shortcut is added when the stride
    /// or channel count changes.
    Residual {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "yes")]
        decomposable: bool,
    },
    /// `LIF -> global average pool -> linear`.
    Classifier,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// `(C, H, W)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub timesteps: usize,
    pub mode: ModelMode,
    #[serde(default)]
    pub lif: LIFParams,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub htt: HttConfig,
}

/// Where a conv sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvRole {
    Stem,
    Plain,
    ResidualA,
    ResidualB,
    Shortcut,
}

/// One convolution after resolving the spec against the input shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub role: ConvRole,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub decomposable: bool,
    /// Index among decomposable convs, used to look up ranks.
    pub tt_index: Option<usize>,
    /// Whether a batchnorm over the input channels precedes the conv.
    pub has_bn: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolved {
    pub convs: Vec<ConvDesc>,
    pub classifier_features: usize,
    pub num_classes: usize,
}

impl Resolved {
    pub fn num_decomposable(&self) -> usize {
        self.convs.iter().filter(|c| c.decomposable).count()
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl ModelSpec {
    /// Five convs (stem + four decomposable) and a classifier, sized for 28x28 digits.
    pub fn tiny6(mode: ModelMode, timesteps: usize) -> Self {
        let conv = |c, s, d| LayerSpec::Conv { out_channels: c, kernel: 3, stride: s, decomposable: d };
        Self {
            name: "tiny6".into(),
            input_shape: [1, 28, 28],
            num_classes: 10,
            layers: vec![
                conv(16, 1, false),
                conv(32, 2, true),
                conv(32, 1, true),
                conv(64, 2, true),
                conv(64, 1, true),
                LayerSpec::Classifier,
            ],
            timesteps,
            mode,
            lif: LIFParams::default(),
            surrogate: SurrogateSpec::default(),
            htt: HttConfig::default(),
        }
    }

    fn resnet(name: &str, blocks: [usize; 4], mode: ModelMode, timesteps: usize, classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Conv { out_channels: 64, kernel: 3, stride: 1, decomposable: false }];
        for (stage, (&n, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                layers.push(LayerSpec::Residual { out_channels: width, kernel: 3, stride, decomposable: true });
            }
        }
        layers.push(LayerSpec::Classifier);
        Self {
            name: name.into(),
            input_shape: [3, 32, 32],
            num_classes: classes,
            layers,
            timesteps,
            mode,
            lif: LIFParams::default(),
            surrogate: SurrogateSpec::default(),
            htt: HttConfig::default(),
        }
    }

    /// CIFAR-style ResNet18: 3x3 stem, four stages of two basic blocks.
    pub fn resnet18(mode: ModelMode, timesteps: usize, classes: usize) -> Self {
        Self::resnet("resnet18", [2, 2, 2, 2], mode, timesteps, classes)
    }

    pub fn resnet34(mode: ModelMode, timesteps: usize, classes: usize) -> Self {
        Self::resnet("resnet34", [3, 4, 6, 3], mode, timesteps, classes)
    }

    /// `tiny6`, `resnet18` (10 classes), `resnet18-c100`, `resnet34` (101 classes).
    pub fn preset(name: &str, mode: ModelMode, timesteps: usize) -> Result<Self> {
        match name {
            "tiny6" => Ok(Self::tiny6(mode, timesteps)),
            "resnet18" => Ok(Self::resnet18(mode, timesteps, 10)),
            "resnet18-c100" => Ok(Self::resnet18(mode, timesteps, 100)),
            "resnet34" => Ok(Self::resnet34(mode, timesteps, 101)),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected tiny6, resnet18, resnet18-c100, resnet34)"
            ))),
        }
    }

    pub fn htt_schedule(&self) -> Result<Option<HttSchedule>> {
        match self.mode {
            ModelMode::Htt => self.htt.build(self.timesteps).map(Some),
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Walks the layer list, checking structural invariants and computing shapes.
    pub fn resolve(&self) -> Result<Resolved> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(Error::Config("input shape and class count must be positive".into()));
        }
        self.lif.validate()?;
        if !(self.surrogate.alpha > 0.0) {
            return Err(Error::Config("surrogate width must be positive".into()));
        }
        self.htt_schedule()?;
        let (first, rest) = self.layers.split_first().ok_or_else(|| Error::Config("empty layer list".into()))?;
        match first {
            LayerSpec::Conv { decomposable: false, .. } => {}
            _ => return Err(Error::Config("the first layer must be a non-decomposable conv".into())),
        }
        match self.layers.last() {
            Some(LayerSpec::Classifier) if self.layers.len() >= 2 => {}
            _ => return Err(Error::Config("the last layer must be the classifier".into())),
        }
        let [c0, h0, w0] = self.input_shape;
        let mut convs = Vec::new();
        let (mut c, mut hw) = (c0, (h0, w0));
        let mut tt = 0;
        let mut push = |convs: &mut Vec<ConvDesc>,
                        name: String,
                        role,
                        cin,
                        cout,
                        k: usize,
                        s: usize,
                        hw_in: (usize, usize),
                        dec: bool,
                        bn|
         -> Result<(usize, usize)> {
            if k.is_multiple_of(2) || k == 0 || s == 0 || cout == 0 {
                return Err(Error::Config(format!("{name}: kernel must be odd and stride/channels positive")));
            }
            let out = (out_size(hw_in.0, s), out_size(hw_in.1, s));
            let tt_index = dec.then(|| {
                tt += 1;
                tt - 1
            });
            convs.push(ConvDesc {
                name,
                role,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                in_hw: hw_in,
                out_hw: out,
                decomposable: dec,
                tt_index,
                has_bn: bn,
            });
            Ok(out)
        };
        if let LayerSpec::Conv { out_channels, kernel, stride, .. } = first {
            hw = push(&mut convs, "stem".into(), ConvRole::Stem, c, *out_channels, *kernel, *stride, hw, false, false)?;
            c = *out_channels;
        }
        for (i, layer) in rest[..rest.len() - 1].iter().enumerate() {
            let i = i + 1;
            match layer {
                LayerSpec::Conv { out_channels, kernel, stride, decomposable } => {
                    hw = push(
                        &mut convs,
                        format!("layer{i}"),
                        ConvRole::Plain,
                        c,
                        *out_channels,
                        *kernel,
                        *stride,
                        hw,
                        *decomposable,
                        true,
                    )?;
                    c = *out_channels;
                }
                LayerSpec::Residual { out_channels, kernel, stride, decomposable } => {
                    let hw_a = push(
                        &mut convs,
                        format!("layer{i}.a"),
                        ConvRole::ResidualA,
                        c,
                        *out_channels,
                        *kernel,
                        *stride,
                        hw,
                        *decomposable,
                        true,
                    )?;
                    push(
                        &mut convs,
                        format!("layer{i}.b"),
                        ConvRole::ResidualB,
                        *out_channels,
                        *out_channels,
                        *kernel,
                        1,
                        hw_a,
                        *decomposable,
                        true,
                    )?;
                    if *stride != 1 || c != *out_channels {
                        push(
                            &mut convs,
                            format!("layer{i}.shortcut"),
                            ConvRole::Shortcut,
                            c,
                            *out_channels,
                            1,
                            *stride,
                            hw,
                            false,
                            false,
                        )?;
                    }
                    hw = hw_a;
                    c = *out_channels;
                }
                LayerSpec::Classifier => {
                    return Err(Error::Config(format!("layer {i}: the classifier must be the last layer")))
                }
            }
        }
        Ok(Resolved { convs, classifier_features: c, num_classes: self.num_classes })
    }
}
