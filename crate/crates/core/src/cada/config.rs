use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::StatVariant;
use crate::error::{Error, Result};
use crate::netcore::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Predicts the normal-score statistics of the image's class.
    Regressor,
    /// Predicts the class, whose fitted statistics are then used.
    Classifier,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Regressor => "regressor",
            HeadMode::Classifier => "classifier",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regressor" => Ok(HeadMode::Regressor),
            "classifier" => Ok(HeadMode::Classifier),
            other => Err(Error::InvalidArgument(format!("unknown head mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Number of 3x3 convolutions and linear layers, written `1conv+2lin`,
/// `3lin` and so on.
/// Space in which regression targets are z-normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSpace {
    /// Targets as they are.
    Linear,
    /// Natural log of the targets, which must be positive. Errors are then
    /// relative, so classes with small scores are fitted as precisely as
    /// classes with large ones.
    #[default]
    Log,
}

impl fmt::Display for TargetSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSpace::Linear => "linear",
            TargetSpace::Log => "log",
        })
    }
}

impl FromStr for TargetSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TargetSpace::Linear),
            "log" => Ok(TargetSpace::Log),
            other => Err(Error::InvalidArgument(format!("unknown target space {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Structure {
    pub n_conv: usize,
    pub n_linear: usize,
}

impl Structure {
    /// The five structures of the ablation grid.
    pub const GRID: [Structure; 5] = [
        Structure { n_conv: 0, n_linear: 1 },
        Structure { n_conv: 0, n_linear: 2 },
        Structure { n_conv: 0, n_linear: 3 },
        Structure { n_conv: 1, n_linear: 2 },
        Structure { n_conv: 2, n_linear: 2 },
    ];
}

impl Default for Structure {
    fn default() -> Self {
        Structure { n_conv: 1, n_linear: 2 }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.n_conv > 0 {
            write!(f, "{}conv+", self.n_conv)?;
        }
        write!(f, "{}lin", self.n_linear)
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad structure {s:?}, expected e.g. 1conv+2lin or 3lin"));
        let (conv, lin) = match s.split_once('+') {
            Some((c, l)) => (Some(c), l),
            None => (None, s),
        };
        let n_conv = match conv {
            Some(c) => c.strip_suffix("conv").and_then(|n| n.parse().ok()).ok_or_else(bad)?,
            None => 0,
        };
        let n_linear: usize = lin.strip_suffix("lin").and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        if n_linear == 0 || n_conv > 2 || n_linear > 3 {
            return Err(bad());
        }
        Ok(Structure { n_conv, n_linear })
    }
}

impl TryFrom<String> for Structure {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Structure> for String {
    fn from(s: Structure) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub structure: Structure,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    /// Statistic pair the regressor predicts.
    pub target: StatVariant,
    pub target_space: TargetSpace,
    /// Regressor predictions average this many seeded dropout passes; 0
    /// means a single pass with dropout disabled.
    pub mc_samples: usize,
    /// Smooth-L1 threshold, in z-normalized target units.
    pub alpha: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            mode: HeadMode::Regressor,
            structure: Structure::default(),
            hidden_dim: 256,
            dropout_rate: 0.25,
            activation: Activation::Gelu,
            target: StatVariant::MeanMax,
            target_space: TargetSpace::Log,
            mc_samples: 64,
            alpha: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn classifier() -> Self {
        HeadConfig {
            mode: HeadMode::Classifier,
            ..HeadConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("hidden_dim must be positive".into()));
        }
        crate::netcore::ops::check_dropout_rate(self.dropout_rate)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    /// Layer list for inputs with `channels` channels and `out_dim` outputs:
    /// convolutions keep the channel count, global average pooling bridges
    /// to the linear layers, and dropout precedes every linear layer.
    pub fn layers(&self, channels: usize, out_dim: usize) -> Vec<LayerSpec> {
        let act = match self.activation {
            Activation::Gelu => LayerSpec::Gelu,
            Activation::Relu => LayerSpec::Relu,
        };
        let mut specs = Vec::new();
        for _ in 0..self.structure.n_conv {
            specs.push(LayerSpec::Conv3x3 {
                in_channels: channels,
                out_channels: channels,
            });
            specs.push(act);
        }
        specs.push(LayerSpec::GlobalAvgPool);
        let mut in_dim = channels;
        for i in 0..self.structure.n_linear {
            let last = i + 1 == self.structure.n_linear;
            let out = if last { out_dim } else { self.hidden_dim };
            specs.push(LayerSpec::Dropout { rate: self.dropout_rate });
            specs.push(LayerSpec::Linear { in_dim, out_dim: out });
            if !last {
                specs.push(act);
            }
            in_dim = out;
        }
        specs
    }
}

/// Learning-rate schedule over the training iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` at the first iteration to 0 after the last.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Learning rate of iteration `it` out of `total`.
    pub fn at(&self, lr: f64, it: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * it as f64 / total as f64).cos()),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown lr schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-2,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            iterations: 5000,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::netcore::OptimState::new(self.lr, self.momentum, self.weight_decay)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}
