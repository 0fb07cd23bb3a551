use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::Tensor;

use super::{ClassStats, ScoreMap};

/// Denominator floor for mean-max normalization.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Which pair of statistics describes a class's normal scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatVariant {
    /// Mean and mean-of-maxima.
    #[default]
    MeanMax,
    /// Mean and standard deviation, with `gamma = u + 3 * sigma`.
    MeanStd,
}

impl fmt::Display for StatVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatVariant::MeanMax => "meanmax",
            StatVariant::MeanStd => "meanstd",
        })
    }
}

impl FromStr for StatVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanmax" => Ok(StatVariant::MeanMax),
            "meanstd" => Ok(StatVariant::MeanStd),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// A normalized map. `clamped` records that `gamma - u` fell below `eps`
/// and the denominator was floored.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub map: ScoreMap,
    pub clamped: bool,
}

/// `(s - u) / max(gamma - u, eps)` for every pixel.
pub fn normalize_meanmax(map: &ScoreMap, u: f64, gamma: f64, eps: f64) -> Calibrated {
    let spread = gamma - u;
    // NaN spread (non-finite prediction) also takes the clamp path.
    let clamped = spread.is_nan() || spread < eps;
    let denom = if clamped { eps } else { spread };
    let pixels: Vec<f64> = map
        .pixels()
        .iter()
        .map(|&s| saturate((s - u) / denom))
        .collect();
    let values = Tensor::new(map.tensor().shape().to_vec(), pixels).expect("finite by saturation");
    Calibrated {
        map: ScoreMap::new(map.image_id.clone(), values).expect("shape preserved"),
        clamped,
    }
}

// Overflow is only reachable with absurd inputs; keep the map finite.
fn saturate(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(f64::MIN, f64::MAX)
    }
}

/// Mean-max normalization with `gamma = u + 3 * sigma`.
pub fn normalize_meanstd(map: &ScoreMap, u: f64, sigma: f64, eps: f64) -> Calibrated {
    normalize_meanmax(map, u, u + 3.0 * sigma, eps)
}

impl ClassStats {
    /// Upper reference point of the class under the given variant.
    pub fn gamma(&self, variant: StatVariant) -> f64 {
        match variant {
            StatVariant::MeanMax => self.gamma_c,
            StatVariant::MeanStd => self.u_c + 3.0 * self.sigma_c,
        }
    }

    pub fn normalize(&self, map: &ScoreMap, variant: StatVariant, eps: f64) -> Calibrated {
        match variant {
            StatVariant::MeanMax => normalize_meanmax(map, self.u_c, self.gamma_c, eps),
            StatVariant::MeanStd => normalize_meanstd(map, self.u_c, self.sigma_c, eps),
        }
    }
}

/// Class-aware alignment: each map is normalized by its own class's
/// statistics.
pub fn apply_oracle_alignment(
    maps: &[(&ScoreMap, i64)],
    stats: &[ClassStats],
    variant: StatVariant,
    eps: f64,
) -> Result<Vec<Calibrated>> {
    let by_class: BTreeMap<i64, &ClassStats> = stats.iter().map(|s| (s.class_id, s)).collect();
    maps.iter()
        .map(|&(map, class_id)| {
            by_class
                .get(&class_id)
                .map(|s| s.normalize(map, variant, eps))
                .ok_or(Error::UnknownClass(class_id))
        })
        .collect()
}
