use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a score map is reduced to one image-level score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopFraction {
    /// Maximum pixel score.
    Max,
    /// Mean of the `ceil(fraction * pixels)` highest pixel scores.
    Fraction(f64),
}

impl Default for TopFraction {
    fn default() -> Self {
        TopFraction::Fraction(0.01)
    }
}

impl TopFraction {
    pub fn validate(self) -> Result<Self> {
        match self {
            TopFraction::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::InvalidArgument(
                format!("top fraction {f} outside (0, 1]"),
            )),
            other => Ok(other),
        }
    }

    /// Number of pixels averaged for a map of `n` pixels.
    pub fn count(self, n: usize) -> usize {
        match self {
            TopFraction::Max => 1,
            TopFraction::Fraction(f) => {
                let x = f * n as f64;
                // 0.07 * 100 evaluates to 7.000000000000001; snap such
                // products back before taking the ceiling.
                let r = x.round();
                let m = if (x - r).abs() <= 1e-9 * r.max(1.0) { r } else { x.ceil() };
                (m as usize).clamp(1, n.max(1))
            }
        }
    }
}

impl fmt::Display for TopFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopFraction::Max => f.write_str("max"),
            TopFraction::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl FromStr for TopFraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(TopFraction::Max);
        }
        let f: f64 = s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad top fraction {s:?}")))?;
        TopFraction::Fraction(f).validate()
    }
}

/// Image-level score: mean of the highest pixel scores.
pub fn image_score(pixels: &[f64], top: TopFraction) -> Result<f64> {
    if pixels.is_empty() {
        return Err(Error::Empty("score map has no pixels".into()));
    }
    let top = top.validate()?;
    let m = top.count(pixels.len());
    if m == 1 {
        return Ok(pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let mut v = pixels.to_vec();
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    if m < v.len() {
        v.select_nth_unstable_by(m - 1, desc);
        v.truncate(m);
    }
    // Fixed summation order regardless of selection internals.
    v.sort_by(desc);
    Ok(v.iter().sum::<f64>() / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_percent_of_four_pixels_is_the_max() {
        let s = image_score(&[0.9, 0.5, 0.1, 0.3], TopFraction::Fraction(0.01)).unwrap();
        assert_eq!(s, 0.9);
    }

    #[test]
    fn one_percent_of_two_hundred_pixels_is_top_two() {
        let mut map = vec![0.1; 200];
        map[17] = 0.8;
        map[150] = 0.6;
        assert_eq!(TopFraction::Fraction(0.01).count(200), 2);
        let s = image_score(&map, TopFraction::Fraction(0.01)).unwrap();
        assert!((s - 0.7).abs() < 1e-15);
    }

    #[test]
    fn full_fraction_is_mean() {
        let map = [1.0, 2.0, 3.0, 6.0];
        assert_eq!(image_score(&map, TopFraction::Fraction(1.0)).unwrap(), 3.0);
    }

    #[test]
    fn max_mode() {
        assert_eq!(image_score(&[0.2, 0.7, 0.1], TopFraction::Max).unwrap(), 0.7);
    }

    #[test]
    fn empty_map_rejected() {
        assert!(matches!(
            image_score(&[], TopFraction::Max),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn fraction_bounds() {
        assert!(image_score(&[1.0], TopFraction::Fraction(0.0)).is_err());
        assert!(image_score(&[1.0], TopFraction::Fraction(1.5)).is_err());
        assert_eq!(TopFraction::Fraction(0.07).count(100), 7);
        assert_eq!(TopFraction::Fraction(0.001).count(256), 1);
        assert_eq!(TopFraction::Fraction(0.02).count(256), 6);
    }

    #[test]
    fn parse() {
        assert_eq!("max".parse::<TopFraction>().unwrap(), TopFraction::Max);
        assert_eq!("0.02".parse::<TopFraction>().unwrap(), TopFraction::Fraction(0.02));
        assert!("2".parse::<TopFraction>().is_err());
        assert!("abc".parse::<TopFraction>().is_err());
    }
}
