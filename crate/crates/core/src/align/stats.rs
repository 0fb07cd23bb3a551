use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ScoreMap;

/// Normal-score statistics of one class, fitted on its training maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: i64,
    /// Mean of all pixel scores of the class.
    pub u_c: f64,
    /// Mean over images of each image's maximum pixel score.
    pub gamma_c: f64,
    /// Population standard deviation of all pixel scores of the class.
    pub sigma_c: f64,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// Summary of one population of pixel scores: mean, population std, and
/// mean of per-image maxima.
pub(crate) fn pooled_moments<'a>(
    maps: impl IntoIterator<Item = &'a ScoreMap> + Clone,
) -> (f64, f64, f64, usize, usize) {
    let (mut sum, mut n_px, mut max_sum, mut n_img) = (0.0, 0usize, 0.0, 0usize);
    for m in maps.clone() {
        let px = m.pixels();
        sum += px.iter().sum::<f64>();
        n_px += px.len();
        max_sum += px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        n_img += 1;
    }
    let mean = sum / n_px as f64;
    let mut ss = 0.0;
    for m in maps {
        ss += m.pixels().iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>();
    }
    (mean, (ss / n_px as f64).sqrt(), max_sum / n_img as f64, n_img, n_px)
}

/// Fits per-class statistics. Groups are visited in ascending class id.
pub fn fit_class_stats(groups: &BTreeMap<i64, Vec<&ScoreMap>>) -> Result<Vec<ClassStats>> {
    let mut out = Vec::with_capacity(groups.len());
    for (&class_id, maps) in groups {
        if maps.is_empty() {
            return Err(Error::Empty(format!("class {class_id} has no training maps")));
        }
        let (u_c, sigma_c, gamma_c, n_images, n_pixels) = pooled_moments(maps.iter().copied());
        out.push(ClassStats {
            class_id,
            u_c,
            gamma_c,
            sigma_c,
            n_images,
            n_pixels,
        });
    }
    Ok(out)
}

pub fn write_class_stats_csv<W: Write>(out: W, stats: &[ClassStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_class_stats_csv<R: Read>(input: R) -> Result<Vec<ClassStats>> {
    let mut r = csv::Reader::from_reader(input);
    let stats = r.deserialize().collect::<std::result::Result<Vec<ClassStats>, _>>()?;
    Ok(stats)
}
