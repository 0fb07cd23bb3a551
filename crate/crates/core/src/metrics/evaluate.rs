use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::align::ScoreMap;
use crate::error::{Error, Result};
use crate::tensorio::{read_tensor, resolve, DatasetManifest, Split, Tensor};

use super::aggregate::{image_score, TopFraction};
use super::rank::{auroc, average_precision, ScoredSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// All test images pooled under a single threshold.
    Mixed,
    Class(i64),
    /// Unweighted mean of the per-class reports.
    MacroAverage,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Mixed => f.write_str("mixed"),
            Scope::Class(c) => write!(f, "class:{c}"),
            Scope::MacroAverage => f.write_str("macro"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub scope: Scope,
    pub i_auroc: f64,
    pub i_ap: f64,
    /// Pixel metrics are absent when no pixel ground truth is available.
    pub p_auroc: Option<f64>,
    pub p_ap: Option<f64>,
    pub n_images: usize,
    pub n_pixels: usize,
}

/// One test image as seen by the evaluator.
#[derive(Debug, Clone, Copy)]
pub struct EvalImage<'a> {
    pub map: &'a ScoreMap,
    pub anomalous: bool,
    pub class_id: Option<i64>,
    /// Pixel ground truth (non-zero = anomalous). Normal images without a
    /// mask contribute all-negative pixels; anomalous images without a mask
    /// are left out of the pixel metrics.
    pub mask: Option<&'a Tensor>,
}

fn report(scope: Scope, images: &[EvalImage<'_>], top: TopFraction) -> Result<MetricsReport> {
    let mut img = Vec::with_capacity(images.len());
    let mut pix = Vec::new();
    let mut pixel_gt = false;
    for im in images {
        img.push(ScoredSample::new(image_score(im.map.pixels(), top)?, im.anomalous));
        match (im.mask, im.anomalous) {
            (Some(mask), _) => {
                if mask.shape() != im.map.tensor().shape() {
                    return Err(Error::DimMismatch(format!(
                        "{}: mask shape {:?} != score map shape {:?}",
                        im.map.image_id,
                        mask.shape(),
                        im.map.tensor().shape()
                    )));
                }
                pixel_gt = true;
                pix.extend(
                    im.map
                        .pixels()
                        .iter()
                        .zip(mask.data())
                        .map(|(&s, &m)| ScoredSample::new(s, m != 0.0)),
                );
            }
            (None, false) => {
                pix.extend(im.map.pixels().iter().map(|&s| ScoredSample::new(s, false)))
            }
            (None, true) => {}
        }
    }
    let (p_auroc, p_ap) = if pixel_gt && pix.iter().any(|s| s.positive) {
        (Some(auroc(&pix)?), Some(average_precision(&pix)?))
    } else {
        (None, None)
    };
    let undefined = |e: Error| match e {
        Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{scope}: {m}")),
        other => other,
    };
    Ok(MetricsReport {
        scope,
        i_auroc: auroc(&img).map_err(undefined)?,
        i_ap: average_precision(&img).map_err(undefined)?,
        p_auroc,
        p_ap,
        n_images: images.len(),
        n_pixels: pix.len(),
    })
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mixed-scope report first; when every image carries a class id, one
/// report per class (ascending id) followed by their macro average.
pub fn evaluate(images: &[EvalImage<'_>], top: TopFraction) -> Result<Vec<MetricsReport>> {
    if images.is_empty() {
        return Err(Error::Empty("no test images to evaluate".into()));
    }
    let mut reports = vec![report(Scope::Mixed, images, top)?];
    if images.iter().all(|i| i.class_id.is_some()) {
        let classes: BTreeSet<i64> = images.iter().filter_map(|i| i.class_id).collect();
        let mut per_class = Vec::new();
        for c in classes {
            let subset: Vec<EvalImage<'_>> = images
                .iter()
                .filter(|i| i.class_id == Some(c))
                .copied()
                .collect();
            per_class.push(report(Scope::Class(c), &subset, top)?);
        }
        let k = per_class.len() as f64;
        let macro_avg = MetricsReport {
            scope: Scope::MacroAverage,
            i_auroc: per_class.iter().map(|r| r.i_auroc).sum::<f64>() / k,
            i_ap: per_class.iter().map(|r| r.i_ap).sum::<f64>() / k,
            p_auroc: mean_opt(per_class.iter().map(|r| r.p_auroc)),
            p_ap: mean_opt(per_class.iter().map(|r| r.p_ap)),
            n_images: per_class.iter().map(|r| r.n_images).sum(),
            n_pixels: per_class.iter().map(|r| r.n_pixels).sum(),
        };
        reports.extend(per_class);
        reports.push(macro_avg);
    }
    Ok(reports)
}

/// Evaluates the test split of a manifest. Masks are loaded from the
/// manifest's `mask_path` references relative to `base_dir`.
pub fn evaluate_manifest(
    manifest: &DatasetManifest,
    base_dir: &Path,
    maps: &BTreeMap<String, ScoreMap>,
    top: TopFraction,
) -> Result<Vec<MetricsReport>> {
    let test: Vec<_> = manifest.split(Split::Test).collect();
    let mut masks = Vec::with_capacity(test.len());
    for e in &test {
        masks.push(match &e.mask_path {
            Some(p) => Some(squeeze_leading(read_tensor(resolve(base_dir, p))?)?),
            None => None,
        });
    }
    let mut images = Vec::with_capacity(test.len());
    for (e, mask) in test.iter().zip(&masks) {
        let map = maps
            .get(&e.image_id)
            .ok_or_else(|| Error::Manifest(format!("missing score map for {:?}", e.image_id)))?;
        images.push(EvalImage {
            map,
            anomalous: e.label.is_anomalous(),
            class_id: e.class_id,
            mask: mask.as_ref(),
        });
    }
    evaluate(&images, top)
}

/// Drops leading unit dimensions so `[1, H, W]` masks compare as `[H, W]`.
fn squeeze_leading(t: Tensor) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    if shape.len() > 2 && shape[..shape.len() - 2].iter().all(|&d| d == 1) {
        t.reshape(shape[shape.len() - 2..].to_vec())
    } else {
        Ok(t)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const REPORT_HEADER: [&str; 7] = [
    "scope", "i_auroc", "i_ap", "p_auroc", "p_ap", "n_images", "n_pixels",
];

/// Writes reports as CSV. Absent pixel metrics are written as empty fields.
pub fn write_reports_csv<W: Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.scope.to_string(),
            r.i_auroc.to_string(),
            r.i_ap.to_string(),
            fmt_opt(r.p_auroc),
            fmt_opt(r.p_ap),
            r.n_images.to_string(),
            r.n_pixels.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(id: &str, px: &[f64]) -> ScoreMap {
        ScoreMap::from_pixels(id, 1, px.len(), px.to_vec()).unwrap()
    }

    /// Two classes, perfectly separable within class, interleaved across.
    fn two_class_maps() -> Vec<(ScoreMap, bool, i64)> {
        vec![
            (map("a0", &[1.0, 1.0]), false, 0),
            (map("a1", &[1.2, 1.2]), false, 0),
            (map("a2", &[2.0, 2.0]), true, 0),
            (map("a3", &[2.2, 2.2]), true, 0),
            (map("b0", &[10.0, 10.0]), false, 1),
            (map("b1", &[12.0, 12.0]), false, 1),
            (map("b2", &[20.0, 20.0]), true, 1),
            (map("b3", &[22.0, 22.0]), true, 1),
        ]
    }

    fn as_eval(v: &[(ScoreMap, bool, i64)]) -> Vec<EvalImage<'_>> {
        v.iter()
            .map(|(m, a, c)| EvalImage {
                map: m,
                anomalous: *a,
                class_id: Some(*c),
                mask: None,
            })
            .collect()
    }

    #[test]
    fn mismatch_lowers_mixed_auroc() {
        let data = two_class_maps();
        let reports = evaluate(&as_eval(&data), TopFraction::Max).unwrap();
        assert_eq!(reports.len(), 4);
        let mixed = &reports[0];
        let macro_avg = reports.last().unwrap();
        assert_eq!(macro_avg.scope, Scope::MacroAverage);
        assert_eq!(macro_avg.i_auroc, 1.0);
        // class-1 normals (10, 12) outrank class-0 anomalies (2, 2.2)
        assert!(mixed.i_auroc < macro_avg.i_auroc);
        assert_eq!(mixed.i_auroc, 12.0 / 16.0);
    }

    #[test]
    fn single_class_mixed_equals_class_report() {
        let data: Vec<_> = two_class_maps().into_iter().filter(|d| d.2 == 0).collect();
        let reports = evaluate(&as_eval(&data), TopFraction::Max).unwrap();
        assert_eq!(reports[0].i_auroc, reports[1].i_auroc);
        assert_eq!(reports[0].i_ap, reports[1].i_ap);
        assert_eq!(reports[1].i_auroc, reports[2].i_auroc);
    }

    #[test]
    fn pooled_pixels_match_direct_call() {
        let m0 = map("n", &[0.1, 0.2, 0.3]);
        let m1 = map("a", &[0.2, 0.9, 0.4]);
        let mask = Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let images = [
            EvalImage { map: &m0, anomalous: false, class_id: None, mask: None },
            EvalImage { map: &m1, anomalous: true, class_id: None, mask: Some(&mask) },
        ];
        let r = &evaluate(&images, TopFraction::Max).unwrap()[0];
        let direct: Vec<_> = [(0.1, false), (0.2, false), (0.3, false), (0.2, false), (0.9, true), (0.4, true)]
            .iter()
            .map(|&(s, p)| ScoredSample::new(s, p))
            .collect();
        assert_eq!(r.p_auroc, Some(auroc(&direct).unwrap()));
        assert_eq!(r.p_ap, Some(average_precision(&direct).unwrap()));
        assert_eq!(r.n_pixels, 6);
    }

    #[test]
    fn mask_shape_mismatch() {
        let m = map("a", &[0.2, 0.9]);
        let mask = Tensor::new(vec![1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let images = [EvalImage { map: &m, anomalous: true, class_id: None, mask: Some(&mask) }];
        assert!(matches!(evaluate(&images, TopFraction::Max), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn no_anomalies_is_undefined() {
        let m = map("n", &[0.1]);
        let images = [EvalImage { map: &m, anomalous: false, class_id: None, mask: None }];
        assert!(matches!(
            evaluate(&images, TopFraction::Max),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let data = two_class_maps();
        let reports = evaluate(&as_eval(&data), TopFraction::Max).unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("scope,i_auroc,i_ap,p_auroc,p_ap,n_images,n_pixels"));
        // precisions at the four positives: 1, 1, 3/5, 4/6
        let expected_ap = (1.0 + 1.0 + 0.6 + 4.0 / 6.0) / 4.0;
        assert_eq!(lines.next(), Some(format!("mixed,0.75,{expected_ap},,,8,8").as_str()));
        assert!(text.contains("class:1,1,1,,,4,4"));
    }
}
