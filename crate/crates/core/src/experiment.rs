//! End-to-end runs over a scored benchmark held in memory: raw scores, the
//! oracle, classifier and regressor alignments, and the head ablation grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{apply_oracle_alignment, fit_class_stats, ClassStats, ScoreMap, StatVariant};
use crate::cada::{calibrate_with_classifier, train_classifier, train_regressor, HeadConfig, HeadModel, Structure, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalImage, MetricsReport, Scope, TopFraction};
use crate::synthbench::{fit_coreset, score_knn, SynthDataset};
use crate::tensorio::{read_tensor, resolve, DatasetManifest, ImageEntry, Split, Tensor};

/// One image with its features, score map and (for anomalous test images)
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchImage {
    pub entry: ImageEntry,
    pub features: Tensor,
    pub map: ScoreMap,
    pub mask: Option<Tensor>,
}

/// Scored images split into train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct Bench {
    pub train: Vec<BenchImage>,
    pub test: Vec<BenchImage>,
}

/// Drops leading unit dimensions, so `[1, H, W]` masks become `[H, W]`.
fn squeeze_2d(t: Tensor) -> Result<Tensor> {
    let shape: Vec<usize> = t.shape().to_vec();
    let keep = shape.len().saturating_sub(2);
    if shape[..keep].iter().all(|&d| d == 1) && shape.len() >= 2 {
        t.reshape(shape[keep..].to_vec())
    } else {
        Err(Error::DimMismatch(format!("expected an [H, W] map, got {shape:?}")))
    }
}

impl Bench {
    /// Fits a coreset on the train split and scores every image. Train
    /// images are scored without their own coreset points.
    pub fn from_synth(data: &SynthDataset, m_per_image: usize, seed: u64) -> Result<Bench> {
        let train: Vec<_> = data.images.iter().filter(|i| i.entry.split == Split::Train).collect();
        let test: Vec<_> = data.images.iter().filter(|i| i.entry.split == Split::Test).collect();
        let feats: Vec<&Tensor> = train.iter().map(|i| &i.features).collect();
        let coreset = fit_coreset(&feats, m_per_image, seed)?;
        let mut bench = Bench {
            train: Vec::with_capacity(train.len()),
            test: Vec::with_capacity(test.len()),
        };
        for (i, img) in train.iter().enumerate() {
            bench.train.push(BenchImage {
                entry: img.entry.clone(),
                features: img.features.clone(),
                map: score_knn(&img.entry.image_id, &img.features, &coreset, Some(i))?,
                mask: None,
            });
        }
        for img in test {
            bench.test.push(BenchImage {
                entry: img.entry.clone(),
                features: img.features.clone(),
                map: score_knn(&img.entry.image_id, &img.features, &coreset, None)?,
                mask: img.mask.clone(),
            });
        }
        Ok(bench)
    }

    /// Loads features, score maps and masks referenced by a manifest.
    pub fn load(manifest: &DatasetManifest, base: &Path) -> Result<Bench> {
        let mut bench = Bench {
            train: Vec::new(),
            test: Vec::new(),
        };
        for entry in &manifest.images {
            let need = |p: &Option<std::path::PathBuf>, what: &str| {
                p.as_ref()
                    .map(|p| resolve(base, p))
                    .ok_or_else(|| Error::Manifest(format!("image {} has no {what}", entry.image_id)))
            };
            let features = read_tensor(need(&entry.feature_path, "feature_path")?)?;
            let map = ScoreMap::new(entry.image_id.clone(), squeeze_2d(read_tensor(need(&entry.score_path, "score_path")?)?)?)?;
            let mask = match &entry.mask_path {
                Some(p) => Some(squeeze_2d(read_tensor(resolve(base, p))?)?),
                None => None,
            };
            let img = BenchImage {
                entry: entry.clone(),
                features,
                map,
                mask,
            };
            match entry.split {
                Split::Train => bench.train.push(img),
                Split::Test => bench.test.push(img),
            }
        }
        Ok(bench)
    }

    fn class_of(img: &BenchImage) -> Result<i64> {
        img.entry
            .class_id
            .ok_or_else(|| Error::InvalidArgument(format!("image {} has no class_id", img.entry.image_id)))
    }

    /// Class statistics from the train maps.
    pub fn class_stats(&self) -> Result<Vec<ClassStats>> {
        let mut groups: BTreeMap<i64, Vec<&ScoreMap>> = BTreeMap::new();
        for img in &self.train {
            groups.entry(Self::class_of(img)?).or_default().push(&img.map);
        }
        fit_class_stats(&groups)
    }

    /// Metrics of the test split with `maps` in test order.
    pub fn evaluate(&self, maps: &[ScoreMap], top: TopFraction) -> Result<Vec<MetricsReport>> {
        if maps.len() != self.test.len() {
            return Err(Error::DimMismatch(format!("{} maps for {} test images", maps.len(), self.test.len())));
        }
        let images: Vec<EvalImage<'_>> = self
            .test
            .iter()
            .zip(maps)
            .map(|(img, map)| EvalImage {
                map,
                anomalous: img.entry.label.is_anomalous(),
                class_id: img.entry.class_id,
                mask: img.mask.as_ref(),
            })
            .collect();
        evaluate(&images, top)
    }

    pub fn raw_maps(&self) -> Vec<ScoreMap> {
        self.test.iter().map(|i| i.map.clone()).collect()
    }

    pub fn oracle_maps(&self, stats: &[ClassStats], variant: StatVariant, eps: f64) -> Result<Vec<ScoreMap>> {
        let labelled = self
            .test
            .iter()
            .map(|i| Ok((&i.map, Self::class_of(i)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(apply_oracle_alignment(&labelled, stats, variant, eps)?
            .into_iter()
            .map(|c| c.map)
            .collect())
    }

    pub fn regressor_maps(&self, model: &HeadModel, eps: f64) -> Result<Vec<ScoreMap>> {
        self.test
            .iter()
            .map(|i| Ok(model.predict_stats(&i.features)?.calibrate(&i.map, eps).map))
            .collect()
    }

    pub fn classifier_maps(
        &self,
        model: &HeadModel,
        stats: &[ClassStats],
        variant: StatVariant,
        eps: f64,
    ) -> Result<Vec<ScoreMap>> {
        self.test
            .iter()
            .map(|i| Ok(calibrate_with_classifier(model, stats, &i.map, &i.features, variant, eps)?.map))
            .collect()
    }

    pub fn train_regressor(&self, head: &HeadConfig, train: &TrainConfig) -> Result<HeadModel> {
        let samples: Vec<_> = self.train.iter().map(|i| (&i.features, &i.map)).collect();
        train_regressor(&samples, head, train)
    }

    pub fn train_classifier(&self, head: &HeadConfig, train: &TrainConfig) -> Result<HeadModel> {
        let samples = self
            .train
            .iter()
            .map(|i| Ok((&i.features, Self::class_of(i)?)))
            .collect::<Result<Vec<_>>>()?;
        train_classifier(&samples, head, train)
    }
}

/// Mixed and macro-averaged image AUROC of one report list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mixed_i_auroc: f64,
    pub macro_i_auroc: Option<f64>,
}

impl Summary {
    pub fn of(reports: &[MetricsReport]) -> Summary {
        let find = |scope: Scope| reports.iter().find(|r| r.scope == scope).map(|r| r.i_auroc);
        Summary {
            mixed_i_auroc: find(Scope::Mixed).unwrap_or(f64::NAN),
            macro_i_auroc: find(Scope::MacroAverage),
        }
    }
}

/// Axes of the head ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub structures: Vec<Structure>,
    pub dropout_rates: Vec<f64>,
    pub top_fractions: Vec<TopFraction>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            structures: Structure::GRID.to_vec(),
            dropout_rates: vec![0.0, 0.25, 0.5, 0.75],
            top_fractions: vec![
                TopFraction::Max,
                TopFraction::Fraction(0.001),
                TopFraction::Fraction(0.01),
                TopFraction::Fraction(0.02),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub structure: Structure,
    pub dropout: f64,
    pub top_fraction: TopFraction,
    pub raw_mixed_i_auroc: f64,
    pub cada_mixed_i_auroc: f64,
    pub cada_macro_i_auroc: f64,
    pub cada_mixed_i_ap: f64,
    pub cada_mixed_p_auroc: Option<f64>,
}

pub const ABLATION_HEADER: [&str; 8] = [
    "structure",
    "dropout",
    "top_fraction",
    "raw_mixed_i_auroc",
    "cada_mixed_i_auroc",
    "cada_macro_i_auroc",
    "cada_mixed_i_ap",
    "cada_mixed_p_auroc",
];

/// Trains one regressor per (structure, dropout) cell and evaluates it under
/// every top fraction. Aggregation does not affect training, so heads are
/// shared along that axis. `progress` is called after each trained head.
pub fn run_ablation(
    bench: &Bench,
    grid: &AblationGrid,
    base: &HeadConfig,
    train: &TrainConfig,
    eps: f64,
    mut progress: impl FnMut(&Structure, f64),
) -> Result<Vec<AblationRow>> {
    let raw_maps = bench.raw_maps();
    let mut raw = Vec::with_capacity(grid.top_fractions.len());
    for &top in &grid.top_fractions {
        raw.push(Summary::of(&bench.evaluate(&raw_maps, top)?).mixed_i_auroc);
    }
    let mut rows = Vec::new();
    for structure in &grid.structures {
        for &dropout in &grid.dropout_rates {
            let head = HeadConfig {
                structure: *structure,
                dropout_rate: dropout,
                ..base.clone()
            };
            let model = bench.train_regressor(&head, train)?;
            let maps = bench.regressor_maps(&model, eps)?;
            for (&top, &raw_auroc) in grid.top_fractions.iter().zip(&raw) {
                let reports = bench.evaluate(&maps, top)?;
                let mixed = reports
                    .iter()
                    .find(|r| r.scope == Scope::Mixed)
                    .ok_or_else(|| Error::UndefinedMetric("no mixed report".into()))?;
                rows.push(AblationRow {
                    structure: *structure,
                    dropout,
                    top_fraction: top,
                    raw_mixed_i_auroc: raw_auroc,
                    cada_mixed_i_auroc: mixed.i_auroc,
                    cada_macro_i_auroc: Summary::of(&reports).macro_i_auroc.unwrap_or(f64::NAN),
                    cada_mixed_i_ap: mixed.i_ap,
                    cada_mixed_p_auroc: mixed.p_auroc,
                });
            }
            progress(structure, dropout);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.structure.to_string(),
            r.dropout.to_string(),
            r.top_fraction.to_string(),
            r.raw_mixed_i_auroc.to_string(),
            r.cada_mixed_i_auroc.to_string(),
            r.cada_macro_i_auroc.to_string(),
            r.cada_mixed_i_ap.to_string(),
            r.cada_mixed_p_auroc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
