use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensorio::{write_manifest, write_tensor, DatasetManifest, ImageEntry, Label, Split, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k_classes: usize,
    /// Feature grid `[H, W]`.
    pub grid: [usize; 2],
    pub feat_dim: usize,
    /// Class centres lie on a sphere of this radius.
    pub center_radius: f64,
    /// `[s_min, s_max]`. The first class gets `s_min`, the last `s_max`,
    /// the others are drawn log-uniformly in between.
    pub spread_range: [f64; 2],
    /// Anomalous locations are shifted by `a * s_c` along a random direction.
    pub anomaly_rel_magnitude: f64,
    /// Bounds on the fraction of the grid covered by the anomalous rectangle.
    pub anomaly_area_range: [f64; 2],
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Anomalous images per class placed in the train split and labelled
    /// normal, to simulate a contaminated training set.
    pub train_noise: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_classes: 8,
            grid: [16, 16],
            feat_dim: 8,
            center_radius: 10.0,
            spread_range: [0.25, 4.0],
            anomaly_rel_magnitude: 3.0,
            anomaly_area_range: [0.05, 0.2],
            train_normal: 100,
            test_normal: 20,
            test_anomalous: 20,
            train_noise: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k_classes < 2 {
            return bad(format!("k_classes must be >= 2, got {}", self.k_classes));
        }
        if self.grid.contains(&0) || self.feat_dim == 0 {
            return bad("grid and feat_dim must be positive".into());
        }
        if !(self.center_radius > 0.0 && self.center_radius.is_finite()) {
            return bad(format!("center_radius {} must be positive", self.center_radius));
        }
        let [s_min, s_max] = self.spread_range;
        if !(s_min > 0.0 && s_min <= s_max && s_max.is_finite()) {
            return bad(format!("spread_range {:?} must satisfy 0 < s_min <= s_max", self.spread_range));
        }
        if !(self.anomaly_rel_magnitude >= 0.0 && self.anomaly_rel_magnitude.is_finite()) {
            return bad(format!("anomaly_rel_magnitude {} must be >= 0", self.anomaly_rel_magnitude));
        }
        let [lo, hi] = self.anomaly_area_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("anomaly_area_range {:?} must lie in (0, 1)", self.anomaly_area_range));
        }
        if rect_shapes(self).is_empty() {
            return bad(format!(
                "no rectangle on a {}x{} grid covers a fraction in {:?}",
                self.grid[0], self.grid[1], self.anomaly_area_range
            ));
        }
        if self.train_normal == 0 || self.test_normal == 0 || self.test_anomalous == 0 {
            return bad("per-class counts must be >= 1".into());
        }
        Ok(())
    }

    fn n_pixels(&self) -> usize {
        self.grid[0] * self.grid[1]
    }
}

/// Generative parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub class_id: i64,
    pub center: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub entry: ImageEntry,
    /// `[feat_dim, H, W]`, single precision.
    pub features: Tensor,
    /// `[H, W]` binary mask, anomalous test images only.
    pub mask: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub classes: Vec<ClassParams>,
    pub images: Vec<SynthImage>,
}

impl SynthDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::new(self.images.iter().map(|i| i.entry.clone()).collect())
    }
}

const CLASS_STREAM: u64 = u64::MAX;

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn class_params(cfg: &SynthConfig) -> Vec<ClassParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CLASS_STREAM));
    let [s_min, s_max] = cfg.spread_range;
    let k = cfg.k_classes;
    (0..k)
        .map(|c| {
            let center = unit_vector(cfg.feat_dim, &mut rng)
                .into_iter()
                .map(|x| x * cfg.center_radius)
                .collect();
            let draw: f64 = rng.random();
            let spread = if c == 0 {
                s_min
            } else if c == k - 1 {
                s_max
            } else {
                (s_min.ln() + draw * (s_max.ln() - s_min.ln())).exp()
            };
            ClassParams {
                class_id: c as i64,
                center,
                spread,
            }
        })
        .collect()
}

/// All `(height, width)` rectangles whose area fraction lies in range.
fn rect_shapes(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let [h, w] = cfg.grid;
    let total = cfg.n_pixels() as f64;
    let [lo, hi] = cfg.anomaly_area_range;
    let mut shapes = Vec::new();
    for rh in 1..=h {
        for rw in 1..=w {
            let frac = (rh * rw) as f64 / total;
            if frac >= lo && frac <= hi {
                shapes.push((rh, rw));
            }
        }
    }
    shapes
}

#[derive(Clone, Copy)]
enum Kind {
    Normal,
    Anomalous,
}

fn image(
    cfg: &SynthConfig,
    class: &ClassParams,
    shapes: &[(usize, usize)],
    index: usize,
    kind: Kind,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let [h, w] = cfg.grid;
    let plane = h * w;
    let d = cfg.feat_dim;
    let mut data = vec![0.0; d * plane];
    for loc in 0..plane {
        for (ch, mu) in class.center.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            data[ch * plane + loc] = mu + class.spread * z;
        }
    }
    let mask = match kind {
        Kind::Normal => None,
        Kind::Anomalous => {
            let (rh, rw) = shapes[rng.random_range(0..shapes.len())];
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            let shift: Vec<f64> = unit_vector(d, &mut rng)
                .into_iter()
                .map(|v| v * cfg.anomaly_rel_magnitude * class.spread)
                .collect();
            let mut mask = vec![0.0; plane];
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    let loc = y * w + x;
                    mask[loc] = 1.0;
                    for (ch, s) in shift.iter().enumerate() {
                        data[ch * plane + loc] += s;
                    }
                }
            }
            Some(Tensor::new_f32(vec![h, w], mask)?)
        }
    };
    Ok((Tensor::new_f32(vec![d, h, w], data)?, mask))
}

/// Generates the whole benchmark in memory. Train images of every class come
/// first, then test images; ids are `img_NNNNN` in that order. Features are
/// rounded to single precision, exactly as they are stored on disk.
pub fn generate_in_memory(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let classes = class_params(cfg);
    let shapes = rect_shapes(cfg);
    let mut plan: Vec<(usize, Split, Kind)> = Vec::new();
    for c in 0..cfg.k_classes {
        plan.extend(std::iter::repeat_n((c, Split::Train, Kind::Normal), cfg.train_normal));
        plan.extend(std::iter::repeat_n((c, Split::Train, Kind::Anomalous), cfg.train_noise));
    }
    for c in 0..cfg.k_classes {
        plan.extend(std::iter::repeat_n((c, Split::Test, Kind::Normal), cfg.test_normal));
        plan.extend(std::iter::repeat_n((c, Split::Test, Kind::Anomalous), cfg.test_anomalous));
    }
    let width = plan.len().to_string().len().max(5);
    let images = plan
        .into_iter()
        .enumerate()
        .map(|(index, (c, split, kind))| {
            let (features, mut mask) = image(cfg, &classes[c], &shapes, index, kind)?;
            let id = format!("img_{index:0width$}");
            // Contaminated train images carry no label information at all.
            let label = match (split, kind) {
                (Split::Test, Kind::Anomalous) => Label::Anomalous,
                _ => {
                    mask = None;
                    Label::Normal
                }
            };
            let mut entry = ImageEntry::new(id.clone(), split, label);
            entry.class_id = Some(classes[c].class_id);
            entry.feature_path = Some(PathBuf::from(format!("features/{id}.adt")));
            if mask.is_some() {
                entry.mask_path = Some(PathBuf::from(format!("masks/{id}.adt")));
            }
            Ok(SynthImage { entry, features, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: cfg.clone(),
        classes,
        images,
    })
}

#[derive(Serialize)]
struct ClassesFile<'a> {
    config: &'a SynthConfig,
    classes: &'a [ClassParams],
}

/// Writes features, masks, `manifest.json` and `classes.json` (generator
/// parameters, for diagnostics) under `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = generate_in_memory(cfg)?;
    for sub in ["features", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for img in &data.images {
        if let Some(p) = &img.entry.feature_path {
            write_tensor(out_dir.join(p), &img.features)?;
        }
        if let (Some(p), Some(mask)) = (&img.entry.mask_path, &img.mask) {
            write_tensor(out_dir.join(p), mask)?;
        }
    }
    let classes = ClassesFile {
        config: &data.config,
        classes: &data.classes,
    };
    let path = out_dir.join(CLASSES_FILE);
    let mut text = serde_json::to_string_pretty(&classes)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let manifest = data.manifest();
    write_manifest(out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            k_classes: 2,
            grid: [8, 8],
            train_normal: 3,
            test_normal: 2,
            test_anomalous: 2,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_validates() {
        SynthConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.k_classes = 1;
        assert!(c.validate().is_err());
        let mut c = small();
        c.spread_range = [0.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = small();
        c.anomaly_area_range = [0.5, 1.0];
        assert!(c.validate().is_err());
        let mut c = small();
        c.grid = [2, 2];
        c.anomaly_area_range = [0.05, 0.2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn spreads_pin_the_extremes() {
        let classes = class_params(&SynthConfig::default());
        assert_eq!(classes[0].spread, 0.25);
        assert_eq!(classes[7].spread, 4.0);
        for c in &classes {
            assert!((0.25..=4.0).contains(&c.spread));
            let r = c.center.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_in_memory(&small()).unwrap(), generate_in_memory(&small()).unwrap());
        let mut other = small();
        other.seed = 8;
        assert_ne!(generate_in_memory(&small()).unwrap(), generate_in_memory(&other).unwrap());
    }

    #[test]
    fn layout_and_labels() {
        let d = generate_in_memory(&small()).unwrap();
        let m = d.manifest();
        m.validate().unwrap();
        assert_eq!(m.len(), 2 * (3 + 2 + 2));
        assert_eq!(m.split(Split::Train).count(), 6);
        for img in &d.images {
            assert_eq!(img.features.shape(), &[8, 8, 8]);
            assert_eq!(img.mask.is_some(), img.entry.label == Label::Anomalous);
        }
    }

    #[test]
    fn mask_area_within_range() {
        let cfg = SynthConfig {
            test_anomalous: 50,
            ..small()
        };
        let d = generate_in_memory(&cfg).unwrap();
        for img in d.images.iter().filter_map(|i| i.mask.as_ref()) {
            let frac = img.data().iter().sum::<f64>() / 64.0;
            assert!((0.05..=0.2).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn noise_images_are_unlabelled() {
        let cfg = SynthConfig {
            train_noise: 2,
            ..small()
        };
        let d = generate_in_memory(&cfg).unwrap();
        let train: Vec<_> = d.images.iter().filter(|i| i.entry.split == Split::Train).collect();
        assert_eq!(train.len(), 2 * 5);
        assert!(train.iter().all(|i| i.entry.label == Label::Normal && i.mask.is_none()));
        d.manifest().validate().unwrap();
    }

    #[test]
    fn writes_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(), dir.path()).unwrap();
        let back = crate::tensorio::read_manifest(dir.path().join(MANIFEST_FILE), true).unwrap();
        assert_eq!(m, back);
        assert!(dir.path().join(CLASSES_FILE).exists());
    }
}
