use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{normalize_meanmax, normalize_meanstd, pooled_moments, Calibrated, ClassStats, ScoreMap, StatVariant};
use crate::error::{Error, Result};
use crate::netcore::{cross_entropy, sgd_step, smooth_l1, smooth_l1_grad, Act, Chw, DropoutMode, Network, OptimState};
use crate::rng::derive_seed;
use crate::tensorio::Tensor;

use super::config::{HeadConfig, HeadMode, TargetSpace, TrainConfig};

/// Statistics of a single score map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub u_img: f64,
    pub gamma_img: f64,
    pub sigma_img: f64,
}

impl ImageStats {
    /// The pair a regressor learns for `variant`: `(u, gamma)` or
    /// `(u, u + 3 sigma)`.
    pub fn target(&self, variant: StatVariant) -> [f64; 2] {
        match variant {
            StatVariant::MeanMax => [self.u_img, self.gamma_img],
            StatVariant::MeanStd => [self.u_img, self.u_img + 3.0 * self.sigma_img],
        }
    }
}

/// Mean, maximum and population standard deviation of one map.
pub fn compute_image_stats(map: &ScoreMap) -> Result<ImageStats> {
    if map.pixels().is_empty() {
        return Err(Error::Empty(format!("score map {} has no pixels", map.image_id)));
    }
    let (u_img, sigma_img, gamma_img, _, _) = pooled_moments(std::iter::once(map));
    Ok(ImageStats {
        u_img,
        gamma_img,
        sigma_img,
    })
}

/// Per-channel affine normalization of input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    fn fit(features: &[&Tensor]) -> Self {
        let c = features[0].shape()[0];
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for t in features {
            let plane = t.len() / c;
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
            count += plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut ss = vec![0.0; c];
        for t in features {
            let plane = t.len() / c;
            for (ch, s) in ss.iter_mut().enumerate() {
                *s += t.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        let std = ss
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        FeatureNorm { mean, std }
    }
}

/// Per-output normalization of regression targets: an optional log, then
/// an affine map to zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub space: TargetSpace,
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl TargetNorm {
    fn fit(space: TargetSpace, raw: &[[f64; 2]]) -> Result<Self> {
        let targets: Vec<[f64; 2]> = match space {
            TargetSpace::Linear => raw.to_vec(),
            TargetSpace::Log => {
                if let Some(t) = raw.iter().find(|t| !(t[0] > 0.0 && t[1] > 0.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "log target space needs positive targets, got {t:?}; use the linear space"
                    )));
                }
                raw.iter().map(|t| [t[0].ln(), t[1].ln()]).collect()
            }
        };
        let n = targets.len() as f64;
        let mut mean = [0.0; 2];
        let mut std = [1.0; 2];
        for j in 0..2 {
            mean[j] = targets.iter().map(|t| t[j]).sum::<f64>() / n;
            let var = targets.iter().map(|t| (t[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 {
                std[j] = var.sqrt();
            }
        }
        Ok(TargetNorm { space, mean, std })
    }

    fn forward(&self, t: [f64; 2]) -> [f64; 2] {
        let t = match self.space {
            TargetSpace::Linear => t,
            TargetSpace::Log => [t[0].ln(), t[1].ln()],
        };
        [(t[0] - self.mean[0]) / self.std[0], (t[1] - self.mean[1]) / self.std[1]]
    }

    fn inverse(&self, z: &[f64]) -> [f64; 2] {
        let t = [z[0] * self.std[0] + self.mean[0], z[1] * self.std[1] + self.mean[1]];
        match self.space {
            TargetSpace::Linear => t,
            TargetSpace::Log => [t[0].exp(), t[1].exp()],
        }
    }
}

/// Statistics predicted for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PredictedStats {
    MeanMax { u: f64, gamma: f64 },
    MeanStd { u: f64, sigma: f64 },
}

impl PredictedStats {
    pub fn u(&self) -> f64 {
        match *self {
            PredictedStats::MeanMax { u, .. } | PredictedStats::MeanStd { u, .. } => u,
        }
    }

    /// Upper reference point, `u + 3 sigma` for the mean-std pair.
    pub fn gamma(&self) -> f64 {
        match *self {
            PredictedStats::MeanMax { gamma, .. } => gamma,
            PredictedStats::MeanStd { u, sigma } => u + 3.0 * sigma,
        }
    }

    pub fn calibrate(&self, map: &ScoreMap, eps: f64) -> Calibrated {
        match *self {
            PredictedStats::MeanMax { u, gamma } => calibrate(map, u, gamma, eps),
            PredictedStats::MeanStd { u, sigma } => normalize_meanstd(map, u, sigma, eps),
        }
    }
}

/// Mean-max normalization with predicted statistics.
pub fn calibrate(map: &ScoreMap, u_hat: f64, gamma_hat: f64, eps: f64) -> Calibrated {
    normalize_meanmax(map, u_hat, gamma_hat, eps)
}

/// A trained regressor or classifier head.
#[derive(Debug, Clone)]
pub struct HeadModel {
    pub config: HeadConfig,
    pub train: TrainConfig,
    pub input_channels: usize,
    pub feature_norm: FeatureNorm,
    /// Regressor only.
    pub target_norm: Option<TargetNorm>,
    /// Classifier only: class id of every output, ascending.
    pub class_ids: Vec<i64>,
    /// Classifier only: accuracy on the held-out part of the training set.
    pub holdout_accuracy: Option<f64>,
    /// Mean batch loss of every iteration.
    pub loss_trace: Vec<f64>,
    pub(crate) network: Network,
}

fn check_features(features: &[&Tensor]) -> Result<usize> {
    let first = features.first().ok_or_else(|| Error::Empty("no training images".into()))?;
    let c = match *first.shape() {
        [c, _, _] => c,
        _ => return Err(Error::DimMismatch(format!("features must be [C, H, W], got {:?}", first.shape()))),
    };
    for t in features {
        if t.shape().len() != 3 || t.shape()[0] != c {
            return Err(Error::DimMismatch(format!(
                "features {:?} do not match {} channels",
                t.shape(),
                c
            )));
        }
    }
    Ok(c)
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;
const PREDICT_STREAM: u64 = 3;

/// Seeded SGD over single samples drawn uniformly with replacement.
fn fit(
    net: &mut Network,
    inputs: &[Act],
    cfg: &TrainConfig,
    mut loss: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Vec<f64>> {
    let mut opt = OptimState::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TRAIN_STREAM));
    let scale = 1.0 / cfg.batch_size as f64;
    let mut trace = Vec::with_capacity(cfg.iterations);
    net.zero_grad();
    for it in 0..cfg.iterations {
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..inputs.len());
            let tape = net.forward(inputs[i].clone(), DropoutMode::Train(&mut rng))?;
            let (l, mut g) = loss(i, tape.output())?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss(it));
            }
            g.iter_mut().for_each(|v| *v *= scale);
            net.accumulate_grads(&tape, &g)?;
            total += l;
        }
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        trace.push(mean);
        let mut params = net.params_mut();
        if let Some(max) = cfg.clip_norm {
            let norm = params.iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                let k = max / norm;
                params.iter_mut().for_each(|p| p.grad.iter_mut().for_each(|g| *g *= k));
            }
        }
        opt.lr = cfg.lr_schedule.at(cfg.lr, it, cfg.iterations);
        sgd_step(&mut params, &mut opt)?;
    }
    Ok(trace)
}

impl HeadModel {
    fn init(
        config: &HeadConfig,
        train: &TrainConfig,
        features: &[&Tensor],
        out_dim: usize,
    ) -> Result<(HeadModel, Vec<Act>)> {
        config.validate()?;
        train.validate()?;
        let channels = check_features(features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, INIT_STREAM));
        let network = Network::new(config.layers(channels, out_dim), channels, &mut rng)?;
        let model = HeadModel {
            config: config.clone(),
            train: train.clone(),
            input_channels: channels,
            feature_norm: FeatureNorm::fit(features),
            target_norm: None,
            class_ids: Vec::new(),
            holdout_accuracy: None,
            loss_trace: Vec::new(),
            network,
        };
        let inputs = features.iter().map(|t| model.prepare(t)).collect::<Result<Vec<_>>>()?;
        Ok((model, inputs))
    }

    /// Normalized network input for one feature tensor.
    pub(crate) fn prepare(&self, features: &Tensor) -> Result<Act> {
        let (c, h, w) = match *features.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::DimMismatch(format!(
                    "features must be [C, H, W], got {:?}",
                    features.shape()
                )))
            }
        };
        if c != self.input_channels {
            return Err(Error::DimMismatch(format!(
                "features have {c} channels, head expects {}",
                self.input_channels
            )));
        }
        let plane = h * w;
        let data = features
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i / plane;
                (v - self.feature_norm.mean[ch]) / self.feature_norm.std[ch]
            })
            .collect();
        Ok(Act::Spatial(Chw { c, h, w }, data))
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    fn expect_mode(&self, mode: HeadMode) -> Result<()> {
        if self.config.mode == mode {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: match mode {
                    HeadMode::Regressor => "regressor",
                    HeadMode::Classifier => "classifier",
                },
                found: match self.config.mode {
                    HeadMode::Regressor => "regressor",
                    HeadMode::Classifier => "classifier",
                },
            })
        }
    }

    /// Predicted statistics of the normal scores of the image's class. Reads
    /// nothing but the features. With dropout in the head and `mc_samples`
    /// above zero, the normalized output is averaged over that many dropout
    /// masks drawn from a fixed seed, so repeated calls agree bitwise.
    pub fn predict_stats(&self, features: &Tensor) -> Result<PredictedStats> {
        self.expect_mode(HeadMode::Regressor)?;
        let norm = self
            .target_norm
            .ok_or_else(|| Error::Manifest("regressor lacks target normalization".into()))?;
        let x = self.prepare(features)?;
        let k = self.config.mc_samples;
        let out = if k == 0 || self.config.dropout_rate == 0.0 {
            self.network.predict(x)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.train.seed, PREDICT_STREAM));
            let mut acc = [0.0; 2];
            for _ in 0..k {
                let tape = self.network.forward(x.clone(), DropoutMode::Train(&mut rng))?;
                acc.iter_mut().zip(tape.output()).for_each(|(a, v)| *a += v);
            }
            acc.iter().map(|a| a / k as f64).collect()
        };
        let [u, second] = norm.inverse(&out);
        Ok(match self.config.target {
            StatVariant::MeanMax => PredictedStats::MeanMax { u, gamma: second },
            StatVariant::MeanStd => PredictedStats::MeanStd {
                u,
                sigma: (second - u) / 3.0,
            },
        })
    }

    pub fn predict_logits(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.expect_mode(HeadMode::Classifier)?;
        self.network.predict(self.prepare(features)?)
    }

    /// Class with the largest logit; ties go to the lowest class id.
    pub fn predict_class(&self, features: &Tensor) -> Result<i64> {
        let logits = self.predict_logits(features)?;
        Ok(self.class_ids[argmax(&logits)])
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains a regressor on training images and their score maps.
pub fn train_regressor(
    samples: &[(&Tensor, &ScoreMap)],
    head: &HeadConfig,
    train: &TrainConfig,
) -> Result<HeadModel> {
    if head.mode != HeadMode::Regressor {
        return Err(Error::InvalidArgument("train_regressor needs a regressor config".into()));
    }
    let features: Vec<&Tensor> = samples.iter().map(|s| s.0).collect();
    let (mut model, inputs) = HeadModel::init(head, train, &features, 2)?;
    let targets = samples
        .iter()
        .map(|s| Ok(compute_image_stats(s.1)?.target(head.target)))
        .collect::<Result<Vec<_>>>()?;
    let norm = TargetNorm::fit(head.target_space, &targets)?;
    let z: Vec<[f64; 2]> = targets.iter().map(|&t| norm.forward(t)).collect();
    let alpha = head.alpha;
    model.loss_trace = fit(&mut model.network, &inputs, train, |i, y| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; 2];
        for j in 0..2 {
            loss += smooth_l1(y[j], z[i][j], alpha)?;
            grad[j] = smooth_l1_grad(y[j], z[i][j], alpha)?;
        }
        Ok((loss, grad))
    })?;
    model.target_norm = Some(norm);
    Ok(model)
}

/// Trains a classifier on training images and their class ids. A tenth of
/// the images (chosen with the training seed) is held out and the accuracy
/// on it is recorded.
pub fn train_classifier(
    samples: &[(&Tensor, i64)],
    head: &HeadConfig,
    train: &TrainConfig,
) -> Result<HeadModel> {
    if head.mode != HeadMode::Classifier {
        return Err(Error::InvalidArgument("train_classifier needs a classifier config".into()));
    }
    let mut class_ids: Vec<i64> = samples.iter().map(|s| s.1).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "classification needs at least 2 classes, got {}",
            class_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(train.seed, HOLDOUT_STREAM)));
    let n_hold = samples.len() / 10;
    let (held, fitted) = order.split_at(n_hold);
    let mut fitted = fitted.to_vec();
    fitted.sort_unstable();

    let features: Vec<&Tensor> = fitted.iter().map(|&i| samples[i].0).collect();
    let labels: Vec<usize> = fitted
        .iter()
        .map(|&i| class_ids.binary_search(&samples[i].1).expect("collected above"))
        .collect();
    let (mut model, inputs) = HeadModel::init(head, train, &features, class_ids.len())?;
    model.class_ids = class_ids;
    model.loss_trace = fit(&mut model.network, &inputs, train, |i, y| cross_entropy(y, labels[i]))?;
    if n_hold > 0 {
        let mut correct = 0usize;
        for &i in held {
            if model.predict_class(samples[i].0)? == samples[i].1 {
                correct += 1;
            }
        }
        model.holdout_accuracy = Some(correct as f64 / n_hold as f64);
    }
    Ok(model)
}

/// Calibrates `map` with the fitted statistics of the class the classifier
/// picks from `features`.
pub fn calibrate_with_classifier(
    model: &HeadModel,
    stats: &[ClassStats],
    map: &ScoreMap,
    features: &Tensor,
    variant: StatVariant,
    eps: f64,
) -> Result<Calibrated> {
    let class = model.predict_class(features)?;
    let s = stats
        .iter()
        .find(|s| s.class_id == class)
        .ok_or(Error::UnknownClass(class))?;
    Ok(s.normalize(map, variant, eps))
}
