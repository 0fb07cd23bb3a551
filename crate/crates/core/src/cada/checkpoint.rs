use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{LayerSpec, Network};
use crate::tensorio::{read_tensor, write_tensor};

use super::config::{HeadConfig, HeadMode, TrainConfig};
use super::model::{FeatureNorm, HeadModel, TargetNorm};

pub const CHECKPOINT_FORMAT: &str = "cada-head-v1";
pub const HEADER_FILE: &str = "header.json";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: HeadConfig,
    train: TrainConfig,
    input_channels: usize,
    layers: Vec<LayerSpec>,
    feature_norm: FeatureNorm,
    target_norm: Option<TargetNorm>,
    class_ids: Vec<i64>,
    holdout_accuracy: Option<f64>,
    params: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    iteration: usize,
    loss: f64,
}

fn out_dim(mode: HeadMode, class_ids: &[i64]) -> usize {
    match mode {
        HeadMode::Regressor => 2,
        HeadMode::Classifier => class_ids.len(),
    }
}

impl HeadModel {
    /// Writes `header.json`, one `param_NNN.adt` per parameter tensor and
    /// `loss.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (i, p) in self.network.params().iter().enumerate() {
            let name = format!("param_{i:03}.adt");
            write_tensor(dir.join(&name), &p.to_tensor()?)?;
            names.push(name);
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            train: self.train.clone(),
            input_channels: self.input_channels,
            layers: self.network.specs().to_vec(),
            feature_norm: self.feature_norm.clone(),
            target_norm: self.target_norm,
            class_ids: self.class_ids.clone(),
            holdout_accuracy: self.holdout_accuracy,
            params: names,
        };
        let path = dir.join(HEADER_FILE);
        let mut text = serde_json::to_string_pretty(&header)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let path = dir.join(LOSS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for (iteration, &loss) in self.loss_trace.iter().enumerate() {
            w.serialize(LossRow { iteration, loss })?;
        }
        if self.loss_trace.is_empty() {
            w.write_record(["iteration", "loss"])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<HeadModel> {
        let path = dir.join(HEADER_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: Header = serde_json::from_str(&text)?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Manifest(format!("unsupported checkpoint format {:?}", h.format)));
        }
        let expected = h.config.layers(h.input_channels, out_dim(h.config.mode, &h.class_ids));
        if expected != h.layers {
            return Err(Error::Manifest("checkpoint layers do not match its head config".into()));
        }
        if h.feature_norm.mean.len() != h.input_channels || h.feature_norm.std.len() != h.input_channels {
            return Err(Error::Manifest("feature normalization does not match input channels".into()));
        }
        if (h.config.mode == HeadMode::Regressor) != h.target_norm.is_some() {
            return Err(Error::Manifest("target normalization present iff regressor".into()));
        }
        // Initial values are overwritten below.
        let mut network = Network::new(h.layers, h.input_channels, &mut ChaCha8Rng::seed_from_u64(0))?;
        let tensors = h
            .params
            .iter()
            .map(|name| read_tensor(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        network.load_params(tensors)?;

        let path = dir.join(LOSS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let loss_trace = csv::Reader::from_reader(file)
            .deserialize::<LossRow>()
            .map(|r| Ok(r?.loss))
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadModel {
            config: h.config,
            train: h.train,
            input_channels: h.input_channels,
            feature_norm: h.feature_norm,
            target_norm: h.target_norm,
            class_ids: h.class_ids,
            holdout_accuracy: h.holdout_accuracy,
            loss_trace,
            network,
        })
    }
}
