use crate::error::{Error, Result};
use crate::tensorio::Tensor;

/// Per-location anomaly scores of one image, shape `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub image_id: String,
    values: Tensor,
}

impl ScoreMap {
    pub fn new(image_id: impl Into<String>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::DimMismatch(format!(
                "score map must be 2-D, got shape {:?}",
                values.shape()
            )));
        }
        Ok(ScoreMap {
            image_id: image_id.into(),
            values,
        })
    }

    pub fn from_pixels(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        Self::new(image_id, Tensor::new(vec![height, width], pixels)?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn pixels(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}
