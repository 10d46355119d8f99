//! Single-image inference shared by the CLI and the HTTP service.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{decode_image, preprocess, sha256_hex, ClassLabel, DataError, Preprocessing, RawImage};
use crate::models::{decode_model, ModelError, ModelHeader};
use crate::nn::{Network, NnError};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Result of classifying one image. Class order is fixed: Normal,
/// Pneumonia, Tuberculosis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub probabilities: [f32; 3],
    pub label: String,
    pub label_id: usize,
    pub model_name: String,
    pub model_hash: String,
    pub preprocessing: Preprocessing,
}

/// A loaded model plus the hash of the file it came from.
#[derive(Debug, Clone)]
pub struct Predictor {
    header: ModelHeader,
    net: Network<f32>,
    model_hash: String,
}

impl Predictor {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PredictError> {
        let (header, net) = decode_model(bytes)?;
        Ok(Predictor {
            header,
            net,
            model_hash: sha256_hex(&[bytes]),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PredictError> {
        let bytes = std::fs::read(path).map_err(ModelError::from)?;
        Self::from_bytes(&bytes)
    }

    pub fn header(&self) -> &ModelHeader {
        &self.header
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn model_name(&self) -> &str {
        self.header.model.name.name()
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn channels(&self) -> usize {
        self.header.preprocessing.channels
    }

    /// Decodes, preprocesses and classifies encoded image bytes.
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<PredictionReport, PredictError> {
        self.predict_image(&decode_image(bytes)?)
    }

    pub fn predict_image(&self, img: &RawImage) -> Result<PredictionReport, PredictError> {
        self.predict_tensor(&preprocess(img, self.channels())?)
    }

    /// Classifies an already preprocessed `[1, C, 90, 90]` tensor.
    pub fn predict_tensor(&self, x: &Tensor) -> Result<PredictionReport, PredictError> {
        let probs = self.net.predict(x)?;
        let p: [f32; 3] = probs.data()[..3].try_into().expect("three classes");
        let label = ClassLabel::from_id(argmax(&p)).expect("id < 3");
        Ok(PredictionReport {
            probabilities: p,
            label: label.name().to_string(),
            label_id: label.id(),
            model_name: self.model_name().to_string(),
            model_hash: self.model_hash.clone(),
            preprocessing: self.header.preprocessing.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{encode_model, Arch, ModelSpec};

    #[test]
    fn report_invariants() {
        let spec = ModelSpec::new(Arch::CustomCnn, 1, 0.125).unwrap();
        let bytes = encode_model(&spec, &spec.network(3).unwrap()).unwrap();
        let p = Predictor::from_bytes(&bytes).unwrap();
        let img = RawImage::gray(120, 100, (0..12000).map(|i| (i % 256) as u8).collect());
        let r = p.predict_image(&img).unwrap();
        let sum: f32 = r.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(r.label_id, argmax(&r.probabilities));
        assert_eq!(r.label, ClassLabel::from_id(r.label_id).unwrap().name());
        assert_eq!(r.model_hash.len(), 64);
        assert_eq!(r.model_name, "custom_cnn");
        assert!(matches!(p.predict_bytes(b""), Err(PredictError::Data(DataError::Decode(_)))));
    }
}
