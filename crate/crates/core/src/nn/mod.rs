//! Convolutional classifier implemented directly on flat buffers: layer
//! passes, whole-network forward/backward, Adam, and the model file format.

mod io;
pub mod layers;
mod network;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_model, read_model, save_model, write_model, ModelFileError, MAGIC, MODEL_VERSION};
pub use layers::Mode;
pub use network::{
    adam_step, adam_update, classifier_specs, param_shapes, shape_walk, AdamConfig, AdamState, ForwardCache, Grads,
    LayerCache, LayerParams, LayerSpec, Moments, Network, Shape,
};
pub use tensor::{Scalar, Tensor4};

use crate::dataset::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite {what} in {layer} (max |value| = {max_abs})")]
    NonFinite {
        layer: String,
        what: &'static str,
        max_abs: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Network and optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub dropout: f64,
    /// Side length of the square RGB network input.
    pub input_size: usize,
    pub conv_filters: Vec<usize>,
    pub dense_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 50,
            optimizer: AdamConfig::default(),
            dropout: 0.3,
            input_size: 128,
            conv_filters: vec![16, 32, 64],
            dense_hidden: 256,
            seed: 42,
        }
    }
}

pub const MAX_INPUT_SIZE: usize = 256;

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", o.lr));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.input_size == 0 || self.input_size > MAX_INPUT_SIZE {
            return bad(format!("input_size must lie in 1..={MAX_INPUT_SIZE}, got {}", self.input_size));
        }
        self.specs_checked().map(|_| ())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        classifier_specs(&self.conv_filters, self.dense_hidden, self.dropout, NUM_CLASSES)
    }

    pub fn input_shape(&self) -> Shape {
        [self.input_size, self.input_size, 3]
    }

    fn specs_checked(&self) -> Result<Vec<LayerSpec>, NnError> {
        let specs = self.specs();
        shape_walk(&specs, self.input_shape()).map_err(|e| NnError::Config(e.to_string()))?;
        Ok(specs)
    }
}

/// A trained or freshly initialized model with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub network: Network<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    /// Free-form provenance stored in the model header (e.g. preprocessing settings).
    pub metadata: serde_json::Value,
}

impl ModelParams {
    pub fn init(config: &TrainConfig) -> Result<Self, NnError> {
        config.validate()?;
        let network = Network::init(config.specs(), config.input_shape(), config.seed)?;
        let adam = AdamState::for_network(&network);
        Ok(Self {
            network,
            adam,
            config: config.clone(),
            metadata: serde_json::Value::Null,
        })
    }
}
