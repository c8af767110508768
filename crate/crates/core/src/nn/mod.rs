//! Dense feed-forward classifier: Glorot initialization, softmax forward
//! pass, cross-entropy backpropagation and mini-batch Adam.
//!
//! Parameters are stored as `f32` (the unit that goes on the wire); all
//! arithmetic runs in `f64` on a working copy, so a gradient check can use
//! the same code path as training.

mod gradcheck;
mod metrics;
mod train;
mod weights;

pub use gradcheck::{gradient_check, run_gradcheck_suite, GradcheckReport};
pub use metrics::{accuracy_score, classification_report, predict, ClassificationReport};
pub use train::{fit, forward, gradient, mean_loss, FitOutcome, Gradients, LayerGradient};
pub use weights::{init_mlp, Activation, Layer, ModelWeights};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} outside the model's {classes} output classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
}

/// Training configuration shared by every device in a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Input width, hidden widths, class count.
    pub layer_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Hyperparams {
    /// Hidden layers (64, 32), 100 epochs.
    pub fn with_default_hidden(inputs: usize, classes: usize, seed: u64) -> Self {
        Self {
            layer_sizes: vec![inputs, 64, 32, classes],
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidHyperparams(
                "layer_sizes needs at least an input and an output size".into(),
            ));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(NnError::InvalidHyperparams(format!("layer {i} has size 0")));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidHyperparams("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidHyperparams("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(NnError::InvalidHyperparams(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }
}
