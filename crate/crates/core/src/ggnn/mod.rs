//! Recurrent next-period predictor over encoded station graphs.

pub mod checkpoint;
pub mod codec;
pub mod gru;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphSequence, StationGraph};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use codec::{CellAnchor, CodecError, GridCodec, GridSpec};
pub use gru::{gru_backward_gradients, gru_backward_weighted, gru_forward, gru_step_forward, BackwardPass, GruModel, StepState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GgnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in backward pass at step {step}")]
    Numerical { step: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("model parameter {0} is not finite")]
    NonFiniteModel(String),
    #[error("sequence of {0} periods has no (input, next period) pair")]
    TooShort(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
    pub init_scale: f64,
    /// Rescales the gradient to this global norm when it is larger.
    pub gradient_clip: Option<f64>,
    pub hidden_dim: usize,
    pub candidate_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            rng_seed: 0,
            init_scale: 0.1,
            gradient_clip: None,
            hidden_dim: 16,
            candidate_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GgnnError> {
        let bad = |m: String| Err(GgnnError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be positive, got {}", self.init_scale));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("gradient_clip must be positive, got {c}"));
            }
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GruModel,
    /// Loss before each epoch's update.
    pub loss_history: Vec<f64>,
}

/// Trains on consecutive pairs `x_t → x_{t+1}` of an encoded sequence.
///
/// Each epoch runs the cell over the whole sequence from a zero hidden
/// state, sums the gradients of every step, and takes one descent step.
/// `target_mask[t]`, when given, says whether `xs[t]` may serve as a
/// target; masked targets contribute nothing to loss or gradient, but the
/// period is still fed as an input.
pub fn train_on_vectors(xs: &[Array1<f64>], config: &TrainConfig, target_mask: Option<&[bool]>) -> Result<TrainOutcome, GgnnError> {
    config.validate()?;
    if xs.len() < 2 {
        return Err(GgnnError::TooShort(xs.len()));
    }
    let dim = xs[0].len();
    if let Some(t) = xs.iter().position(|x| x.len() != dim) {
        return Err(GgnnError::Shape(format!("period {t} has {} entries, period 0 has {dim}", xs[t].len())));
    }
    if let Some(mask) = target_mask {
        if mask.len() != xs.len() {
            return Err(GgnnError::Shape(format!("mask covers {} periods, sequence has {}", mask.len(), xs.len())));
        }
    }
    let inputs = &xs[..xs.len() - 1];
    let targets = &xs[1..];
    let weights: Vec<f64> = (1..xs.len())
        .map(|t| if target_mask.is_none_or(|m| m[t]) { 1.0 } else { 0.0 })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut model = GruModel::random(dim, config.hidden_dim, config.init_scale, config.candidate_bias, &mut rng);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let pass = gru_backward_weighted(inputs, targets, &weights, &model).map_err(|e| match e {
            GgnnError::Numerical { .. } => GgnnError::Diverged { epoch },
            other => other,
        })?;
        if !pass.loss.is_finite() {
            return Err(GgnnError::Diverged { epoch });
        }
        loss_history.push(pass.loss);
        let mut step = config.learning_rate;
        if let Some(clip) = config.gradient_clip {
            let norm = pass.gradients.norm();
            if norm > clip {
                step *= clip / norm;
            }
        }
        model.add_scaled(-step, &pass.gradients);
        if model.validate().is_err() {
            return Err(GgnnError::Diverged { epoch });
        }
    }
    Ok(TrainOutcome { model, loss_history })
}

/// Encodes every period of `gs` with its codec.
pub fn encode_sequence(gs: &GraphSequence) -> Result<Vec<Array1<f64>>, GgnnError> {
    gs.graphs.iter().map(|g| Ok(Array1::from(gs.codec.encode(g)?))).collect()
}

pub fn train_ggnn(gs: &GraphSequence, config: &TrainConfig) -> Result<TrainOutcome, GgnnError> {
    train_on_vectors(&encode_sequence(gs)?, config, None)
}

/// Output of the cell after reading every vector of `xs`.
pub fn predict_next_vector(model: &GruModel, xs: &[Array1<f64>]) -> Result<Array1<f64>, GgnnError> {
    model.validate()?;
    if xs.is_empty() {
        return Err(GgnnError::EmptySequence);
    }
    let last = gru_forward(xs, model)?.pop().expect("non-empty").y;
    if last.iter().any(|v| !v.is_finite()) {
        return Err(GgnnError::NonFiniteModel("output".into()));
    }
    Ok(last)
}

/// Predicts the next period's stations (vertices only) from the whole sequence.
pub fn predict_next_graph(model: &GruModel, gs: &GraphSequence, min_station_size: u32) -> Result<StationGraph, GgnnError> {
    let y = predict_next_vector(model, &encode_sequence(gs)?)?;
    Ok(gs.codec.decode(y.as_slice().expect("contiguous"), min_station_size, &gs.graphs)?)
}
