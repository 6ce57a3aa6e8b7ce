//! Minimal differentiable function approximators.
//!
//! Stacked LSTM encoders feeding ReLU dense layers, reverse-mode gradients
//! computed by hand (back-propagation through time for the recurrent
//! part), Adam, soft target updates and a binary checkpoint format. All
//! arithmetic is `f64`.

mod adam;
mod checkpoint;
mod network;
mod spec;

pub use adam::Adam;
pub use network::{ForwardCache, Gradients, Mode, Network, SeqBatch};
pub use spec::{FinalActivation, NetworkSpec};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("network specs differ")]
    SpecMismatch,
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("train-mode forward with dropout needs a mask stream")]
    MissingMasks,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Applies `target ← tau·target + (1 − tau)·online`.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) -> Result<(), NnError> {
    target.soft_update_from(online, tau)
}
