use serde::{Deserialize, Serialize};

use super::NnError;

/// Activation applied to the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalActivation {
    None,
    Relu,
    /// Softmax over each contiguous block of `group_size` outputs.
    SoftmaxPerGroup(usize),
}

/// Architecture of a [`Network`](super::Network).
///
/// Input flows through the stacked LSTM layers (left to right over the
/// sequence), the last hidden state feeds the ReLU dense stack, and a final
/// linear layer produces `output_dim` values. A network without recurrent
/// layers takes single-step sequences, i.e. plain vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub recurrent_layers: Vec<usize>,
    pub dense_layers: Vec<usize>,
    pub output_dim: usize,
    pub dropout_rate: f64,
    /// Per-feature layer normalization before each dense activation.
    pub layer_norm: bool,
    pub final_activation: FinalActivation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, recurrent: &[usize], dense: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            recurrent_layers: recurrent.to_vec(),
            dense_layers: dense.to_vec(),
            output_dim,
            dropout_rate: 0.0,
            layer_norm: false,
            final_activation: FinalActivation::None,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn with_final(mut self, act: FinalActivation) -> Self {
        self.final_activation = act;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::InvalidSpec(msg.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.output_dim == 0 {
            return bad("output_dim must be positive");
        }
        if self.recurrent_layers.contains(&0) {
            return bad("recurrent layer with zero units");
        }
        if self.dense_layers.contains(&0) {
            return bad("dense layer with zero units");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if let FinalActivation::SoftmaxPerGroup(g) = self.final_activation {
            if g == 0 || !self.output_dim.is_multiple_of(g) {
                return bad("softmax group size must divide output_dim");
            }
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut lstm = Vec::new();
        let mut input = self.input_dim;
        for &hidden in &self.recurrent_layers {
            let w = offset;
            offset += (input + hidden) * 4 * hidden;
            let b = offset;
            offset += 4 * hidden;
            lstm.push(LstmSlot { input, hidden, w, b });
            input = hidden;
        }
        let mut dense = Vec::new();
        for &units in &self.dense_layers {
            let w = offset;
            offset += input * units;
            let b = offset;
            offset += units;
            let norm = if self.layer_norm {
                let g = offset;
                offset += 2 * units;
                Some((g, g + units))
            } else {
                None
            };
            dense.push(DenseSlot { input, units, w, b, norm });
            input = units;
        }
        let w = offset;
        offset += input * self.output_dim;
        let b = offset;
        offset += self.output_dim;
        let output = DenseSlot { input, units: self.output_dim, w, b, norm: None };
        Layout { lstm, dense, output, n_params: offset }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().n_params
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LstmSlot {
    pub input: usize,
    pub hidden: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseSlot {
    pub input: usize,
    pub units: usize,
    pub w: usize,
    pub b: usize,
    /// Offsets of the normalization gain and shift.
    pub norm: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub lstm: Vec<LstmSlot>,
    pub dense: Vec<DenseSlot>,
    pub output: DenseSlot,
    pub n_params: usize,
}
