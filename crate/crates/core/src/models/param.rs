use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::parametrize::{AbcTriple, InfShape, ParamRole};

/// Hyperparameter group a tensor belongs to. Per-group learning-rate and
/// init multipliers are tied through this tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Input,
    Hidden,
    Output,
    Bias,
    Norm,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Embedding,
        ParamGroup::Input,
        ParamGroup::Hidden,
        ParamGroup::Output,
        ParamGroup::Bias,
        ParamGroup::Norm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Input => "input",
            ParamGroup::Hidden => "hidden",
            ParamGroup::Output => "output",
            ParamGroup::Bias => "bias",
            ParamGroup::Norm => "norm",
        }
    }
}

/// Optimizer buffers: momentum or first moment, and second moment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

/// A trainable tensor. `value` holds the stored weights `w`; the network
/// uses `multiplier * w`. Gradients in `value` are with respect to `w`.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub infshape: InfShape,
    pub role: ParamRole,
    pub group: ParamGroup,
    pub triple: AbcTriple,
    pub multiplier: f64,
    /// Effective learning rate divided by the master learning rate.
    pub lr_scale: f64,
    pub state: OptimState,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Width multiplier of the input dimension, consumed by the Adam ε rule.
    pub fn fan_in_mult(&self) -> f64 {
        self.infshape.fan_in_mult()
    }

    /// Values as seen by the network.
    pub fn effective(&self) -> Vec<f64> {
        self.value
            .data()
            .iter()
            .map(|w| self.multiplier * w)
            .collect()
    }
}
