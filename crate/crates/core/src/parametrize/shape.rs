use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One tensor dimension: current size, size at the base shape, and whether
/// it scales with width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dim {
    pub size: usize,
    pub base: usize,
    pub infinite: bool,
}

impl Dim {
    pub fn new(size: usize, base: usize, infinite: bool) -> Result<Self> {
        if size == 0 || base == 0 {
            return Err(Error::Shape(format!(
                "dim sizes must be positive ({size}, base {base})"
            )));
        }
        if !infinite && size != base {
            return Err(Error::Shape(format!(
                "finite dim has size {size} but base {base}"
            )));
        }
        Ok(Self {
            size,
            base,
            infinite,
        })
    }

    pub fn finite(size: usize) -> Self {
        Self {
            size,
            base: size,
            infinite: false,
        }
    }

    /// A width dimension. Panics on zero sizes.
    pub fn width(size: usize, base: usize) -> Self {
        assert!(size > 0 && base > 0, "width dims must be positive");
        Self {
            size,
            base,
            infinite: true,
        }
    }

    pub fn mult(&self) -> f64 {
        self.size as f64 / self.base as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCategory {
    MatrixLike,
    VectorLike,
    ScalarLike,
}

/// Table column a parameter falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    InputWeight,
    OutputWeight,
    HiddenWeight,
    Bias,
    ScalarLike,
}

impl ParamRole {
    pub const ALL: [ParamRole; 5] = [
        ParamRole::InputWeight,
        ParamRole::OutputWeight,
        ParamRole::HiddenWeight,
        ParamRole::Bias,
        ParamRole::ScalarLike,
    ];

    /// Which of `(fan_in, fan_out)` scale with width for this role.
    pub fn infinite_fans(self) -> (bool, bool) {
        match self {
            ParamRole::InputWeight | ParamRole::Bias => (false, true),
            ParamRole::OutputWeight => (true, false),
            ParamRole::HiddenWeight => (true, true),
            ParamRole::ScalarLike => (false, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::InputWeight => "input_weight",
            ParamRole::OutputWeight => "output_weight",
            ParamRole::HiddenWeight => "hidden_weight",
            ParamRole::Bias => "bias",
            ParamRole::ScalarLike => "scalar_like",
        }
    }
}

/// Ordered dims of a parameter: `[fan_out, fan_in]` for matrices, one dim for
/// vectors, none for scalars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfShape {
    dims: Vec<Dim>,
}

impl InfShape {
    pub fn matrix(fan_out: Dim, fan_in: Dim) -> Self {
        Self {
            dims: vec![fan_out, fan_in],
        }
    }

    pub fn vector(dim: Dim) -> Self {
        Self { dims: vec![dim] }
    }

    pub fn scalar() -> Self {
        Self { dims: Vec::new() }
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|d| d.size).product()
    }

    /// The input dimension; 1 for vectors (a bias is an input weight acting
    /// on the constant 1) and scalars.
    pub fn fan_in(&self) -> Dim {
        match self.dims.as_slice() {
            [_, fan_in] => *fan_in,
            _ => Dim::finite(1),
        }
    }

    pub fn fan_out(&self) -> Dim {
        match self.dims.as_slice() {
            [fan_out, ..] => *fan_out,
            [] => Dim::finite(1),
        }
    }

    pub fn fan_in_mult(&self) -> f64 {
        self.fan_in().mult()
    }

    pub fn fan_out_mult(&self) -> f64 {
        self.fan_out().mult()
    }

    pub fn is_base(&self) -> bool {
        self.dims.iter().all(|d| d.size == d.base)
    }

    pub fn category(&self) -> ParamCategory {
        match self.dims.iter().filter(|d| d.infinite).count() {
            0 => ParamCategory::ScalarLike,
            1 => ParamCategory::VectorLike,
            _ => ParamCategory::MatrixLike,
        }
    }

    /// Structural role: finite -> infinite is an input weight, infinite ->
    /// finite an output weight, infinite -> infinite hidden.
    pub fn role(&self) -> ParamRole {
        match self.dims.as_slice() {
            [out, inp] => match (out.infinite, inp.infinite) {
                (true, true) => ParamRole::HiddenWeight,
                (true, false) => ParamRole::InputWeight,
                (false, true) => ParamRole::OutputWeight,
                (false, false) => ParamRole::ScalarLike,
            },
            [d] if d.infinite => ParamRole::Bias,
            _ => ParamRole::ScalarLike,
        }
    }
}
