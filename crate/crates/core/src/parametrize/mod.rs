//! abc-parametrizations.
//!
//! A parametrization assigns every parameter tensor a multiplier `A`, an
//! initialization variance `B` and a learning-rate scale `C`, each a power
//! law in the tensor's width multipliers `fan_in / base_fan_in` and
//! `fan_out / base_fan_out`. At the base shape every multiplier is 1, so all
//! schemes collapse to their constants and coincide with SP.

mod shape;
mod tables;

pub use shape::{Dim, InfShape, ParamCategory, ParamRole};
pub use tables::{equivalence_theta, scheme_lookup};

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational exponent.
pub type Power = Rational64;

pub(crate) fn pow(num: i64, den: i64) -> Power {
    Power::new(num, den)
}

/// `constant * fan_in_mult^fan_in_pow * fan_out_mult^fan_out_pow`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleExpr {
    pub constant: f64,
    pub fan_in_pow: Power,
    pub fan_out_pow: Power,
}

impl ScaleExpr {
    pub const fn one() -> Self {
        Self::constant(1.0)
    }

    pub const fn constant(constant: f64) -> Self {
        Self {
            constant,
            fan_in_pow: Power::new_raw(0, 1),
            fan_out_pow: Power::new_raw(0, 1),
        }
    }

    pub fn fan_in(p: Power) -> Self {
        Self {
            fan_in_pow: p,
            ..Self::one()
        }
    }

    pub fn fan_out(p: Power) -> Self {
        Self {
            fan_out_pow: p,
            ..Self::one()
        }
    }

    pub fn with_constant(self, constant: f64) -> Self {
        Self { constant, ..self }
    }

    pub fn mul(&self, other: &ScaleExpr) -> ScaleExpr {
        ScaleExpr {
            constant: self.constant * other.constant,
            fan_in_pow: self.fan_in_pow + other.fan_in_pow,
            fan_out_pow: self.fan_out_pow + other.fan_out_pow,
        }
    }

    pub fn div(&self, other: &ScaleExpr) -> ScaleExpr {
        self.mul(&other.recip())
    }

    pub fn recip(&self) -> ScaleExpr {
        ScaleExpr {
            constant: 1.0 / self.constant,
            fan_in_pow: -self.fan_in_pow,
            fan_out_pow: -self.fan_out_pow,
        }
    }

    pub fn powi(&self, k: i32) -> ScaleExpr {
        let r = Power::from_integer(k as i64);
        ScaleExpr {
            constant: self.constant.powi(k),
            fan_in_pow: self.fan_in_pow * r,
            fan_out_pow: self.fan_out_pow * r,
        }
    }

    pub fn eval(&self, fan_in_mult: f64, fan_out_mult: f64) -> f64 {
        self.constant
            * pow_rational(fan_in_mult, self.fan_in_pow)
            * pow_rational(fan_out_mult, self.fan_out_pow)
    }

    pub fn eval_shape(&self, shape: &InfShape) -> f64 {
        self.eval(shape.fan_in_mult(), shape.fan_out_mult())
    }

    /// Drops powers of dimensions the role holds finite; they never change.
    pub fn project(&self, role: ParamRole) -> ScaleExpr {
        let (keep_in, keep_out) = role.infinite_fans();
        ScaleExpr {
            constant: self.constant,
            fan_in_pow: if keep_in {
                self.fan_in_pow
            } else {
                Power::from_integer(0)
            },
            fan_out_pow: if keep_out {
                self.fan_out_pow
            } else {
                Power::from_integer(0)
            },
        }
    }

    pub fn is_width_independent(&self) -> bool {
        self.fan_in_pow == Power::from_integer(0) && self.fan_out_pow == Power::from_integer(0)
    }
}

impl fmt::Display for ScaleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.constant)?;
        if self.fan_in_pow != Power::from_integer(0) {
            write!(f, "*fan_in^{}", self.fan_in_pow)?;
        }
        if self.fan_out_pow != Power::from_integer(0) {
            write!(f, "*fan_out^{}", self.fan_out_pow)?;
        }
        Ok(())
    }
}

/// `x^p` with exact paths for integer and half-integer powers.
fn pow_rational(x: f64, p: Power) -> f64 {
    if x == 1.0 || *p.numer() == 0 {
        return 1.0;
    }
    match *p.denom() {
        1 => x.powi(*p.numer() as i32),
        2 => x.sqrt().powi(*p.numer() as i32),
        d => x.powf(*p.numer() as f64 / d as f64),
    }
}

/// One table cell: multiplier, init variance and learning-rate scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbcTriple {
    pub mult: ScaleExpr,
    pub init_var: ScaleExpr,
    pub lr: ScaleExpr,
}

impl AbcTriple {
    /// Rescales by `theta`: `(A*theta, B/theta^2, C/theta^2)` for SGD and
    /// `(A*theta, B/theta^2, C/theta)` for Adam, with `B` a variance. The
    /// trained function is unchanged for every step.
    pub fn rescale_theta(
        &self,
        theta: &ScaleExpr,
        optimizer: OptimizerFamily,
    ) -> Result<AbcTriple> {
        if !(theta.constant > 0.0) || !theta.constant.is_finite() {
            return Err(Error::Parameter(format!(
                "theta must be positive, got {}",
                theta.constant
            )));
        }
        let lr_div = match optimizer {
            OptimizerFamily::Sgd => theta.powi(2),
            OptimizerFamily::Adam => *theta,
        };
        Ok(AbcTriple {
            mult: self.mult.mul(theta),
            init_var: self.init_var.div(&theta.powi(2)),
            lr: self.lr.div(&lr_div),
        })
    }

    pub fn project(&self, role: ParamRole) -> AbcTriple {
        AbcTriple {
            mult: self.mult.project(role),
            init_var: self.init_var.project(role),
            lr: self.lr.project(role),
        }
    }

    pub fn effective_multiplier(&self, shape: &InfShape, master: f64) -> f64 {
        master * self.mult.eval_shape(shape)
    }

    pub fn effective_init_var(&self, shape: &InfShape, master: f64) -> f64 {
        master * self.init_var.eval_shape(shape)
    }

    pub fn effective_lr(&self, shape: &InfShape, master: f64) -> f64 {
        master * self.lr.eval_shape(shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "sp")]
    Sp,
    #[serde(rename = "ntp")]
    Ntp,
    #[serde(rename = "mup-t3")]
    MupT3,
    #[serde(rename = "mup-t8")]
    MupT8,
    #[serde(rename = "mup-t9")]
    MupT9,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Sp,
        Scheme::Ntp,
        Scheme::MupT3,
        Scheme::MupT8,
        Scheme::MupT9,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Sp => "sp",
            Scheme::Ntp => "ntp",
            Scheme::MupT3 => "mup-t3",
            Scheme::MupT8 => "mup-t8",
            Scheme::MupT9 => "mup-t9",
        }
    }

    pub fn is_mup(self) -> bool {
        matches!(self, Scheme::MupT3 | Scheme::MupT8 | Scheme::MupT9)
    }

    /// Attention logit scale `alpha * s` applied to `q^T k`. muP uses
    /// `sqrt(d_base) / d` (1/d attention); at the base it is computed exactly
    /// as the standard `1/sqrt(d)`.
    pub fn attention_scale(self, d_head: usize, d_head_base: usize, alpha_attn: f64) -> f64 {
        let d = d_head as f64;
        if self.is_mup() && d_head != d_head_base {
            alpha_attn * (d_head_base as f64).sqrt() / d
        } else {
            alpha_attn / d.sqrt()
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scheme {s:?} (expected sp, ntp, mup-t3, mup-t8, mup-t9)"
                ))
            })
    }
}

/// Which learning-rate row of a table applies. Adagrad, RMSProp and AdamW
/// share the Adam row; momentum SGD shares the SGD row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerFamily {
    Sgd,
    Adam,
}
