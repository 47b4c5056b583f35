//! MLPs and small Transformers whose parameters carry an infinite shape, a
//! role and a scaling triple.

mod mlp;
mod param;
mod transformer;

pub use mlp::{build_mlp, build_mlp_with, Mlp, MlpConfig};
pub use param::{OptimState, ParamGroup, ParamTensor};
pub use transformer::{
    build_transformer, build_transformer_with, HeadScaling, LnPosition, Transformer,
    TransformerConfig,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{gaussian_init, kernels, label, SeededRng};
use crate::parametrize::{scheme_lookup, AbcTriple, InfShape, OptimizerFamily, ParamRole, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    /// Linear network; used for the one-step blow-up analysis.
    Identity,
}

impl Activation {
    fn forward(self, x: &[f64], out: &mut [f64]) {
        match self {
            Activation::Relu => kernels::relu_fwd(x, out),
            Activation::Tanh => kernels::tanh_fwd(x, out),
            Activation::Identity => out.copy_from_slice(x),
        }
    }

    fn backward(self, x: &[f64], grad_out: &[f64], grad_x: &mut [f64]) {
        match self {
            Activation::Relu => kernels::relu_bwd(x, grad_out, grad_x),
            Activation::Tanh => kernels::tanh_bwd(x, grad_out, grad_x),
            Activation::Identity => kernels::add_into(grad_x, grad_out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// `0.5 * sum_k (f_k - y_k)^2`, averaged over rows.
    Mse,
}

fn one() -> f64 {
    1.0
}

/// Width-independent tunable constants of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHp {
    /// Global init standard deviation multiplier.
    #[serde(default = "one")]
    pub init_std: f64,
    #[serde(default = "one")]
    pub alpha_output: f64,
    #[serde(default = "one")]
    pub alpha_attn: f64,
    #[serde(default = "one")]
    pub alpha_emb: f64,
    /// Learning-rate multipliers per group (default 1).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_lr: BTreeMap<ParamGroup, f64>,
    /// Init std multipliers per group (default 1).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_init: BTreeMap<ParamGroup, f64>,
}

impl Default for ModelHp {
    fn default() -> Self {
        Self {
            init_std: 1.0,
            alpha_output: 1.0,
            alpha_attn: 1.0,
            alpha_emb: 1.0,
            group_lr: BTreeMap::new(),
            group_init: BTreeMap::new(),
        }
    }
}

impl ModelHp {
    pub fn lr_mult(&self, g: ParamGroup) -> f64 {
        self.group_lr.get(&g).copied().unwrap_or(1.0)
    }

    pub fn init_mult(&self, g: ParamGroup) -> f64 {
        self.group_init.get(&g).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("init_std", self.init_std),
            ("alpha_output", self.alpha_output),
            ("alpha_attn", self.alpha_attn),
            ("alpha_emb", self.alpha_emb),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        for (g, v) in self.group_lr.iter().chain(self.group_init.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Config(format!(
                    "group {} multiplier must be >= 0, got {v}",
                    g.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to create one parameter before the scheme is applied.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    /// Storage shape; matrices are stored `fan_in x fan_out`.
    pub dims: Vec<usize>,
    pub infshape: InfShape,
    pub role: ParamRole,
    pub group: ParamGroup,
    /// Variance before the width-dependent factor of the table.
    pub master_var: f64,
    /// Mean of the effective (multiplied) values.
    pub init_mean: f64,
    /// Constant multiplier (`alpha_*`).
    pub alpha: f64,
    pub lr_mult: f64,
}

/// Hook that may replace the triple chosen for a parameter.
pub type TripleAdjust<'a> = &'a dyn Fn(&ParamSpec, AbcTriple) -> AbcTriple;

pub(crate) fn keep_triple(_: &ParamSpec, t: AbcTriple) -> AbcTriple {
    t
}

/// Resolves triples and draws initial values. Each tensor gets its own RNG
/// stream keyed by name, so changing one shape leaves the others untouched.
pub(crate) fn materialize(
    specs: Vec<ParamSpec>,
    scheme: Scheme,
    family: OptimizerFamily,
    adjust: TripleAdjust<'_>,
    rng: &SeededRng,
) -> Result<Vec<ParamTensor>> {
    specs
        .into_iter()
        .map(|spec| {
            let structural = spec.infshape.role();
            if structural != spec.role {
                return Err(Error::Config(format!(
                    "parameter {} declared {} but its shape classifies as {}",
                    spec.name,
                    spec.role.as_str(),
                    structural.as_str()
                )));
            }
            if spec.infshape.numel() != spec.dims.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {} storage/infshape size mismatch",
                    spec.name
                )));
            }
            let mut triple = scheme_lookup(spec.role, scheme, family);
            triple.mult.constant *= spec.alpha;
            triple.lr.constant *= spec.lr_mult;
            let triple = adjust(&spec, triple);
            let multiplier = triple.effective_multiplier(&spec.infshape, 1.0);
            let var = triple.effective_init_var(&spec.infshape, spec.master_var);
            let mean = if spec.init_mean == 0.0 || multiplier == 0.0 {
                0.0
            } else {
                spec.init_mean / multiplier
            };
            let mut r = rng.fork(label(&spec.name));
            let value = gaussian_init(&spec.dims, mean, var, &mut r)?;
            Ok(ParamTensor {
                lr_scale: triple.effective_lr(&spec.infshape, 1.0),
                name: spec.name,
                value,
                infshape: spec.infshape,
                role: spec.role,
                group: spec.group,
                triple,
                multiplier,
                state: OptimState::default(),
            })
        })
        .collect()
}

/// One minibatch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `rows x d_in` inputs with class or regression targets.
    Dense {
        x: Vec<f64>,
        rows: usize,
        targets: Targets,
    },
    /// `batch` sequences of `seq_len + 1` tokens; position `i` predicts `i + 1`.
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        seq_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Loss plus captured named activations.
#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    pub loss: f64,
    pub activations: Vec<(String, Vec<f64>)>,
}

impl ForwardOutput {
    pub fn activation(&self, name: &str) -> Option<&[f64]> {
        self.activations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Attention logit of one query/key pair under the given scheme.
pub fn attention_logit(
    q: &[f64],
    k: &[f64],
    scheme: Scheme,
    d_head_base: usize,
    alpha_attn: f64,
) -> f64 {
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    scheme.attention_scale(q.len(), d_head_base, alpha_attn) * dot
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(Mlp),
    Transformer(Transformer),
}

impl Model {
    pub fn params(&self) -> &[ParamTensor] {
        match self {
            Model::Mlp(m) => &m.params,
            Model::Transformer(t) => &t.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        match self {
            Model::Mlp(m) => &mut m.params,
            Model::Transformer(t) => &mut t.params,
        }
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params().iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }

    /// Forward pass capturing named activations. Non-finite losses are
    /// returned as-is for the caller to flag.
    pub fn forward_loss(&self, batch: &Batch) -> Result<ForwardOutput> {
        match self {
            Model::Mlp(m) => m.forward_loss(batch),
            Model::Transformer(t) => t.forward_loss(batch),
        }
    }

    /// Zeroes gradients, then runs forward and backward; returns the loss.
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64> {
        self.zero_grad();
        match self {
            Model::Mlp(m) => m.loss_and_grad(batch),
            Model::Transformer(t) => t.loss_and_grad(batch),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.value.is_finite())
    }
}

/// `out = x * (m w)` where `w` is stored `fan_in x fan_out`.
pub(crate) fn linear_fwd(x: &[f64], rows: usize, w: &ParamTensor, out: &mut [f64]) {
    let (fi, fo) = (w.value.shape()[0], w.value.shape()[1]);
    kernels::gemm(
        rows,
        fi,
        fo,
        w.multiplier,
        x,
        false,
        w.value.data(),
        false,
        0.0,
        out,
    );
}

/// Accumulates the weight gradient, and `grad_x` if requested.
pub(crate) fn linear_bwd(
    x: &[f64],
    rows: usize,
    w: &mut ParamTensor,
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
) {
    let (fi, fo) = (w.value.shape()[0], w.value.shape()[1]);
    let m = w.multiplier;
    if let Some(gx) = grad_x {
        kernels::gemm(
            rows,
            fo,
            fi,
            m,
            grad_out,
            false,
            w.value.data(),
            true,
            1.0,
            gx,
        );
    }
    kernels::gemm(
        fi,
        rows,
        fo,
        m,
        x,
        true,
        grad_out,
        false,
        1.0,
        w.value.grad_mut(),
    );
}

pub(crate) fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be >= 1")));
    }
    Ok(())
}
