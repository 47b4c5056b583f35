use serde::{Deserialize, Serialize};

use super::{
    check_positive, keep_triple, linear_bwd, linear_fwd, materialize, Activation, Batch,
    ForwardOutput, LossKind, Model, ModelHp, ParamGroup, ParamSpec, ParamTensor, Targets,
    TripleAdjust,
};
use crate::error::{Error, Result};
use crate::numcore::{kernels, SeededRng};
use crate::parametrize::{Dim, InfShape, OptimizerFamily, ParamRole, Scheme};

/// `f(x) = W_out^T phi(... phi(W_1^T x + b_1) ...)` with `depth` hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub width: usize,
    pub base_width: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
    pub scheme: Scheme,
    #[serde(default)]
    pub output_zero_init: bool,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub hp: ModelHp,
}

fn yes() -> bool {
    true
}

impl MlpConfig {
    pub fn new(
        d_in: usize,
        d_out: usize,
        width: usize,
        base_width: usize,
        depth: usize,
        scheme: Scheme,
    ) -> Self {
        Self {
            d_in,
            d_out,
            width,
            base_width,
            depth,
            activation: Activation::Relu,
            scheme,
            output_zero_init: false,
            bias: true,
            loss: LossKind::CrossEntropy,
            hp: ModelHp::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("d_in", self.d_in)?;
        check_positive("d_out", self.d_out)?;
        check_positive("width", self.width)?;
        check_positive("base_width", self.base_width)?;
        check_positive("depth", self.depth)?;
        self.hp.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: Vec<ParamTensor>,
    weights: Vec<usize>,
    biases: Vec<usize>,
}

pub fn build_mlp(cfg: &MlpConfig, family: OptimizerFamily, rng: &SeededRng) -> Result<Model> {
    build_mlp_with(cfg, family, &keep_triple, rng)
}

/// As [`build_mlp`], letting `adjust` rewrite each tensor's triple.
pub fn build_mlp_with(
    cfg: &MlpConfig,
    family: OptimizerFamily,
    adjust: TripleAdjust<'_>,
    rng: &SeededRng,
) -> Result<Model> {
    cfg.validate()?;
    let hp = &cfg.hp;
    let wide = Dim::width(cfg.width, cfg.base_width);
    let mut specs = Vec::new();
    for l in 0..=cfg.depth {
        let fan_in = if l == 0 { Dim::finite(cfg.d_in) } else { wide };
        let fan_out = if l == cfg.depth {
            Dim::finite(cfg.d_out)
        } else {
            wide
        };
        let infshape = InfShape::matrix(fan_out, fan_in);
        let role = infshape.role();
        let group = match role {
            ParamRole::InputWeight => ParamGroup::Input,
            ParamRole::OutputWeight => ParamGroup::Output,
            _ => ParamGroup::Hidden,
        };
        let zero = l == cfg.depth && cfg.output_zero_init;
        let std = hp.init_std * hp.init_mult(group);
        specs.push(ParamSpec {
            name: format!("layer{l}.weight"),
            dims: vec![fan_in.size, fan_out.size],
            infshape,
            role,
            group,
            master_var: if zero {
                0.0
            } else {
                std * std / fan_in.base as f64
            },
            init_mean: 0.0,
            alpha: if role == ParamRole::OutputWeight {
                hp.alpha_output
            } else {
                1.0
            },
            lr_mult: hp.lr_mult(group),
        });
        if cfg.bias && l < cfg.depth {
            specs.push(ParamSpec {
                name: format!("layer{l}.bias"),
                dims: vec![cfg.width],
                infshape: InfShape::vector(wide),
                role: ParamRole::Bias,
                group: ParamGroup::Bias,
                master_var: 0.0,
                init_mean: 0.0,
                alpha: 1.0,
                lr_mult: hp.lr_mult(ParamGroup::Bias),
            });
        }
    }
    let params = materialize(specs, cfg.scheme, family, adjust, rng)?;
    let find = |n: &str| params.iter().position(|p| p.name == n);
    let weights = (0..=cfg.depth)
        .map(|l| find(&format!("layer{l}.weight")).unwrap())
        .collect();
    let biases = (0..cfg.depth)
        .filter_map(|l| find(&format!("layer{l}.bias")))
        .collect();
    Ok(Model::Mlp(Mlp {
        config: cfg.clone(),
        params,
        weights,
        biases,
    }))
}

struct Pass {
    /// Pre-activations per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    post: Vec<Vec<f64>>,
    out: Vec<f64>,
    loss: f64,
    /// Gradient of the loss with respect to `out`.
    grad_out: Vec<f64>,
}

impl Mlp {
    fn dense<'a>(&self, batch: &'a Batch) -> Result<(&'a [f64], usize, &'a Targets)> {
        let Batch::Dense { x, rows, targets } = batch else {
            return Err(Error::Shape("MLP expects a dense batch".into()));
        };
        if x.len() != rows * self.config.d_in {
            return Err(Error::Shape(format!(
                "batch has {} values, expected {rows} x {}",
                x.len(),
                self.config.d_in
            )));
        }
        let ok = match (targets, self.config.loss) {
            (Targets::Classes(t), LossKind::CrossEntropy) => {
                t.len() == *rows && t.iter().all(|&c| c < self.config.d_out)
            }
            (Targets::Values(v), LossKind::Mse) => v.len() == rows * self.config.d_out,
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(
                "targets do not match the loss and output size".into(),
            ));
        }
        Ok((x, *rows, targets))
    }

    fn run(&self, batch: &Batch) -> Result<Pass> {
        let (x, rows, targets) = self.dense(batch)?;
        let cfg = &self.config;
        let mut pre = Vec::with_capacity(cfg.depth);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let input = if l == 0 { x } else { &post[l - 1] };
            let mut z = vec![0.0; rows * cfg.width];
            linear_fwd(input, rows, &self.params[self.weights[l]], &mut z);
            if let Some(&b) = self.biases.get(l) {
                let b = &self.params[b];
                kernels::bias_add_fwd(&mut z, b.value.data(), b.multiplier);
            }
            let mut a = vec![0.0; z.len()];
            cfg.activation.forward(&z, &mut a);
            pre.push(z);
            post.push(a);
        }
        let last = post.last().map(|v| v.as_slice()).unwrap_or(x);
        let mut out = vec![0.0; rows * cfg.d_out];
        linear_fwd(last, rows, &self.params[self.weights[cfg.depth]], &mut out);
        let (loss, grad_out) = match targets {
            Targets::Classes(t) => {
                let (loss, probs) = kernels::softmax_xent_fwd(&out, cfg.d_out, t);
                let mut g = vec![0.0; out.len()];
                kernels::softmax_xent_bwd(&probs, cfg.d_out, t, 1.0, &mut g);
                (loss, g)
            }
            Targets::Values(y) => {
                let inv = 1.0 / rows as f64;
                let g: Vec<f64> = out.iter().zip(y).map(|(o, y)| (o - y) * inv).collect();
                let loss = out
                    .iter()
                    .zip(y)
                    .map(|(o, y)| 0.5 * (o - y) * (o - y))
                    .sum::<f64>()
                    * inv;
                (loss, g)
            }
        };
        Ok(Pass {
            pre,
            post,
            out,
            loss,
            grad_out,
        })
    }

    pub fn forward_loss(&self, batch: &Batch) -> Result<ForwardOutput> {
        let pass = self.run(batch)?;
        let mut activations: Vec<(String, Vec<f64>)> = pass
            .pre
            .into_iter()
            .enumerate()
            .map(|(l, z)| (format!("layer{l}.preact"), z))
            .collect();
        activations.push(("output".into(), pass.out));
        Ok(ForwardOutput {
            loss: pass.loss,
            activations,
        })
    }

    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64> {
        let pass = self.run(batch)?;
        let (x, rows, _) = self.dense(batch)?;
        let depth = self.config.depth;
        let act = self.config.activation;
        let last = pass.post.last().map(|v| v.as_slice()).unwrap_or(x);
        let mut grad_a = vec![0.0; last.len()];
        linear_bwd(
            last,
            rows,
            &mut self.params[self.weights[depth]],
            &pass.grad_out,
            Some(&mut grad_a),
        );
        for l in (0..depth).rev() {
            let mut grad_z = vec![0.0; grad_a.len()];
            act.backward(&pass.pre[l], &grad_a, &mut grad_z);
            if let Some(&b) = self.biases.get(l) {
                let b = &mut self.params[b];
                let m = b.multiplier;
                kernels::bias_add_bwd(&grad_z, m, b.value.grad_mut());
            }
            let input = if l == 0 { x } else { &pass.post[l - 1] };
            let w = &mut self.params[self.weights[l]];
            if l == 0 {
                linear_bwd(input, rows, w, &grad_z, None);
            } else {
                grad_a = vec![0.0; rows * self.config.width];
                linear_bwd(input, rows, w, &grad_z, Some(&mut grad_a));
            }
        }
        Ok(pass.loss)
    }
}
