use serde::{Deserialize, Serialize};

use super::{
    check_positive, keep_triple, linear_bwd, linear_fwd, materialize, Batch, ForwardOutput, Model,
    ModelHp, ParamGroup, ParamSpec, ParamTensor, TripleAdjust,
};
use crate::error::{Error, Result};
use crate::numcore::kernels::{self, AttentionCache, LayerNormCache};
use crate::numcore::SeededRng;
use crate::parametrize::{scheme_lookup, Dim, InfShape, OptimizerFamily, ParamRole, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LnPosition {
    #[default]
    Pre,
    Post,
}

/// How attention grows when a template is widened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadScaling {
    /// Fixed head size, more heads.
    #[default]
    Count,
    /// Fixed head count, larger heads.
    Size,
}

/// Decoder-only language model with learned absolute positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub context: usize,
    pub d_model: usize,
    pub d_model_base: usize,
    pub d_ffn: usize,
    pub d_ffn_base: usize,
    pub d_head: usize,
    pub d_head_base: usize,
    pub n_head: usize,
    pub n_head_base: usize,
    pub depth: usize,
    #[serde(default)]
    pub ln_position: LnPosition,
    pub scheme: Scheme,
    #[serde(default)]
    pub hp: ModelHp,
    #[serde(default)]
    pub output_zero_init: bool,
    #[serde(default)]
    pub query_zero_init: bool,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub head_scaling: HeadScaling,
}

impl TransformerConfig {
    /// Width `d_model` over base `d_model_base`, heads of fixed count whose
    /// size grows with width, and `d_ffn = ffn_ratio * d_model`.
    pub fn scaled(
        vocab: usize,
        context: usize,
        d_model: usize,
        d_model_base: usize,
        n_head: usize,
        ffn_ratio: usize,
        depth: usize,
        scheme: Scheme,
    ) -> Self {
        Self {
            vocab,
            context,
            d_model,
            d_model_base,
            d_ffn: ffn_ratio * d_model,
            d_ffn_base: ffn_ratio * d_model_base,
            d_head: d_model / n_head,
            d_head_base: d_model_base / n_head,
            n_head,
            n_head_base: n_head,
            depth,
            ln_position: LnPosition::Pre,
            scheme,
            hp: ModelHp::default(),
            output_zero_init: false,
            query_zero_init: false,
            tie_embeddings: false,
            head_scaling: HeadScaling::Size,
        }
    }

    /// Width `d_model` over base `d_model_base` with heads of size `d_head`
    /// whose count grows with width, and `d_ffn = ffn_ratio * d_model`.
    pub fn head_count_scaled(
        vocab: usize,
        context: usize,
        d_model: usize,
        d_model_base: usize,
        d_head: usize,
        ffn_ratio: usize,
        depth: usize,
        scheme: Scheme,
    ) -> Self {
        Self {
            d_head,
            d_head_base: d_head,
            n_head: d_model / d_head,
            n_head_base: d_model_base / d_head,
            head_scaling: HeadScaling::Count,
            ..Self::scaled(
                vocab,
                context,
                d_model,
                d_model_base,
                1,
                ffn_ratio,
                depth,
                scheme,
            )
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("context", self.context),
            ("d_model", self.d_model),
            ("d_model_base", self.d_model_base),
            ("d_ffn", self.d_ffn),
            ("d_ffn_base", self.d_ffn_base),
            ("d_head", self.d_head),
            ("d_head_base", self.d_head_base),
            ("n_head", self.n_head),
            ("n_head_base", self.n_head_base),
            ("depth", self.depth),
        ] {
            check_positive(name, v)?;
        }
        if self.tie_embeddings && !matches!(self.scheme, Scheme::Sp | Scheme::MupT8 | Scheme::MupT9)
        {
            return Err(Error::Config(format!(
                "tied embeddings need matching input/output init, unavailable under {}",
                self.scheme
            )));
        }
        self.hp.validate()
    }

    fn d_attn(&self) -> usize {
        self.n_head * self.d_head
    }

    fn d_attn_base(&self) -> usize {
        self.n_head_base * self.d_head_base
    }

    /// Scale applied to `q^T k`; equals `alpha / sqrt(d_head)` at the base.
    pub fn attention_scale(&self) -> f64 {
        self.scheme
            .attention_scale(self.d_head, self.d_head_base, self.hp.alpha_attn)
    }
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: Vec<ParamTensor>,
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockIdx>,
    lnf: Option<(usize, usize)>,
    unembed: Option<usize>,
    /// Output multiplier applied to the shared table when tied.
    tied_mult: f64,
}

pub fn build_transformer(
    cfg: &TransformerConfig,
    family: OptimizerFamily,
    rng: &SeededRng,
) -> Result<Model> {
    build_transformer_with(cfg, family, &keep_triple, rng)
}

pub fn build_transformer_with(
    cfg: &TransformerConfig,
    family: OptimizerFamily,
    adjust: TripleAdjust<'_>,
    rng: &SeededRng,
) -> Result<Model> {
    cfg.validate()?;
    let hp = &cfg.hp;
    let dm = Dim::width(cfg.d_model, cfg.d_model_base);
    let da = Dim::width(cfg.d_attn(), cfg.d_attn_base());
    let df = Dim::width(cfg.d_ffn, cfg.d_ffn_base);
    let std = |g: ParamGroup| hp.init_std * hp.init_mult(g);
    let mut specs = Vec::new();

    let matrix =
        |name: String, fan_in: Dim, fan_out: Dim, group: ParamGroup, zero: bool, alpha: f64| {
            let infshape = InfShape::matrix(fan_out, fan_in);
            let role = infshape.role();
            // Embedding tables take a width-independent variance of `std^2`.
            let master_var = if zero {
                0.0
            } else if group == ParamGroup::Embedding {
                std(group).powi(2)
            } else {
                std(group).powi(2) / fan_in.base as f64
            };
            ParamSpec {
                name,
                dims: vec![fan_in.size, fan_out.size],
                infshape,
                role,
                group,
                master_var,
                init_mean: 0.0,
                alpha,
                lr_mult: hp.lr_mult(group),
            }
        };
    let vector = |name: String, d: Dim, group: ParamGroup, mean: f64| ParamSpec {
        name,
        dims: vec![d.size],
        infshape: InfShape::vector(d),
        role: ParamRole::Bias,
        group,
        master_var: 0.0,
        init_mean: mean,
        alpha: 1.0,
        lr_mult: hp.lr_mult(group),
    };

    let emb = ParamGroup::Embedding;
    specs.push(matrix(
        "wte".into(),
        Dim::finite(cfg.vocab),
        dm,
        emb,
        false,
        hp.alpha_emb,
    ));
    specs.push(matrix(
        "wpe".into(),
        Dim::finite(cfg.context),
        dm,
        emb,
        false,
        hp.alpha_emb,
    ));
    for i in 0..cfg.depth {
        let p = |s: &str| format!("block{i}.{s}");
        let hid = ParamGroup::Hidden;
        specs.push(vector(p("ln1.gain"), dm, ParamGroup::Norm, 1.0));
        specs.push(vector(p("ln1.bias"), dm, ParamGroup::Norm, 0.0));
        specs.push(matrix(p("attn.wq"), dm, da, hid, cfg.query_zero_init, 1.0));
        specs.push(matrix(p("attn.wk"), dm, da, hid, false, 1.0));
        specs.push(matrix(p("attn.wv"), dm, da, hid, false, 1.0));
        specs.push(matrix(p("attn.wo"), da, dm, hid, false, 1.0));
        specs.push(vector(p("ln2.gain"), dm, ParamGroup::Norm, 1.0));
        specs.push(vector(p("ln2.bias"), dm, ParamGroup::Norm, 0.0));
        specs.push(matrix(p("ffn.w1"), dm, df, hid, false, 1.0));
        specs.push(vector(p("ffn.b1"), df, ParamGroup::Bias, 0.0));
        specs.push(matrix(p("ffn.w2"), df, dm, hid, false, 1.0));
        specs.push(vector(p("ffn.b2"), dm, ParamGroup::Bias, 0.0));
    }
    if cfg.ln_position == LnPosition::Pre {
        specs.push(vector("lnf.gain".into(), dm, ParamGroup::Norm, 1.0));
        specs.push(vector("lnf.bias".into(), dm, ParamGroup::Norm, 0.0));
    }
    if !cfg.tie_embeddings {
        specs.push(matrix(
            "unembed".into(),
            dm,
            Dim::finite(cfg.vocab),
            ParamGroup::Output,
            cfg.output_zero_init,
            hp.alpha_output,
        ));
    }
    let params = materialize(specs, cfg.scheme, family, adjust, rng)?;
    let idx = |n: &str| {
        params
            .iter()
            .position(|p| p.name == n)
            .expect("parameter was just built")
    };
    let blocks = (0..cfg.depth)
        .map(|i| {
            let f = |s: &str| idx(&format!("block{i}.{s}"));
            BlockIdx {
                ln1_gain: f("ln1.gain"),
                ln1_bias: f("ln1.bias"),
                wq: f("attn.wq"),
                wk: f("attn.wk"),
                wv: f("attn.wv"),
                wo: f("attn.wo"),
                ln2_gain: f("ln2.gain"),
                ln2_bias: f("ln2.bias"),
                w1: f("ffn.w1"),
                b1: f("ffn.b1"),
                w2: f("ffn.w2"),
                b2: f("ffn.b2"),
            }
        })
        .collect();
    let out_shape = InfShape::matrix(Dim::finite(cfg.vocab), dm);
    let mut out_triple = scheme_lookup(ParamRole::OutputWeight, cfg.scheme, family);
    out_triple.mult.constant *= hp.alpha_output;
    let tied_mult = out_triple.effective_multiplier(&out_shape, 1.0);
    Ok(Model::Transformer(Transformer {
        config: cfg.clone(),
        wte: idx("wte"),
        wpe: idx("wpe"),
        lnf: (cfg.ln_position == LnPosition::Pre).then(|| (idx("lnf.gain"), idx("lnf.bias"))),
        unembed: (!cfg.tie_embeddings).then(|| idx("unembed")),
        blocks,
        params,
        tied_mult,
    }))
}

struct BlockCache {
    x_in: Vec<f64>,
    /// Input to the attention sublayer.
    attn_in: Vec<f64>,
    ln1: LayerNormCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    heads: Vec<AttentionCache>,
    o: Vec<f64>,
    /// Input to the feed-forward sublayer.
    ffn_in: Vec<f64>,
    ln2: LayerNormCache,
    u: Vec<f64>,
    a: Vec<f64>,
}

struct Pass {
    ids: Vec<usize>,
    targets: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf: Option<LayerNormCache>,
    z: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
    captured: Vec<(String, Vec<f64>)>,
}

fn gather_head(src: &[f64], b: usize, h: usize, t: usize, width: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * dh];
    for i in 0..t {
        let row = (b * t + i) * width + h * dh;
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[row..row + dh]);
    }
    out
}

fn scatter_head(
    dst: &mut [f64],
    src: &[f64],
    b: usize,
    h: usize,
    t: usize,
    width: usize,
    dh: usize,
) {
    for i in 0..t {
        let row = (b * t + i) * width + h * dh;
        kernels::add_into(&mut dst[row..row + dh], &src[i * dh..(i + 1) * dh]);
    }
}

fn scaled(v: &[f64], m: f64) -> Vec<f64> {
    v.iter().map(|x| m * x).collect()
}

impl Transformer {
    fn tokens(&self, batch: &Batch) -> Result<(Vec<usize>, Vec<usize>, usize, usize)> {
        let Batch::Tokens {
            ids,
            batch,
            seq_len,
        } = batch
        else {
            return Err(Error::Shape("Transformer expects a token batch".into()));
        };
        let (b, t) = (*batch, *seq_len);
        if t == 0 || b == 0 || t > self.config.context {
            return Err(Error::Shape(format!(
                "sequence length {t} must lie in 1..={}",
                self.config.context
            )));
        }
        if ids.len() != b * (t + 1) {
            return Err(Error::Shape(format!(
                "expected {} token ids, got {}",
                b * (t + 1),
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocab {}",
                self.config.vocab
            )));
        }
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for s in ids.chunks_exact(t + 1) {
            inputs.extend_from_slice(&s[..t]);
            targets.extend_from_slice(&s[1..]);
        }
        Ok((inputs, targets, b, t))
    }

    fn layernorm(&self, x: &[f64], gain: usize, bias: usize, out: &mut [f64]) -> LayerNormCache {
        let (g, b) = (&self.params[gain], &self.params[bias]);
        let ge = scaled(g.value.data(), g.multiplier);
        let be = scaled(b.value.data(), b.multiplier);
        kernels::layernorm_fwd(x, self.config.d_model, &ge, &be, out)
    }

    fn layernorm_back(
        &mut self,
        cache: &LayerNormCache,
        gain: usize,
        bias: usize,
        grad_out: &[f64],
        grad_x: &mut [f64],
    ) {
        let d = self.config.d_model;
        let gm = self.params[gain].multiplier;
        let ge = scaled(self.params[gain].value.data(), gm);
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        kernels::layernorm_bwd(cache, d, &ge, grad_out, grad_x, &mut gg, &mut gb);
        let gm_b = self.params[bias].multiplier;
        for (dst, s) in self.params[gain].value.grad_mut().iter_mut().zip(&gg) {
            *dst += gm * s;
        }
        for (dst, s) in self.params[bias].value.grad_mut().iter_mut().zip(&gb) {
            *dst += gm_b * s;
        }
    }

    fn run(&self, batch: &Batch, capture: bool) -> Result<Pass> {
        let cfg = &self.config;
        let (ids, targets, nb, t) = self.tokens(batch)?;
        let n = nb * t;
        let (d, da, dh, df) = (cfg.d_model, cfg.d_attn(), cfg.d_head, cfg.d_ffn);
        let scale = cfg.attention_scale();
        let pre = cfg.ln_position == LnPosition::Pre;
        let mut captured = Vec::new();

        let wte = &self.params[self.wte];
        let wpe = &self.params[self.wpe];
        let mut x = vec![0.0; n * d];
        kernels::embedding_fwd(wte.value.data(), d, &ids, wte.multiplier, &mut x);
        if capture {
            captured.push(("word_emb".to_string(), x.clone()));
        }
        let positions: Vec<usize> = (0..n).map(|r| r % t).collect();
        let mut pos = vec![0.0; n * d];
        kernels::embedding_fwd(wpe.value.data(), d, &positions, wpe.multiplier, &mut pos);
        kernels::add_into(&mut x, &pos);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for (bi, bl) in self.blocks.iter().enumerate() {
            let x_in = x;
            let mut normed = vec![0.0; n * d];
            let (attn_in, ln1) = if pre {
                let c = self.layernorm(&x_in, bl.ln1_gain, bl.ln1_bias, &mut normed);
                (normed, c)
            } else {
                (x_in.clone(), LayerNormCache::default())
            };
            let mut q = vec![0.0; n * da];
            let mut k = vec![0.0; n * da];
            let mut v = vec![0.0; n * da];
            linear_fwd(&attn_in, n, &self.params[bl.wq], &mut q);
            linear_fwd(&attn_in, n, &self.params[bl.wk], &mut k);
            linear_fwd(&attn_in, n, &self.params[bl.wv], &mut v);
            let mut o = vec![0.0; n * da];
            let mut heads = Vec::with_capacity(nb * cfg.n_head);
            let mut logit_capture = Vec::new();
            for b in 0..nb {
                for h in 0..cfg.n_head {
                    let qh = gather_head(&q, b, h, t, da, dh);
                    let kh = gather_head(&k, b, h, t, da, dh);
                    let vh = gather_head(&v, b, h, t, da, dh);
                    let mut oh = vec![0.0; t * dh];
                    let cache =
                        kernels::attention_fwd(&qh, &kh, &vh, t, dh, dh, scale, true, &mut oh);
                    if capture {
                        for i in 0..t {
                            logit_capture.extend_from_slice(&cache.logits[i * t..i * t + i + 1]);
                        }
                    }
                    scatter_head(&mut o, &oh, b, h, t, da, dh);
                    heads.push(cache);
                }
            }
            if capture {
                captured.push((format!("block{bi}.attn_logits"), logit_capture));
            }
            let mut mid = vec![0.0; n * d];
            linear_fwd(&o, n, &self.params[bl.wo], &mut mid);
            kernels::add_into(&mut mid, &x_in);
            // pre: mid is the residual stream; post: normalize it first.
            let (ffn_in, ln1, ln2_src) = if pre {
                (None, ln1, mid)
            } else {
                let mut out = vec![0.0; n * d];
                let c = self.layernorm(&mid, bl.ln1_gain, bl.ln1_bias, &mut out);
                (Some(out.clone()), c, out)
            };
            let mid = ln2_src;
            let mut normed2 = vec![0.0; n * d];
            let (ffn_in, ln2) = match ffn_in {
                None => {
                    let c = self.layernorm(&mid, bl.ln2_gain, bl.ln2_bias, &mut normed2);
                    (normed2, c)
                }
                Some(f) => (f, LayerNormCache::default()),
            };
            let mut u = vec![0.0; n * df];
            linear_fwd(&ffn_in, n, &self.params[bl.w1], &mut u);
            let b1 = &self.params[bl.b1];
            kernels::bias_add_fwd(&mut u, b1.value.data(), b1.multiplier);
            let mut a = vec![0.0; n * df];
            kernels::relu_fwd(&u, &mut a);
            let mut out = vec![0.0; n * d];
            linear_fwd(&a, n, &self.params[bl.w2], &mut out);
            let b2 = &self.params[bl.b2];
            kernels::bias_add_fwd(&mut out, b2.value.data(), b2.multiplier);
            kernels::add_into(&mut out, &mid);
            let (x_next, ln2) = if pre {
                (out, ln2)
            } else {
                let mut y = vec![0.0; n * d];
                let c = self.layernorm(&out, bl.ln2_gain, bl.ln2_bias, &mut y);
                (y, c)
            };
            x = x_next;
            blocks.push(BlockCache {
                x_in,
                attn_in,
                ln1,
                q,
                k,
                v,
                heads,
                o,
                ffn_in,
                ln2,
                u,
                a,
            });
        }

        let (z, lnf) = match self.lnf {
            Some((g, b)) => {
                let mut z = vec![0.0; n * d];
                let c = self.layernorm(&x, g, b, &mut z);
                (z, Some(c))
            }
            None => (x, None),
        };
        let vocab = cfg.vocab;
        let mut logits = vec![0.0; n * vocab];
        match self.unembed {
            Some(u) => linear_fwd(&z, n, &self.params[u], &mut logits),
            None => {
                let table = self.params[self.wte].value.data();
                kernels::gemm(
                    n,
                    d,
                    vocab,
                    self.tied_mult,
                    &z,
                    false,
                    table,
                    true,
                    0.0,
                    &mut logits,
                );
            }
        }
        let (loss, probs) = kernels::softmax_xent_fwd(&logits, vocab, &targets);
        if capture {
            captured.push(("logits".to_string(), logits));
        }
        Ok(Pass {
            ids,
            targets,
            blocks,
            lnf,
            z,
            probs,
            loss,
            captured,
        })
    }

    pub fn forward_loss(&self, batch: &Batch) -> Result<ForwardOutput> {
        let pass = self.run(batch, true)?;
        Ok(ForwardOutput {
            loss: pass.loss,
            activations: pass.captured,
        })
    }

    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64> {
        let pass = self.run(batch, false)?;
        let cfg = self.config.clone();
        let n = pass.ids.len();
        let t = n / match batch {
            Batch::Tokens { batch, .. } => *batch,
            Batch::Dense { .. } => unreachable!("validated in run"),
        };
        let nb = n / t;
        let (d, da, dh, df, vocab) = (cfg.d_model, cfg.d_attn(), cfg.d_head, cfg.d_ffn, cfg.vocab);
        let scale = cfg.attention_scale();
        let pre = cfg.ln_position == LnPosition::Pre;

        let mut g_logits = vec![0.0; n * vocab];
        kernels::softmax_xent_bwd(&pass.probs, vocab, &pass.targets, 1.0, &mut g_logits);
        let mut g_z = vec![0.0; n * d];
        match self.unembed {
            Some(u) => linear_bwd(&pass.z, n, &mut self.params[u], &g_logits, Some(&mut g_z)),
            None => {
                let m = self.tied_mult;
                let wte = &mut self.params[self.wte];
                kernels::gemm(
                    n,
                    vocab,
                    d,
                    m,
                    &g_logits,
                    false,
                    wte.value.data(),
                    false,
                    1.0,
                    &mut g_z,
                );
                kernels::gemm(
                    vocab,
                    n,
                    d,
                    m,
                    &g_logits,
                    true,
                    &pass.z,
                    false,
                    1.0,
                    wte.value.grad_mut(),
                );
            }
        }
        let mut g_x = match (self.lnf, &pass.lnf) {
            (Some((g, b)), Some(c)) => {
                let mut gx = vec![0.0; n * d];
                self.layernorm_back(c, g, b, &g_z, &mut gx);
                gx
            }
            _ => g_z,
        };

        for (bl, c) in self.blocks.clone().iter().zip(&pass.blocks).rev() {
            // Gradient reaching the feed-forward output sum `out`.
            let g_out = if pre {
                g_x
            } else {
                let mut g = vec![0.0; n * d];
                self.layernorm_back(&c.ln2, bl.ln2_gain, bl.ln2_bias, &g_x, &mut g);
                g
            };
            // Feed-forward sublayer.
            let mut g_a = vec![0.0; n * df];
            linear_bwd(&c.a, n, &mut self.params[bl.w2], &g_out, Some(&mut g_a));
            let m = self.params[bl.b2].multiplier;
            kernels::bias_add_bwd(&g_out, m, self.params[bl.b2].value.grad_mut());
            let mut g_u = vec![0.0; n * df];
            kernels::relu_bwd(&c.u, &g_a, &mut g_u);
            let m = self.params[bl.b1].multiplier;
            kernels::bias_add_bwd(&g_u, m, self.params[bl.b1].value.grad_mut());
            let mut g_ffn_in = vec![0.0; n * d];
            linear_bwd(
                &c.ffn_in,
                n,
                &mut self.params[bl.w1],
                &g_u,
                Some(&mut g_ffn_in),
            );
            // Gradient with respect to `mid`, the residual after attention.
            let g_mid = if pre {
                let mut g = g_out;
                self.layernorm_back(&c.ln2, bl.ln2_gain, bl.ln2_bias, &g_ffn_in, &mut g);
                g
            } else {
                let mut g_norm = g_out;
                kernels::add_into(&mut g_norm, &g_ffn_in);
                let mut g = vec![0.0; n * d];
                self.layernorm_back(&c.ln1, bl.ln1_gain, bl.ln1_bias, &g_norm, &mut g);
                g
            };
            // Attention sublayer.
            let mut g_o = vec![0.0; n * da];
            linear_bwd(&c.o, n, &mut self.params[bl.wo], &g_mid, Some(&mut g_o));
            let mut g_q = vec![0.0; n * da];
            let mut g_k = vec![0.0; n * da];
            let mut g_v = vec![0.0; n * da];
            for b in 0..nb {
                for h in 0..cfg.n_head {
                    let qh = gather_head(&c.q, b, h, t, da, dh);
                    let kh = gather_head(&c.k, b, h, t, da, dh);
                    let vh = gather_head(&c.v, b, h, t, da, dh);
                    let goh = gather_head(&g_o, b, h, t, da, dh);
                    let mut gq = vec![0.0; t * dh];
                    let mut gk = vec![0.0; t * dh];
                    let mut gv = vec![0.0; t * dh];
                    let cache = &c.heads[b * cfg.n_head + h];
                    kernels::attention_bwd(
                        &qh, &kh, &vh, t, dh, dh, scale, cache, &goh, &mut gq, &mut gk, &mut gv,
                    );
                    scatter_head(&mut g_q, &gq, b, h, t, da, dh);
                    scatter_head(&mut g_k, &gk, b, h, t, da, dh);
                    scatter_head(&mut g_v, &gv, b, h, t, da, dh);
                }
            }
            let mut g_attn_in = vec![0.0; n * d];
            linear_bwd(
                &c.attn_in,
                n,
                &mut self.params[bl.wq],
                &g_q,
                Some(&mut g_attn_in),
            );
            linear_bwd(
                &c.attn_in,
                n,
                &mut self.params[bl.wk],
                &g_k,
                Some(&mut g_attn_in),
            );
            linear_bwd(
                &c.attn_in,
                n,
                &mut self.params[bl.wv],
                &g_v,
                Some(&mut g_attn_in),
            );
            let mut g_in = g_mid;
            if pre {
                self.layernorm_back(&c.ln1, bl.ln1_gain, bl.ln1_bias, &g_attn_in, &mut g_in);
            } else {
                kernels::add_into(&mut g_in, &g_attn_in);
            }
            debug_assert_eq!(c.x_in.len(), g_in.len());
            g_x = g_in;
        }

        let positions: Vec<usize> = (0..n).map(|r| r % t).collect();
        let m = self.params[self.wpe].multiplier;
        kernels::embedding_bwd(
            &positions,
            d,
            &g_x,
            m,
            self.params[self.wpe].value.grad_mut(),
        );
        let m = self.params[self.wte].multiplier;
        kernels::embedding_bwd(
            &pass.ids,
            d,
            &g_x,
            m,
            self.params[self.wte].value.grad_mut(),
        );
        Ok(pass.loss)
    }
}
