use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::hp::HpPoint;
use crate::data::{encode_chars, markov_corpus, token_batch, DenseDataset, TeacherTask};
use crate::error::{Error, Result};
use crate::models::{
    build_mlp, build_transformer, Batch, HeadScaling, LossKind, MlpConfig, Model, TransformerConfig,
};
use crate::numcore::{label, SeededRng};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::parametrize::Scheme;
use crate::train::{evaluate, train, DataSource, TrainConfig};

/// The dimensions transferred across. Never tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalePoint {
    /// Model width over the template's base width.
    pub width_mult: usize,
    pub depth: usize,
    pub batch_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    pub steps: usize,
}

fn default_seq_len() -> usize {
    32
}

impl ScalePoint {
    pub fn new(width_mult: usize, depth: usize, batch_size: usize, steps: usize) -> Self {
        Self {
            width_mult,
            depth,
            batch_size,
            seq_len: default_seq_len(),
            steps,
        }
    }

    pub fn with_width(self, width_mult: usize) -> Self {
        Self { width_mult, ..self }
    }

    pub fn with_depth(self, depth: usize) -> Self {
        Self { depth, ..self }
    }

    pub fn with_batch(self, batch_size: usize) -> Self {
        Self { batch_size, ..self }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn with_seq_len(self, seq_len: usize) -> Self {
        Self { seq_len, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width_mult", self.width_mult),
            ("depth", self.depth),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("scale {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// A model family described at its base shape. `at` produces the member at
/// a given width multiplier and depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelTemplate {
    Mlp(MlpConfig),
    Transformer(TransformerConfig),
}

impl ModelTemplate {
    pub fn scheme(&self) -> Scheme {
        match self {
            ModelTemplate::Mlp(c) => c.scheme,
            ModelTemplate::Transformer(c) => c.scheme,
        }
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        let mut out = self.clone();
        match &mut out {
            ModelTemplate::Mlp(c) => c.scheme = scheme,
            ModelTemplate::Transformer(c) => c.scheme = scheme,
        }
        out
    }

    /// Width of the base model.
    pub fn base_width(&self) -> usize {
        match self {
            ModelTemplate::Mlp(c) => c.base_width,
            ModelTemplate::Transformer(c) => c.d_model_base,
        }
    }

    /// Current width.
    pub fn width(&self) -> usize {
        match self {
            ModelTemplate::Mlp(c) => c.width,
            ModelTemplate::Transformer(c) => c.d_model,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ModelTemplate::Mlp(c) => c.depth,
            ModelTemplate::Transformer(c) => c.depth,
        }
    }

    /// The member with every width dimension `width_mult` times its base.
    /// Transformers grow attention as their `head_scaling` says.
    pub fn at(&self, width_mult: usize, depth: usize) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            ModelTemplate::Mlp(c) => {
                c.width = c.base_width * width_mult;
                c.depth = depth;
            }
            ModelTemplate::Transformer(c) => {
                c.d_model = c.d_model_base * width_mult;
                c.d_ffn = c.d_ffn_base * width_mult;
                match c.head_scaling {
                    HeadScaling::Count => {
                        c.d_head = c.d_head_base;
                        c.n_head = c.n_head_base * width_mult;
                    }
                    HeadScaling::Size => {
                        c.d_head = c.d_head_base * width_mult;
                        c.n_head = c.n_head_base;
                    }
                }
                c.depth = depth;
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Keeps the current sizes but makes `width` the base width. Under muP a
    /// master LR then acts like the same LR in a width-`width` SP model.
    /// Other base dimensions move by the same factor.
    pub fn simulate_width(&self, width: usize) -> Result<Self> {
        let mut out = self.clone();
        let rebase = |base: usize, old_base: usize| -> Result<usize> {
            if !(width * base).is_multiple_of(old_base) {
                return Err(Error::Config(format!(
                    "simulated width {width} does not rescale base dimension {base} to an integer"
                )));
            }
            Ok(width * base / old_base)
        };
        match &mut out {
            ModelTemplate::Mlp(c) => c.base_width = width,
            ModelTemplate::Transformer(c) => {
                let old = c.d_model_base;
                c.d_ffn_base = rebase(c.d_ffn_base, old)?;
                match c.head_scaling {
                    HeadScaling::Count => c.n_head_base = rebase(c.n_head_base, old)?,
                    HeadScaling::Size => c.d_head_base = rebase(c.d_head_base, old)?,
                }
                c.d_model_base = width;
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelTemplate::Mlp(c) => c.validate(),
            ModelTemplate::Transformer(c) => c.validate(),
        }
    }

    pub fn hp_mut(&mut self) -> &mut crate::models::ModelHp {
        match self {
            ModelTemplate::Mlp(c) => &mut c.hp,
            ModelTemplate::Transformer(c) => &mut c.hp,
        }
    }

    pub fn build(
        &self,
        family: crate::parametrize::OptimizerFamily,
        rng: &SeededRng,
    ) -> Result<Model> {
        match self {
            ModelTemplate::Mlp(c) => build_mlp(c, family, rng),
            ModelTemplate::Transformer(c) => build_transformer(c, family, rng),
        }
    }
}

fn default_train_size() -> usize {
    8192
}

fn default_val_size() -> usize {
    1024
}

/// Training data for an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// A fixed sample labelled by a random teacher network.
    Teacher {
        d_in: usize,
        d_out: usize,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default = "default_val_size")]
        val_size: usize,
        #[serde(default)]
        regression: bool,
        seed: u64,
    },
    /// Synthetic Markov-chain tokens; the last tenth is held out.
    Markov {
        vocab: usize,
        tokens: usize,
        seed: u64,
    },
    /// Character-level text file; the last tenth is held out.
    Text { path: PathBuf },
}

#[derive(Debug, Clone)]
enum LoadedData {
    Dense {
        train: Arc<DenseDataset>,
        val: Batch,
    },
    Tokens {
        train: Arc<Vec<usize>>,
        val: Arc<Vec<usize>>,
        vocab: usize,
    },
}

impl DataSpec {
    fn load(&self) -> Result<LoadedData> {
        let split = |ids: Vec<usize>, vocab: usize| -> Result<LoadedData> {
            let cut = ids.len() - ids.len() / 10;
            if cut == 0 || cut == ids.len() {
                return Err(Error::Config(
                    "token stream is too short to hold out a tenth".into(),
                ));
            }
            Ok(LoadedData::Tokens {
                val: Arc::new(ids[cut..].to_vec()),
                train: Arc::new(ids[..cut].to_vec()),
                vocab,
            })
        };
        match self {
            DataSpec::Teacher {
                d_in,
                d_out,
                train_size,
                val_size,
                regression,
                seed,
            } => {
                if *d_in == 0 || *d_out == 0 || *train_size == 0 || *val_size == 0 {
                    return Err(Error::Config("teacher task sizes must be >= 1".into()));
                }
                let task = TeacherTask::new(*d_in, *d_out, *seed);
                let mut rng = SeededRng::new(*seed, label("teacher_data"));
                let mut draw = |rows| {
                    if *regression {
                        task.regression_batch(rows, &mut rng)
                    } else {
                        task.classification_batch(rows, &mut rng)
                    }
                };
                let train = DenseDataset::from_batch(draw(*train_size))?;
                let val = draw(*val_size);
                Ok(LoadedData::Dense {
                    train: Arc::new(train),
                    val,
                })
            }
            DataSpec::Markov {
                vocab,
                tokens,
                seed,
            } => split(markov_corpus(*vocab, *tokens, *seed)?, *vocab),
            DataSpec::Text { path } => {
                let text = std::fs::read_to_string(path)?;
                let (ids, alphabet) = encode_chars(&text);
                split(ids, alphabet.len())
            }
        }
    }
}

fn default_divergence_factor() -> f64 {
    10.0
}

fn default_val_batches() -> usize {
    4
}

/// Everything except the HP point, the scale and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelTemplate,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    pub data: DataSpec,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
    /// Held-out batches for token data, each of `batch_size` windows.
    #[serde(default = "default_val_batches")]
    pub val_batches: usize,
}

/// A trained trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub hp: HpPoint,
    pub scale: ScalePoint,
    pub seed: u64,
    /// Mean of the last tenth of minibatch losses; `inf` if diverged.
    pub train_loss: f64,
    /// Held-out loss at the end of training; `inf` if diverged.
    pub val_loss: f64,
    pub diverged: bool,
    /// Minibatch loss before every update.
    pub losses: Vec<f64>,
}

/// A loaded experiment, shareable across worker threads.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    simulated_width: Option<usize>,
    data: LoadedData,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.model.validate()?;
        spec.optimizer.validate()?;
        spec.schedule.validate()?;
        if !(spec.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        let data = spec.data.load()?;
        match (&spec.model, &data) {
            (ModelTemplate::Mlp(c), LoadedData::Dense { train, val }) => {
                let regression = matches!(
                    val,
                    Batch::Dense {
                        targets: crate::models::Targets::Values(_),
                        ..
                    }
                );
                if c.d_in != train.d_in {
                    return Err(Error::Config(format!(
                        "MLP d_in {} != data d_in {}",
                        c.d_in, train.d_in
                    )));
                }
                if regression != (c.loss == LossKind::Mse) {
                    return Err(Error::Config("MLP loss does not match the task".into()));
                }
            }
            (ModelTemplate::Transformer(c), LoadedData::Tokens { vocab, .. }) => {
                if c.vocab < *vocab {
                    return Err(Error::Config(format!(
                        "vocab {} is smaller than the data's {vocab}",
                        c.vocab
                    )));
                }
            }
            _ => {
                return Err(Error::Config(
                    "model kind does not match the data kind".into(),
                ))
            }
        }
        Ok(Self {
            spec,
            simulated_width: None,
            data,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.spec.model.scheme()
    }

    /// The same experiment under another scheme.
    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        let mut out = self.clone();
        out.spec.model = out.spec.model.with_scheme(scheme);
        out
    }

    /// Models are built at their scale and then given the base of a model of
    /// width `width`.
    pub fn with_simulated_width(&self, width: Option<usize>) -> Self {
        Self {
            simulated_width: width,
            ..self.clone()
        }
    }

    pub fn simulated_width(&self) -> Option<usize> {
        self.simulated_width
    }

    /// Resolved model config for a trial.
    pub fn model_config(&self, scale: &ScalePoint, hp: &HpPoint) -> Result<ModelTemplate> {
        scale.validate()?;
        hp.validate()?;
        let mut m = self.spec.model.at(scale.width_mult, scale.depth)?;
        if let Some(w) = self.simulated_width {
            m = m.simulate_width(w)?;
        }
        hp.apply_model(m.hp_mut())?;
        if let ModelTemplate::Transformer(c) = &m {
            if scale.seq_len > c.context {
                return Err(Error::Config(format!(
                    "seq_len {} exceeds context {}",
                    scale.seq_len, c.context
                )));
            }
        }
        m.validate()?;
        Ok(m)
    }

    fn schedule(&self, scale: &ScalePoint, hp: &HpPoint) -> Result<Schedule> {
        let mut s = self.spec.schedule.clone();
        if let Some(kind) = hp.schedule() {
            s.kind = kind;
        }
        if s.total_steps > 0 && s.total_steps != scale.steps {
            let old = s.total_steps;
            s.milestones = s.milestones.iter().map(|m| m * scale.steps / old).collect();
        }
        s.total_steps = scale.steps;
        s.validate()?;
        Ok(s)
    }

    /// Training minibatch source.
    pub fn train_source(&self) -> DataSource {
        match &self.data {
            LoadedData::Dense { train, .. } => DataSource::Dense(train.clone()),
            LoadedData::Tokens { train, .. } => DataSource::Corpus(train.clone()),
        }
    }

    fn validation(&self, scale: &ScalePoint) -> Result<Vec<Batch>> {
        match &self.data {
            LoadedData::Dense { val, .. } => Ok(vec![val.clone()]),
            LoadedData::Tokens { val, .. } => {
                let mut rng = SeededRng::new(0, label("validation"));
                (0..self.spec.val_batches.max(1))
                    .map(|_| token_batch(val, scale.batch_size, scale.seq_len, &mut rng))
                    .collect()
            }
        }
    }

    /// Builds the model and optimizer of a trial without training.
    pub fn prepare(
        &self,
        hp: &HpPoint,
        scale: &ScalePoint,
        seed: u64,
    ) -> Result<(Model, Optimizer)> {
        let cfg = self.model_config(scale, hp)?;
        let opt_cfg = hp.apply_optimizer(&self.spec.optimizer)?;
        let model = cfg.build(opt_cfg.family(), &SeededRng::new(seed, label("init")))?;
        let optimizer = Optimizer::new(opt_cfg, self.schedule(scale, hp)?, self.spec.clip)?;
        Ok((model, optimizer))
    }

    /// Trains one trial and returns its record and final model. Fully
    /// determined by `(hp, scale, seed)`; the data order depends on the seed
    /// only.
    pub fn run(&self, hp: &HpPoint, scale: &ScalePoint, seed: u64) -> Result<(SweepRecord, Model)> {
        let (mut model, mut optimizer) = self.prepare(hp, scale, seed)?;
        let cfg = TrainConfig {
            steps: scale.steps,
            batch_size: scale.batch_size,
            seq_len: scale.seq_len,
            divergence_factor: self.spec.divergence_factor,
        };
        let mut data_rng = SeededRng::new(seed, label("data"));
        let outcome = train(
            &mut model,
            &mut optimizer,
            &self.train_source(),
            &cfg,
            &mut data_rng,
        )?;
        let train_loss = outcome.final_loss_at(scale.steps);
        let diverged = outcome.diverged || !train_loss.is_finite();
        let val_loss = if diverged {
            f64::INFINITY
        } else {
            evaluate(&model, &self.validation(scale)?)?
        };
        let record = SweepRecord {
            hp: hp.clone(),
            scale: *scale,
            seed,
            train_loss: if diverged { f64::INFINITY } else { train_loss },
            val_loss,
            diverged,
            losses: outcome.losses,
        };
        Ok((record, model))
    }

    pub fn trial(&self, hp: &HpPoint, scale: &ScalePoint, seed: u64) -> Result<SweepRecord> {
        self.run(hp, scale, seed).map(|(r, _)| r)
    }
}
