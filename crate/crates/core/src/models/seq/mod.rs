//! Compact transformer sequence model over action tokens.
//!
//! Each step is one token whose embedding is the sum of a verb and a noun
//! embedding. Two linear heads read verb and noun logits. Attention is
//! causal in both decode modes, so the first predicted step sees exactly
//! the same context whether decoding is parallel or autoregressive.

mod net;
mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use train::{fit, prepare};
pub use train::{train_seq_model, SoftTargets, StepDistributions, TrainExample};

use self::net::{Dims, Layout, Token};
use super::{ActionModel, DecodeContext};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::taxonomy::{ActionLabel, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Future steps are read from learned query tokens in one pass.
    #[default]
    Parallel,
    /// Future steps are fed back as inputs (teacher forcing while training).
    Autoregressive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64, nesterov: bool },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9, nesterov: true }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_hidden() -> usize {
    32
}
fn d_ff_mult() -> usize {
    4
}
fn d_ctx() -> usize {
    32
}
fn d_lr() -> f64 {
    0.05
}
fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    16
}
fn d_warmup() -> usize {
    2
}
fn d_clip() -> f64 {
    1.0
}
fn d_init() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "d_ff_mult")]
    pub ff_mult: usize,
    /// Maximum input tokens, including the goal token.
    #[serde(default = "d_ctx")]
    pub context_len: usize,
    #[serde(default)]
    pub decode_mode: DecodeMode,
    #[serde(default)]
    pub goal_conditioning: bool,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Standard deviation of the output-head initialization.
    #[serde(default = "d_init")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SeqModelConfig {
    fn default() -> Self {
        Self {
            layers: d_layers(),
            heads: d_heads(),
            hidden_dim: d_hidden(),
            ff_mult: d_ff_mult(),
            context_len: d_ctx(),
            decode_mode: DecodeMode::default(),
            goal_conditioning: false,
            learning_rate: d_lr(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            warmup_epochs: d_warmup(),
            optimizer: OptimizerKind::default(),
            grad_clip: d_clip(),
            init_std: d_init(),
            seed: 0,
        }
    }
}

impl SeqModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_mult == 0 || self.context_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }

    /// Tokens needed for `n_seg` observed and `z` future steps.
    pub fn required_context(&self, n_seg: usize, z: usize) -> usize {
        n_seg + z + usize::from(self.goal_conditioning)
    }
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub n_seg: usize,
    pub z: usize,
    pub n_examples: usize,
    pub loss_curve: Vec<f64>,
}

/// A trained (or freshly initialized) sequence model; also the checkpoint
/// payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel<F> {
    config: SeqModelConfig,
    num_verbs: usize,
    num_nouns: usize,
    /// Goal vocabulary; index 0 is the null goal.
    goals: Vec<String>,
    taxonomy_fingerprint: String,
    pub(crate) meta: TrainingMeta,
    params: Vec<F>,
    layout: Layout,
    dims: Dims,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

fn dims_for(config: &SeqModelConfig, num_verbs: usize, num_nouns: usize, n_goals: usize) -> Dims {
    Dims {
        d: config.hidden_dim,
        heads: config.heads,
        ff: config.hidden_dim * config.ff_mult,
        layers: config.layers,
        n_verbs: num_verbs,
        n_nouns: num_nouns,
        n_goals: if config.goal_conditioning { n_goals } else { 0 },
        query: config.decode_mode == DecodeMode::Parallel,
        ctx: config.context_len,
    }
}

impl<F: Scalar> SeqModel<F> {
    /// Fresh parameters drawn from the config seed's `init` substream.
    pub fn init(config: &SeqModelConfig, taxonomy: &Taxonomy, goals: &[String]) -> Result<Self> {
        config.validate()?;
        let mut goal_vocab = vec![String::new()];
        goal_vocab.extend(goals.iter().filter(|g| !g.is_empty()).cloned());
        let dims = dims_for(config, taxonomy.num_verbs(), taxonomy.num_nouns(), goal_vocab.len());
        let layout = Layout::new(&dims);
        let mut model = Self {
            config: config.clone(),
            num_verbs: taxonomy.num_verbs(),
            num_nouns: taxonomy.num_nouns(),
            goals: if config.goal_conditioning { goal_vocab } else { vec![String::new()] },
            taxonomy_fingerprint: taxonomy.fingerprint(),
            meta: TrainingMeta { seed: config.seed, ..Default::default() },
            params: vec![F::zero(); layout.total],
            layout,
            dims,
        };
        model.randomize(&mut seed::substream(config.seed, "init"));
        Ok(model)
    }

    fn randomize(&mut self, rng: &mut seed::Rng) {
        let d = self.dims.d;
        let lay = self.layout.clone();
        let p = &mut self.params;
        let mut fill = |p: &mut [F], std: f64| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in p.iter_mut() {
                *v = F::of(normal.sample(rng));
            }
        };
        let emb_std = 1.0 / (d as f64).sqrt();
        fill(&mut p[lay.verb_emb..lay.verb_emb + self.dims.n_verbs * d], emb_std);
        fill(&mut p[lay.noun_emb..lay.noun_emb + self.dims.n_nouns * d], emb_std);
        if let Some(g) = lay.goal_emb {
            fill(&mut p[g..g + self.dims.n_goals * d], emb_std);
        }
        if let Some(q) = lay.query_emb {
            fill(&mut p[q..q + d], emb_std);
        }
        fill(&mut p[lay.pos_emb..lay.pos_emb + self.dims.ctx * d], emb_std);
        let ff = self.dims.ff;
        let resid = 1.0 / ((2 * self.dims.layers) as f64).sqrt();
        for ll in &lay.layers {
            for w in [ll.wq, ll.wk, ll.wv] {
                fill(&mut p[w..w + d * d], 1.0 / (d as f64).sqrt());
            }
            fill(&mut p[ll.wo..ll.wo + d * d], resid / (d as f64).sqrt());
            fill(&mut p[ll.w1..ll.w1 + d * ff], 1.0 / (d as f64).sqrt());
            fill(&mut p[ll.w2..ll.w2 + ff * d], resid / (ff as f64).sqrt());
            p[ll.ln1_g..ll.ln1_g + d].fill(F::one());
            p[ll.ln2_g..ll.ln2_g + d].fill(F::one());
        }
        p[lay.lnf_g..lay.lnf_g + d].fill(F::one());
        fill(&mut p[lay.verb_head..lay.verb_head + d * self.dims.n_verbs], self.config.init_std);
        fill(&mut p[lay.noun_head..lay.noun_head + d * self.dims.n_nouns], self.config.init_std);
    }

    pub(crate) fn from_parts(
        config: SeqModelConfig,
        num_verbs: usize,
        num_nouns: usize,
        goals: Vec<String>,
        taxonomy_fingerprint: String,
        meta: TrainingMeta,
        params: Vec<F>,
    ) -> Result<Self> {
        config.validate()?;
        if goals.first().map(String::as_str) != Some("") {
            return Err(Error::Checkpoint("goal vocabulary must start with the null goal".into()));
        }
        let dims = dims_for(&config, num_verbs, num_nouns, goals.len());
        let layout = Layout::new(&dims);
        if layout.total != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, num_verbs, num_nouns, goals, taxonomy_fingerprint, meta, params, layout, dims })
    }

    pub fn config(&self) -> &SeqModelConfig {
        &self.config
    }

    pub fn goals(&self) -> &[String] {
        &self.goals
    }

    pub fn taxonomy_fingerprint(&self) -> &str {
        &self.taxonomy_fingerprint
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub(crate) fn set_meta(&mut self, meta: TrainingMeta) {
        self.meta = meta;
    }

    pub fn loss_curve(&self) -> &[f64] {
        &self.meta.loss_curve
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut buf = Vec::with_capacity(self.params.len() * F::WIDTH);
        for &p in &self.params {
            p.write_le(&mut buf);
        }
        hex::encode(Sha256::digest(&buf))
    }

    /// The same weights viewed under another decode mode. Switching to
    /// parallel adds a zero query embedding; switching away drops it.
    pub fn with_decode_mode(&self, mode: DecodeMode) -> Self {
        if mode == self.config.decode_mode {
            return self.clone();
        }
        let mut config = self.config.clone();
        config.decode_mode = mode;
        let dims = dims_for(&config, self.num_verbs, self.num_nouns, self.goals.len());
        let layout = Layout::new(&dims);
        let d = self.dims.d;
        let mut params = Vec::with_capacity(layout.total);
        match (self.layout.query_emb, layout.query_emb) {
            (Some(q), None) => {
                params.extend_from_slice(&self.params[..q]);
                params.extend_from_slice(&self.params[q + d..]);
            }
            (None, Some(q)) => {
                params.extend_from_slice(&self.params[..q]);
                params.extend(std::iter::repeat_n(F::zero(), d));
                params.extend_from_slice(&self.params[q..]);
            }
            _ => unreachable!("decode modes differ only in the query embedding"),
        }
        debug_assert_eq!(params.len(), layout.total);
        Self { config, params, layout, dims, ..self.clone() }
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if taxonomy.fingerprint() != self.taxonomy_fingerprint {
            return Err(Error::ConfigMismatch("model was trained against a different taxonomy".into()));
        }
        Ok(())
    }

    fn goal_index(&self, goal: Option<&str>) -> usize {
        match goal {
            Some(g) if !g.is_empty() => self.goals.iter().position(|x| x == g).unwrap_or_else(|| {
                log::debug!("unknown goal {g:?}; using the null goal");
                0
            }),
            _ => 0,
        }
    }

    /// Input tokens for `observed` followed by `steps` future slots, and the
    /// readout row predicting each of `n_readouts` future steps.
    fn build_inputs(
        &self,
        observed: &[ActionLabel],
        goal: Option<&str>,
        continuation: &[ActionLabel],
        n_readouts: usize,
    ) -> Result<(Vec<Token>, Vec<usize>)> {
        if observed.is_empty() {
            return Err(Error::Shape("at least one observed action is required".into()));
        }
        let mut tokens = Vec::with_capacity(self.config.context_len);
        if self.config.goal_conditioning {
            tokens.push(Token::Goal(self.goal_index(goal)));
        }
        tokens.extend(observed.iter().map(|&l| Token::Action(l)));
        let last_observed = tokens.len() - 1;
        let extra = n_readouts.saturating_sub(1);
        match self.config.decode_mode {
            DecodeMode::Parallel => tokens.extend(std::iter::repeat_n(Token::Query, extra)),
            DecodeMode::Autoregressive => tokens.extend(continuation[..extra].iter().map(|&l| Token::Action(l))),
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Shape(format!(
                "{} input tokens exceed the context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        Ok((tokens, (last_observed..last_observed + n_readouts).collect()))
    }

    /// Raw verb and noun logits for every future step, with teacher-forced
    /// inputs in autoregressive mode.
    pub fn future_logits(
        &self,
        observed: &[ActionLabel],
        goal: Option<&str>,
        future: &[ActionLabel],
    ) -> Result<Vec<(Vec<F>, Vec<F>)>> {
        let (tokens, readouts) = self.build_inputs(observed, goal, future, future.len())?;
        let fwd = net::forward(&self.params, &self.layout, &self.dims, &tokens);
        Ok(readouts.iter().map(|&r| net::readout(&self.params, &self.layout, &self.dims, &fwd, r)).collect())
    }

    /// Per-step verb and noun distributions at `temperature`.
    pub fn future_distributions(
        &self,
        observed: &[ActionLabel],
        goal: Option<&str>,
        future: &[ActionLabel],
        temperature: F,
    ) -> Result<Vec<(Vec<F>, Vec<F>)>> {
        Ok(self
            .future_logits(observed, goal, future)?
            .into_iter()
            .map(|(v, n)| (net::softmax(&v, temperature), net::softmax(&n, temperature)))
            .collect())
    }
}

impl<F: Scalar> ActionModel for SeqModel<F> {
    fn num_verbs(&self) -> usize {
        self.num_verbs
    }

    fn num_nouns(&self) -> usize {
        self.num_nouns
    }

    fn goal_conditioned(&self) -> bool {
        self.config.goal_conditioning
    }

    fn next_distribution(&self, ctx: &DecodeContext<'_>, generated: &[ActionLabel]) -> Result<Vec<f64>> {
        let step = generated.len();
        let (tokens, readouts) = self.build_inputs(ctx.observed, ctx.goal, generated, step + 1)?;
        let fwd = net::forward(&self.params, &self.layout, &self.dims, &tokens);
        let (lv, ln) = net::readout(&self.params, &self.layout, &self.dims, &fwd, readouts[step]);
        let pv = net::softmax(&lv, F::one());
        let pn = net::softmax(&ln, F::one());
        let mut joint = Vec::with_capacity(self.num_verbs * self.num_nouns);
        for &a in &pv {
            for &b in &pn {
                joint.push(a.as_f64() * b.as_f64());
            }
        }
        Ok(joint)
    }
}

#[cfg(test)]
mod tests;
