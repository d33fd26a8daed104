use std::collections::BTreeSet;

use rand::Rng as _;

use super::net;
use super::{OptimizerKind, SeqModel, SeqModelConfig, TrainingMeta};
use crate::dataset::LtaInstance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::taxonomy::{ActionLabel, Taxonomy};

/// One supervised sequence: observed prefix, future targets, optional goal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub observed: Vec<ActionLabel>,
    pub future: Vec<ActionLabel>,
    pub goal: Option<String>,
}

impl From<&LtaInstance> for TrainExample {
    fn from(i: &LtaInstance) -> Self {
        Self { observed: i.observed.clone(), future: i.future_gt.clone(), goal: i.goal.clone() }
    }
}

/// Per-step `(verb, noun)` distributions of one example.
pub type StepDistributions<F> = Vec<(Vec<F>, Vec<F>)>;

/// One example's teacher rows, KL weight and temperature.
type SoftSlice<'a, F> = (&'a [(Vec<F>, Vec<F>)], f64, f64);

/// Frozen teacher distributions for every example and future step, already
/// softened at `temperature`.
#[derive(Debug, Clone)]
pub struct SoftTargets<F> {
    pub per_example: Vec<StepDistributions<F>>,
    pub weight: f64,
    pub temperature: f64,
}

/// `sum p * (ln p - ln q)` with `0 ln 0 = 0`.
fn kl<F: Scalar>(p: &[F], log_q: &[F]) -> F {
    p.iter().zip(log_q).filter(|(&pi, _)| pi > F::zero()).map(|(&pi, &lq)| pi * (pi.ln() - lq)).sum()
}

impl<F: Scalar> SeqModel<F> {
    /// Loss of one example and its logit gradients, accumulated into `grad`
    /// with weight `scale`.
    fn example_loss_grad(
        &self,
        ex: &TrainExample,
        soft: Option<SoftSlice<'_, F>>,
        scale: F,
        grad: &mut [F],
    ) -> Result<F> {
        let z = ex.future.len();
        let (tokens, readouts) = self.build_inputs(&ex.observed, ex.goal.as_deref(), &ex.future, z)?;
        let fwd = net::forward(&self.params, &self.layout, &self.dims, &tokens);
        let per_step = F::of(1.0 / z as f64);
        let mut loss = F::zero();
        let mut dlogits = Vec::with_capacity(z);
        for (k, &pos) in readouts.iter().enumerate() {
            let (lv, ln) = net::readout(&self.params, &self.layout, &self.dims, &fwd, pos);
            let mut heads = [(lv, ex.future[k].verb), (ln, ex.future[k].noun)].map(|(logits, target)| {
                let logp = net::log_softmax(&logits, F::one());
                let mut d: Vec<F> = logp.iter().map(|&l| l.exp() * per_step).collect();
                d[target] -= per_step;
                (logits, logp[target], d)
            });
            for (_, lp, _) in &heads {
                loss -= *lp * per_step;
            }
            if let Some((targets, weight, tau)) = soft.filter(|s| s.1 > 0.0) {
                let tau_f = F::of(tau);
                let w = F::of(weight);
                let (tv, tn) = &targets[k];
                for ((logits, _, d), teacher) in heads.iter_mut().zip([tv, tn]) {
                    let log_ps = net::log_softmax(logits, tau_f);
                    loss += w * tau_f * tau_f * kl(teacher, &log_ps) * per_step;
                    for ((dv, &lq), &pt) in d.iter_mut().zip(&log_ps).zip(teacher.iter()) {
                        *dv += w * tau_f * (lq.exp() - pt) * per_step;
                    }
                }
            }
            let [(_, _, dv), (_, _, dn)] = heads;
            dlogits.push((dv.into_iter().map(|g| g * scale).collect(), dn.into_iter().map(|g| g * scale).collect()));
        }
        net::backward(&self.params, &self.layout, &self.dims, &fwd, &readouts, &dlogits, grad);
        Ok(loss)
    }

    fn batch_loss_grad(
        &self,
        examples: &[TrainExample],
        idxs: &[usize],
        soft: Option<&SoftTargets<F>>,
    ) -> Result<(F, Vec<F>)> {
        let mut grad = vec![F::zero(); self.params.len()];
        let scale = F::of(1.0 / idxs.len() as f64);
        let mut loss = F::zero();
        for &i in idxs {
            let s = soft.map(|s| (&s.per_example[i][..], s.weight, s.temperature));
            loss += self.example_loss_grad(&examples[i], s, scale, &mut grad)?;
        }
        Ok((loss * scale, grad))
    }

    /// Mean training objective over `examples` and its exact gradient with
    /// respect to every parameter. With `soft`, adds the weighted per-step
    /// KL(teacher || student) term.
    pub fn objective(&self, examples: &[TrainExample], soft: Option<&SoftTargets<F>>) -> Result<(F, Vec<F>)> {
        let idxs: Vec<usize> = (0..examples.len()).collect();
        self.batch_loss_grad(examples, &idxs, soft)
    }
}

enum OptState<F> {
    Sgd { velocity: Vec<F>, momentum: F, nesterov: bool },
    Adam { m: Vec<F>, v: Vec<F>, beta1: F, beta2: F, eps: F, t: i32 },
}

impl<F: Scalar> OptState<F> {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd { momentum, nesterov } => {
                OptState::Sgd { velocity: vec![F::zero(); n], momentum: F::of(momentum), nesterov }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => OptState::Adam {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
                beta1: F::of(beta1),
                beta2: F::of(beta2),
                eps: F::of(eps),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [F], grad: &[F], lr: F) {
        match self {
            OptState::Sgd { velocity, momentum, nesterov } => {
                for ((p, &g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = *momentum * *v + g;
                    let update = if *nesterov { g + *momentum * *v } else { *v };
                    *p -= lr * update;
                }
            }
            OptState::Adam { m, v, beta1, beta2, eps, t } => {
                *t += 1;
                let c1 = F::one() - beta1.powi(*t);
                let c2 = F::one() - beta2.powi(*t);
                for (((p, &g), mi), vi) in params.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = *beta1 * *mi + (F::one() - *beta1) * g;
                    *vi = *beta2 * *vi + (F::one() - *beta2) * g * g;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Linear warm-up followed by cosine decay to zero.
fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn clip<F: Scalar>(grad: &mut [F], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|&g| g * g).sum::<F>().sqrt().as_f64();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

/// Runs the configured optimizer over `examples`; returns the per-epoch mean
/// loss curve.
pub(crate) fn fit<F: Scalar>(
    model: &mut SeqModel<F>,
    examples: &[TrainExample],
    soft: Option<&SoftTargets<F>>,
) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let n = examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_epochs * steps_per_epoch).min(total.saturating_sub(1));
    let mut opt = OptState::new(cfg.optimizer, model.params.len());
    let mut rng = seed::substream(cfg.seed, "data");
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = model.batch_loss_grad(examples, batch, soft)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            clip(&mut grad, cfg.grad_clip);
            let lr = F::of(learning_rate(cfg.learning_rate, step, warmup, total));
            opt.step(&mut model.params, &grad, lr);
            step += 1;
        }
        let mean = epoch_loss / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok(curve)
}

/// Checks shapes and labels, and collects the goal vocabulary.
pub(crate) fn prepare(examples: &[TrainExample], taxonomy: &Taxonomy, config: &SeqModelConfig) -> Result<Vec<String>> {
    config.validate()?;
    let Some(first) = examples.first() else {
        return Err(Error::EmptyCorpus);
    };
    for ex in examples {
        if ex.future.is_empty() || ex.observed.is_empty() {
            return Err(Error::Shape("examples need observed and future actions".into()));
        }
        if ex.future.len() != first.future.len() {
            return Err(Error::Shape("all examples must share the prediction horizon".into()));
        }
        let need = config.required_context(ex.observed.len(), ex.future.len()) - 1;
        if need > config.context_len {
            return Err(Error::Config(format!(
                "context_len {} is too small for {} observed + {} future steps",
                config.context_len,
                ex.observed.len(),
                ex.future.len()
            )));
        }
        for &l in ex.observed.iter().chain(&ex.future) {
            taxonomy.check(l)?;
        }
    }
    let goals: BTreeSet<String> = examples.iter().filter_map(|e| e.goal.clone()).filter(|g| !g.is_empty()).collect();
    Ok(goals.into_iter().collect())
}

/// Trains a fresh model with cross-entropy over every future step.
pub fn train_seq_model<F: Scalar>(
    examples: &[TrainExample],
    taxonomy: &Taxonomy,
    config: &SeqModelConfig,
) -> Result<SeqModel<F>> {
    let goals = prepare(examples, taxonomy, config)?;
    let mut model = SeqModel::init(config, taxonomy, &goals)?;
    let curve = fit(&mut model, examples, None)?;
    model.meta = TrainingMeta {
        seed: config.seed,
        n_seg: examples[0].observed.len(),
        z: examples[0].future.len(),
        n_examples: examples.len(),
        loss_curve: curve,
    };
    Ok(model)
}
