//! Knowledge distillation from a frozen teacher into a student sequence
//! model, plus side-by-side reporting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Channel, EdReport};
use crate::models::seq::{
    fit, prepare, SeqModel, SeqModelConfig, SoftTargets, StepDistributions, TrainExample, TrainingMeta,
};
use crate::scalar::Scalar;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub student: SeqModelConfig,
    /// Weight on the KL term.
    #[serde(default = "one")]
    pub lambda_kl: f64,
    /// Softening temperature applied to teacher and student logits.
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn new(student: SeqModelConfig) -> Self {
        Self { student, lambda_kl: 1.0, temperature: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_kl.is_finite() || self.lambda_kl < 0.0 {
            return Err(Error::Config(format!("lambda_kl must be a non-negative number (got {})", self.lambda_kl)));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive (got {})", self.temperature)));
        }
        self.student.validate()
    }
}

/// `KL(p || q)` for probability vectors, with `0 ln 0 = 0`.
pub fn kl_divergence<F: Scalar>(p: &[F], q: &[F]) -> F {
    p.iter().zip(q).filter(|(&pi, _)| pi > F::zero()).map(|(&pi, &qi)| pi * (pi.ln() - qi.ln())).sum()
}

/// The teacher's softened verb and noun distributions for every future
/// step of every example.
pub fn teacher_token_distributions<F: Scalar>(
    teacher: &SeqModel<F>,
    taxonomy: &Taxonomy,
    examples: &[TrainExample],
    temperature: f64,
) -> Result<Vec<StepDistributions<F>>> {
    teacher.check_taxonomy(taxonomy)?;
    let tau = F::of(temperature);
    examples.par_iter().map(|e| teacher.future_distributions(&e.observed, e.goal.as_deref(), &e.future, tau)).collect()
}

/// Trains a fresh student on cross-entropy plus `lambda_kl` times the
/// per-step `KL(teacher || student)`. With `lambda_kl = 0` this is the same
/// run as plain training with the student's seed.
pub fn distill_train<F: Scalar>(
    teacher: &SeqModel<F>,
    examples: &[TrainExample],
    taxonomy: &Taxonomy,
    config: &DistillConfig,
) -> Result<SeqModel<F>> {
    config.validate()?;
    let before = teacher.param_hash();
    let goals = prepare(examples, taxonomy, &config.student)?;
    let soft = SoftTargets {
        per_example: teacher_token_distributions(teacher, taxonomy, examples, config.temperature)?,
        weight: config.lambda_kl,
        temperature: config.temperature,
    };
    let mut student = SeqModel::init(&config.student, taxonomy, &goals)?;
    let curve = fit(&mut student, examples, Some(&soft))?;
    if teacher.param_hash() != before {
        return Err(Error::Checkpoint("teacher parameters changed during distillation".into()));
    }
    student.set_meta(TrainingMeta {
        seed: config.student.seed,
        n_seg: examples[0].observed.len(),
        z: examples[0].future.len(),
        n_examples: examples.len(),
        loss_curve: curve,
    });
    Ok(student)
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub spread: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, spread: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let spread = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, spread }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub verb: Stat,
    pub noun: Stat,
    pub action: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub scratch_action: f64,
    pub distilled_action: f64,
    /// `distilled - scratch`; negative means distillation helped.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentComparison {
    /// `teacher` (when given), `scratch` and `distilled`.
    pub rows: Vec<ComparisonRow>,
    pub per_seed: Vec<SeedDelta>,
    /// Seeds where the distilled student has strictly lower action ED.
    pub wins: usize,
    /// One-sided sign-test p-value over non-tied seeds.
    pub sign_test_p: f64,
}

/// One seed's evaluation of a scratch and a distilled student.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentRun {
    pub seed: u64,
    pub scratch: EdReport,
    pub distilled: EdReport,
}

fn row(model: &str, reports: &[&EdReport]) -> ComparisonRow {
    let stat = |c: Channel| Stat::of(&reports.iter().map(|r| r.get(c)).collect::<Vec<_>>());
    ComparisonRow {
        model: model.into(),
        verb: stat(Channel::Verb),
        noun: stat(Channel::Noun),
        action: stat(Channel::Action),
    }
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            total += c;
        }
    }
    total / 2f64.powi(n as i32)
}

pub fn compare_students(teacher: Option<&EdReport>, runs: &[StudentRun]) -> StudentComparison {
    let mut rows = Vec::new();
    if let Some(t) = teacher {
        rows.push(row("teacher", &[t]));
    }
    rows.push(row("scratch", &runs.iter().map(|r| &r.scratch).collect::<Vec<_>>()));
    rows.push(row("distilled", &runs.iter().map(|r| &r.distilled).collect::<Vec<_>>()));
    let per_seed: Vec<SeedDelta> = runs
        .iter()
        .map(|r| SeedDelta {
            seed: r.seed,
            scratch_action: r.scratch.action_ed,
            distilled_action: r.distilled.action_ed,
            delta: r.distilled.action_ed - r.scratch.action_ed,
        })
        .collect();
    let wins = per_seed.iter().filter(|d| d.delta < 0.0).count();
    let decided = per_seed.iter().filter(|d| d.delta != 0.0).count();
    StudentComparison { rows, per_seed, wins, sign_test_p: sign_test(wins, decided) }
}
