//! End-to-end experiment runs and the run directory layout.
//!
//! ```text
//! <output_dir>/<name>/
//!   manifest.json      config, config hash, git hash, taxonomy fingerprint
//!   report.json        metrics; byte-identical across reproducible re-runs
//!   predictions.jsonl  candidate sets per test instance
//!   incidents.json     LLM output incident rates (LLM approaches)
//!   prompts/           rendered prompts (LLM approaches)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{
    Approach, DataConfig, ExperimentConfig, GoalSource, LlmBackendConfig, LlmSettings, LocalModelConfig, MockBehavior,
    Precision,
};
use super::counterfactual::{goal_keyed_responder, run_counterfactual, CounterfactualReport, CounterfactualSettings};
use super::synth::{apply_label_noise, generate_synthetic};
use crate::dataset::{
    corrupt_observations, ingest_annotations, make_lta_instances, LtaInstance, Split, VideoAnnotation,
};
use crate::distill::{compare_students, distill_train, DistillConfig, StudentComparison, StudentRun};
use crate::error::{Error, Result};
use crate::llm::prompt::cot_output;
use crate::llm::{
    build_cot_prompt, build_finetune_samples, build_goal_prompt, build_icl_prompt, fill_instruction, parse_cot,
    plant_fault, sample_examples, write_finetune_jsonl, FaultMode, HttpBackend, LlmBackend, LlmClient, LlmRequest,
    MockLlm, PromptBundle, ResponseCache, Templates,
};
use crate::metrics::{evaluate_lta, write_predictions, CandidateSet, EdOptions, EdReport};
use crate::models::ngram::{train_ngram, NgramModel};
use crate::models::seq::{train_seq_model, SeqModel, SeqModelConfig, TrainExample};
use crate::models::{predict, predict_topdown, ActionModel, Strategy};
use crate::postprocess::{most_frequent_action, postprocess_candidates, IncidentStats};
use crate::scalar::Scalar;
use crate::seed;
use crate::taxonomy::{ActionLabel, LabelRendering, Taxonomy};

/// A taxonomy with its annotated videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub videos: Vec<VideoAnnotation>,
}

impl Dataset {
    /// Instances of `split`, sorted by id.
    pub fn instances(&self, split: Split, n_seg: usize, z: usize) -> Result<Vec<LtaInstance>> {
        let mut out = Vec::new();
        for v in self.videos.iter().filter(|v| v.split == split) {
            out.extend(make_lta_instances(v, n_seg, z)?);
        }
        Ok(out)
    }

    /// Test when any test video exists, otherwise validation.
    pub fn eval_split(&self) -> Split {
        if self.videos.iter().any(|v| v.split == Split::Test) {
            Split::Test
        } else {
            Split::Val
        }
    }
}

pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    match (&data.synthetic, &data.taxonomy, &data.annotations) {
        (Some(s), None, None) => {
            let mut corpus = generate_synthetic(&s.grammar, s.n_videos, s.video_len, s.test_fraction)?;
            if s.train_label_noise > 0.0 {
                apply_label_noise(
                    &mut corpus.videos,
                    Split::Train,
                    s.train_label_noise,
                    s.grammar.seed,
                    &corpus.taxonomy,
                );
            }
            Ok(Dataset { taxonomy: corpus.taxonomy, videos: corpus.videos })
        }
        (None, Some(t), Some(a)) => {
            let taxonomy = Taxonomy::load(t)?;
            let videos = ingest_annotations(a, &taxonomy)?;
            Ok(Dataset { taxonomy, videos })
        }
        _ => Err(Error::Config("data needs either taxonomy + annotations files or a synthetic grammar".into())),
    }
}

/// A trained local model of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalModel {
    Ngram(NgramModel),
    NeuralF32(SeqModel<f32>),
    NeuralF64(SeqModel<f64>),
}

impl LocalModel {
    pub fn as_model(&self) -> &(dyn ActionModel + Sync) {
        match self {
            LocalModel::Ngram(m) => m,
            LocalModel::NeuralF32(m) => m,
            LocalModel::NeuralF64(m) => m,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            LocalModel::Ngram(m) => m.save(path),
            LocalModel::NeuralF32(m) => m.save(path),
            LocalModel::NeuralF64(m) => m.save(path),
        }
    }

    /// Detects checkpoints by their magic bytes and scalar width; anything
    /// else is read as an n-gram JSON file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(crate::models::checkpoint::MAGIC) {
            return match bytes.get(12) {
                Some(4) => Ok(LocalModel::NeuralF32(SeqModel::from_bytes(&bytes)?)),
                Some(8) => Ok(LocalModel::NeuralF64(SeqModel::from_bytes(&bytes)?)),
                _ => Err(Error::Checkpoint("unknown scalar width".into())),
            };
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("not a checkpoint or n-gram file".into()))?;
        Ok(LocalModel::Ngram(NgramModel::from_json(&text)?))
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            LocalModel::Ngram(_) => "model.ngram.json",
            _ => "model.ckpt",
        }
    }

    /// Rejects models trained for a different taxonomy, where detectable.
    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        match self {
            LocalModel::Ngram(m) => {
                if (m.num_verbs(), m.num_nouns()) != (taxonomy.num_verbs(), taxonomy.num_nouns()) {
                    return Err(Error::ConfigMismatch("n-gram vocabulary sizes differ from the taxonomy".into()));
                }
                Ok(())
            }
            LocalModel::NeuralF32(m) => m.check_taxonomy(taxonomy),
            LocalModel::NeuralF64(m) => m.check_taxonomy(taxonomy),
        }
    }
}

pub fn train_local(
    config: &LocalModelConfig,
    precision: Precision,
    train: &[LtaInstance],
    taxonomy: &Taxonomy,
    goal_conditioning: bool,
) -> Result<LocalModel> {
    match config {
        LocalModelConfig::Ngram { order, alpha } => {
            Ok(LocalModel::Ngram(train_ngram(train, taxonomy, *order, *alpha, goal_conditioning)?))
        }
        LocalModelConfig::Neural(c) => {
            let cfg = SeqModelConfig { goal_conditioning, ..c.clone() };
            let examples: Vec<TrainExample> = train.iter().map(TrainExample::from).collect();
            Ok(match precision {
                Precision::F32 => LocalModel::NeuralF32(train_seq_model(&examples, taxonomy, &cfg)?),
                Precision::F64 => LocalModel::NeuralF64(train_seq_model(&examples, taxonomy, &cfg)?),
            })
        }
    }
}

/// Decodes every instance in parallel. With `goals`, decoding is top-down
/// using each instance's entry (the null goal when absent). Sampling seeds
/// are re-derived per instance.
pub fn predict_local<M: ActionModel + Sync + ?Sized>(
    model: &M,
    instances: &[LtaInstance],
    z: usize,
    k: usize,
    strategy: Strategy,
    goals: Option<&BTreeMap<String, String>>,
) -> Result<BTreeMap<String, CandidateSet>> {
    instances
        .par_iter()
        .map(|inst| {
            let id = inst.id();
            let strategy = match strategy {
                Strategy::TopP { p, temperature, seed } => {
                    Strategy::TopP { p, temperature, seed: seed::derive(seed, &id) }
                }
                s => s,
            };
            let cands = match goals {
                Some(g) => {
                    predict_topdown(model, &inst.observed, g.get(&id).map_or("", String::as_str), z, k, strategy)?
                }
                None => predict(model, &inst.observed, z, k, strategy)?,
            };
            Ok((id, cands))
        })
        .collect()
}

pub fn evaluate_instances(predictions: &BTreeMap<String, CandidateSet>, instances: &[LtaInstance]) -> Result<EdReport> {
    let gts: Vec<(String, Vec<ActionLabel>)> = instances.iter().map(|i| (i.id(), i.future_gt.clone())).collect();
    Ok(evaluate_lta(predictions, &gts, EdOptions::default())?.without_breakdown())
}

/// Corrupts observations at `rate`, seeded per instance.
pub fn recognize(instances: &[LtaInstance], rate: f64, run_seed: u64, taxonomy: &Taxonomy) -> Result<Vec<LtaInstance>> {
    if rate == 0.0 {
        return Ok(instances.to_vec());
    }
    instances.iter().map(|i| corrupt_observations(i, rate, run_seed, taxonomy)).collect()
}

/// What the oracle mock answers for a job.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleAnswer {
    Actions(Vec<ActionLabel>),
    Goal(String),
    Cot { goal: String, actions: Vec<ActionLabel> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmJob {
    pub instance_id: String,
    pub bundle: PromptBundle,
    pub n: usize,
    pub temperature: f64,
    pub answer: OracleAnswer,
}

fn oracle_text(answer: &OracleAnswer, fault: FaultMode, rendering: &LabelRendering) -> String {
    match answer {
        OracleAnswer::Actions(a) => plant_fault(a, fault, rendering),
        OracleAnswer::Goal(g) => g.clone(),
        OracleAnswer::Cot { goal, actions } => cot_output(goal, &plant_fault(actions, fault, rendering)),
    }
}

/// Backend for `jobs`: the configured endpoint, or a mock scripted from the
/// jobs' oracle answers.
pub fn resolve_backend(
    settings: &LlmSettings,
    jobs: &[LlmJob],
    rendering: &LabelRendering,
    z: usize,
) -> Arc<dyn LlmBackend> {
    let behavior = match &settings.backend {
        LlmBackendConfig::Http(h) => return Arc::new(HttpBackend::new(h.clone())),
        LlmBackendConfig::Mock(b) => b,
    };
    if *behavior == MockBehavior::GoalKeyed {
        return Arc::new(MockLlm::new().responder(goal_keyed_responder(rendering.clone(), z)));
    }
    let total: usize = jobs.iter().map(|j| j.n).sum();
    let faults = match behavior {
        MockBehavior::Faulty { plan } => plan.assign(total),
        _ => vec![FaultMode::Clean; total],
    };
    let mut mock = MockLlm::new();
    let mut at = 0;
    for job in jobs {
        let texts = faults[at..at + job.n].iter().map(|&f| oracle_text(&job.answer, f, rendering)).collect();
        at += job.n;
        mock = mock.script(&job.bundle.render(), texts);
    }
    Arc::new(mock)
}

pub fn build_client(settings: &LlmSettings, backend: Arc<dyn LlmBackend>, run_dir: &Path) -> Result<LlmClient> {
    let cache_path = match (&settings.cache, &settings.backend) {
        (Some(p), _) if p.is_absolute() => Some(p.clone()),
        (Some(p), _) => Some(run_dir.join(p)),
        (None, LlmBackendConfig::Http(_)) => Some(run_dir.join("llm_cache.jsonl")),
        (None, LlmBackendConfig::Mock(_)) => None,
    };
    let cache = match cache_path {
        Some(p) => ResponseCache::open(&p)?,
        None => ResponseCache::in_memory(),
    };
    Ok(LlmClient::new(backend)
        .with_cache(cache)
        .with_retry(settings.retry)
        .with_max_in_flight(settings.max_in_flight)
        .with_max_tokens(settings.max_tokens))
}

/// Runs all jobs and returns their completions in job order.
pub fn run_jobs(client: &LlmClient, jobs: &[LlmJob]) -> Result<Vec<Vec<String>>> {
    let requests: Vec<LlmRequest> =
        jobs.iter().map(|j| client.request(j.bundle.render(), j.n, j.temperature)).collect();
    client.complete_many(&requests).into_iter().map(|r| r.map(|r| r.completions)).collect()
}

fn templates(settings: &LlmSettings) -> Result<Templates> {
    match &settings.templates_dir {
        Some(d) => Templates::from_dir(d),
        None => Ok(Templates::default()),
    }
}

fn example_seed(run_seed: u64, instance: &LtaInstance) -> u64 {
    seed::derive(run_seed, &format!("icl/{}", instance.id()))
}

/// Goal-inference jobs: `observed => goal` examples from `pool`.
pub fn goal_jobs(
    config: &ExperimentConfig,
    queries: &[LtaInstance],
    pool: &[LtaInstance],
    rendering: &LabelRendering,
) -> Result<Vec<LlmJob>> {
    let t = templates(&config.llm)?;
    let instruction = fill_instruction(&t.goal_icl, rendering, config.z, config.llm.vocabulary);
    let pool: Vec<(Vec<ActionLabel>, String)> =
        pool.iter().filter_map(|i| i.goal.clone().map(|g| (i.observed.clone(), g))).collect();
    queries
        .iter()
        .map(|q| {
            let examples = sample_examples(&pool, config.llm.n_examples, example_seed(config.seed, q));
            Ok(LlmJob {
                instance_id: q.id(),
                bundle: build_goal_prompt(&instruction, &examples, &q.observed, rendering)?,
                n: 1,
                temperature: config.llm.goal_temperature,
                answer: OracleAnswer::Goal(q.goal.clone().unwrap_or_default()),
            })
        })
        .collect()
}

/// First line of each goal completion, trimmed.
pub fn infer_goals(client: &LlmClient, jobs: &[LlmJob]) -> Result<BTreeMap<String, String>> {
    let outs = run_jobs(client, jobs)?;
    Ok(jobs
        .iter()
        .zip(outs)
        .map(|(j, c)| (j.instance_id.clone(), c[0].lines().next().unwrap_or("").trim().to_string()))
        .collect())
}

fn anticipation_jobs(
    config: &ExperimentConfig,
    queries: &[LtaInstance],
    pool: &[LtaInstance],
    rendering: &LabelRendering,
    cot: bool,
) -> Result<Vec<LlmJob>> {
    let t = templates(&config.llm)?;
    let template = if cot { &t.cot } else { &t.bottom_up_icl };
    let instruction = fill_instruction(template, rendering, config.z, config.llm.vocabulary);
    queries
        .iter()
        .map(|q| {
            let picked = sample_examples(pool, config.llm.n_examples, example_seed(config.seed, q));
            let bundle = if cot {
                let ex: Vec<_> = picked
                    .iter()
                    .map(|i| (i.observed.clone(), i.goal.clone().unwrap_or_default(), i.future_gt.clone()))
                    .collect();
                build_cot_prompt(&instruction, &ex, &q.observed, rendering)?
            } else {
                let ex: Vec<_> = picked.iter().map(|i| (i.observed.clone(), i.future_gt.clone())).collect();
                build_icl_prompt(&instruction, &ex, &q.observed, rendering)?
            };
            let answer = if cot {
                OracleAnswer::Cot { goal: q.goal.clone().unwrap_or_default(), actions: q.future_gt.clone() }
            } else {
                OracleAnswer::Actions(q.future_gt.clone())
            };
            Ok(LlmJob { instance_id: q.id(), bundle, n: config.k, temperature: config.llm.temperature, answer })
        })
        .collect()
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub approach: Approach,
    pub n_seg: usize,
    pub z: usize,
    pub k: usize,
    pub n_train_instances: usize,
    pub n_test_instances: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed: Option<EdReport>,
    /// Fraction of inferred goals equal to the annotation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub goal_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incidents: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<StudentComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exported_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub antkit_version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub git_hash: Option<String>,
    pub taxonomy_fingerprint: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn git_hash() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: RunReport,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    dataset: &'a Dataset,
    train: Vec<LtaInstance>,
    test: Vec<LtaInstance>,
    dir: PathBuf,
    backend: Option<Arc<dyn LlmBackend>>,
}

/// Runs one experiment and writes its run directory. `backend` replaces the
/// configured LLM endpoint when given.
pub fn run_experiment(config: &ExperimentConfig, backend: Option<Arc<dyn LlmBackend>>) -> Result<RunOutput> {
    config.validate()?;
    let dataset = load_dataset(&config.data)?;
    run_on_dataset(config, &dataset, backend)
}

pub fn run_on_dataset(
    config: &ExperimentConfig,
    dataset: &Dataset,
    backend: Option<Arc<dyn LlmBackend>>,
) -> Result<RunOutput> {
    let train = dataset.instances(Split::Train, config.n_seg, config.z)?;
    let test_gt = dataset.instances(dataset.eval_split(), config.n_seg, config.z)?;
    if train.is_empty() || test_gt.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let test = recognize(&test_gt, config.recognition_noise, config.seed, &dataset.taxonomy)?;
    let dir = config.output_dir.join(&config.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = Manifest {
        antkit_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        config_hash: config.hash(),
        git_hash: git_hash(),
        taxonomy_fingerprint: dataset.taxonomy.fingerprint(),
    };
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut ctx = Context { config, dataset, train, test, dir, backend };
    let mut report = RunReport {
        name: config.name.clone(),
        approach: config.approach,
        n_seg: config.n_seg,
        z: config.z,
        k: config.k,
        n_train_instances: ctx.train.len(),
        n_test_instances: ctx.test.len(),
        ed: None,
        goal_accuracy: None,
        incidents: None,
        distill: None,
        exported_samples: None,
    };
    match config.approach {
        Approach::BottomUpLocal | Approach::TopDownLocal => run_local(&mut ctx, &mut report)?,
        Approach::LlmIcl | Approach::LlmCot => run_llm(&mut ctx, &mut report)?,
        Approach::LlmFinetuneExport => run_export(&ctx, &mut report)?,
        Approach::Distill => match config.precision {
            Precision::F32 => run_distill::<f32>(&ctx, &mut report)?,
            Precision::F64 => run_distill::<f64>(&ctx, &mut report)?,
        },
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write(&ctx.dir.join("report.json"), text)?;
    Ok(RunOutput { dir: ctx.dir, report })
}

/// Re-runs the experiment recorded in `manifest_path`, writing to
/// `output_dir` instead.
pub fn rerun_from_manifest(
    manifest_path: &Path,
    output_dir: &Path,
    backend: Option<Arc<dyn LlmBackend>>,
) -> Result<RunOutput> {
    let manifest = Manifest::load(manifest_path)?;
    let mut config = manifest.config;
    if let Some(cache) = config.llm.cache.as_mut().filter(|c| c.is_relative()) {
        let original = manifest_path.parent().unwrap_or(Path::new("."));
        *cache = original.join(&*cache);
    }
    config.output_dir = output_dir.to_path_buf();
    run_experiment(&config, backend)
}

fn write_predictions_file(dir: &Path, preds: &BTreeMap<String, CandidateSet>, taxonomy: &Taxonomy) -> Result<()> {
    let path = dir.join("predictions.jsonl");
    let mut buf = Vec::new();
    write_predictions(&mut buf, preds, taxonomy).map_err(|e| Error::io(&path, e))?;
    write(&path, buf)
}

fn llm_client(ctx: &mut Context<'_>, jobs: &[LlmJob], rendering: &LabelRendering) -> Result<LlmClient> {
    let backend = match ctx.backend.clone() {
        Some(b) => b,
        None => resolve_backend(&ctx.config.llm, jobs, rendering, ctx.config.z),
    };
    build_client(&ctx.config.llm, backend, &ctx.dir)
}

fn goal_accuracy(goals: &BTreeMap<String, String>, instances: &[LtaInstance]) -> f64 {
    let hits = instances.iter().filter(|i| goals.get(&i.id()) == i.goal.as_ref()).count();
    hits as f64 / instances.len() as f64
}

fn write_prompts(dir: &Path, jobs: &[LlmJob], suffix: &str) -> Result<()> {
    let pdir = dir.join("prompts");
    std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    for j in jobs {
        write(&pdir.join(format!("{}{suffix}.txt", file_stem(&j.instance_id))), j.bundle.render())?;
    }
    Ok(())
}

fn run_local(ctx: &mut Context<'_>, report: &mut RunReport) -> Result<()> {
    let config = ctx.config;
    let taxonomy = &ctx.dataset.taxonomy;
    let top_down = config.approach == Approach::TopDownLocal;
    let model = train_local(&config.model, config.precision, &ctx.train, taxonomy, top_down)?;
    model.save(&ctx.dir.join(model.file_name()))?;
    let goals = if top_down {
        let goals = match config.goal_source {
            GoalSource::Annotation => ctx.test.iter().filter_map(|i| i.goal.clone().map(|g| (i.id(), g))).collect(),
            GoalSource::Llm => {
                let rendering = LabelRendering::new(taxonomy, config.rendering);
                let jobs = goal_jobs(config, &ctx.test, &ctx.train, &rendering)?;
                write_prompts(&ctx.dir, &jobs, ".goal")?;
                let client = llm_client(ctx, &jobs, &rendering)?;
                let goals = infer_goals(&client, &jobs)?;
                report.goal_accuracy = Some(goal_accuracy(&goals, &ctx.test));
                goals
            }
        };
        Some(goals)
    } else {
        None
    };
    let preds = predict_local(model.as_model(), &ctx.test, config.z, config.k, config.strategy, goals.as_ref())?;
    write_predictions_file(&ctx.dir, &preds, taxonomy)?;
    report.ed = Some(evaluate_instances(&preds, &ctx.test)?);
    Ok(())
}

fn run_llm(ctx: &mut Context<'_>, report: &mut RunReport) -> Result<()> {
    let config = ctx.config;
    let taxonomy = &ctx.dataset.taxonomy;
    let cot = config.approach == Approach::LlmCot;
    let rendering = LabelRendering::new(taxonomy, config.rendering);
    let jobs = anticipation_jobs(config, &ctx.test, &ctx.train, &rendering, cot)?;
    write_prompts(&ctx.dir, &jobs, "")?;
    let client = llm_client(ctx, &jobs, &rendering)?;
    let outputs = run_jobs(&client, &jobs)?;
    let fallback = most_frequent_action(&ctx.train, taxonomy);
    let mut stats = IncidentStats::default();
    let mut missing_goal = 0usize;
    let mut goals = BTreeMap::new();
    let mut preds = BTreeMap::new();
    for (job, texts) in jobs.iter().zip(outputs) {
        let texts: Vec<String> = if cot {
            let parsed: Vec<_> = texts.iter().map(|t| parse_cot(t)).collect();
            missing_goal += parsed.iter().filter(|p| p.goal_missing).count();
            goals.insert(job.instance_id.clone(), parsed[0].goal.clone());
            parsed.into_iter().map(|p| p.actions).collect()
        } else {
            texts
        };
        let (set, s, _) = postprocess_candidates(&texts, config.z, &rendering, fallback, config.llm.postprocess)
            .ok_or_else(|| Error::Shape("no completions returned".into()))?;
        stats.merge(&s);
        preds.insert(job.instance_id.clone(), set);
    }
    let mut incidents = stats.to_json();
    if cot {
        let pct = 100.0 * missing_goal as f64 / stats.completions.max(1) as f64;
        incidents["Missing Goal"] = pct.into();
        report.goal_accuracy = Some(goal_accuracy(&goals, &ctx.test));
    }
    write(&ctx.dir.join("incidents.json"), serde_json::to_string_pretty(&incidents)?)?;
    write_predictions_file(&ctx.dir, &preds, taxonomy)?;
    report.incidents = Some(incidents);
    report.ed = Some(evaluate_instances(&preds, &ctx.test)?);
    Ok(())
}

fn run_export(ctx: &Context<'_>, report: &mut RunReport) -> Result<()> {
    let config = ctx.config;
    let taxonomy = &ctx.dataset.taxonomy;
    let rendering = LabelRendering::new(taxonomy, config.rendering);
    let noise = if config.recognition_noise > 0.0 { config.recognition_noise } else { 0.1 };
    let mut total = 0;
    for (name, gt) in [("train", &ctx.train), ("test", &ctx.test)] {
        let recog = match config.llm.teacher_forcing_mix {
            crate::llm::TeacherForcingMix::GtOnly => Vec::new(),
            _ => recognize(gt, noise, config.seed, taxonomy)?,
        };
        let samples =
            build_finetune_samples(gt, &recog, config.llm.with_goal, config.llm.teacher_forcing_mix, &rendering)?;
        let path = ctx.dir.join(format!("finetune_{name}.jsonl"));
        let mut buf = Vec::new();
        write_finetune_jsonl(&mut buf, &samples).map_err(|e| Error::io(&path, e))?;
        write(&path, buf)?;
        total += samples.len();
    }
    report.exported_samples = Some(total);
    Ok(())
}

fn run_distill<F: Scalar>(ctx: &Context<'_>, report: &mut RunReport) -> Result<()> {
    let config = ctx.config;
    let settings = config.distill.as_ref().ok_or_else(|| Error::Config("missing distill settings".into()))?;
    let taxonomy = &ctx.dataset.taxonomy;
    let examples: Vec<TrainExample> = ctx.train.iter().map(TrainExample::from).collect();
    let teacher: SeqModel<F> = train_seq_model(&examples, taxonomy, &settings.teacher)?;
    teacher.save(&ctx.dir.join("teacher.ckpt"))?;
    let score = |m: &SeqModel<F>| -> Result<EdReport> {
        let preds = predict_local(m, &ctx.test, config.z, config.k, config.strategy, None)?;
        evaluate_instances(&preds, &ctx.test)
    };
    let teacher_report = score(&teacher)?;
    let n_student = ((examples.len() as f64 * settings.student_fraction).ceil() as usize).clamp(1, examples.len());
    let mut runs = Vec::new();
    for &s in &settings.seeds {
        let subset = student_subset(&examples, n_student, s);
        let student_cfg = SeqModelConfig { seed: s, ..settings.student.student.clone() };
        let scratch: SeqModel<F> = train_seq_model(&subset, taxonomy, &student_cfg)?;
        let distilled: SeqModel<F> = distill_train(
            &teacher,
            &subset,
            taxonomy,
            &DistillConfig { student: student_cfg, ..settings.student.clone() },
        )?;
        runs.push(StudentRun { seed: s, scratch: score(&scratch)?, distilled: score(&distilled)? });
    }
    report.ed = Some(teacher_report.clone());
    report.distill = Some(compare_students(Some(&teacher_report), &runs));
    Ok(())
}

/// Seeded subset of `n` examples, in shuffled order.
pub fn student_subset(examples: &[TrainExample], n: usize, seed_value: u64) -> Vec<TrainExample> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut seed::substream(seed_value, "student-subset"));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| examples[i].clone()).collect()
}

/// The goal after `goal` in sorted order, wrapping around.
pub fn alternative_goal(known: &[String], goal: &str) -> String {
    let mut sorted = known.to_vec();
    sorted.sort();
    sorted.dedup();
    match sorted.iter().position(|g| g == goal) {
        Some(i) => sorted[(i + 1) % sorted.len()].clone(),
        None => sorted.first().cloned().unwrap_or_default(),
    }
}

/// Swaps each test instance's goal for another training goal and writes
/// `counterfactual.json` to the run directory. Mock backends answer through
/// the goal-keyed responder.
pub fn run_counterfactual_experiment(
    config: &ExperimentConfig,
    backend: Option<Arc<dyn LlmBackend>>,
) -> Result<(PathBuf, CounterfactualReport)> {
    config.validate()?;
    let dataset = load_dataset(&config.data)?;
    let train = dataset.instances(Split::Train, config.n_seg, config.z)?;
    let test = dataset.instances(dataset.eval_split(), config.n_seg, config.z)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let test = recognize(&test, config.recognition_noise, config.seed, &dataset.taxonomy)?;
    let dir = config.output_dir.join(&config.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rendering = LabelRendering::new(&dataset.taxonomy, config.rendering);
    let backend = match (backend, &config.llm.backend) {
        (Some(b), _) => b,
        (None, LlmBackendConfig::Mock(_)) => {
            Arc::new(MockLlm::new().responder(goal_keyed_responder(rendering.clone(), config.z)))
        }
        (None, LlmBackendConfig::Http(h)) => Arc::new(HttpBackend::new(h.clone())),
    };
    let client = build_client(&config.llm, backend, &dir)?;
    let goals_a: BTreeMap<String, String> = match config.goal_source {
        GoalSource::Annotation => test.iter().map(|i| (i.id(), i.goal.clone().unwrap_or_default())).collect(),
        GoalSource::Llm => infer_goals(&client, &goal_jobs(config, &test, &train, &rendering)?)?,
    };
    let known: Vec<String> = train.iter().filter_map(|i| i.goal.clone()).collect();
    let pairs: Vec<(String, String)> = test
        .iter()
        .map(|i| {
            let a = goals_a.get(&i.id()).cloned().unwrap_or_default();
            let b = alternative_goal(&known, &a);
            (a, b)
        })
        .collect();
    let pool: Vec<_> =
        train.iter().map(|i| (i.goal.clone().unwrap_or_default(), i.observed.clone(), i.future_gt.clone())).collect();
    let t = templates(&config.llm)?;
    let instruction = fill_instruction(&t.counterfactual, &rendering, config.z, config.llm.vocabulary);
    let settings = CounterfactualSettings {
        instruction: &instruction,
        z: config.z,
        n_examples: config.llm.n_examples,
        temperature: config.llm.goal_temperature,
        seed: config.seed,
        rendering: &rendering,
        fallback: most_frequent_action(&train, &dataset.taxonomy),
        postprocess: config.llm.postprocess,
    };
    let report = run_counterfactual(&client, &test, &pairs, &pool, &settings)?;
    write(&dir.join("counterfactual.json"), serde_json::to_string_pretty(&report)?)?;
    Ok((dir, report))
}
