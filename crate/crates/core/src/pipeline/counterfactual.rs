//! Goal-swap probes: the same observation anticipated under two goals.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::LtaInstance;
use crate::error::{Error, Result};
use crate::llm::{build_counterfactual_prompt, sample_examples, LlmClient, LlmRequest, PromptBundle};
use crate::postprocess::{postprocess_completion, IncidentStats, PostprocessOptions};
use crate::seed;
use crate::taxonomy::{ActionLabel, LabelClass, LabelRendering};

/// Fraction of positions at which two sequences differ. Missing positions
/// of the shorter sequence count as differences.
pub fn hamming_divergence(a: &[ActionLabel], b: &[ActionLabel]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    (n - same) as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub instance_id: String,
    pub observed: String,
    pub goal_a: String,
    pub prediction_a: String,
    pub goal_b: String,
    pub prediction_b: String,
    pub divergence: f64,
    /// Both goals are the same.
    pub control: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub records: Vec<CounterfactualRecord>,
    /// Mean divergence over non-control pairs.
    pub mean_divergence: Option<f64>,
    /// Mean divergence over control pairs.
    pub control_divergence: Option<f64>,
    pub incidents: serde_json::Value,
}

pub struct CounterfactualSettings<'a> {
    pub instruction: &'a str,
    pub z: usize,
    pub n_examples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub rendering: &'a LabelRendering,
    pub fallback: ActionLabel,
    pub postprocess: PostprocessOptions,
}

/// Prompts for one probe. Equal goals are allowed and serve as controls.
pub fn counterfactual_prompts(
    instance: &LtaInstance,
    goal_a: &str,
    goal_b: &str,
    pool: &[(String, Vec<ActionLabel>, Vec<ActionLabel>)],
    s: &CounterfactualSettings<'_>,
) -> Result<(PromptBundle, PromptBundle)> {
    let examples = sample_examples(pool, s.n_examples, seed::derive(s.seed, &format!("icl/{}", instance.id())));
    Ok((
        build_counterfactual_prompt(s.instruction, &examples, goal_a, &instance.observed, s.rendering)?,
        build_counterfactual_prompt(s.instruction, &examples, goal_b, &instance.observed, s.rendering)?,
    ))
}

/// Anticipates each instance under `goals[i].0` and `goals[i].1` with one
/// completion per prompt.
pub fn run_counterfactual(
    client: &LlmClient,
    instances: &[LtaInstance],
    goals: &[(String, String)],
    pool: &[(String, Vec<ActionLabel>, Vec<ActionLabel>)],
    s: &CounterfactualSettings<'_>,
) -> Result<CounterfactualReport> {
    if instances.len() != goals.len() {
        return Err(Error::Shape(format!("{} goal pairs for {} instances", goals.len(), instances.len())));
    }
    if pool.is_empty() {
        return Err(Error::NeedExamples);
    }
    let mut requests = Vec::with_capacity(2 * instances.len());
    for (inst, (a, b)) in instances.iter().zip(goals) {
        let (pa, pb) = counterfactual_prompts(inst, a, b, pool, s)?;
        requests.push(client.request(pa.render(), 1, s.temperature));
        requests.push(client.request(pb.render(), 1, s.temperature));
    }
    let responses: Vec<String> = client
        .complete_many(&requests)
        .into_iter()
        .map(|r| r.map(|r| r.completions.into_iter().next().unwrap_or_default()))
        .collect::<Result<_>>()?;
    let mut stats = IncidentStats::default();
    let mut records = Vec::with_capacity(instances.len());
    for ((inst, (a, b)), texts) in instances.iter().zip(goals).zip(responses.chunks(2)) {
        let oa = postprocess_completion(&texts[0], s.z, s.rendering, s.fallback, s.postprocess);
        let ob = postprocess_completion(&texts[1], s.z, s.rendering, s.fallback, s.postprocess);
        stats.record(&oa);
        stats.record(&ob);
        records.push(CounterfactualRecord {
            instance_id: inst.id(),
            observed: s.rendering.render_sequence(&inst.observed)?,
            goal_a: a.clone(),
            prediction_a: s.rendering.render_sequence(&oa.repaired)?,
            goal_b: b.clone(),
            prediction_b: s.rendering.render_sequence(&ob.repaired)?,
            divergence: hamming_divergence(&oa.repaired, &ob.repaired),
            control: a == b,
        });
    }
    let mean = |control: bool| {
        let v: Vec<f64> = records.iter().filter(|r| r.control == control).map(|r| r.divergence).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(CounterfactualReport {
        mean_divergence: mean(false),
        control_divergence: mean(true),
        incidents: stats.to_json(),
        records,
    })
}

/// Text between `Goal:` and ` Observed actions:` on the last prompt line.
fn query_goal(prompt: &str) -> &str {
    let last = prompt.lines().last().unwrap_or("");
    let start = last.find("Goal:").map_or(0, |i| i + "Goal:".len());
    let end = last[start..].find(" Observed actions:").map_or(last.len(), |i| start + i);
    &last[start..end]
}

/// Offline responder whose answer is a pseudo-random sequence keyed only by
/// the query goal, so prompts that differ only in the goal get different
/// answers and identical prompts get identical ones.
pub fn goal_keyed_responder(
    rendering: LabelRendering,
    z: usize,
) -> impl Fn(&LlmRequest) -> Vec<String> + Send + Sync + 'static {
    move |req: &LlmRequest| {
        let nv = rendering.words(LabelClass::Verb).len();
        let nn = rendering.words(LabelClass::Noun).len();
        let mut rng = seed::substream(0, &format!("goal-keyed/{}", query_goal(&req.prompt)));
        let seq: Vec<ActionLabel> =
            (0..z).map(|_| ActionLabel::new(rng.random_range(0..nv), rng.random_range(0..nn))).collect();
        vec![rendering.render_sequence(&seq).expect("in vocabulary"); req.n]
    }
}
