//! Deterministic in-process backend for tests and offline runs.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::client::{BackendError, LlmBackend, LlmRequest};
use crate::postprocess::Incident;
use crate::seed;
use crate::taxonomy::{ActionLabel, LabelClass, LabelRendering};

/// Scripted failure returned before any real response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockFailure {
    Status(u16),
    Auth,
    Disconnect,
}

pub type Responder = Box<dyn Fn(&LlmRequest) -> Vec<String> + Send + Sync>;

pub struct MockLlm {
    model: String,
    scripted: HashMap<String, Vec<String>>,
    responder: Option<Responder>,
    failures: Mutex<VecDeque<MockFailure>>,
    calls: AtomicUsize,
}

impl Default for MockLlm {
    fn default() -> Self {
        Self::new()
    }
}

impl MockLlm {
    pub fn new() -> Self {
        Self {
            model: "mock".into(),
            scripted: HashMap::new(),
            responder: None,
            failures: Mutex::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn prompt_hash(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    /// Answers `prompt` with `completions`, cycled or cut to the requested
    /// count.
    pub fn script(mut self, prompt: &str, completions: Vec<String>) -> Self {
        self.scripted.insert(Self::prompt_hash(prompt), completions);
        self
    }

    /// Fallback for prompts without a script.
    pub fn responder(mut self, f: impl Fn(&LlmRequest) -> Vec<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    /// Fails the next calls in order before answering normally.
    pub fn fail_first(self, failures: Vec<MockFailure>) -> Self {
        *self.failures.lock().unwrap() = failures.into();
        self
    }

    pub fn with_model(mut self, model: &str) -> Self {
        self.model = model.to_string();
        self
    }

    /// Backend calls so far, including injected failures.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for MockLlm {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn call(&self, request: &LlmRequest) -> Result<Vec<String>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(f) = self.failures.lock().unwrap().pop_front() {
            return Err(match f {
                MockFailure::Status(s) if s == 401 || s == 403 => BackendError::Auth(format!("status {s}")),
                MockFailure::Status(s) if s == 429 || s >= 500 => BackendError::Transient(format!("status {s}")),
                MockFailure::Status(s) => BackendError::Fatal(format!("status {s}")),
                MockFailure::Auth => BackendError::Auth("invalid key".into()),
                MockFailure::Disconnect => BackendError::Transient("connection reset".into()),
            });
        }
        let answers = match self.scripted.get(&Self::prompt_hash(&request.prompt)) {
            Some(s) => s.clone(),
            None => match &self.responder {
                Some(f) => f(request),
                None => return Err(BackendError::Fatal("no scripted response for prompt".into())),
            },
        };
        if answers.is_empty() {
            return Ok(Vec::new());
        }
        Ok(answers.iter().cycle().take(request.n).cloned().collect())
    }
}

/// A malformation to plant in an otherwise clean completion. Each mode
/// triggers exactly its own incident category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultMode {
    Clean,
    ShortSeq,
    LongSeq,
    InvalidSeq,
    InvalidVerb,
    InvalidNoun,
}

impl FaultMode {
    pub fn incident(self) -> Option<Incident> {
        match self {
            FaultMode::Clean => None,
            FaultMode::ShortSeq => Some(Incident::ShortSeq),
            FaultMode::LongSeq => Some(Incident::LongSeq),
            FaultMode::InvalidSeq => Some(Incident::InvalidSeq),
            FaultMode::InvalidVerb => Some(Incident::InvalidVerb),
            FaultMode::InvalidNoun => Some(Incident::InvalidNoun),
        }
    }
}

/// A word one or more edits away from `word` that is not itself in
/// `vocab` (case-insensitively).
fn misspell(word: &str, vocab: &[String]) -> String {
    let taken = |w: &str| vocab.iter().any(|v| v.eq_ignore_ascii_case(w));
    for suffix in ["q", "qz", "zq", "qq"] {
        let w = format!("{word}{suffix}");
        if !taken(&w) {
            return w;
        }
    }
    format!("{word}qzq")
}

/// Renders `seq` with a single planted fault of kind `mode`.
pub fn plant_fault(seq: &[ActionLabel], mode: FaultMode, rendering: &LabelRendering) -> String {
    let mut items: Vec<String> = seq.iter().map(|&l| rendering.render_action(l).expect("in-vocabulary")).collect();
    let verbs = rendering.words(LabelClass::Verb);
    let nouns = rendering.words(LabelClass::Noun);
    match mode {
        FaultMode::Clean => {}
        FaultMode::ShortSeq => {
            items.pop();
        }
        FaultMode::LongSeq => items.push(items.last().cloned().unwrap_or_default()),
        FaultMode::InvalidSeq => {
            if let Some(first) = seq.first() {
                items[0] = verbs[first.verb].clone();
            }
        }
        FaultMode::InvalidVerb => {
            if let Some(first) = seq.first() {
                items[0] = format!("{} {}", misspell(&verbs[first.verb], verbs), nouns[first.noun]);
            }
        }
        FaultMode::InvalidNoun => {
            if let Some(first) = seq.first() {
                items[0] = format!("{} {}", verbs[first.verb], misspell(&nouns[first.noun], nouns));
            }
        }
    }
    items.join(", ")
}

/// Planted fault schedule: exactly `round(rate * total)` completions per
/// mode, placed in seeded random order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub rates: Vec<(FaultMode, f64)>,
    pub seed: u64,
}

impl FaultPlan {
    pub fn assign(&self, total: usize) -> Vec<FaultMode> {
        let mut modes = Vec::with_capacity(total);
        for &(mode, rate) in &self.rates {
            let n = (rate * total as f64).round() as usize;
            modes.extend(std::iter::repeat_n(mode, n.min(total - modes.len())));
        }
        modes.resize(total, FaultMode::Clean);
        modes.shuffle(&mut seed::substream(self.seed, "faults"));
        modes
    }
}
