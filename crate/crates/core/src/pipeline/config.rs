//! Experiment configuration: one TOML or JSON file plus `ANTKIT_*`
//! environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SyntheticGrammar;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::llm::{FaultPlan, HttpConfig, RetryPolicy, TeacherForcingMix, VocabInline};
use crate::models::seq::SeqModelConfig;
use crate::models::Strategy;
use crate::postprocess::PostprocessOptions;
use crate::taxonomy::RenderingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    BottomUpLocal,
    TopDownLocal,
    LlmIcl,
    LlmCot,
    LlmFinetuneExport,
    Distill,
}

impl std::str::FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown approach {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub grammar: SyntheticGrammar,
    pub n_videos: usize,
    pub video_len: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Label noise applied to training videos.
    #[serde(default)]
    pub train_label_noise: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Either files on disk or a synthetic grammar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub taxonomy: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalModelConfig {
    Ngram {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Neural(SeqModelConfig),
}

fn default_order() -> usize {
    3
}

fn default_alpha() -> f64 {
    0.01
}

impl Default for LocalModelConfig {
    fn default() -> Self {
        LocalModelConfig::Ngram { order: default_order(), alpha: default_alpha() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Where top-down runs get their goals from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSource {
    #[default]
    Annotation,
    Llm,
}

/// Offline stand-ins for a real endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Answers every query with the ground truth.
    Oracle,
    /// Ground truth with planted malformations.
    Faulty { plan: FaultPlan },
    /// Answers derived from a hash of the goal span, for counterfactuals.
    GoalKeyed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmBackendConfig {
    Mock(MockBehavior),
    Http(HttpConfig),
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        LlmBackendConfig::Mock(MockBehavior::Oracle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub backend: LlmBackendConfig,
    pub n_examples: usize,
    /// Sampling temperature for the K anticipation candidates.
    pub temperature: f64,
    /// Temperature for single-answer goal inference.
    pub goal_temperature: f64,
    pub max_tokens: usize,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Response cache; relative paths resolve against the run directory.
    pub cache: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub vocabulary: VocabInline,
    pub postprocess: PostprocessOptions,
    pub teacher_forcing_mix: TeacherForcingMix,
    pub with_goal: bool,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: LlmBackendConfig::default(),
            n_examples: crate::llm::DEFAULT_ICL_EXAMPLES,
            temperature: 0.8,
            goal_temperature: 0.0,
            max_tokens: 512,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            cache: None,
            templates_dir: None,
            vocabulary: VocabInline::Full,
            postprocess: PostprocessOptions::default(),
            teacher_forcing_mix: TeacherForcingMix::GtOnly,
            with_goal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub teacher: SeqModelConfig,
    pub student: DistillConfig,
    /// Student seeds; each trains one scratch and one distilled student.
    pub seeds: Vec<u64>,
    /// Leading share of training examples the students see.
    #[serde(default = "one")]
    pub student_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataConfig,
    pub n_seg: usize,
    pub z: usize,
    pub k: usize,
    pub approach: Approach,
    pub model: LocalModelConfig,
    pub precision: Precision,
    pub strategy: Strategy,
    pub rendering: RenderingMode,
    pub goal_source: GoalSource,
    /// Rate at which test observations are corrupted to mimic recognition.
    pub recognition_noise: f64,
    pub llm: LlmSettings,
    pub distill: Option<DistillSettings>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            data: DataConfig::default(),
            n_seg: 8,
            z: 20,
            k: 5,
            approach: Approach::BottomUpLocal,
            model: LocalModelConfig::default(),
            precision: Precision::F32,
            strategy: Strategy::Greedy,
            rendering: RenderingMode::Canonical,
            goal_source: GoalSource::Annotation,
            recognition_noise: 0.0,
            llm: LlmSettings::default(),
            distill: None,
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }

    /// Applies `ANTKIT_NAME`, `ANTKIT_SEED`, `ANTKIT_N_SEG`, `ANTKIT_Z`,
    /// `ANTKIT_K`, `ANTKIT_APPROACH` and `ANTKIT_OUTPUT_DIR`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}={v:?} is not a valid number")))
        }
        for (key, v) in vars {
            match key.as_str() {
                "ANTKIT_NAME" => self.name = v,
                "ANTKIT_SEED" => self.seed = num(&key, &v)?,
                "ANTKIT_N_SEG" => self.n_seg = num(&key, &v)?,
                "ANTKIT_Z" => self.z = num(&key, &v)?,
                "ANTKIT_K" => self.k = num(&key, &v)?,
                "ANTKIT_APPROACH" => self.approach = v.parse()?,
                "ANTKIT_OUTPUT_DIR" => self.output_dir = PathBuf::from(v),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seg == 0 || self.z == 0 || self.k == 0 {
            return Err(Error::Config("n_seg, z and k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.recognition_noise) {
            return Err(Error::Config("recognition_noise must lie in [0, 1]".into()));
        }
        let has_files = self.data.taxonomy.is_some() && self.data.annotations.is_some();
        if has_files == self.data.synthetic.is_some() {
            return Err(Error::Config("data needs either taxonomy + annotations files or a synthetic grammar".into()));
        }
        if self.approach == Approach::Distill && self.distill.is_none() {
            return Err(Error::Config("the distill approach needs a [distill] section".into()));
        }
        if let LocalModelConfig::Neural(c) = &self.model {
            c.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}
