//! Prompt construction and access to chat-completion endpoints.

pub mod cache;
pub mod client;
pub mod finetune;
pub mod http;
pub mod mock;
pub mod prompt;

pub use cache::{CacheRecord, ResponseCache};
pub use client::{complete, BackendError, LlmBackend, LlmClient, LlmRequest, LlmResponse, RetryPolicy, Usage};
pub use finetune::{build_finetune_samples, write_finetune_jsonl, FinetuneSample, SampleSource, TeacherForcingMix};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{plant_fault, FaultMode, FaultPlan, MockFailure, MockLlm};
pub use prompt::{
    build_cot_prompt, build_counterfactual_prompt, build_goal_prompt, build_icl_prompt, counterfactual_pair,
    fill_instruction, parse_cot, sample_examples, CotParse, PromptBundle, PromptKind, Templates, VocabInline,
    DEFAULT_ICL_EXAMPLES, MARKER,
};
