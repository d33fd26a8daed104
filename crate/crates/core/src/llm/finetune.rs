//! Prompt/completion pairs for fine-tuning an external language model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::prompt::{goal_prefix, PromptBundle, PromptKind, MARKER};
use crate::dataset::LtaInstance;
use crate::error::{Error, Result};
use crate::taxonomy::LabelRendering;

/// Which observed sequences become training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherForcingMix {
    #[default]
    GtOnly,
    RecogOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Gt,
    Recognized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub instance_id: String,
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneSample {
    pub prompt: String,
    pub completion: String,
    pub metadata: SampleMeta,
}

impl FinetuneSample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }

    /// The prompt as a bundle, so it renders with the trailing marker.
    pub fn bundle(&self) -> PromptBundle {
        PromptBundle {
            kind: PromptKind::FineTuneSample,
            instruction: String::new(),
            examples: Vec::new(),
            query: format!("{} ", self.prompt),
        }
    }
}

/// `[Goal:<g> Observed actions:]a1, ..., aN =>`.
pub fn finetune_prompt(observed: &str, goal: Option<&str>) -> String {
    let input = match goal {
        Some(g) => goal_prefix(g, observed),
        None => observed.to_string(),
    };
    format!("{input}{}", MARKER.trim_end())
}

/// One or two samples per instance depending on `mix`. `recognized` must be
/// empty for [`TeacherForcingMix::GtOnly`], otherwise parallel to `gt`.
/// With `with_goal` each prompt starts with the instance's goal (empty if
/// unset).
pub fn build_finetune_samples(
    gt: &[LtaInstance],
    recognized: &[LtaInstance],
    with_goal: bool,
    mix: TeacherForcingMix,
    rendering: &LabelRendering,
) -> Result<Vec<FinetuneSample>> {
    if mix != TeacherForcingMix::GtOnly {
        if recognized.len() != gt.len() {
            return Err(Error::Shape(format!("{} recognized variants for {} instances", recognized.len(), gt.len())));
        }
        if let Some((a, b)) = gt.iter().zip(recognized).find(|(a, b)| a.id() != b.id()) {
            return Err(Error::Shape(format!("recognized variant {} does not match {}", b.id(), a.id())));
        }
    }
    let mut out = Vec::new();
    for (i, inst) in gt.iter().enumerate() {
        let completion = format!(" {}", rendering.render_sequence(&inst.future_gt)?);
        let goal = with_goal.then(|| inst.goal.clone().unwrap_or_default());
        let mut push = |observed: &LtaInstance, source| -> Result<()> {
            out.push(FinetuneSample {
                prompt: finetune_prompt(&rendering.render_sequence(&observed.observed)?, goal.as_deref()),
                completion: completion.clone(),
                metadata: SampleMeta { instance_id: inst.id(), source },
            });
            Ok(())
        };
        match mix {
            TeacherForcingMix::GtOnly => push(inst, SampleSource::Gt)?,
            TeacherForcingMix::RecogOnly => push(&recognized[i], SampleSource::Recognized)?,
            TeacherForcingMix::Both => {
                push(inst, SampleSource::Gt)?;
                push(&recognized[i], SampleSource::Recognized)?;
            }
        }
    }
    Ok(out)
}

pub fn write_finetune_jsonl(out: &mut impl Write, samples: &[FinetuneSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(out, "{}", s.to_json_line())?;
    }
    Ok(())
}
