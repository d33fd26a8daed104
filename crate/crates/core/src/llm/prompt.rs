//! Prompt builders. Every builder is pure: identical inputs give
//! byte-identical text.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::{ActionLabel, LabelClass, LabelRendering};

/// Separator between an input and its output.
pub const MARKER: &str = " => ";

/// In-context examples drawn when sampling from a pool.
pub const DEFAULT_ICL_EXAMPLES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    GoalIcl,
    BottomUpIcl,
    CoT,
    FineTuneSample,
    Counterfactual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub instruction: String,
    pub examples: Vec<(String, String)>,
    /// Always ends with [`MARKER`].
    pub query: String,
}

impl PromptBundle {
    /// Instruction, one `input => output` line per example, then the query.
    pub fn render(&self) -> String {
        let mut lines: Vec<String> = Vec::with_capacity(self.examples.len() + 2);
        if !self.instruction.is_empty() {
            lines.push(self.instruction.clone());
        }
        lines.extend(self.examples.iter().map(|(i, o)| format!("{i}{MARKER}{o}")));
        lines.push(self.query.clone());
        lines.join("\n")
    }
}

/// Editable instruction texts. Placeholders: `{z}` and `{vocabulary}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub goal_icl: String,
    pub bottom_up_icl: String,
    pub cot: String,
    pub counterfactual: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            goal_icl: include_str!("../../templates/goal_icl.txt").trim_end().to_string(),
            bottom_up_icl: include_str!("../../templates/bottom_up_icl.txt").trim_end().to_string(),
            cot: include_str!("../../templates/cot.txt").trim_end().to_string(),
            counterfactual: include_str!("../../templates/counterfactual.txt").trim_end().to_string(),
        }
    }
}

impl Templates {
    /// Shipped templates, overridden by any `<name>.txt` present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [
            ("goal_icl", &mut t.goal_icl),
            ("bottom_up_icl", &mut t.bottom_up_icl),
            ("cot", &mut t.cot),
            ("counterfactual", &mut t.counterfactual),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?.trim_end().to_string();
            }
        }
        Ok(t)
    }
}

/// Whether the instruction lists the verb and noun vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabInline {
    #[default]
    Full,
    Omit,
}

/// Fills `{z}` and `{vocabulary}` in `template`.
pub fn fill_instruction(template: &str, rendering: &LabelRendering, z: usize, vocab: VocabInline) -> String {
    let vocabulary = match vocab {
        VocabInline::Full => format!(
            "Verbs: {}. Nouns: {}.",
            rendering.words(LabelClass::Verb).join(", "),
            rendering.words(LabelClass::Noun).join(", ")
        ),
        VocabInline::Omit => String::new(),
    };
    template.replace("{z}", &z.to_string()).replace("{vocabulary}", &vocabulary).trim_end().to_string()
}

/// `Goal:<goal> Observed actions:<observed>`.
pub fn goal_prefix(goal: &str, observed: &str) -> String {
    format!("Goal:{goal} Observed actions:{observed}")
}

fn query(input: &str) -> String {
    format!("{input}{MARKER}")
}

/// Few-shot goal inference: `observed => goal` examples.
pub fn build_goal_prompt(
    instruction: &str,
    examples: &[(Vec<ActionLabel>, String)],
    query_observed: &[ActionLabel],
    rendering: &LabelRendering,
) -> Result<PromptBundle> {
    if examples.is_empty() {
        return Err(Error::NeedExamples);
    }
    Ok(PromptBundle {
        kind: PromptKind::GoalIcl,
        instruction: instruction.to_string(),
        examples: examples
            .iter()
            .map(|(obs, goal)| Ok((rendering.render_sequence(obs)?, goal.clone())))
            .collect::<Result<_>>()?,
        query: query(&rendering.render_sequence(query_observed)?),
    })
}

/// Bottom-up anticipation: `observed => future` examples. Zero examples
/// gives a zero-shot prompt.
pub fn build_icl_prompt(
    instruction: &str,
    examples: &[(Vec<ActionLabel>, Vec<ActionLabel>)],
    query_observed: &[ActionLabel],
    rendering: &LabelRendering,
) -> Result<PromptBundle> {
    Ok(PromptBundle {
        kind: PromptKind::BottomUpIcl,
        instruction: instruction.to_string(),
        examples: examples
            .iter()
            .map(|(obs, fut)| Ok((rendering.render_sequence(obs)?, rendering.render_sequence(fut)?)))
            .collect::<Result<_>>()?,
        query: query(&rendering.render_sequence(query_observed)?),
    })
}

/// `Goal: <goal>. Actions: <actions>`.
pub fn cot_output(goal: &str, actions: &str) -> String {
    format!("Goal: {goal}. Actions: {actions}")
}

/// Chain-of-thought: each example output states the goal, then the actions.
pub fn build_cot_prompt(
    instruction: &str,
    examples: &[(Vec<ActionLabel>, String, Vec<ActionLabel>)],
    query_observed: &[ActionLabel],
    rendering: &LabelRendering,
) -> Result<PromptBundle> {
    Ok(PromptBundle {
        kind: PromptKind::CoT,
        instruction: instruction.to_string(),
        examples: examples
            .iter()
            .map(|(obs, goal, fut)| {
                Ok((rendering.render_sequence(obs)?, cot_output(goal, &rendering.render_sequence(fut)?)))
            })
            .collect::<Result<_>>()?,
        query: query(&rendering.render_sequence(query_observed)?),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotParse {
    pub goal: String,
    pub actions: String,
    pub goal_missing: bool,
}

/// Splits a chain-of-thought completion into its goal and action spans.
/// Without a `Goal:` span the goal is empty and the whole text (or the
/// `Actions:` span, if present) is treated as actions.
pub fn parse_cot(text: &str) -> CotParse {
    const GOAL: &str = "Goal:";
    const ACTIONS: &str = "Actions:";
    let actions_at = text.find(ACTIONS);
    let Some(g) = text.find(GOAL) else {
        let actions = match actions_at {
            Some(a) => &text[a + ACTIONS.len()..],
            None => text,
        };
        return CotParse { goal: String::new(), actions: actions.trim().to_string(), goal_missing: true };
    };
    let start = g + GOAL.len();
    let (goal, actions) = match actions_at {
        Some(a) if a >= start => (&text[start..a], &text[a + ACTIONS.len()..]),
        Some(a) => (&text[start..], &text[a + ACTIONS.len()..g]),
        None => match text[start..].find('\n') {
            Some(nl) => (&text[start..start + nl], &text[start + nl + 1..]),
            None => (&text[start..], ""),
        },
    };
    CotParse {
        goal: goal.trim().trim_end_matches('.').trim().to_string(),
        actions: actions.trim().to_string(),
        goal_missing: false,
    }
}

/// Goal-conditioned anticipation prompt. Examples are
/// `(goal, observed, future)`.
pub fn build_counterfactual_prompt(
    instruction: &str,
    examples: &[(String, Vec<ActionLabel>, Vec<ActionLabel>)],
    goal: &str,
    observed: &[ActionLabel],
    rendering: &LabelRendering,
) -> Result<PromptBundle> {
    Ok(PromptBundle {
        kind: PromptKind::Counterfactual,
        instruction: instruction.to_string(),
        examples: examples
            .iter()
            .map(|(g, obs, fut)| {
                Ok((goal_prefix(g, &rendering.render_sequence(obs)?), rendering.render_sequence(fut)?))
            })
            .collect::<Result<_>>()?,
        query: query(&goal_prefix(goal, &rendering.render_sequence(observed)?)),
    })
}

/// Two prompts that differ only in the goal of the query.
pub fn counterfactual_pair(
    instruction: &str,
    examples: &[(String, Vec<ActionLabel>, Vec<ActionLabel>)],
    observed: &[ActionLabel],
    inferred_goal: &str,
    altered_goal: &str,
    rendering: &LabelRendering,
) -> Result<(PromptBundle, PromptBundle)> {
    if inferred_goal == altered_goal {
        return Err(Error::DegenerateCounterfactual(inferred_goal.to_string()));
    }
    Ok((
        build_counterfactual_prompt(instruction, examples, inferred_goal, observed, rendering)?,
        build_counterfactual_prompt(instruction, examples, altered_goal, observed, rendering)?,
    ))
}

/// Seeded sample of `n` items (all of them if the pool is smaller), in
/// sampled order.
pub fn sample_examples<T: Clone>(pool: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = seed::substream(seed, "icl");
    index::sample(&mut rng, pool.len(), n.min(pool.len())).into_iter().map(|i| pool[i].clone()).collect()
}
