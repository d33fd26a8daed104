//! Additively smoothed n-gram model over dense action ids.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActionModel, DecodeContext};
use crate::dataset::LtaInstance;
use crate::error::{Error, Result};
use crate::taxonomy::{ActionLabel, Taxonomy};

type Table = BTreeMap<Vec<usize>, BTreeMap<usize, u64>>;

/// Counts for every context length `0..order`. The longest context with any
/// observations is used at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    alpha: f64,
    num_verbs: usize,
    num_nouns: usize,
    global: Table,
    /// Per-goal tables; empty unless trained with goal conditioning.
    by_goal: BTreeMap<String, Table>,
    goal_conditioning: bool,
}

fn accumulate(table: &mut Table, seq: &[usize], order: usize) {
    for t in 0..seq.len() {
        for len in 0..order.min(t + 1) {
            let ctx = seq[t - len..t].to_vec();
            *table.entry(ctx).or_default().entry(seq[t]).or_default() += 1;
        }
    }
}

/// Counts sliding windows over `observed ++ future` of every instance.
pub fn train_ngram(
    instances: &[LtaInstance],
    taxonomy: &Taxonomy,
    order: usize,
    alpha: f64,
    goal_conditioning: bool,
) -> Result<NgramModel> {
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Config(format!("smoothing alpha must be positive (got {alpha})")));
    }
    if instances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = NgramModel {
        order,
        alpha,
        num_verbs: taxonomy.num_verbs(),
        num_nouns: taxonomy.num_nouns(),
        global: Table::new(),
        by_goal: BTreeMap::new(),
        goal_conditioning,
    };
    for inst in instances {
        let seq: Vec<usize> = inst
            .observed
            .iter()
            .chain(&inst.future_gt)
            .map(|&l| taxonomy.check(l).map(|l| taxonomy.action_index(l)))
            .collect::<Result<_>>()?;
        accumulate(&mut model.global, &seq, order);
        if goal_conditioning {
            if let Some(g) = inst.goal.as_deref().filter(|g| !g.is_empty()) {
                accumulate(model.by_goal.entry(g.to_string()).or_default(), &seq, order);
            }
        }
    }
    Ok(model)
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn goals(&self) -> impl Iterator<Item = &str> {
        self.by_goal.keys().map(String::as_str)
    }

    /// Smoothed distribution given a history of dense action ids.
    pub fn distribution(&self, history: &[usize], goal: Option<&str>) -> Vec<f64> {
        let v = self.num_verbs * self.num_nouns;
        let table = goal.and_then(|g| self.by_goal.get(g)).unwrap_or(&self.global);
        let longest = (self.order - 1).min(history.len());
        for len in (0..=longest).rev() {
            let ctx = &history[history.len() - len..];
            let Some(next) = table.get(ctx) else { continue };
            let total: u64 = next.values().sum();
            if total == 0 {
                continue;
            }
            let denom = total as f64 + self.alpha * v as f64;
            let mut dist = vec![self.alpha / denom; v];
            for (&a, &c) in next {
                dist[a] = (c as f64 + self.alpha) / denom;
            }
            return dist;
        }
        vec![1.0 / v as f64; v]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&NgramFile::from(self)).expect("n-gram serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NgramFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl ActionModel for NgramModel {
    fn num_verbs(&self) -> usize {
        self.num_verbs
    }

    fn num_nouns(&self) -> usize {
        self.num_nouns
    }

    fn goal_conditioned(&self) -> bool {
        self.goal_conditioning
    }

    fn next_distribution(&self, ctx: &DecodeContext<'_>, generated: &[ActionLabel]) -> Result<Vec<f64>> {
        let history: Vec<usize> =
            ctx.observed.iter().chain(generated).map(|l| l.verb * self.num_nouns + l.noun).collect();
        Ok(self.distribution(&history, ctx.goal))
    }
}

#[derive(Serialize, Deserialize)]
struct ContextRow {
    context: Vec<usize>,
    next: Vec<(usize, u64)>,
}

#[derive(Serialize, Deserialize)]
struct NgramFile {
    kind: String,
    order: usize,
    alpha: f64,
    num_verbs: usize,
    num_nouns: usize,
    goal_conditioning: bool,
    global: Vec<ContextRow>,
    #[serde(default)]
    by_goal: BTreeMap<String, Vec<ContextRow>>,
}

fn rows(t: &Table) -> Vec<ContextRow> {
    t.iter().map(|(c, n)| ContextRow { context: c.clone(), next: n.iter().map(|(&a, &k)| (a, k)).collect() }).collect()
}

fn table(rows: Vec<ContextRow>) -> Table {
    rows.into_iter().map(|r| (r.context, r.next.into_iter().collect())).collect()
}

impl From<&NgramModel> for NgramFile {
    fn from(m: &NgramModel) -> Self {
        NgramFile {
            kind: "ngram".into(),
            order: m.order,
            alpha: m.alpha,
            num_verbs: m.num_verbs,
            num_nouns: m.num_nouns,
            goal_conditioning: m.goal_conditioning,
            global: rows(&m.global),
            by_goal: m.by_goal.iter().map(|(g, t)| (g.clone(), rows(t))).collect(),
        }
    }
}

impl TryFrom<NgramFile> for NgramModel {
    type Error = Error;

    fn try_from(f: NgramFile) -> Result<Self> {
        if f.kind != "ngram" || f.order == 0 || f.alpha.is_nan() || f.alpha <= 0.0 {
            return Err(Error::Config("not a valid n-gram model file".into()));
        }
        Ok(NgramModel {
            order: f.order,
            alpha: f.alpha,
            num_verbs: f.num_verbs,
            num_nouns: f.num_nouns,
            goal_conditioning: f.goal_conditioning,
            global: table(f.global),
            by_goal: f.by_goal.into_iter().map(|(g, r)| (g, table(r))).collect(),
        })
    }
}
