//! Synthetic activity grammars with known answers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_annotations, Segment, Split, VideoAnnotation};
use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::{ActionLabel, Taxonomy};

const VERBS: [&str; 20] = [
    "take", "put", "open", "close", "cut", "wash", "stir", "pour", "mix", "fold", "hold", "turn", "pick", "drop",
    "wipe", "move", "press", "pull", "push", "fill",
];
const NOUNS: [&str; 20] = [
    "cup", "knife", "door", "drawer", "bowl", "spoon", "pan", "lid", "tap", "plate", "box", "bag", "paper", "towel",
    "bottle", "board", "onion", "dough", "brush", "sponge",
];
const GOALS: [&str; 12] = [
    "make tea",
    "fix shelf",
    "bake bread",
    "clean kitchen",
    "paint wall",
    "wash dishes",
    "pack bag",
    "cook pasta",
    "repair bike",
    "plant seeds",
    "sort mail",
    "iron shirt",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalCycle {
    pub name: String,
    pub cycle: Vec<ActionLabel>,
}

/// Videos open with `prefix_len` steps of a shared cycle (random phase),
/// then repeat their goal's cycle. With no prefix, the goal cycle starts
/// at a random phase; otherwise at its first action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub num_verbs: usize,
    pub num_nouns: usize,
    #[serde(default)]
    pub prefix_cycle: Vec<ActionLabel>,
    #[serde(default)]
    pub prefix_len: usize,
    pub goals: Vec<GoalCycle>,
    pub seed: u64,
}

fn names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| base.get(i).map_or_else(|| format!("{prefix}{i}"), |s| s.to_string())).collect()
}

fn distinct_actions(num_verbs: usize, num_nouns: usize, n: usize, seed: u64) -> Result<Vec<ActionLabel>> {
    let total = num_verbs * num_nouns;
    if n > total {
        return Err(Error::Config(format!("grammar needs {n} distinct actions but the vocabulary has {total}")));
    }
    let mut ids: Vec<usize> = (0..total).collect();
    ids.shuffle(&mut seed::substream(seed, "grammar"));
    Ok(ids[..n].iter().map(|&i| ActionLabel::new(i / num_nouns, i % num_nouns)).collect())
}

impl SyntheticGrammar {
    /// One cycle of `cycle_len` distinct actions; every video is the cycle
    /// unrolled from a random phase.
    pub fn cycle(num_verbs: usize, num_nouns: usize, cycle_len: usize, seed: u64) -> Result<Self> {
        let cycle = distinct_actions(num_verbs, num_nouns, cycle_len, seed)?;
        Ok(Self {
            num_verbs,
            num_nouns,
            prefix_cycle: Vec::new(),
            prefix_len: 0,
            goals: vec![GoalCycle { name: GOALS[0].into(), cycle }],
            seed,
        })
    }

    /// A shared opening of `prefix_len` steps, then one of `n_goals` cycles
    /// with pairwise disjoint actions. The opening alone does not reveal the
    /// goal.
    pub fn goal_determined(
        num_verbs: usize,
        num_nouns: usize,
        n_goals: usize,
        prefix_cycle_len: usize,
        prefix_len: usize,
        goal_cycle_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let all = distinct_actions(num_verbs, num_nouns, prefix_cycle_len + n_goals * goal_cycle_len, seed)?;
        let (prefix, rest) = all.split_at(prefix_cycle_len);
        let goal_names = names(&GOALS, n_goals, "goal ");
        let goals = rest
            .chunks(goal_cycle_len)
            .zip(goal_names)
            .map(|(c, name)| GoalCycle { name, cycle: c.to_vec() })
            .collect();
        let g = Self { num_verbs, num_nouns, prefix_cycle: prefix.to_vec(), prefix_len, goals, seed };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.goals.is_empty() || self.goals.iter().any(|g| g.cycle.is_empty()) {
            return Err(Error::Config("grammar needs at least one non-empty goal cycle".into()));
        }
        if self.prefix_len > 0 && self.prefix_cycle.is_empty() {
            return Err(Error::Config("prefix_len > 0 needs a prefix cycle".into()));
        }
        let in_vocab = |l: &ActionLabel| l.verb < self.num_verbs && l.noun < self.num_nouns;
        let mut seen = BTreeSet::new();
        for l in self.goals.iter().flat_map(|g| &g.cycle) {
            if !in_vocab(l) {
                return Err(Error::Config(format!("grammar action {l} is outside the vocabulary")));
            }
            if !seen.insert(*l) {
                return Err(Error::Config(format!("action {l} appears in more than one goal step")));
            }
        }
        if !self.prefix_cycle.iter().all(in_vocab) {
            return Err(Error::Config("prefix action outside the vocabulary".into()));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy::new(names(&VERBS, self.num_verbs, "verb"), names(&NOUNS, self.num_nouns, "noun"))
            .expect("synthetic names are distinct")
    }

    /// Action sequence of length `len` for goal `goal` at the given phases.
    pub fn unroll(&self, goal: usize, prefix_phase: usize, goal_phase: usize, len: usize) -> Vec<ActionLabel> {
        let g = &self.goals[goal].cycle;
        (0..len)
            .map(|t| {
                if t < self.prefix_len {
                    self.prefix_cycle[(prefix_phase + t) % self.prefix_cycle.len()]
                } else {
                    g[(goal_phase + t - self.prefix_len) % g.len()]
                }
            })
            .collect()
    }

    fn sample(&self, rng: &mut seed::Rng, len: usize) -> (usize, Vec<ActionLabel>) {
        let goal = rng.random_range(0..self.goals.len());
        let prefix_phase = if self.prefix_cycle.is_empty() { 0 } else { rng.random_range(0..self.prefix_cycle.len()) };
        let goal_phase = if self.prefix_len == 0 { rng.random_range(0..self.goals[goal].cycle.len()) } else { 0 };
        (goal, self.unroll(goal, prefix_phase, goal_phase, len))
    }
}

/// Generated corpus: the grammar's taxonomy plus annotated videos.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    pub videos: Vec<VideoAnnotation>,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.taxonomy.save(&dir.join("taxonomy.json"))?;
        write_annotations(&dir.join("annotations.jsonl"), &self.videos, &self.taxonomy)
    }
}

/// Samples `n_videos` videos of `len` actions. The last
/// `round(n_videos * test_fraction)` videos form the test split; with a
/// shared prefix, test videos are only queried right after it.
pub fn generate_synthetic(
    grammar: &SyntheticGrammar,
    n_videos: usize,
    len: usize,
    test_fraction: f64,
) -> Result<SyntheticCorpus> {
    grammar.validate()?;
    if len == 0 || !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config("video length must be positive and test_fraction in [0, 1]".into()));
    }
    let n_test = (n_videos as f64 * test_fraction).round() as usize;
    let mut rng = seed::substream(grammar.seed, "videos");
    let videos = (0..n_videos)
        .map(|i| {
            let (goal, actions) = grammar.sample(&mut rng, len);
            let test = i >= n_videos - n_test;
            VideoAnnotation {
                video_id: format!("synth{i:04}"),
                split: if test { Split::Test } else { Split::Train },
                segments: actions
                    .into_iter()
                    .enumerate()
                    .map(|(t, action)| Segment { start_s: 2.0 * t as f64, end_s: 2.0 * t as f64 + 1.5, action })
                    .collect(),
                stop_indices: (test && grammar.prefix_len > 0).then(|| vec![grammar.prefix_len - 1]),
                goal: Some(grammar.goals[goal].name.clone()),
            }
        })
        .collect();
    Ok(SyntheticCorpus { taxonomy: grammar.taxonomy(), videos })
}

/// Replaces each action of `split` videos, independently with probability
/// `rate`, by a different uniformly drawn action.
pub fn apply_label_noise(videos: &mut [VideoAnnotation], split: Split, rate: f64, seed: u64, taxonomy: &Taxonomy) {
    let total = taxonomy.num_actions();
    if total < 2 {
        return;
    }
    let mut rng = seed::substream(seed, "label-noise");
    for v in videos.iter_mut().filter(|v| v.split == split) {
        for s in &mut v.segments {
            if rng.random_bool(rate) {
                let cur = taxonomy.action_index(s.action);
                let mut other = rng.random_range(0..total - 1);
                if other >= cur {
                    other += 1;
                }
                s.action = taxonomy.action_from_index(other);
            }
        }
    }
}
