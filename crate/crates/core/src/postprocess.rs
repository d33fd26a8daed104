//! Turns free-form LLM completions into valid candidate sequences.
//!
//! Each completion is split into comma-separated items, each item into a
//! verb word and a noun word. Words are matched against the rendering's
//! vocabulary, out-of-vocabulary words are snapped to their nearest
//! neighbour, and the resulting sequence is truncated or padded to `Z`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LtaInstance;
use crate::metrics::{levenshtein, CandidateSet};
use crate::taxonomy::{ActionLabel, LabelClass, LabelRendering, Taxonomy};

/// Malformation categories reported for LLM output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Incident {
    #[serde(rename = "Short Seq")]
    ShortSeq,
    #[serde(rename = "Long Seq")]
    LongSeq,
    #[serde(rename = "Invalid Seq")]
    InvalidSeq,
    #[serde(rename = "Invalid Verb")]
    InvalidVerb,
    #[serde(rename = "Invalid Noun")]
    InvalidNoun,
}

impl Incident {
    pub const ALL: [Incident; 5] =
        [Incident::ShortSeq, Incident::LongSeq, Incident::InvalidSeq, Incident::InvalidVerb, Incident::InvalidNoun];

    pub fn name(self) -> &'static str {
        match self {
            Incident::ShortSeq => "Short Seq",
            Incident::LongSeq => "Long Seq",
            Incident::InvalidSeq => "Invalid Seq",
            Incident::InvalidVerb => "Invalid Verb",
            Incident::InvalidNoun => "Invalid Noun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessOptions {
    /// Map every word to its nearest vocabulary entry regardless of
    /// distance, and keep newlines as ordinary characters.
    pub strict_paper: bool,
    /// Largest Levenshtein distance at which an unknown word is still
    /// snapped to the vocabulary (ignored under `strict_paper`).
    pub max_word_distance: usize,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self { strict_paper: false, max_word_distance: 3 }
    }
}

/// Result of parsing and repairing one completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    /// Two-word items as they appeared in the text.
    pub actions: Vec<(String, String)>,
    /// Valid actions after vocabulary mapping, before repair.
    pub mapped: Vec<ActionLabel>,
    /// Every incident raised, with multiplicity.
    pub incidents: Vec<Incident>,
    /// Exactly `Z` in-vocabulary labels.
    pub repaired: Vec<ActionLabel>,
}

impl ParseOutcome {
    pub fn has(&self, incident: Incident) -> bool {
        self.incidents.contains(&incident)
    }
}

/// Nearest vocabulary entry by case-insensitive Levenshtein distance.
/// Ties go to the lowest id. Returns `(id, distance)`.
pub fn nearest_vocab(word: &str, vocabulary: &[String]) -> (usize, usize) {
    assert!(!vocabulary.is_empty(), "vocabulary must be non-empty");
    let w: Vec<char> = word.to_lowercase().chars().collect();
    let mut best = (0, usize::MAX);
    for (id, entry) in vocabulary.iter().enumerate() {
        let e: Vec<char> = entry.to_lowercase().chars().collect();
        let d = levenshtein(&w, &e);
        if d < best.1 {
            best = (id, d);
            if d == 0 {
                break;
            }
        }
    }
    best
}

fn items(text: &str, opts: PostprocessOptions) -> Vec<&str> {
    let sep = |c: char| c == ',' || (!opts.strict_paper && (c == '\n' || c == '\r'));
    text.split(sep).map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Parses `text` and maps words to labels, without repair.
///
/// Length incidents compare the raw item count against `z`. Items that are
/// not exactly two words raise `InvalidSeq` and are dropped.
pub fn parse_action_sequence(
    text: &str,
    z: usize,
    rendering: &LabelRendering,
    opts: PostprocessOptions,
) -> ParseOutcome {
    let raw = items(text, opts);
    let mut out = ParseOutcome { actions: Vec::new(), mapped: Vec::new(), incidents: Vec::new(), repaired: Vec::new() };
    match raw.len().cmp(&z) {
        std::cmp::Ordering::Less => out.incidents.push(Incident::ShortSeq),
        std::cmp::Ordering::Greater => out.incidents.push(Incident::LongSeq),
        std::cmp::Ordering::Equal => {}
    }
    for item in raw {
        let words: Vec<&str> = item.split_whitespace().collect();
        let [verb, noun] = words[..] else {
            out.incidents.push(Incident::InvalidSeq);
            continue;
        };
        out.actions.push((verb.to_string(), noun.to_string()));
        let v = map_word(verb, rendering.words(LabelClass::Verb), Incident::InvalidVerb, opts);
        let n = map_word(noun, rendering.words(LabelClass::Noun), Incident::InvalidNoun, opts);
        out.incidents.extend(v.1.into_iter().chain(n.1));
        match (v.0, n.0) {
            (Some(verb), Some(noun)) => out.mapped.push(ActionLabel { verb, noun }),
            _ => out.incidents.push(Incident::InvalidSeq),
        }
    }
    out
}

fn map_word(
    word: &str,
    vocab: &[String],
    kind: Incident,
    opts: PostprocessOptions,
) -> (Option<usize>, Option<Incident>) {
    let (id, d) = nearest_vocab(word, vocab);
    if d == 0 {
        (Some(id), None)
    } else if opts.strict_paper || d <= opts.max_word_distance {
        (Some(id), Some(kind))
    } else {
        (None, Some(kind))
    }
}

/// Truncates to `z`, or pads with the last valid action (or `fallback`
/// when there is none).
pub fn repair_sequence(valid: &[ActionLabel], z: usize, fallback: ActionLabel) -> Vec<ActionLabel> {
    let pad = valid.last().copied().unwrap_or(fallback);
    let mut out: Vec<ActionLabel> = valid.iter().copied().take(z).collect();
    out.resize(z, pad);
    out
}

/// Parse, map and repair one completion.
pub fn postprocess_completion(
    text: &str,
    z: usize,
    rendering: &LabelRendering,
    fallback: ActionLabel,
    opts: PostprocessOptions,
) -> ParseOutcome {
    let mut out = parse_action_sequence(text, z, rendering, opts);
    out.repaired = repair_sequence(&out.mapped, z, fallback);
    out
}

/// Share of completions that raised each incident at least once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncidentStats {
    pub completions: usize,
    /// Completions with at least one incident of each category.
    pub counts: BTreeMap<Incident, usize>,
}

impl IncidentStats {
    pub fn record(&mut self, outcome: &ParseOutcome) {
        self.completions += 1;
        for kind in Incident::ALL {
            if outcome.has(kind) {
                *self.counts.entry(kind).or_default() += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &IncidentStats) {
        self.completions += other.completions;
        for (&k, &c) in &other.counts {
            *self.counts.entry(k).or_default() += c;
        }
    }

    pub fn count(&self, kind: Incident) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    /// Percentage of completions (0 to 100) affected by `kind`.
    pub fn percent(&self, kind: Incident) -> f64 {
        if self.completions == 0 {
            return 0.0;
        }
        100.0 * self.count(kind) as f64 / self.completions as f64
    }

    /// `{"Short Seq": pct, ...}` plus the completion count.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("completions".into(), self.completions.into());
        for kind in Incident::ALL {
            m.insert(kind.name().into(), self.percent(kind).into());
        }
        serde_json::Value::Object(m)
    }
}

/// Postprocesses `K` completions into a candidate set of length-`z`
/// sequences. Returns `None` only when `texts` is empty.
pub fn postprocess_candidates(
    texts: &[String],
    z: usize,
    rendering: &LabelRendering,
    fallback: ActionLabel,
    opts: PostprocessOptions,
) -> Option<(CandidateSet, IncidentStats, Vec<ParseOutcome>)> {
    if texts.is_empty() || z == 0 {
        return None;
    }
    let outcomes: Vec<ParseOutcome> =
        texts.par_iter().map(|t| postprocess_completion(t, z, rendering, fallback, opts)).collect();
    let mut stats = IncidentStats::default();
    for o in &outcomes {
        stats.record(o);
    }
    let set = CandidateSet::new(outcomes.iter().map(|o| o.repaired.clone()).collect()).expect("equal lengths");
    Some((set, stats, outcomes))
}

/// Most frequent action over observed and future labels of `instances`;
/// ties go to the lowest action id. Falls back to `(0, 0)`.
pub fn most_frequent_action(instances: &[LtaInstance], taxonomy: &Taxonomy) -> ActionLabel {
    let mut counts = vec![0usize; taxonomy.num_actions()];
    for l in instances.iter().flat_map(|i| i.observed.iter().chain(&i.future_gt)) {
        if taxonomy.check(*l).is_ok() {
            counts[taxonomy.action_index(*l)] += 1;
        }
    }
    let best = counts.iter().enumerate().fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
    taxonomy.action_from_index(best.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::taxonomy::RenderingMode;

    fn tax() -> Taxonomy {
        Taxonomy::new(
            ["open", "close", "take", "put"].map(String::from).to_vec(),
            ["door", "drawer", "brush", "pen", "cup"].map(String::from).to_vec(),
        )
        .unwrap()
    }

    fn l(v: usize, n: usize) -> ActionLabel {
        ActionLabel::new(v, n)
    }

    #[test]
    fn clean_text_parses_without_incidents() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let o = postprocess_completion("open door, close door", 2, &r, l(0, 0), Default::default());
        assert!(o.incidents.is_empty());
        assert_eq!(o.repaired, vec![l(0, 0), l(1, 0)]);
    }

    #[test]
    fn junk_item_is_dropped_and_flagged() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let o = postprocess_completion("open door, banana, close door", 2, &r, l(3, 4), Default::default());
        assert_eq!(o.incidents, vec![Incident::LongSeq, Incident::InvalidSeq]);
        assert_eq!(o.actions.len(), 2);
        assert_eq!(o.repaired, vec![l(0, 0), l(1, 0)]);
    }

    #[test]
    fn empty_text_is_short_and_uses_fallback() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let o = postprocess_completion("", 20, &r, l(2, 3), Default::default());
        assert_eq!(o.incidents, vec![Incident::ShortSeq]);
        assert!(o.actions.is_empty());
        assert_eq!(o.repaired, vec![l(2, 3); 20]);
    }

    #[test]
    fn repair_rules() {
        let a: Vec<ActionLabel> = (0..22).map(|i| l(i % 4, i % 5)).collect();
        assert_eq!(repair_sequence(&a, 20, l(0, 0)), a[..20].to_vec());
        let three = [l(0, 1), l(1, 2), l(2, 3)];
        assert_eq!(repair_sequence(&three, 5, l(0, 0)), vec![l(0, 1), l(1, 2), l(2, 3), l(2, 3), l(2, 3)]);
        assert_eq!(repair_sequence(&[], 3, l(3, 4)), vec![l(3, 4); 3]);
    }

    #[test]
    fn nearest_vocab_cases() {
        let vocab: Vec<String> = ["brush", "pen"].map(String::from).to_vec();
        assert_eq!(nearest_vocab("paintbrush", &vocab), (0, 5));
        assert_eq!(nearest_vocab("PEN", &vocab), (1, 0));
        let tie: Vec<String> = ["aa", "bb", "cc", "ab", "dd", "ee", "ff", "ba"].map(String::from).to_vec();
        // "bz" is one edit from ids 1 ("bb") and 7 ("ba"); lowest id wins.
        assert_eq!(nearest_vocab("bz", &tie), (1, 1));
    }

    #[test]
    fn misspelled_words_snap_within_threshold() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let o = postprocess_completion("opne door, take cupp", 2, &r, l(0, 0), Default::default());
        assert_eq!(o.incidents, vec![Incident::InvalidVerb, Incident::InvalidNoun]);
        assert_eq!(o.repaired, vec![l(0, 0), l(2, 4)]);

        let far = postprocess_completion("open door, take xylophone", 2, &r, l(0, 0), Default::default());
        assert_eq!(far.incidents, vec![Incident::InvalidNoun, Incident::InvalidSeq]);
        assert_eq!(far.repaired, vec![l(0, 0), l(0, 0)]);

        let strict = PostprocessOptions { strict_paper: true, ..Default::default() };
        let mapped = postprocess_completion("open door, take xylophone", 2, &r, l(0, 0), strict);
        assert_eq!(mapped.incidents, vec![Incident::InvalidNoun]);
        assert_eq!(mapped.mapped.len(), 2);
    }

    #[test]
    fn newlines_act_as_separators_unless_strict() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let o = postprocess_completion("open door\nclose drawer", 2, &r, l(0, 0), Default::default());
        assert!(o.incidents.is_empty());
        let strict = PostprocessOptions { strict_paper: true, ..Default::default() };
        let s = postprocess_completion("open door\nclose drawer", 2, &r, l(0, 0), strict);
        assert!(s.has(Incident::ShortSeq) && s.has(Incident::InvalidSeq));
    }

    #[test]
    fn shuffled_and_index_renderings_invert() {
        let t = tax();
        let seq = vec![l(0, 4), l(3, 1), l(2, 2)];
        for mode in [RenderingMode::Shuffled { seed: 4 }, RenderingMode::Indices] {
            let r = LabelRendering::new(&t, mode);
            let text = r.render_sequence(&seq).unwrap();
            let o = postprocess_completion(&text, 3, &r, l(0, 0), Default::default());
            assert!(o.incidents.is_empty(), "{mode:?}");
            assert_eq!(o.repaired, seq);
        }
    }

    #[test]
    fn stats_are_per_completion() {
        let t = tax();
        let r = LabelRendering::canonical(&t);
        let texts: Vec<String> =
            ["open door, close door", "open door", "open door, opne door", "x, y, z"].map(String::from).to_vec();
        let (set, stats, _) = postprocess_candidates(&texts, 2, &r, l(0, 0), Default::default()).unwrap();
        assert_eq!(set.k(), 4);
        assert_eq!(stats.completions, 4);
        assert_eq!(stats.percent(Incident::ShortSeq), 25.0);
        assert_eq!(stats.percent(Incident::LongSeq), 25.0);
        assert_eq!(stats.percent(Incident::InvalidVerb), 25.0);
        assert_eq!(stats.percent(Incident::InvalidSeq), 25.0);
        assert_eq!(stats.to_json()["Invalid Noun"], 0.0);
    }

    #[test]
    fn fallback_is_most_frequent() {
        let t = tax();
        let inst = LtaInstance {
            video_id: "v".into(),
            split: crate::dataset::Split::Train,
            stop_index: 1,
            observed: vec![l(1, 1), l(2, 2)],
            future_gt: vec![l(2, 2), l(1, 1)],
            observed_source: crate::dataset::ObservedSource::GroundTruth,
            goal: None,
        };
        assert_eq!(most_frequent_action(&[inst], &t), l(1, 1));
        assert_eq!(most_frequent_action(&[], &t), l(0, 0));
    }

    proptest! {
        #[test]
        fn total_over_arbitrary_text(text in "\\PC{0,80}", z in 1usize..6) {
            let t = tax();
            let r = LabelRendering::canonical(&t);
            let o = postprocess_completion(&text, z, &r, l(0, 0), Default::default());
            prop_assert_eq!(o.repaired.len(), z);
            for lab in o.repaired {
                prop_assert!(t.check(lab).is_ok());
            }
        }

        #[test]
        fn repaired_output_is_a_fixed_point(text in "[a-z ,]{0,60}", z in 1usize..6) {
            let t = tax();
            let r = LabelRendering::canonical(&t);
            let o = postprocess_completion(&text, z, &r, l(1, 1), Default::default());
            let again = postprocess_completion(&r.render_sequence(&o.repaired).unwrap(), z, &r, l(1, 1), Default::default());
            prop_assert!(again.incidents.is_empty());
            prop_assert_eq!(again.repaired, o.repaired);
        }
    }

    #[test]
    fn exact_display_is_fixed_point() {
        let t = tax();
        for class in [LabelClass::Verb, LabelClass::Noun] {
            let words = t.displays(class);
            for (id, w) in words.iter().enumerate() {
                assert_eq!(nearest_vocab(w, words), (id, 0));
            }
        }
    }
}
