//! Verb/noun vocabularies, single-word display forms and label renderings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;

/// A verb/noun pair. Indices refer to the owning [`Taxonomy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionLabel {
    pub verb: usize,
    pub noun: usize,
}

impl ActionLabel {
    pub const fn new(verb: usize, noun: usize) -> Self {
        Self { verb, noun }
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.verb, self.noun)
    }
}

/// Which half of an action a word belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelClass {
    Verb,
    Noun,
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '-' | '(' | ')' | '_' | ',' | '/')
}

/// Picks the first word of `raw` that is not yet in `taken`.
///
/// When every word is taken, the first word gets the smallest positive
/// integer suffix that is free.
pub fn normalize_label(raw: &str, taken: &HashSet<String>) -> Result<String> {
    let words: Vec<&str> = raw.split(is_separator).filter(|w| !w.is_empty()).collect();
    let Some(first) = words.first() else {
        return Err(Error::InvalidLabel(format!("{raw:?} contains no words")));
    };
    if let Some(w) = words.iter().find(|w| !taken.contains(**w)) {
        return Ok((*w).to_string());
    }
    let mut k = 1usize;
    loop {
        let candidate = format!("{first}{k}");
        if !taken.contains(&candidate) {
            return Ok(candidate);
        }
        k += 1;
    }
}

/// Immutable verb and noun vocabularies. Ids are positions in the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    verbs: Vec<String>,
    nouns: Vec<String>,
    display_verb: Vec<String>,
    display_noun: Vec<String>,
    verb_index: HashMap<String, usize>,
    noun_index: HashMap<String, usize>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DisplayOverrides {
    #[serde(default)]
    verbs: BTreeMap<String, String>,
    #[serde(default)]
    nouns: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    verbs: Vec<String>,
    nouns: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    display: Option<DisplayOverrides>,
}

fn build_displays(class: &str, names: &[String], overrides: &BTreeMap<String, String>) -> Result<Vec<String>> {
    if names.is_empty() {
        return Err(Error::InvalidLabel(format!("{class} vocabulary is empty")));
    }
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateLabel(format!("{class} {n:?}")));
        }
    }
    let mut taken: HashSet<String> = HashSet::new();
    for (canonical, shown) in overrides {
        if !seen.contains(canonical.as_str()) {
            return Err(Error::InvalidLabel(format!("display override for unknown {class} {canonical:?}")));
        }
        if shown.is_empty() || shown.contains(is_separator) {
            return Err(Error::InvalidLabel(format!("display form {shown:?} is not a single word")));
        }
        if !taken.insert(shown.clone()) {
            return Err(Error::DuplicateLabel(format!("{class} display {shown:?}")));
        }
    }
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let shown = match overrides.get(n) {
            Some(s) => s.clone(),
            None => {
                let s = normalize_label(n, &taken)?;
                taken.insert(s.clone());
                s
            }
        };
        out.push(shown);
    }
    Ok(out)
}

fn index_of(names: &[String], displays: &[String]) -> HashMap<String, usize> {
    let mut idx = HashMap::with_capacity(names.len() * 2);
    // Display forms first so a canonical name always wins a clash.
    for (i, d) in displays.iter().enumerate() {
        idx.insert(d.clone(), i);
    }
    for (i, n) in names.iter().enumerate() {
        idx.insert(n.clone(), i);
    }
    idx
}

impl Taxonomy {
    /// Builds display forms by applying [`normalize_label`] in list order.
    pub fn new(verbs: Vec<String>, nouns: Vec<String>) -> Result<Self> {
        Self::with_overrides(verbs, nouns, &BTreeMap::new(), &BTreeMap::new())
    }

    pub fn with_overrides(
        verbs: Vec<String>,
        nouns: Vec<String>,
        verb_display: &BTreeMap<String, String>,
        noun_display: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let display_verb = build_displays("verb", &verbs, verb_display)?;
        let display_noun = build_displays("noun", &nouns, noun_display)?;
        Ok(Self {
            verb_index: index_of(&verbs, &display_verb),
            noun_index: index_of(&nouns, &display_noun),
            verbs,
            nouns,
            display_verb,
            display_noun,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        let display = file.display.unwrap_or_default();
        Self::with_overrides(file.verbs, file.nouns, &display.verbs, &display.nouns)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Serializes with every display form spelled out, so reloading never
    /// depends on the normalization rule.
    pub fn to_json(&self) -> String {
        let file = TaxonomyFile {
            verbs: self.verbs.clone(),
            nouns: self.nouns.clone(),
            display: Some(DisplayOverrides {
                verbs: self.verbs.iter().cloned().zip(self.display_verb.iter().cloned()).collect(),
                nouns: self.nouns.iter().cloned().zip(self.display_noun.iter().cloned()).collect(),
            }),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn nouns(&self) -> &[String] {
        &self.nouns
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    pub fn num_actions(&self) -> usize {
        self.verbs.len() * self.nouns.len()
    }

    pub fn class_size(&self, class: LabelClass) -> usize {
        match class {
            LabelClass::Verb => self.num_verbs(),
            LabelClass::Noun => self.num_nouns(),
        }
    }

    pub fn display_verb(&self, id: usize) -> &str {
        &self.display_verb[id]
    }

    pub fn display_noun(&self, id: usize) -> &str {
        &self.display_noun[id]
    }

    pub fn displays(&self, class: LabelClass) -> &[String] {
        match class {
            LabelClass::Verb => &self.display_verb,
            LabelClass::Noun => &self.display_noun,
        }
    }

    /// Resolves a canonical name or display form.
    pub fn verb_id(&self, name: &str) -> Option<usize> {
        self.verb_index.get(name).copied()
    }

    pub fn noun_id(&self, name: &str) -> Option<usize> {
        self.noun_index.get(name).copied()
    }

    pub fn label(&self, verb: &str, noun: &str) -> Result<ActionLabel> {
        let v = self.verb_id(verb).ok_or_else(|| Error::InvalidLabel(format!("unknown verb {verb:?}")))?;
        let n = self.noun_id(noun).ok_or_else(|| Error::InvalidLabel(format!("unknown noun {noun:?}")))?;
        Ok(ActionLabel::new(v, n))
    }

    pub fn check(&self, label: ActionLabel) -> Result<ActionLabel> {
        if label.verb < self.num_verbs() && label.noun < self.num_nouns() {
            Ok(label)
        } else {
            Err(Error::InvalidLabel(format!(
                "{label} out of range for {}x{} taxonomy",
                self.num_verbs(),
                self.num_nouns()
            )))
        }
    }

    /// Dense action index `verb * |nouns| + noun`.
    pub fn action_index(&self, label: ActionLabel) -> usize {
        label.verb * self.num_nouns() + label.noun
    }

    pub fn action_from_index(&self, idx: usize) -> ActionLabel {
        ActionLabel::new(idx / self.num_nouns(), idx % self.num_nouns())
    }

    /// Canonical (verb, noun) display pair.
    pub fn display_pair(&self, label: ActionLabel) -> (&str, &str) {
        (self.display_verb(label.verb), self.display_noun(label.noun))
    }

    /// Hex SHA-256 over the vocabularies and display forms.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, list) in [
            ("verbs", &self.verbs),
            ("nouns", &self.nouns),
            ("dverbs", &self.display_verb),
            ("dnouns", &self.display_noun),
        ] {
            h.update(tag.as_bytes());
            h.update((list.len() as u64).to_le_bytes());
            for s in list {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// How labels are spelled when sequences are turned into text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RenderingMode {
    #[default]
    Canonical,
    Shuffled {
        seed: u64,
    },
    Indices,
}

/// A materialized rendering: per-id output words plus the bijections that
/// produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRendering {
    mode: RenderingMode,
    verb_map: Vec<usize>,
    noun_map: Vec<usize>,
    verb_words: Vec<String>,
    noun_words: Vec<String>,
}

/// In-place Fisher–Yates: for `i` from `n-1` down to 1, swap `i` with a
/// uniform `j` in `0..=i`.
fn fisher_yates(n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Seeded uniform bijections over verbs and over nouns.
pub fn shuffle_mapping(taxonomy: &Taxonomy, seed: u64) -> LabelRendering {
    LabelRendering::new(taxonomy, RenderingMode::Shuffled { seed })
}

impl LabelRendering {
    pub fn new(taxonomy: &Taxonomy, mode: RenderingMode) -> Self {
        let (nv, nn) = (taxonomy.num_verbs(), taxonomy.num_nouns());
        let (verb_map, noun_map) = match mode {
            RenderingMode::Canonical | RenderingMode::Indices => ((0..nv).collect(), (0..nn).collect()),
            RenderingMode::Shuffled { seed } => (
                fisher_yates(nv, &mut seed::substream(seed, "shuffle/verbs")),
                fisher_yates(nn, &mut seed::substream(seed, "shuffle/nouns")),
            ),
        };
        let words = |map: &[usize], displays: &[String]| -> Vec<String> {
            match mode {
                RenderingMode::Indices => (0..map.len()).map(|i| i.to_string()).collect(),
                _ => map.iter().map(|&j| displays[j].clone()).collect(),
            }
        };
        Self {
            verb_words: words(&verb_map, &taxonomy.display_verb),
            noun_words: words(&noun_map, &taxonomy.display_noun),
            mode,
            verb_map,
            noun_map,
        }
    }

    pub fn canonical(taxonomy: &Taxonomy) -> Self {
        Self::new(taxonomy, RenderingMode::Canonical)
    }

    pub fn mode(&self) -> RenderingMode {
        self.mode
    }

    pub fn verb_map(&self) -> &[usize] {
        &self.verb_map
    }

    pub fn noun_map(&self) -> &[usize] {
        &self.noun_map
    }

    /// Rendered word for every id of `class`, indexed by the original id.
    pub fn words(&self, class: LabelClass) -> &[String] {
        match class {
            LabelClass::Verb => &self.verb_words,
            LabelClass::Noun => &self.noun_words,
        }
    }

    pub fn render_action(&self, label: ActionLabel) -> Result<String> {
        match (self.verb_words.get(label.verb), self.noun_words.get(label.noun)) {
            (Some(v), Some(n)) => Ok(format!("{v} {n}")),
            _ => Err(Error::InvalidLabel(format!("{label} out of range for rendering"))),
        }
    }

    /// `"verb noun, verb noun, ..."`.
    pub fn render_sequence(&self, labels: &[ActionLabel]) -> Result<String> {
        let parts = labels.iter().map(|&l| self.render_action(l)).collect::<Result<Vec<_>>>()?;
        Ok(parts.join(", "))
    }
}

/// Free-function form of [`LabelRendering::render_sequence`].
pub fn render_sequence(labels: &[ActionLabel], rendering: &LabelRendering) -> Result<String> {
    rendering.render_sequence(labels)
}
