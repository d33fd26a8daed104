//! ED@Z: best-of-K normalized edit distance for ordered anticipation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::edit::{edit_distance, EditVariant};
use crate::error::{Error, Result};
use crate::taxonomy::{ActionLabel, Taxonomy};

/// `K` predicted sequences of equal length `Z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    sequences: Vec<Vec<ActionLabel>>,
}

impl CandidateSet {
    pub fn new(sequences: Vec<Vec<ActionLabel>>) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return Err(Error::Shape("candidate set needs at least one sequence".into()));
        };
        let z = first.len();
        if let Some((i, s)) = sequences.iter().enumerate().find(|(_, s)| s.len() != z) {
            return Err(Error::Shape(format!("candidate {i} has length {} but candidate 0 has {z}", s.len())));
        }
        Ok(Self { sequences })
    }

    /// Like [`CandidateSet::new`] but also checks every label against `taxonomy`.
    pub fn checked(sequences: Vec<Vec<ActionLabel>>, taxonomy: &Taxonomy) -> Result<Self> {
        for l in sequences.iter().flatten() {
            taxonomy.check(*l)?;
        }
        Self::new(sequences)
    }

    pub fn sequences(&self) -> &[Vec<ActionLabel>] {
        &self.sequences
    }

    pub fn k(&self) -> usize {
        self.sequences.len()
    }

    pub fn z(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn push(&mut self, seq: Vec<ActionLabel>) -> Result<()> {
        if seq.len() != self.z() {
            return Err(Error::Shape(format!("expected length {}, got {}", self.z(), seq.len())));
        }
        self.sequences.push(seq);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Verb,
    Noun,
    Action,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Verb, Channel::Noun, Channel::Action];

    fn project(self, seq: &[ActionLabel]) -> Vec<(usize, usize)> {
        seq.iter()
            .map(|l| match self {
                Channel::Verb => (l.verb, 0),
                Channel::Noun => (0, l.noun),
                Channel::Action => (l.verb, l.noun),
            })
            .collect()
    }
}

/// Denominator applied to the raw edit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the ground-truth horizon `Z`; lengths must match.
    #[default]
    Horizon,
    /// Divide by `max(|pred|, |gt|)`; lengths may differ.
    MaxLen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EdOptions {
    #[serde(default)]
    pub variant: EditVariant,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Minimum over candidates of the normalized edit distance to `gt`.
pub fn ed_at_z(candidates: &CandidateSet, gt: &[ActionLabel], channel: Channel, opts: EdOptions) -> Result<f64> {
    if opts.normalization == Normalization::Horizon && candidates.z() != gt.len() {
        return Err(Error::Shape(format!("candidates have length {}, ground truth {}", candidates.z(), gt.len())));
    }
    let target = channel.project(gt);
    let best = candidates
        .sequences()
        .iter()
        .map(|seq| {
            let d = edit_distance(&channel.project(seq), &target, opts.variant) as f64;
            let denom = match opts.normalization {
                Normalization::Horizon => gt.len(),
                Normalization::MaxLen => seq.len().max(gt.len()),
            };
            if denom == 0 {
                0.0
            } else {
                d / denom as f64
            }
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEd {
    pub instance_id: String,
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
}

/// Mean over instances of best-of-K edit distance per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdReport {
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_instance: Vec<InstanceEd>,
}

impl EdReport {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Verb => self.verb_ed,
            Channel::Noun => self.noun_ed,
            Channel::Action => self.action_ed,
        }
    }

    pub fn without_breakdown(mut self) -> Self {
        self.per_instance.clear();
        self
    }
}

/// Scores every ground-truth instance. The per-instance breakdown is always
/// filled; drop it with [`EdReport::without_breakdown`].
pub fn evaluate_lta(
    predictions: &BTreeMap<String, CandidateSet>,
    gts: &[(String, Vec<ActionLabel>)],
    opts: EdOptions,
) -> Result<EdReport> {
    if gts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let rows: Vec<InstanceEd> = gts
        .par_iter()
        .map(|(id, gt)| {
            let cands = predictions.get(id).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
            Ok(InstanceEd {
                instance_id: id.clone(),
                verb: ed_at_z(cands, gt, Channel::Verb, opts)?,
                noun: ed_at_z(cands, gt, Channel::Noun, opts)?,
                action: ed_at_z(cands, gt, Channel::Action, opts)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&InstanceEd) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EdReport {
        verb_ed: mean(|r| r.verb),
        noun_ed: mean(|r| r.noun),
        action_ed: mean(|r| r.action),
        n_instances: rows.len(),
        per_instance: rows,
    })
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    instance_id: String,
    candidates: Vec<Vec<[String; 2]>>,
}

pub fn prediction_to_json(instance_id: &str, cands: &CandidateSet, taxonomy: &Taxonomy) -> String {
    let line = PredictionLine {
        instance_id: instance_id.to_string(),
        candidates: cands
            .sequences()
            .iter()
            .map(|s| s.iter().map(|l| [taxonomy.verbs()[l.verb].clone(), taxonomy.nouns()[l.noun].clone()]).collect())
            .collect(),
    };
    serde_json::to_string(&line).expect("prediction serializes")
}

pub fn write_predictions(
    out: &mut impl Write,
    predictions: &BTreeMap<String, CandidateSet>,
    taxonomy: &Taxonomy,
) -> std::io::Result<()> {
    for (id, c) in predictions {
        writeln!(out, "{}", prediction_to_json(id, c, taxonomy))?;
    }
    Ok(())
}

/// Reads a prediction dump. Labels may be canonical names or display forms.
pub fn read_predictions(reader: impl BufRead, taxonomy: &Taxonomy) -> Result<BTreeMap<String, CandidateSet>> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let seqs = p
            .candidates
            .iter()
            .map(|s| s.iter().map(|[v, n]| taxonomy.label(v, n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        out.insert(p.instance_id, CandidateSet::new(seqs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(pairs: &[(usize, usize)]) -> Vec<ActionLabel> {
        pairs.iter().map(|&(v, n)| ActionLabel::new(v, n)).collect()
    }

    #[test]
    fn exact_candidate_scores_zero() {
        let gt = seq(&[(0, 0), (1, 1), (2, 2)]);
        let mut c = vec![seq(&[(3, 3), (3, 3), (3, 3)]); 4];
        c.insert(2, gt.clone());
        let cs = CandidateSet::new(c).unwrap();
        for ch in Channel::ALL {
            assert_eq!(ed_at_z(&cs, &gt, ch, EdOptions::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn thirteen_substitutions_of_twenty() {
        // Distinct increasing ground truth; the candidate replaces positions
        // 0..13 by a token absent from gt, so no transposition can help.
        let gt: Vec<_> = (0..20).map(|i| ActionLabel::new(i, i)).collect();
        let mut cand = gt.clone();
        for c in cand.iter_mut().take(13) {
            *c = ActionLabel::new(99, 99);
        }
        let cs = CandidateSet::new(vec![cand.clone()]).unwrap();
        assert_eq!(super::super::edit::damerau_levenshtein(&cand, &gt), 13);
        let ed = ed_at_z(&cs, &gt, Channel::Action, EdOptions::default()).unwrap();
        assert!((ed - 0.65).abs() < 1e-12);
    }

    #[test]
    fn all_wrong_is_one() {
        let gt: Vec<_> = (0..20).map(|_| ActionLabel::new(0, 0)).collect();
        let cs = CandidateSet::new(vec![vec![ActionLabel::new(1, 1); 20]]).unwrap();
        assert_eq!(ed_at_z(&cs, &gt, Channel::Action, EdOptions::default()).unwrap(), 1.0);
    }

    #[test]
    fn channels_project_independently() {
        let gt = seq(&[(0, 0), (1, 1)]);
        let cs = CandidateSet::new(vec![seq(&[(0, 5), (1, 6)])]).unwrap();
        let o = EdOptions::default();
        assert_eq!(ed_at_z(&cs, &gt, Channel::Verb, o).unwrap(), 0.0);
        assert_eq!(ed_at_z(&cs, &gt, Channel::Noun, o).unwrap(), 1.0);
        assert_eq!(ed_at_z(&cs, &gt, Channel::Action, o).unwrap(), 1.0);
    }

    #[test]
    fn shape_errors() {
        assert!(matches!(CandidateSet::new(vec![]), Err(Error::Shape(_))));
        assert!(matches!(CandidateSet::new(vec![seq(&[(0, 0)]), seq(&[])]), Err(Error::Shape(_))));
        let cs = CandidateSet::new(vec![seq(&[(0, 0)])]).unwrap();
        let gt = seq(&[(0, 0), (0, 0)]);
        assert!(matches!(ed_at_z(&cs, &gt, Channel::Verb, EdOptions::default()), Err(Error::Shape(_))));
        let maxlen = EdOptions { normalization: Normalization::MaxLen, ..Default::default() };
        assert_eq!(ed_at_z(&cs, &gt, Channel::Verb, maxlen).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_means_and_missing() {
        let gt_a: Vec<_> = (0..5).map(|i| ActionLabel::new(i, i)).collect();
        let gt_b = gt_a.clone();
        let mut pa = gt_a.clone();
        pa[0] = ActionLabel::new(9, 9);
        let mut pb = gt_b.clone();
        pb[0] = ActionLabel::new(9, 9);
        pb[1] = ActionLabel::new(9, 9);
        let preds = BTreeMap::from([
            ("a".to_string(), CandidateSet::new(vec![pa]).unwrap()),
            ("b".to_string(), CandidateSet::new(vec![pb]).unwrap()),
        ]);
        let gts = vec![("a".to_string(), gt_a), ("b".to_string(), gt_b)];
        let r = evaluate_lta(&preds, &gts, EdOptions::default()).unwrap();
        assert!((r.action_ed - 0.3).abs() < 1e-12);
        assert_eq!(r.per_instance.len(), 2);

        let mut gts2 = gts.clone();
        gts2.push(("c".into(), vec![]));
        assert!(
            matches!(evaluate_lta(&preds, &gts2, EdOptions::default()), Err(Error::MissingPrediction(id)) if id == "c")
        );
    }

    #[test]
    fn prediction_dump_roundtrip() {
        let t = Taxonomy::new(vec!["open".into(), "close".into()], vec!["door".into()]).unwrap();
        let preds = BTreeMap::from([(
            "v:3".to_string(),
            CandidateSet::new(vec![seq(&[(0, 0), (1, 0)]), seq(&[(1, 0), (1, 0)])]).unwrap(),
        )]);
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds, &t).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"instance_id\":\"v:3\",\"candidates\":[[[\"open\",\"door\"],[\"close\",\"door\"]],[[\"close\",\"door\"],[\"close\",\"door\"]]]}\n"
        );
        assert_eq!(read_predictions(&buf[..], &t).unwrap(), preds);
    }
}
