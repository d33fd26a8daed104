//! Segment annotations, anticipation instances and recognition-noise simulation.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::taxonomy::{ActionLabel, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub action: ActionLabel,
}

impl Segment {
    fn midpoint(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub split: Split,
    pub segments: Vec<Segment>,
    /// Explicit stop indices; when present they replace enumeration.
    pub stop_indices: Option<Vec<usize>>,
    pub goal: Option<String>,
}

impl VideoAnnotation {
    pub fn actions(&self) -> Vec<ActionLabel> {
        self.segments.iter().map(|s| s.action).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSegment {
    start_s: f64,
    end_s: f64,
    verb: String,
    noun: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawVideo {
    video_id: String,
    #[serde(default)]
    split: Split,
    segments: Vec<RawSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stop_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    goal: Option<String>,
}

fn validate(raw: RawVideo, taxonomy: &Taxonomy, line: usize) -> Result<VideoAnnotation> {
    let parse_err = |msg: String| Error::Parse { line, msg };
    if raw.segments.is_empty() {
        return Err(parse_err(format!("video {:?} has no segments", raw.video_id)));
    }
    let mut segments = Vec::with_capacity(raw.segments.len());
    let mut prev_start = f64::NEG_INFINITY;
    for (i, s) in raw.segments.into_iter().enumerate() {
        if !(s.start_s.is_finite() && s.end_s.is_finite()) || s.end_s <= s.start_s {
            return Err(parse_err(format!("segment {i}: end_s {} must exceed start_s {}", s.end_s, s.start_s)));
        }
        if s.start_s < prev_start {
            return Err(parse_err(format!("segment {i} starts before its predecessor")));
        }
        prev_start = s.start_s;
        let action = taxonomy.label(&s.verb, &s.noun).map_err(|e| match e {
            Error::InvalidLabel(m) => Error::InvalidLabel(format!("line {line}: {m}")),
            other => other,
        })?;
        segments.push(Segment { start_s: s.start_s, end_s: s.end_s, action });
    }
    Ok(VideoAnnotation {
        video_id: raw.video_id,
        split: raw.split,
        segments,
        stop_indices: raw.stop_indices,
        goal: raw.goal,
    })
}

/// Parses annotation JSONL (one video per line, blank lines ignored).
pub fn parse_annotations(text: &str, taxonomy: &Taxonomy) -> Result<Vec<VideoAnnotation>> {
    read_annotations(text.as_bytes(), taxonomy)
}

fn read_annotations(reader: impl BufRead, taxonomy: &Taxonomy) -> Result<Vec<VideoAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawVideo =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        out.push(validate(raw, taxonomy, lineno)?);
    }
    Ok(out)
}

pub fn ingest_annotations(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<VideoAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(BufReader::new(file), taxonomy)
}

pub fn annotation_to_json(video: &VideoAnnotation, taxonomy: &Taxonomy) -> String {
    let raw = RawVideo {
        video_id: video.video_id.clone(),
        split: video.split,
        segments: video
            .segments
            .iter()
            .map(|s| RawSegment {
                start_s: s.start_s,
                end_s: s.end_s,
                verb: taxonomy.verbs()[s.action.verb].clone(),
                noun: taxonomy.nouns()[s.action.noun].clone(),
            })
            .collect(),
        stop_indices: video.stop_indices.clone(),
        goal: video.goal.clone(),
    };
    serde_json::to_string(&raw).expect("annotation serializes")
}

pub fn write_annotations(path: &Path, videos: &[VideoAnnotation], taxonomy: &Taxonomy) -> Result<()> {
    let mut buf = Vec::new();
    for v in videos {
        buf.extend_from_slice(annotation_to_json(v, taxonomy).as_bytes());
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservedSource {
    GroundTruth,
    Recognized { noise_rate: f64, seed: u64 },
}

/// One anticipation query: the observed window and the ground-truth future.
#[derive(Debug, Clone, PartialEq)]
pub struct LtaInstance {
    pub video_id: String,
    pub split: Split,
    pub stop_index: usize,
    pub observed: Vec<ActionLabel>,
    pub future_gt: Vec<ActionLabel>,
    pub observed_source: ObservedSource,
    pub goal: Option<String>,
}

impl LtaInstance {
    pub fn id(&self) -> String {
        format!("{}:{}", self.video_id, self.stop_index)
    }
}

/// Enumerates stop indices `T` in `[n_seg-1, N-z-1]`, or uses the video's
/// explicit list (entries outside that range are skipped).
pub fn make_lta_instances(video: &VideoAnnotation, n_seg: usize, z: usize) -> Result<Vec<LtaInstance>> {
    if n_seg == 0 || z == 0 {
        return Err(Error::Config(format!("n_seg ({n_seg}) and z ({z}) must be positive")));
    }
    let n = video.segments.len();
    if n < n_seg + z {
        return Ok(Vec::new());
    }
    let (lo, hi) = (n_seg - 1, n - z - 1);
    let stops: Vec<usize> = match &video.stop_indices {
        Some(list) => {
            let kept: Vec<usize> = list.iter().copied().filter(|t| (lo..=hi).contains(t)).collect();
            if kept.len() != list.len() {
                log::warn!("{}: dropped {} out-of-range stop indices", video.video_id, list.len() - kept.len());
            }
            kept
        }
        None => (lo..=hi).collect(),
    };
    let actions = video.actions();
    Ok(stops
        .into_iter()
        .map(|t| LtaInstance {
            video_id: video.video_id.clone(),
            split: video.split,
            stop_index: t,
            observed: actions[t + 1 - n_seg..=t].to_vec(),
            future_gt: actions[t + 1..=t + z].to_vec(),
            observed_source: ObservedSource::GroundTruth,
            goal: video.goal.clone(),
        })
        .collect())
}

pub fn make_all_lta_instances(videos: &[VideoAnnotation], n_seg: usize, z: usize) -> Result<Vec<LtaInstance>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(make_lta_instances(v, n_seg, z)?);
    }
    Ok(out)
}

/// Set-prediction query over the first `horizon_k` percent of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct SetInstance {
    pub video_id: String,
    pub horizon_k: u8,
    pub observed: Vec<ActionLabel>,
    /// Verb ids whose segments fall in the remaining part of the video.
    pub target_set: BTreeSet<usize>,
}

impl SetInstance {
    pub fn id(&self) -> String {
        format!("{}@{}", self.video_id, self.horizon_k)
    }
}

pub const DEFAULT_HORIZONS: [u8; 3] = [25, 50, 75];

/// Assigns each segment by its midpoint: strictly before the `K%` boundary
/// is observed, otherwise future. Instances with an empty side are dropped.
pub fn make_set_instances(video: &VideoAnnotation, horizons: &[u8]) -> Vec<SetInstance> {
    let start = video.segments.first().map(|s| s.start_s).unwrap_or(0.0);
    let end = video.segments.iter().map(|s| s.end_s).fold(f64::NEG_INFINITY, f64::max);
    let duration = end - start;
    if duration.is_nan() || duration <= 0.0 {
        return Vec::new();
    }
    horizons
        .iter()
        .filter_map(|&k| {
            let boundary = start + duration * f64::from(k) / 100.0;
            let (obs, fut): (Vec<&Segment>, Vec<&Segment>) =
                video.segments.iter().partition(|s| s.midpoint() < boundary);
            if obs.is_empty() || fut.is_empty() {
                return None;
            }
            Some(SetInstance {
                video_id: video.video_id.clone(),
                horizon_k: k,
                observed: obs.iter().map(|s| s.action).collect(),
                target_set: fut.iter().map(|s| s.action.verb).collect(),
            })
        })
        .collect()
}

fn resample_excluding(rng: &mut seed::Rng, size: usize, current: usize) -> usize {
    if size < 2 {
        return current;
    }
    let r = rng.random_range(0..size - 1);
    if r >= current {
        r + 1
    } else {
        r
    }
}

/// Simulated recognition: each observed verb and noun is independently
/// replaced, with probability `p`, by a uniformly drawn different label.
pub fn corrupt_observations(instance: &LtaInstance, p: f64, seed: u64, taxonomy: &Taxonomy) -> Result<LtaInstance> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("noise rate {p} outside [0, 1]")));
    }
    let mut rng = seed::substream(seed, &format!("recognition/{}", instance.id()));
    let mut out = instance.clone();
    for label in &mut out.observed {
        if rng.random_bool(p) {
            label.verb = resample_excluding(&mut rng, taxonomy.num_verbs(), label.verb);
        }
        if rng.random_bool(p) {
            label.noun = resample_excluding(&mut rng, taxonomy.num_nouns(), label.noun);
        }
    }
    out.observed_source = ObservedSource::Recognized { noise_rate: p, seed };
    Ok(out)
}

#[derive(Serialize)]
struct InstanceDump<'a> {
    instance_id: String,
    video_id: &'a str,
    split: Split,
    stop_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    goal: Option<&'a str>,
    observed_source: ObservedSource,
    observed: Vec<[&'a str; 2]>,
    future: Vec<[&'a str; 2]>,
}

fn pairs<'a>(taxonomy: &'a Taxonomy, labels: &[ActionLabel]) -> Vec<[&'a str; 2]> {
    labels.iter().map(|l| [taxonomy.verbs()[l.verb].as_str(), taxonomy.nouns()[l.noun].as_str()]).collect()
}

pub fn instance_to_json(instance: &LtaInstance, taxonomy: &Taxonomy) -> String {
    let dump = InstanceDump {
        instance_id: instance.id(),
        video_id: &instance.video_id,
        split: instance.split,
        stop_index: instance.stop_index,
        goal: instance.goal.as_deref(),
        observed_source: instance.observed_source,
        observed: pairs(taxonomy, &instance.observed),
        future: pairs(taxonomy, &instance.future_gt),
    };
    serde_json::to_string(&dump).expect("instance serializes")
}

pub fn write_instances(out: &mut impl Write, instances: &[LtaInstance], taxonomy: &Taxonomy) -> std::io::Result<()> {
    for inst in instances {
        writeln!(out, "{}", instance_to_json(inst, taxonomy))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tax() -> Taxonomy {
        Taxonomy::new(vec!["open".into(), "close".into()], vec!["door".into(), "drawer".into(), "fridge".into()])
            .unwrap()
    }

    fn video(n: usize) -> VideoAnnotation {
        VideoAnnotation {
            video_id: "v".into(),
            split: Split::Train,
            segments: (0..n)
                .map(|i| Segment { start_s: i as f64, end_s: i as f64 + 1.0, action: ActionLabel::new(i % 2, i % 3) })
                .collect(),
            stop_indices: None,
            goal: None,
        }
    }

    #[test]
    fn ingest_examples() {
        let t = tax();
        let good = r#"{"video_id":"a","split":"train","segments":[{"start_s":0,"end_s":1,"verb":"open","noun":"door"}]}
{"video_id":"b","split":"test","segments":[{"start_s":0,"end_s":2,"verb":"close","noun":"fridge"},{"start_s":2,"end_s":3,"verb":"open","noun":"drawer"}],"goal":"tidy"}
"#;
        let vids = parse_annotations(good, &t).unwrap();
        assert_eq!(vids.len(), 2);
        assert_eq!(vids[1].segments[0].action, ActionLabel::new(1, 2));
        assert_eq!(vids[1].goal.as_deref(), Some("tidy"));

        let bad_time =
            "\n{\"video_id\":\"a\",\"segments\":[{\"start_s\":1,\"end_s\":1,\"verb\":\"open\",\"noun\":\"door\"}]}";
        assert!(matches!(parse_annotations(bad_time, &t), Err(Error::Parse { line: 2, .. })));

        let unknown = r#"{"video_id":"a","segments":[{"start_s":0,"end_s":1,"verb":"flyy","noun":"door"}]}"#;
        assert!(matches!(parse_annotations(unknown, &t), Err(Error::InvalidLabel(_))));

        assert!(matches!(parse_annotations("{not json", &t), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn annotation_roundtrip() {
        let t = tax();
        let v = video(5);
        let back = parse_annotations(&annotation_to_json(&v, &t), &t).unwrap();
        assert_eq!(back, vec![v]);
    }

    #[test]
    fn lta_instance_counts() {
        let got = make_lta_instances(&video(10), 8, 1).unwrap();
        assert_eq!(got.iter().map(|i| i.stop_index).collect::<Vec<_>>(), vec![7, 8]);
        assert_eq!(make_lta_instances(&video(28), 8, 20).unwrap().len(), 1);
        assert!(make_lta_instances(&video(5), 8, 20).unwrap().is_empty());
        assert!(make_lta_instances(&video(5), 0, 1).is_err());
    }

    #[test]
    fn lta_instances_are_contiguous_slices() {
        for n in 1..20 {
            let v = video(n);
            let actions = v.actions();
            for (n_seg, z) in [(1, 1), (3, 2), (4, 5)] {
                let inst = make_lta_instances(&v, n_seg, z).unwrap();
                assert_eq!(inst.len(), (n + 1).saturating_sub(n_seg + z));
                for i in inst {
                    let joined: Vec<_> = i.observed.iter().chain(&i.future_gt).copied().collect();
                    let start = i.stop_index + 1 - n_seg;
                    assert_eq!(&actions[start..start + n_seg + z], &joined[..]);
                }
            }
        }
    }

    #[test]
    fn explicit_stop_indices_override() {
        let mut v = video(12);
        v.stop_indices = Some(vec![2, 9, 30]);
        let got = make_lta_instances(&v, 3, 2).unwrap();
        assert_eq!(got.iter().map(|i| i.stop_index).collect::<Vec<_>>(), vec![2, 9]);
    }

    #[test]
    fn set_instance_examples() {
        let mut v = video(4);
        v.segments[2].action = ActionLabel::new(0, 0);
        v.segments[3].action = ActionLabel::new(1, 1);
        let sets = make_set_instances(&v, &[50]);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].observed, vec![v.segments[0].action, v.segments[1].action]);
        assert_eq!(sets[0].target_set, BTreeSet::from([0, 1]));

        // Future verbs already seen in the observed part still count.
        let mut v = video(4);
        for s in &mut v.segments {
            s.action = ActionLabel::new(0, 0);
        }
        let sets = make_set_instances(&v, &[75]);
        assert_eq!(sets[0].target_set, BTreeSet::from([0]));

        assert!(make_set_instances(&video(1), &DEFAULT_HORIZONS).is_empty());
    }

    #[test]
    fn corruption_rates() {
        let t = tax();
        let inst = make_lta_instances(&video(10), 8, 1).unwrap().remove(0);
        let same = corrupt_observations(&inst, 0.0, 3, &t).unwrap();
        assert_eq!(same.observed, inst.observed);
        assert_eq!(same.observed_source, ObservedSource::Recognized { noise_rate: 0.0, seed: 3 });

        let flipped = corrupt_observations(&inst, 1.0, 3, &t).unwrap();
        for (a, b) in inst.observed.iter().zip(&flipped.observed) {
            assert_eq!(b.verb, 1 - a.verb);
            assert_ne!(b.noun, a.noun);
        }

        assert_eq!(corrupt_observations(&inst, 0.5, 7, &t).unwrap(), corrupt_observations(&inst, 0.5, 7, &t).unwrap());
        assert!(corrupt_observations(&inst, 1.5, 7, &t).is_err());
    }

    #[test]
    fn corruption_bernoulli_rate_monte_carlo() {
        let t = tax();
        let inst = make_lta_instances(&video(10), 8, 1).unwrap().remove(0);
        let mut total = 0usize;
        let seeds = 10_000u64;
        for s in 0..seeds {
            let c = corrupt_observations(&inst, 0.5, s, &t).unwrap();
            total += inst
                .observed
                .iter()
                .zip(&c.observed)
                .map(|(a, b)| usize::from(a.verb != b.verb) + usize::from(a.noun != b.noun))
                .sum::<usize>();
        }
        let mean = total as f64 / seeds as f64;
        assert!((mean - 8.0).abs() < 0.08, "mean corrupted fields {mean}");
    }
}
