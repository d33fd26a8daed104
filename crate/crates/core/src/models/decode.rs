//! Greedy, nucleus and beam decoding into fixed-length candidate sets.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ActionModel, DecodeContext};
use crate::error::{Error, Result};
use crate::metrics::CandidateSet;
use crate::seed;
use crate::taxonomy::ActionLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Argmax at every step. With `K > 1`, candidate `c` starts from the
    /// `c`-th most likely first action and continues greedily.
    #[default]
    Greedy,
    TopP {
        p: f64,
        temperature: f64,
        seed: u64,
    },
    Beam {
        width: usize,
    },
}

/// Indices sorted by descending probability, ties by ascending index.
fn ranked(dist: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

fn validate_observed<M: ActionModel + ?Sized>(model: &M, observed: &[ActionLabel]) -> Result<()> {
    for l in observed {
        if l.verb >= model.num_verbs() || l.noun >= model.num_nouns() {
            return Err(Error::InvalidLabel(format!("{l} outside the model vocabulary")));
        }
    }
    Ok(())
}

fn greedy<M: ActionModel + ?Sized>(
    model: &M,
    ctx: &DecodeContext<'_>,
    z: usize,
    k: usize,
) -> Result<Vec<Vec<ActionLabel>>> {
    let first = ranked(&model.next_distribution(ctx, &[])?);
    (0..k)
        .map(|c| {
            let mut seq = vec![model.action(first[c % first.len()])];
            while seq.len() < z {
                let next = argmax(&model.next_distribution(ctx, &seq)?);
                seq.push(model.action(next));
            }
            Ok(seq)
        })
        .collect()
}

/// Samples from the smallest probability mass `>= p` after temperature scaling.
pub(crate) fn sample_nucleus(dist: &[f64], p: f64, temperature: f64, rng: &mut seed::Rng) -> usize {
    let scaled: Vec<f64> = if (temperature - 1.0).abs() < f64::EPSILON {
        dist.to_vec()
    } else {
        dist.iter().map(|&q| q.powf(1.0 / temperature)).collect()
    };
    let total: f64 = scaled.iter().sum();
    let order = ranked(&scaled);
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += scaled[i] / total;
        if mass >= p {
            break;
        }
    }
    let kept_mass: f64 = kept.iter().map(|&i| scaled[i]).sum();
    let mut u = rng.random::<f64>() * kept_mass;
    for &i in &kept {
        u -= scaled[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("nucleus is never empty")
}

fn top_p<M: ActionModel + ?Sized>(
    model: &M,
    ctx: &DecodeContext<'_>,
    z: usize,
    k: usize,
    p: f64,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<ActionLabel>>> {
    if !(p > 0.0 && p <= 1.0) || temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("top-p needs 0 < p <= 1 and temperature > 0 (got {p}, {temperature})")));
    }
    let mut rng = seed::rng(seed);
    (0..k)
        .map(|_| {
            let mut seq = Vec::with_capacity(z);
            while seq.len() < z {
                let dist = model.next_distribution(ctx, &seq)?;
                seq.push(model.action(sample_nucleus(&dist, p, temperature, &mut rng)));
            }
            Ok(seq)
        })
        .collect()
}

fn beam<M: ActionModel + ?Sized>(
    model: &M,
    ctx: &DecodeContext<'_>,
    z: usize,
    k: usize,
    width: usize,
) -> Result<Vec<Vec<ActionLabel>>> {
    if width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let width = width.max(k);
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..z {
        let mut next = Vec::with_capacity(beams.len() * model.num_actions());
        for (prefix, logp) in &beams {
            let labels: Vec<ActionLabel> = prefix.iter().map(|&i| model.action(i)).collect();
            let dist = model.next_distribution(ctx, &labels)?;
            for (a, &q) in dist.iter().enumerate() {
                let mut s = prefix.clone();
                s.push(a);
                next.push((s, logp + q.ln()));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(width);
        beams = next;
    }
    let mut out: Vec<Vec<ActionLabel>> =
        beams.iter().take(k).map(|(s, _)| s.iter().map(|&i| model.action(i)).collect()).collect();
    while out.len() < k {
        out.push(out[0].clone());
    }
    Ok(out)
}

fn decode<M: ActionModel + ?Sized>(
    model: &M,
    ctx: DecodeContext<'_>,
    z: usize,
    k: usize,
    strategy: Strategy,
) -> Result<CandidateSet> {
    if z == 0 || k == 0 {
        return Err(Error::Config(format!("z ({z}) and k ({k}) must be positive")));
    }
    validate_observed(model, ctx.observed)?;
    let seqs = match strategy {
        Strategy::Greedy => greedy(model, &ctx, z, k)?,
        Strategy::TopP { p, temperature, seed } => top_p(model, &ctx, z, k, p, temperature, seed)?,
        Strategy::Beam { width } => beam(model, &ctx, z, k, width)?,
    };
    CandidateSet::new(seqs)
}

/// Bottom-up prediction of `K` sequences of `Z` future actions.
pub fn predict<M: ActionModel + ?Sized>(
    model: &M,
    observed: &[ActionLabel],
    z: usize,
    k: usize,
    strategy: Strategy,
) -> Result<CandidateSet> {
    decode(model, DecodeContext { observed, goal: None }, z, k, strategy)
}

/// Goal-conditioned prediction. Fails on models trained without goals.
pub fn predict_topdown<M: ActionModel + ?Sized>(
    model: &M,
    observed: &[ActionLabel],
    goal: &str,
    z: usize,
    k: usize,
    strategy: Strategy,
) -> Result<CandidateSet> {
    if !model.goal_conditioned() {
        return Err(Error::ConfigMismatch("goal-conditioned inference on a model trained without goals".into()));
    }
    decode(model, DecodeContext { observed, goal: Some(goal) }, z, k, strategy)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution regardless of context.
    struct Fixed(Vec<f64>, usize, usize);

    impl ActionModel for Fixed {
        fn num_verbs(&self) -> usize {
            self.1
        }
        fn num_nouns(&self) -> usize {
            self.2
        }
        fn goal_conditioned(&self) -> bool {
            false
        }
        fn next_distribution(&self, _: &DecodeContext<'_>, _: &[ActionLabel]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn greedy_fans_out_on_first_step() {
        let m = Fixed(vec![0.1, 0.5, 0.2, 0.2], 2, 2);
        let c = predict(&m, &[], 3, 4, Strategy::Greedy).unwrap();
        let firsts: Vec<_> = c.sequences().iter().map(|s| s[0]).collect();
        // ranks: 1 (0.5), then 2 and 3 tie at 0.2 (lowest id first), then 0
        assert_eq!(firsts, vec![m.action(1), m.action(2), m.action(3), m.action(0)]);
        for s in c.sequences() {
            assert_eq!(&s[1..], &[m.action(1), m.action(1)]);
        }
    }

    #[test]
    fn topdown_requires_goal_model() {
        let m = Fixed(vec![1.0], 1, 1);
        assert!(matches!(predict_topdown(&m, &[], "g", 2, 1, Strategy::Greedy), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn observed_out_of_vocab_rejected() {
        let m = Fixed(vec![1.0], 1, 1);
        assert!(matches!(predict(&m, &[ActionLabel::new(3, 0)], 2, 1, Strategy::Greedy), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn nucleus_truncates_tail() {
        let dist = [0.6, 0.3, 0.1];
        let mut rng = seed::rng(1);
        for _ in 0..500 {
            assert_ne!(sample_nucleus(&dist, 0.8, 1.0, &mut rng), 2);
        }
    }

    #[test]
    fn top_p_frequencies_match_model() {
        let dist = vec![0.5, 0.3, 0.15, 0.05];
        let m = Fixed(dist.clone(), 2, 2);
        let c = predict(&m, &[], 1, 10_000, Strategy::TopP { p: 1.0, temperature: 1.0, seed: 42 }).unwrap();
        let mut counts = [0usize; 4];
        for s in c.sequences() {
            counts[s[0].verb * 2 + s[0].noun] += 1;
        }
        for (i, &n) in counts.iter().enumerate() {
            let freq = n as f64 / 10_000.0;
            assert!((freq - dist[i]).abs() < 0.02, "action {i}: {freq} vs {}", dist[i]);
        }
    }

    #[test]
    fn beam_returns_distinct_sequences() {
        let m = Fixed(vec![0.7, 0.3], 1, 2);
        let c = predict(&m, &[], 4, 5, Strategy::Beam { width: 5 }).unwrap();
        let mut seqs = c.sequences().to_vec();
        assert_eq!(seqs[0], vec![ActionLabel::new(0, 0); 4]);
        seqs.sort();
        seqs.dedup();
        assert_eq!(seqs.len(), 5);

        // Only two distinct length-1 sequences exist.
        let c = predict(&m, &[], 1, 5, Strategy::Beam { width: 5 }).unwrap();
        assert_eq!(c.k(), 5);
    }
}
