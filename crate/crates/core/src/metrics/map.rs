//! Multi-label mean average precision with frequent/rare class partitions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// All-points average precision: the mean of precision taken at the rank of
/// each positive. Items are sorted by descending score; ties keep input order.
/// Returns `None` when there are no positives.
pub fn average_precision<F: Scalar>(scored: &[(F, bool)]) -> Option<F> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap_or(std::cmp::Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = F::zero();
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            hits += 1;
            sum += F::of(hits as f64 / (rank + 1) as f64);
        }
    }
    (hits > 0).then(|| sum / F::of(hits as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport<F> {
    /// Percentages in `[0, 100]`; `None` when the partition is empty.
    pub all_map: Option<F>,
    pub freq_map: Option<F>,
    pub rare_map: Option<F>,
    pub freq_set: BTreeSet<usize>,
    pub rare_set: BTreeSet<usize>,
    /// Classes without a single positive; not part of any mean.
    pub excluded: BTreeSet<usize>,
    pub per_class_ap: BTreeMap<usize, F>,
}

fn mean_pct<F: Scalar>(aps: &BTreeMap<usize, F>, set: &BTreeSet<usize>) -> Option<F> {
    if set.is_empty() {
        return None;
    }
    let total: F = set.iter().map(|c| aps[c]).sum();
    Some(F::of(100.0) * total / F::of(set.len() as f64))
}

/// Mean AP over classes. A class is frequent when its training-set count is
/// at least `freq_threshold`, otherwise rare.
pub fn mean_ap<F: Scalar>(
    scores: &BTreeMap<usize, Vec<(F, bool)>>,
    train_counts: &BTreeMap<usize, usize>,
    freq_threshold: usize,
) -> MapReport<F> {
    let mut per_class_ap = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    for (&class, scored) in scores {
        match average_precision(scored) {
            Some(ap) => {
                per_class_ap.insert(class, ap);
            }
            None => {
                excluded.insert(class);
            }
        }
    }
    let (freq_set, rare_set): (BTreeSet<usize>, BTreeSet<usize>) =
        per_class_ap.keys().copied().partition(|c| train_counts.get(c).copied().unwrap_or(0) >= freq_threshold);
    let all: BTreeSet<usize> = per_class_ap.keys().copied().collect();
    MapReport {
        all_map: mean_pct(&per_class_ap, &all),
        freq_map: mean_pct(&per_class_ap, &freq_set),
        rare_map: mean_pct(&per_class_ap, &rare_set),
        freq_set,
        rare_set,
        excluded,
        per_class_ap,
    }
}

/// Regroups per-instance class scores into per-class ranked lists.
/// Classes absent from an instance's score map score zero there.
pub fn scores_by_class<F: Scalar>(
    instances: &[(BTreeMap<usize, F>, BTreeSet<usize>)],
    num_classes: usize,
) -> BTreeMap<usize, Vec<(F, bool)>> {
    (0..num_classes)
        .map(|c| {
            let col =
                instances.iter().map(|(s, t)| (s.get(&c).copied().unwrap_or_else(F::zero), t.contains(&c))).collect();
            (c, col)
        })
        .collect()
}
