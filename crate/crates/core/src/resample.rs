//! SMOTE oversampling of under-represented groups in the training split.
//!
//! Each synthetic vector is `x + u (n - x)` for a group member `x`, one of
//! its `k` nearest within-group neighbours `n`, and `u ~ U[0, 1)`. The
//! `(x, n, u)` triple is kept with the synthetic record.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mlp::stream_rng;
use crate::model::{BiRads, FeatureVector, Pathology};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ResampleError {
    #[error("k = {k} neighbours requested but only {available} other points exist")]
    TooFewPoints { k: usize, available: usize },
    #[error("query index {index} out of range for {len} points")]
    QueryOutOfRange { index: usize, len: usize },
    #[error("k_neighbors must be at least 1")]
    ZeroNeighbors,
    #[error("group {0} has a single member; cannot interpolate")]
    SingletonGroup(GroupLabel),
    #[error("target {target} for group {group} is below its current size {current}")]
    TargetBelowCurrent {
        group: GroupLabel,
        target: usize,
        current: usize,
    },
    #[error("target given for group {0} which has no members")]
    EmptyGroup(GroupLabel),
}

/// Indices of the `k` points closest to `points[query]` in Euclidean
/// distance, excluding the query itself. Ties go to the lower index.
pub fn nearest_neighbors<T: Scalar>(
    points: &[Vec<T>],
    query: usize,
    k: usize,
) -> Result<Vec<usize>, ResampleError> {
    if query >= points.len() {
        return Err(ResampleError::QueryOutOfRange {
            index: query,
            len: points.len(),
        });
    }
    if k > points.len() - 1 {
        return Err(ResampleError::TooFewPoints {
            k,
            available: points.len() - 1,
        });
    }
    let q = &points[query];
    let mut dist: Vec<(T, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query)
        .map(|(i, p)| (squared_distance(q, p), i))
        .collect();
    dist.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    Ok(dist.into_iter().take(k).map(|(_, i)| i).collect())
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Label a record is grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupLabel {
    BiRads(BiRads),
    Pathology(Pathology),
}

impl std::fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupLabel::BiRads(b) => write!(f, "{b}"),
            GroupLabel::Pathology(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GroupKey {
    #[default]
    BiRads,
    Pathology,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Target {
    /// Every group grows to the size of the largest one.
    #[default]
    MatchMajority,
    /// Listed groups grow to the given counts; others are left alone.
    ExplicitCounts(BTreeMap<GroupLabel, usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteConfig {
    pub k_neighbors: usize,
    pub group_key: GroupKey,
    pub target: Target,
    pub seed: u64,
    /// Slots whose synthetic values are rounded at 0.5 after interpolation.
    /// Empty by default, which keeps interpolated values fractional.
    pub round_slots: Vec<usize>,
}

impl Default for SmoteConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            group_key: GroupKey::BiRads,
            target: Target::MatchMajority,
            seed: 0,
            round_slots: Vec::new(),
        }
    }
}

/// A training example as seen by the resampler.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVector<T> {
    pub vector: FeatureVector<T>,
    pub birads: BiRads,
    pub pathology: Pathology,
}

impl<T: Scalar> LabeledVector<T> {
    fn group(&self, key: GroupKey) -> GroupLabel {
        match key {
            GroupKey::BiRads => GroupLabel::BiRads(self.birads),
            GroupKey::Pathology => GroupLabel::Pathology(self.pathology),
        }
    }
}

/// Where an output record came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Origin<T> {
    /// Index into the input list.
    Original(usize),
    /// Interpolated between input records `base` and `neighbor` at `u`.
    Synthetic { base: usize, neighbor: usize, u: T },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRecord<T> {
    pub record: LabeledVector<T>,
    pub origin: Origin<T>,
}

impl<T: Scalar> AugmentedRecord<T> {
    pub fn is_synthetic(&self) -> bool {
        matches!(self.origin, Origin::Synthetic { .. })
    }
}

/// Balances group sizes by synthesising interpolated records.
///
/// Output: every input record in its original order, followed by the
/// synthetics of each group in group order. A synthetic copies the labels of
/// its base record. Group `g` (in sorted order) draws from RNG stream `g`.
pub fn smote_balance<T: Scalar>(
    records: &[LabeledVector<T>],
    cfg: &SmoteConfig,
) -> Result<Vec<AugmentedRecord<T>>, ResampleError> {
    if cfg.k_neighbors == 0 {
        return Err(ResampleError::ZeroNeighbors);
    }
    let mut groups: BTreeMap<GroupLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.group(cfg.group_key)).or_default().push(i);
    }
    let targets: BTreeMap<GroupLabel, usize> = match &cfg.target {
        Target::MatchMajority => {
            let max = groups.values().map(Vec::len).max().unwrap_or(0);
            groups.keys().map(|g| (*g, max)).collect()
        }
        Target::ExplicitCounts(m) => {
            for g in m.keys() {
                if !groups.contains_key(g) {
                    return Err(ResampleError::EmptyGroup(*g));
                }
            }
            m.clone()
        }
    };

    let mut out: Vec<AugmentedRecord<T>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| AugmentedRecord {
            record: r.clone(),
            origin: Origin::Original(i),
        })
        .collect();

    for (stream, (label, members)) in groups.iter().enumerate() {
        let Some(&target) = targets.get(label) else {
            continue;
        };
        if target < members.len() {
            return Err(ResampleError::TargetBelowCurrent {
                group: *label,
                target,
                current: members.len(),
            });
        }
        let needed = target - members.len();
        if needed == 0 {
            continue;
        }
        if members.len() < 2 {
            return Err(ResampleError::SingletonGroup(*label));
        }
        let points: Vec<Vec<T>> = members
            .iter()
            .map(|&i| records[i].vector.values().to_vec())
            .collect();
        let k = cfg.k_neighbors.min(members.len() - 1);
        let neighbors = (0..members.len())
            .map(|q| nearest_neighbors(&points, q, k))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rng = stream_rng(cfg.seed, stream as u64);
        for j in 0..needed {
            let local = j % members.len();
            let nb_local = neighbors[local][rng.gen_range(0..k)];
            let u = T::lit(rng.gen::<f64>());
            let x = &points[local];
            let n = &points[nb_local];
            let mut values: Vec<T> = x.iter().zip(n).map(|(&a, &b)| a + u * (b - a)).collect();
            for &s in &cfg.round_slots {
                if let Some(v) = values.get_mut(s) {
                    *v = if *v >= T::lit(0.5) {
                        T::one()
                    } else {
                        T::zero()
                    };
                }
            }
            let base = members[local];
            let src = &records[base];
            out.push(AugmentedRecord {
                record: LabeledVector {
                    vector: src.vector.with_values(values),
                    birads: src.birads,
                    pathology: src.pathology,
                },
                origin: Origin::Synthetic {
                    base,
                    neighbor: members[nb_local],
                    u,
                },
            });
        }
    }
    Ok(out)
}
