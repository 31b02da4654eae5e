//! Labeled and unlabeled prototype estimation, prototype matching, and
//! calibration of unlabeled prototypes by transfer from similar labeled ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::clustering::Clustering;
use crate::dataset::{CategoryId, Dataset, Split};
use crate::error::{Error, Result};
use crate::vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrototypeKind {
    Labeled,
    Unlabeled,
    Calibrated,
    GroundTruth,
}

/// A bank of prototype vectors. `ids[i]` is the category id (labeled, ground
/// truth) or cluster id (unlabeled, calibrated) of `vectors[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub kind: PrototypeKind,
    pub ids: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(kind: PrototypeKind, ids: Vec<usize>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} prototype vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
                return Err(Error::Shape {
                    expected: first.len(),
                    actual: bad.len(),
                });
            }
        }
        if !vectors.iter().all(|v| vector::all_finite(v)) {
            return Err(Error::NonFinite("prototype"));
        }
        Ok(Self { kind, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.position(id).map(|p| self.vectors[p].as_slice())
    }
}

/// The match function: labeled category -> cluster, injective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchMap {
    /// `(labeled category id, cluster id)` in labeled-prototype order.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of Euclidean distances between matched prototypes.
    pub total_cost: f64,
}

impl MatchMap {
    pub fn cluster_of(&self, category: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(c, _)| *c == category)
            .map(|&(_, k)| k)
    }

    pub fn category_of(&self, cluster: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(_, k)| *k == cluster)
            .map(|&(c, _)| c)
    }
}

/// Per-cluster transfer sets and weights used by [`calibrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub k: usize,
    pub alpha: f64,
    /// Labeled category ids selected for each cluster, most similar first.
    pub sets: Vec<Vec<usize>>,
    /// Softmax weights aligned with `sets`.
    pub weights: Vec<Vec<f64>>,
}

/// Per-category means of labeled-split features. `features` is indexed like
/// `ds.instances()`; only labeled entries are read.
pub fn labeled_prototypes(ds: &Dataset, features: &[Vec<f64>]) -> Result<PrototypeSet> {
    if features.len() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            actual: features.len(),
        });
    }
    let (labels, feats): (Vec<CategoryId>, Vec<&[f64]>) = ds
        .instances()
        .iter()
        .zip(features)
        .filter(|(inst, _)| inst.split == Split::Labeled)
        .map(|(inst, f)| (inst.gt_label, f.as_slice()))
        .unzip();
    let set = class_means(&labels, &feats, PrototypeKind::Labeled)?;
    if set.len() != ds.num_known() {
        return Err(Error::invalid("a known category has no labeled instance"));
    }
    Ok(set)
}

/// Means of `features` grouped by `labels`, ids in ascending order.
pub fn class_means(labels: &[CategoryId], features: &[&[f64]], kind: PrototypeKind) -> Result<PrototypeSet> {
    if labels.len() != features.len() {
        return Err(Error::Shape {
            expected: labels.len(),
            actual: features.len(),
        });
    }
    let dim = features.first().map_or(0, |f| f.len());
    let mut groups: BTreeMap<CategoryId, (Vec<f64>, usize)> = BTreeMap::new();
    for (&l, f) in labels.iter().zip(features) {
        if f.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                actual: f.len(),
            });
        }
        let e = groups.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        vector::axpy(&mut e.0, 1.0, f);
        e.1 += 1;
    }
    let (ids, vectors) = groups
        .into_iter()
        .map(|(id, (sum, n))| (id as usize, sum.into_iter().map(|s| s / n as f64).collect()))
        .unzip();
    PrototypeSet::new(kind, ids, vectors)
}

/// Per-cluster means of `features` under `cl.assignment`. An empty cluster
/// keeps its k-means center, which then must share the features' dimension.
pub fn unlabeled_prototypes(cl: &Clustering, features: &[Vec<f64>]) -> Result<PrototypeSet> {
    if features.len() != cl.assignment.len() {
        return Err(Error::Shape {
            expected: cl.assignment.len(),
            actual: features.len(),
        });
    }
    let dim = features
        .first()
        .or(cl.centers.first())
        .map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; cl.k()];
    let mut counts = vec![0usize; cl.k()];
    for (f, &a) in features.iter().zip(&cl.assignment) {
        vector::axpy(&mut sums[a], 1.0, f);
        counts[a] += 1;
    }
    let vectors = sums
        .into_iter()
        .zip(counts)
        .zip(&cl.centers)
        .map(|((s, n), c)| {
            if n == 0 {
                c.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect();
    PrototypeSet::new(PrototypeKind::Unlabeled, (0..cl.k()).collect(), vectors)
}

pub fn distance_matrix(rows: &PrototypeSet, cols: &PrototypeSet) -> Vec<Vec<f64>> {
    rows.vectors
        .iter()
        .map(|r| cols.vectors.iter().map(|c| vector::dist(r, c)).collect())
        .collect()
}

/// Injective labeled -> unlabeled assignment minimizing total Euclidean distance.
pub fn match_prototypes(labeled: &PrototypeSet, unlabeled: &PrototypeSet) -> Result<MatchMap> {
    if labeled.len() > unlabeled.len() {
        return Err(Error::invalid(format!(
            "cannot match {} labeled prototypes into {} clusters",
            labeled.len(),
            unlabeled.len()
        )));
    }
    if labeled.dim() != unlabeled.dim() && !labeled.is_empty() {
        return Err(Error::Shape {
            expected: labeled.dim(),
            actual: unlabeled.dim(),
        });
    }
    let cost = distance_matrix(labeled, unlabeled);
    let a = assignment::solve(&cost)?;
    let pairs = a
        .row_to_col
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let c = c.expect("rows <= cols leaves no row unmatched");
            (labeled.ids[r], unlabeled.ids[c])
        })
        .collect();
    Ok(MatchMap {
        pairs,
        total_cost: a.total_cost,
    })
}

/// Calibrate every unlabeled prototype towards its `k` nearest labeled
/// prototypes:
///
/// `mu_c = alpha * mu_u + (1 - alpha) * sum_j w_j * mu_l[j]`
///
/// where `w = softmax(-dist / sqrt(dim))` over the selected set. Distance ties
/// are broken towards the lower labeled category id.
pub fn calibrate(
    unlabeled: &PrototypeSet,
    labeled: &PrototypeSet,
    k: usize,
    alpha: f64,
) -> Result<(PrototypeSet, TransferSpec)> {
    if k == 0 || k > labeled.len() {
        return Err(Error::config(format!(
            "top-k must lie in 1..={} (number of labeled prototypes), got {k}",
            labeled.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if labeled.dim() != unlabeled.dim() {
        return Err(Error::Shape {
            expected: unlabeled.dim(),
            actual: labeled.dim(),
        });
    }
    let dim = unlabeled.dim();
    let temperature = (dim as f64).sqrt();

    let mut sets = Vec::with_capacity(unlabeled.len());
    let mut weights = Vec::with_capacity(unlabeled.len());
    let mut calibrated = Vec::with_capacity(unlabeled.len());
    for mu_u in &unlabeled.vectors {
        let sim: Vec<f64> = labeled.vectors.iter().map(|l| -vector::dist(mu_u, l)).collect();
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.sort_by(|&a, &b| {
            sim[b]
                .total_cmp(&sim[a])
                .then(labeled.ids[a].cmp(&labeled.ids[b]))
        });
        order.truncate(k);

        let w = softmax(&order.iter().map(|&j| sim[j] / temperature).collect::<Vec<_>>());
        let mut mu_c: Vec<f64> = mu_u.iter().map(|v| alpha * v).collect();
        for (&j, &wj) in order.iter().zip(&w) {
            vector::axpy(&mut mu_c, (1.0 - alpha) * wj, &labeled.vectors[j]);
        }
        sets.push(order.iter().map(|&j| labeled.ids[j]).collect());
        weights.push(w);
        calibrated.push(mu_c);
    }

    let set = PrototypeSet::new(PrototypeKind::Calibrated, unlabeled.ids.clone(), calibrated)?;
    Ok((
        set,
        TransferSpec {
            k,
            alpha,
            sets,
            weights,
        },
    ))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
