//! Hungarian-matched clustering accuracy, known/novel split metrics, and
//! prototype-distance diagnostics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::dataset::CategoryId;
use crate::error::{Error, Result};
use crate::prototypes::{distance_matrix, MatchMap, PrototypeSet};
use crate::vector;

/// Cluster id -> category id, as chosen by the Hungarian matching.
pub type ClusterMapping = BTreeMap<usize, CategoryId>;

/// Accuracy under the best injective cluster -> category mapping.
pub fn hungarian_accuracy(pred: &[usize], gt: &[CategoryId]) -> Result<(f64, ClusterMapping)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            expected: pred.len(),
            actual: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction"));
    }
    let clusters: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let cats: Vec<CategoryId> = gt.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let cluster_pos: BTreeMap<usize, usize> = clusters.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let cat_pos: BTreeMap<CategoryId, usize> = cats.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut counts = vec![vec![0.0; cats.len()]; clusters.len()];
    for (p, g) in pred.iter().zip(gt) {
        counts[cluster_pos[p]][cat_pos[g]] += 1.0;
    }
    let a = assignment::solve_max(&counts)?;
    let mapping: ClusterMapping = a
        .row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (clusters[r], cats[c])))
        .collect();
    Ok((a.total_cost / pred.len() as f64, mapping))
}

/// Harmonic mean of known and novel accuracy; 0 unless both are positive.
pub fn h_score(known: f64, novel: f64) -> f64 {
    if known > 0.0 && novel > 0.0 {
        2.0 * known * novel / (known + novel)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub h_score: f64,
    /// `None` when the test set has no instance of a known category.
    pub known_acc: Option<f64>,
    /// `None` when the test set has no instance of a novel category.
    pub novel_acc: Option<f64>,
    pub overall_acc: f64,
    pub pseudo_label_acc: Option<f64>,
    pub proto_dist_before: Option<f64>,
    pub proto_dist_after: Option<f64>,
    pub mapping: Vec<(usize, CategoryId)>,
    pub flags: Vec<String>,
}

fn subset_accuracy(
    pred: &[usize],
    gt: &[CategoryId],
    keep: impl Fn(CategoryId) -> bool,
    mapping: &ClusterMapping,
) -> Option<f64> {
    let (hit, n) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| keep(g))
        .fold((0usize, 0usize), |(hit, n), (p, &g)| {
            (hit + usize::from(mapping.get(p) == Some(&g)), n + 1)
        });
    (n > 0).then(|| hit as f64 / n as f64)
}

fn subset_remapped(pred: &[usize], gt: &[CategoryId], keep: impl Fn(CategoryId) -> bool) -> Result<Option<f64>> {
    let (p, g): (Vec<usize>, Vec<CategoryId>) = pred.iter().zip(gt).filter(|(_, &g)| keep(g)).unzip();
    if p.is_empty() {
        return Ok(None);
    }
    Ok(Some(hungarian_accuracy(&p, &g)?.0))
}

/// Known / novel / overall accuracy and H-score.
///
/// By default one Hungarian mapping is computed over the whole test set and
/// then restricted to each subset. With `per_subset_mapping` the known and
/// novel subsets are each matched independently.
pub fn split_metrics(
    pred: &[usize],
    gt: &[CategoryId],
    known: &BTreeSet<CategoryId>,
    per_subset_mapping: bool,
) -> Result<MetricsReport> {
    let (overall, mapping) = hungarian_accuracy(pred, gt)?;
    let is_known = |c: CategoryId| known.contains(&c);
    let (known_acc, novel_acc) = if per_subset_mapping {
        (
            subset_remapped(pred, gt, is_known)?,
            subset_remapped(pred, gt, |c| !is_known(c))?,
        )
    } else {
        (
            subset_accuracy(pred, gt, is_known, &mapping),
            subset_accuracy(pred, gt, |c| !is_known(c), &mapping),
        )
    };
    let mut flags = Vec::new();
    if known_acc.is_none() {
        flags.push("no known-category instances in evaluation set".to_string());
    }
    if novel_acc.is_none() {
        flags.push("no novel-category instances in evaluation set".to_string());
    }
    let h = match (known_acc, novel_acc) {
        (Some(k), Some(n)) => h_score(k, n),
        _ => 0.0,
    };
    Ok(MetricsReport {
        h_score: h,
        known_acc,
        novel_acc,
        overall_acc: overall,
        mapping: mapping.into_iter().collect(),
        flags,
        ..Default::default()
    })
}

/// Hungarian-matched accuracy of cluster ids against the unlabeled split's truth.
pub fn pseudo_label_accuracy(assignment: &[usize], gt: &[CategoryId]) -> Result<f64> {
    Ok(hungarian_accuracy(assignment, gt)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDistanceRow {
    pub cluster: usize,
    /// Labeled category matched to this cluster, if any.
    pub matched_labeled: Option<usize>,
    /// Ground-truth category whose center was matched to this cluster.
    pub truth: Option<usize>,
    pub before: Option<f64>,
    pub after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeDistanceReport {
    /// Mean distance to matched truth before calibration, over all matched clusters.
    pub before: f64,
    pub after: f64,
    /// Same means restricted to clusters matched to a labeled category.
    pub known_before: Option<f64>,
    pub known_after: Option<f64>,
    pub rows: Vec<ClusterDistanceRow>,
}

/// Distances of unlabeled and calibrated prototypes to the true centers.
/// Clusters are matched to true centers by Hungarian on unlabeled-prototype
/// distance; `matching` tags which clusters correspond to labeled categories.
pub fn prototype_distance_report(
    unlabeled: &PrototypeSet,
    calibrated: &PrototypeSet,
    truth: &PrototypeSet,
    matching: Option<&MatchMap>,
) -> Result<PrototypeDistanceReport> {
    if truth.is_empty() {
        return Err(Error::invalid("ground-truth prototypes are required"));
    }
    if unlabeled.ids != calibrated.ids {
        return Err(Error::invalid("unlabeled and calibrated prototypes are not aligned"));
    }
    if unlabeled.dim() != truth.dim() {
        return Err(Error::Shape {
            expected: truth.dim(),
            actual: unlabeled.dim(),
        });
    }
    let a = assignment::solve(&distance_matrix(unlabeled, truth))?;
    let mut rows = Vec::with_capacity(unlabeled.len());
    let (mut sb, mut sa, mut n) = (0.0, 0.0, 0usize);
    let (mut kb, mut ka, mut kn) = (0.0, 0.0, 0usize);
    for (pos, col) in a.row_to_col.iter().enumerate() {
        let cluster = unlabeled.ids[pos];
        let matched_labeled = matching.and_then(|m| m.category_of(cluster));
        let (before, after) = match col {
            Some(c) => {
                let t = &truth.vectors[*c];
                let b = vector::dist(&unlabeled.vectors[pos], t);
                let af = vector::dist(&calibrated.vectors[pos], t);
                sb += b;
                sa += af;
                n += 1;
                if matched_labeled.is_some() {
                    kb += b;
                    ka += af;
                    kn += 1;
                }
                (Some(b), Some(af))
            }
            None => (None, None),
        };
        rows.push(ClusterDistanceRow {
            cluster,
            matched_labeled,
            truth: col.map(|c| truth.ids[c]),
            before,
            after,
        });
    }
    Ok(PrototypeDistanceReport {
        before: sb / n as f64,
        after: sa / n as f64,
        known_before: (kn > 0).then(|| kb / kn as f64),
        known_after: (kn > 0).then(|| ka / kn as f64),
        rows,
    })
}

impl MetricsReport {
    pub const TSV_HEADER: &'static str =
        "h_score\tknown\tnovel\toverall\tpseudo_label\tproto_dist_before\tproto_dist_after";

    /// One TSV row, accuracies in percent with two decimals.
    pub fn tsv_row(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{:.2}", 100.0 * v));
        let raw = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            pct(Some(self.h_score)),
            pct(self.known_acc),
            pct(self.novel_acc),
            pct(Some(self.overall_acc)),
            pct(self.pseudo_label_acc),
            raw(self.proto_dist_before),
            raw(self.proto_dist_after),
        )
    }
}

/// Coordinates of centered `features` on their top two principal axes,
/// found by power iteration with deflation. For plotting only.
pub fn project_2d(features: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let Some(dim) = features.first().map(Vec::len) else {
        return Vec::new();
    };
    let mean = vector::mean_of(features.iter().map(Vec::as_slice), dim).unwrap_or_default();
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for x in &centered {
        for (i, row) in cov.iter_mut().enumerate() {
            vector::axpy(row, x[i], x);
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for a in 0..2.min(dim) {
        // Deterministic start that is not orthogonal to a generic axis.
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i + a) as f64 * 0.1).collect();
        for _ in 0..200 {
            let mut w: Vec<f64> = cov.iter().map(|row| vector::dot(row, &v)).collect();
            for prev in &axes {
                let d = vector::dot(&w, prev);
                vector::axpy(&mut w, -d, prev);
            }
            let (u, n) = vector::l2_normalize(&w);
            if n == 0.0 {
                break;
            }
            v = u;
        }
        axes.push(v);
    }
    centered
        .iter()
        .map(|x| {
            let c = |k: usize| axes.get(k).map_or(0.0, |ax| vector::dot(x, ax));
            [c(0), c(1)]
        })
        .collect()
}
