//! Gaussian-mixture benchmarks with known and novel categories.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, CategoryId, Dataset, Instance, Split};
use crate::error::{Error, Result};
use crate::prototypes::{PrototypeKind, PrototypeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabeledSampling {
    /// `labeled_fraction` of each known category's training instances.
    #[default]
    PerCategory,
    /// `labeled_fraction` of all known-category training instances, drawn
    /// jointly; every known category still receives at least one.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_categories: usize,
    pub novel_fraction: f64,
    pub labeled_fraction: f64,
    pub per_category_count: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub labeled_sampling: LabeledSampling,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::acceptance(0)
    }
}

impl SyntheticConfig {
    /// The configuration used by the acceptance suite.
    pub fn acceptance(seed: u64) -> Self {
        Self {
            dim: 16,
            n_categories: 20,
            novel_fraction: 0.25,
            labeled_fraction: 0.1,
            per_category_count: 200,
            center_scale: 1.0,
            noise_sigma: 0.35,
            test_fraction: 0.25,
            labeled_sampling: LabeledSampling::PerCategory,
            seed,
        }
    }

    /// Category layout of the BANKING intent benchmark (77 intents).
    pub fn banking_shaped(seed: u64) -> Self {
        Self {
            n_categories: 77,
            per_category_count: 40,
            ..Self::acceptance(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "acceptance" => Ok(Self::acceptance(seed)),
            "banking" => Ok(Self::banking_shaped(seed)),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn n_novel(&self) -> usize {
        round_half_up(self.novel_fraction * self.n_categories as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.dim > 0, "dim must be positive"),
            (self.n_categories > 0, "n_categories must be positive"),
            (self.per_category_count > 0, "per_category_count must be positive"),
            (self.center_scale > 0.0, "center_scale must be positive"),
            (self.noise_sigma > 0.0, "noise_sigma must be positive"),
            ((0.0..=1.0).contains(&self.novel_fraction), "novel_fraction must lie in [0, 1]"),
            (
                self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0,
                "labeled_fraction must lie in (0, 1]",
            ),
            (
                self.test_fraction > 0.0 && self.test_fraction < 1.0,
                "test_fraction must lie in (0, 1)",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        if self.n_novel() >= self.n_categories {
            return Err(Error::config("configuration leaves no known category"));
        }
        let n_test = round_half_up(self.test_fraction * self.per_category_count as f64);
        if n_test >= self.per_category_count {
            return Err(Error::config("test_fraction leaves no training instances"));
        }
        Ok(())
    }
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Draw a dataset and the true category centers (ground-truth prototypes).
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, PrototypeSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center_dist = Normal::new(0.0, cfg.center_scale).map_err(|e| Error::config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let centers: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| (0..cfg.dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_categories).collect();
    order.shuffle(&mut rng);
    let mut is_novel = vec![false; cfg.n_categories];
    for &c in &order[..cfg.n_novel()] {
        is_novel[c] = true;
    }

    let n_test = round_half_up(cfg.test_fraction * cfg.per_category_count as f64);
    let n_train = cfg.per_category_count - n_test;

    // Draw every instance first, then decide splits.
    let mut points: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.n_categories);
    let mut splits: Vec<Vec<Split>> = Vec::with_capacity(cfg.n_categories);
    for center in &centers {
        let pts: Vec<Vec<f64>> = (0..cfg.per_category_count)
            .map(|_| center.iter().map(|c| c + noise.sample(&mut rng)).collect())
            .collect();
        let mut idx: Vec<usize> = (0..cfg.per_category_count).collect();
        idx.shuffle(&mut rng);
        let mut s = vec![Split::Unlabeled; cfg.per_category_count];
        for &i in &idx[..n_test] {
            s[i] = Split::Test;
        }
        points.push(pts);
        splits.push(s);
    }

    // Training slots of known categories, per category in shuffled order.
    let train_slots: Vec<Vec<usize>> = splits
        .iter()
        .map(|s| {
            let mut t: Vec<usize> = (0..s.len()).filter(|&i| s[i] != Split::Test).collect();
            t.shuffle(&mut rng);
            t
        })
        .collect();
    let known: Vec<usize> = (0..cfg.n_categories).filter(|&c| !is_novel[c]).collect();
    match cfg.labeled_sampling {
        LabeledSampling::PerCategory => {
            let n_lab = round_half_up(cfg.labeled_fraction * n_train as f64).max(1);
            for &c in &known {
                for &i in &train_slots[c][..n_lab] {
                    splits[c][i] = Split::Labeled;
                }
            }
        }
        LabeledSampling::Global => {
            let total = round_half_up(cfg.labeled_fraction * (n_train * known.len()) as f64).max(known.len());
            let mut rest = Vec::new();
            for &c in &known {
                splits[c][train_slots[c][0]] = Split::Labeled;
                rest.extend(train_slots[c][1..].iter().map(|&i| (c, i)));
            }
            rest.shuffle(&mut rng);
            for &(c, i) in &rest[..total - known.len()] {
                splits[c][i] = Split::Labeled;
            }
        }
    }

    let mut instances = Vec::with_capacity(cfg.n_categories * cfg.per_category_count);
    for (c, (pts, s)) in points.into_iter().zip(splits).enumerate() {
        for (i, (p, split)) in pts.into_iter().zip(s).enumerate() {
            instances.push(Instance {
                id: format!("c{c}-{i}"),
                embedding: p,
                split,
                gt_label: c as CategoryId,
            });
        }
    }
    let ds = Dataset::new(cfg.dim, instances)?;
    let truth = PrototypeSet::new(PrototypeKind::GroundTruth, (0..cfg.n_categories).collect(), centers)?;
    Ok((ds, truth))
}

/// Truth sidecar in the feature-file format: one row per category center,
/// tagged `labeled` for known and `unlabeled` for novel categories.
pub fn truth_dataset(truth: &PrototypeSet, ds: &Dataset) -> Result<Dataset> {
    let instances = truth
        .ids
        .iter()
        .zip(&truth.vectors)
        .map(|(&id, v)| Instance {
            id: format!("center-{id}"),
            embedding: v.clone(),
            split: if ds.is_known(id as CategoryId) {
                Split::Labeled
            } else {
                Split::Unlabeled
            },
            gt_label: id as CategoryId,
        })
        .collect();
    Dataset::new(truth.dim().max(1), instances)
}

pub fn save_truth(truth: &PrototypeSet, ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset::save_feature_file(&truth_dataset(truth, ds)?, path)
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<PrototypeSet> {
    let ds = dataset::load_feature_file(path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = ds
        .instances()
        .iter()
        .map(|i| (i.gt_label as usize, i.embedding.clone()))
        .collect();
    rows.sort_by_key(|(id, _)| *id);
    let (ids, vectors) = rows.into_iter().unzip();
    PrototypeSet::new(PrototypeKind::GroundTruth, ids, vectors)
}

/// Sidecar path convention: `data.tsv` -> `data.truth.tsv`.
pub fn truth_path_for(data: &Path) -> std::path::PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.truth.tsv"))
}
