//! Pretraining on labeled data and the per-epoch
//! cluster -> match -> calibrate -> optimize training loop.
//!
//! Ground-truth labels are read only for labeled instances. Unlabeled and test
//! labels reach the evaluation functions, never the optimization path.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{estimate_k, Clustering, KMeans};
use crate::dataset::{CategoryId, Dataset, Split};
use crate::encoder::{AdamW, Dense, EncoderHead, HeadConfig, HeadGrads, Mode, Tape};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::losses::{self, LossBreakdown, LossTerms};
use crate::prototypes::{self, MatchMap, PrototypeSet};
use crate::vector;

/// How many clusters to use for the unlabeled data and the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterCount {
    /// The number of categories in the dataset.
    Known,
    Fixed(usize),
    /// Estimate by filtering an over-clustering of the pretrained features.
    Estimate,
    /// `ceil(factor * K)`.
    Overcluster(f64),
}

impl FromStr for ClusterCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(ClusterCount::Known),
            "estimate" => Ok(ClusterCount::Estimate),
            _ => {
                if let Some(f) = s.strip_prefix("overcluster_") {
                    let f: f64 = f
                        .parse()
                        .map_err(|_| Error::config(format!("invalid over-clustering factor in {s:?}")))?;
                    if !(f >= 1.0 && f.is_finite()) {
                        return Err(Error::config("over-clustering factor must be >= 1"));
                    }
                    Ok(ClusterCount::Overcluster(f))
                } else {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .map(ClusterCount::Fixed)
                        .ok_or_else(|| Error::config(format!("invalid cluster count {s:?}")))
                }
            }
        }
    }
}

impl fmt::Display for ClusterCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterCount::Known => f.write_str("known"),
            ClusterCount::Estimate => f.write_str("estimate"),
            ClusterCount::Fixed(n) => write!(f, "{n}"),
            ClusterCount::Overcluster(x) => write!(f, "overcluster_{x}"),
        }
    }
}

impl Serialize for ClusterCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClusterCount::Fixed(n) => s.serialize_u64(*n as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ClusterCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(ClusterCount::Fixed(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which objective terms a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoP2i,
    /// No prototype calibration (alpha = 1).
    NoP2p,
    NoCe,
    NoI2i,
    NoU,
    NoI2p,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoP2i,
        Variant::NoP2p,
        Variant::NoCe,
        Variant::NoI2i,
        Variant::NoU,
        Variant::NoI2p,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoP2i => "no_p2i",
            Variant::NoP2p => "no_p2p",
            Variant::NoCe => "no_ce",
            Variant::NoI2i => "no_i2i",
            Variant::NoU => "no_u",
            Variant::NoI2p => "no_i2p",
        }
    }

    pub fn terms(self) -> LossTerms {
        let mut t = LossTerms::default();
        match self {
            Variant::Full | Variant::NoP2p => {}
            Variant::NoP2i => t.p2i = false,
            Variant::NoCe => t.ce = false,
            Variant::NoI2i => t.i2i = false,
            Variant::NoU => t.u = false,
            Variant::NoI2p => t.i2p = false,
        }
        t
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Size of each cluster's transfer set.
    pub k_top: usize,
    /// Weight of the unlabeled prototype in calibration.
    pub alpha: f64,
    /// Weight of the labeled cross-entropy term.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_train: f64,
    pub weight_decay: f64,
    pub k_clusters: ClusterCount,
    pub seed: u64,
    /// Upper bound on pretraining epochs; early stopping usually ends sooner.
    pub pretrain_epochs: usize,
    pub early_stop_patience: usize,
    /// Share of each known category's labeled instances held out for early stopping.
    pub pretrain_holdout: f64,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub dropout: f64,
    pub input_noise: f64,
    /// L2-normalize features before prototype estimation and the distance losses.
    pub normalize_distances: bool,
    /// Re-cluster every this many epochs.
    pub refresh_every: usize,
    pub variant: Variant,
    /// Over-clustering size for `ClusterCount::Estimate`; default `2 * K`.
    pub k_max: Option<usize>,
    pub drop_ratio: f64,
    pub per_subset_mapping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_top: 5,
            alpha: 0.8,
            beta: 100.0,
            tau: 0.07,
            epochs: 20,
            batch_size: 64,
            lr_pretrain: 1e-3,
            lr_train: 1e-3,
            weight_decay: 0.01,
            k_clusters: ClusterCount::Known,
            seed: 0,
            pretrain_epochs: 200,
            early_stop_patience: 20,
            pretrain_holdout: 0.2,
            hidden: vec![64],
            output_dim: 32,
            dropout: 0.1,
            input_noise: 0.0,
            normalize_distances: false,
            refresh_every: 1,
            variant: Variant::Full,
            k_max: None,
            drop_ratio: 0.5,
            per_subset_mapping: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.k_top >= 1, "k_top must be at least 1"),
            ((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]"),
            (self.beta >= 0.0 && self.beta.is_finite(), "beta must be non-negative"),
            (self.tau > 0.0, "tau must be positive"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.lr_pretrain > 0.0 && self.lr_train > 0.0, "learning rates must be positive"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            ((0.0..1.0).contains(&self.pretrain_holdout), "pretrain_holdout must lie in [0, 1)"),
            (self.output_dim > 0, "output_dim must be positive"),
            ((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)"),
            (self.input_noise >= 0.0, "input_noise must be non-negative"),
            (self.refresh_every >= 1, "refresh_every must be at least 1"),
            (self.drop_ratio > 0.0 && self.drop_ratio < 1.0, "drop_ratio must lie in (0, 1)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }

    pub fn head_config(&self, input_dim: usize, n_classes: usize) -> HeadConfig {
        HeadConfig {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: self.output_dim,
            n_classes,
            dropout: self.dropout,
            input_noise: self.input_noise,
        }
    }

    pub fn terms(&self) -> LossTerms {
        self.variant.terms()
    }

    /// Calibration weight after applying the variant.
    pub fn effective_alpha(&self) -> f64 {
        if self.variant == Variant::NoP2p {
            1.0
        } else {
            self.alpha
        }
    }
}

/// SplitMix64-style mixing of a base seed with a list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        x = x.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

const SEED_INIT: u64 = 1;
const SEED_PRETRAIN: u64 = 2;
const SEED_CLUSTER: u64 = 3;
const SEED_SHUFFLE: u64 = 4;
const SEED_DROPOUT: u64 = 5;
const SEED_EVAL: u64 = 6;
const SEED_CLASSIFIER: u64 = 7;
const SEED_ESTIMATE: u64 = 8;

/// A freshly initialized head whose classifier covers the known categories.
pub fn init_head(ds: &Dataset, cfg: &TrainConfig) -> Result<EncoderHead> {
    cfg.validate()?;
    let m = ds.num_known();
    if m == 0 {
        return Err(Error::invalid("dataset has no labeled instances"));
    }
    EncoderHead::new(&cfg.head_config(ds.dim(), m), derive_seed(cfg.seed, &[SEED_INIT]))
}

fn known_index(ds: &Dataset) -> impl Fn(CategoryId) -> usize + '_ {
    move |c| {
        ds.known_categories()
            .iter()
            .position(|&k| k == c)
            .expect("labeled instance of a known category")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_holdout_acc: Option<f64>,
    pub train_loss: Vec<f64>,
}

/// Supervised cross-entropy on the labeled split with early stopping on a
/// held-out slice of it. The classifier must have one output per known
/// category (in ascending category order). Returns the best head seen.
pub fn pretrain(head: EncoderHead, ds: &Dataset, cfg: &TrainConfig) -> Result<(EncoderHead, PretrainReport)> {
    cfg.validate()?;
    let labeled = ds.split_indices(Split::Labeled);
    if labeled.is_empty() {
        return Err(Error::invalid("pretraining needs labeled instances"));
    }
    if head.n_classes() != ds.num_known() {
        return Err(Error::Shape {
            expected: ds.num_known(),
            actual: head.n_classes(),
        });
    }
    if head.input_dim() != ds.dim() {
        return Err(Error::Shape {
            expected: ds.dim(),
            actual: head.input_dim(),
        });
    }
    let mut report = PretrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_holdout_acc: None,
        train_loss: Vec::new(),
    };
    if cfg.pretrain_epochs == 0 {
        return Ok((head, report));
    }

    let class_of = known_index(ds);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_PRETRAIN]));

    // Stratified hold-out; a category keeps at least one training instance.
    let (mut train_idx, mut holdout) = (Vec::new(), Vec::new());
    for &c in ds.known_categories() {
        let mut members: Vec<usize> = labeled
            .iter()
            .copied()
            .filter(|&i| ds.instances()[i].gt_label == c)
            .collect();
        members.shuffle(&mut rng);
        let n_hold = ((cfg.pretrain_holdout * members.len() as f64).round() as usize).min(members.len() - 1);
        holdout.extend_from_slice(&members[..n_hold]);
        train_idx.extend_from_slice(&members[n_hold..]);
    }

    let holdout_acc = |h: &EncoderHead| -> Result<f64> {
        let mut hit = 0usize;
        for &i in &holdout {
            let inst = &ds.instances()[i];
            let logits = h.logits(&h.embed(&inst.embedding)?);
            hit += usize::from(argmax(&logits) == class_of(inst.gt_label));
        }
        Ok(hit as f64 / holdout.len() as f64)
    };

    let mut head = head;
    let mut best = head.clone();
    let mut best_acc = if holdout.is_empty() { None } else { Some(holdout_acc(&head)?) };
    let mut wait = 0usize;
    let mut opt = AdamW::new(cfg.lr_pretrain).weight_decay(cfg.weight_decay);
    let batch = cfg.batch_size.min(train_idx.len()).max(1);

    for epoch in 1..=cfg.pretrain_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (step, chunk) in train_idx.chunks(batch).enumerate() {
            let mut grads = head.zero_grads();
            let mut tapes = Vec::with_capacity(chunk.len());
            let mut logits = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let inst = &ds.instances()[i];
                let seed = derive_seed(cfg.seed, &[SEED_PRETRAIN, epoch as u64, step as u64, i as u64]);
                let (z, tape) = head.forward(&inst.embedding, Mode::Train, seed)?;
                logits.push(head.logits(&z));
                targets.push(class_of(inst.gt_label));
                tapes.push((z, tape));
            }
            let ce = losses::loss_ce(&logits, &targets)?;
            for ((z, tape), g) in tapes.iter().zip(&ce.grads) {
                let dz = head.classifier_backward(z, g, &mut grads);
                head.backward(tape, &dz, &mut grads)?;
            }
            opt.step(&mut head, &grads)?;
            epoch_loss += ce.value;
            n_batches += 1;
        }
        report.train_loss.push(epoch_loss / n_batches as f64);
        report.epochs_run = epoch;

        match best_acc {
            None => {
                best = head.clone();
                report.best_epoch = epoch;
            }
            Some(prev) => {
                let acc = holdout_acc(&head)?;
                if acc > prev {
                    best_acc = Some(acc);
                    best = head.clone();
                    report.best_epoch = epoch;
                    wait = 0;
                } else {
                    wait += 1;
                    if wait >= cfg.early_stop_patience {
                        debug!("pretraining stopped early at epoch {epoch}");
                        break;
                    }
                }
            }
        }
    }
    report.best_holdout_acc = best_acc;
    if report.best_epoch == 0 {
        // No epoch beat the initial hold-out accuracy; keep the trained weights.
        best = head;
    }
    Ok((best, report))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `ceil(factor * k)`, ignoring floating-point noise (1.2 * 20 is 24, not 25).
pub fn overcluster_size(k: usize, factor: f64) -> usize {
    (factor * k as f64 - 1e-9).ceil() as usize
}

/// Number of clusters K' for `cfg.k_clusters`.
pub fn resolve_cluster_count(head: &EncoderHead, ds: &Dataset, cfg: &TrainConfig) -> Result<usize> {
    let k = ds.num_categories();
    match cfg.k_clusters {
        ClusterCount::Known => Ok(k),
        ClusterCount::Fixed(n) => Ok(n),
        ClusterCount::Overcluster(f) => Ok(overcluster_size(k, f)),
        ClusterCount::Estimate => {
            let idx: Vec<usize> = ds
                .instances()
                .iter()
                .enumerate()
                .filter(|(_, i)| i.split != Split::Test)
                .map(|(i, _)| i)
                .collect();
            let feats = head.embed_all(&ds.embeddings(&idx))?;
            let k_max = cfg.k_max.unwrap_or(2 * k).min(feats.len());
            estimate_k(&feats, k_max, cfg.drop_ratio, derive_seed(cfg.seed, &[SEED_ESTIMATE]))
        }
    }
}

/// Cluster test-split features with `k_clusters` centers and score them.
pub fn evaluate(
    head: &EncoderHead,
    ds: &Dataset,
    k_clusters: usize,
    seed: u64,
    per_subset_mapping: bool,
) -> Result<MetricsReport> {
    let test = ds.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::invalid("dataset has no test instances"));
    }
    let feats = head.embed_all(&ds.embeddings(&test))?;
    let k = k_clusters.min(feats.len());
    let cl = KMeans::new(k).seed(derive_seed(seed, &[SEED_EVAL])).fit(&feats)?;
    let gt: Vec<CategoryId> = test.iter().map(|&i| ds.instances()[i].gt_label).collect();
    evaluation::split_metrics(&cl.assignment, &gt, ds.known_categories(), per_subset_mapping)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub match_cost: f64,
    /// Test metrics after the epoch; pseudo-label accuracy is that of the
    /// clustering used during the epoch.
    pub metrics: MetricsReport,
}

/// Prototype state used for one epoch.
#[derive(Debug, Clone)]
pub struct EpochPrototypes {
    pub clustering: Clustering,
    pub labeled: PrototypeSet,
    pub unlabeled: PrototypeSet,
    pub calibrated: PrototypeSet,
    pub matching: MatchMap,
    pub transfer: prototypes::TransferSpec,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: EncoderHead,
    pub k_clusters: usize,
    pub epochs: Vec<EpochReport>,
    pub last_prototypes: Option<EpochPrototypes>,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.epochs.last().map(|e| &e.metrics)
    }
}

fn maybe_normalize(z: Vec<f64>, on: bool) -> Vec<f64> {
    if on {
        vector::l2_normalize(&z).0
    } else {
        z
    }
}

/// Eval-mode features of every instance (index-aligned with `ds.instances()`).
fn all_features(head: &EncoderHead, ds: &Dataset, normalize: bool) -> Result<Vec<Vec<f64>>> {
    ds.instances()
        .iter()
        .map(|i| head.embed(&i.embedding).map(|z| maybe_normalize(z, normalize)))
        .collect()
}

/// Cluster unlabeled features and derive all prototype sets for one epoch.
/// When `previous` is given, cluster ids are renamed to line up with it.
pub fn estimate_prototypes(
    head: &EncoderHead,
    ds: &Dataset,
    cfg: &TrainConfig,
    k_clusters: usize,
    epoch: usize,
    previous: Option<&PrototypeSet>,
) -> Result<EpochPrototypes> {
    let feats = all_features(head, ds, cfg.normalize_distances)?;
    prototypes_from_features(&feats, ds, cfg, k_clusters, epoch, previous)
}

/// As [`estimate_prototypes`], over precomputed features indexed like
/// `ds.instances()`.
pub fn prototypes_from_features(
    feats: &[Vec<f64>],
    ds: &Dataset,
    cfg: &TrainConfig,
    k_clusters: usize,
    epoch: usize,
    previous: Option<&PrototypeSet>,
) -> Result<EpochPrototypes> {
    if feats.len() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            actual: feats.len(),
        });
    }
    let unl = ds.split_indices(Split::Unlabeled);
    if unl.len() < k_clusters {
        return Err(Error::invalid(format!(
            "{} unlabeled instances cannot form {k_clusters} clusters",
            unl.len()
        )));
    }
    let unl_feats: Vec<Vec<f64>> = unl.iter().map(|&i| feats[i].clone()).collect();
    let mut clustering = KMeans::new(k_clusters)
        .seed(derive_seed(cfg.seed, &[SEED_CLUSTER, epoch as u64]))
        .fit(&unl_feats)?;
    if let Some(prev) = previous {
        if prev.len() == k_clusters {
            let fresh = prototypes::unlabeled_prototypes(&clustering, &unl_feats)?;
            let a = crate::assignment::solve(&prototypes::distance_matrix(&fresh, prev))?;
            let perm: Vec<usize> = a.row_to_col.iter().map(|c| c.expect("square")).collect();
            clustering.relabel(&perm);
        }
    }
    let unlabeled = prototypes::unlabeled_prototypes(&clustering, &unl_feats)?;
    let labeled = prototypes::labeled_prototypes(ds, feats)?;
    let matching = prototypes::match_prototypes(&labeled, &unlabeled)?;
    let k_top = cfg.k_top.min(labeled.len());
    let (calibrated, transfer) = prototypes::calibrate(&unlabeled, &labeled, k_top, cfg.effective_alpha())?;
    Ok(EpochPrototypes {
        clustering,
        labeled,
        unlabeled,
        calibrated,
        matching,
        transfer,
    })
}

/// K'-way classifier whose output `P(i)` starts from the pretrained row of
/// known category `i`; remaining rows are freshly initialized.
fn expand_classifier(head: &EncoderHead, matching: &MatchMap, ds: &Dataset, k: usize, seed: u64) -> Dense {
    let d = head.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cls = Dense::glorot(d, k, &mut rng);
    if head.n_classes() == ds.num_known() {
        for (row, &cat) in ds.known_categories().iter().enumerate() {
            if let Some(out) = matching.cluster_of(cat as usize) {
                cls.weight[out * d..(out + 1) * d].copy_from_slice(head.classifier.row(row));
                cls.bias[out] = head.classifier.bias[row];
            }
        }
    }
    cls
}

struct View {
    raw: Vec<f64>,
    z: Vec<f64>,
    tape: Tape,
}

fn forward_view(head: &EncoderHead, x: &[f64], seed: u64, normalize: bool) -> Result<View> {
    let (raw, tape) = head.forward(x, Mode::Train, seed)?;
    let z = maybe_normalize(raw.clone(), normalize);
    Ok(View { raw, z, tape })
}

/// Gradient with respect to the raw head output.
fn to_raw_grad(view: &View, g: &[f64], normalized: bool) -> Vec<f64> {
    if normalized {
        vector::l2_normalize_backward(&view.raw, g)
    } else {
        g.to_vec()
    }
}

/// One optimization step over an unlabeled batch and a labeled batch.
/// Returns the batch loss breakdown.
#[allow(clippy::too_many_arguments)]
fn train_step(
    head: &mut EncoderHead,
    opt: &mut AdamW,
    ds: &Dataset,
    cfg: &TrainConfig,
    protos: &EpochPrototypes,
    unl_batch: &[(usize, usize)],
    lab_batch: &[usize],
    seed_tags: [u64; 2],
) -> Result<LossBreakdown> {
    let terms = cfg.terms();
    let norm = cfg.normalize_distances;
    let k = head.n_classes();
    let mut grads: HeadGrads = head.zero_grads();

    let mut views = Vec::with_capacity(unl_batch.len());
    let mut aug = Vec::with_capacity(unl_batch.len());
    for &(inst, _) in unl_batch {
        let x = &ds.instances()[inst].embedding;
        let s = |v: u64| derive_seed(cfg.seed, &[SEED_DROPOUT, seed_tags[0], seed_tags[1], inst as u64, v]);
        views.push(forward_view(head, x, s(0), norm)?);
        if terms.i2i {
            aug.push(forward_view(head, x, s(1), false)?);
        }
    }
    let clusters: Vec<usize> = unl_batch.iter().map(|&(_, c)| c).collect();
    let z: Vec<Vec<f64>> = views.iter().map(|v| v.z.clone()).collect();
    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; head.output_dim()]; z.len()];

    let mut vals = [0.0; 5];
    if terms.p2i {
        let l = losses::loss_p2i(&z, &clusters, &protos.labeled, &protos.matching)?;
        vals[0] = l.value;
        for (d, g) in dz.iter_mut().zip(&l.grads) {
            vector::axpy(d, 1.0, g);
        }
    }
    if terms.i2p {
        let l = losses::loss_i2p(&z, &clusters, &protos.calibrated)?;
        vals[1] = l.value;
        for (d, g) in dz.iter_mut().zip(&l.grads) {
            vector::axpy(d, 1.0, g);
        }
    }
    // Distance-loss gradients are w.r.t. the (optionally normalized) features.
    let mut draw: Vec<Vec<f64>> = views.iter().zip(&dz).map(|(v, g)| to_raw_grad(v, g, norm)).collect();

    if terms.u {
        let logits: Vec<Vec<f64>> = views.iter().map(|v| head.logits(&v.raw)).collect();
        let l = losses::loss_ce(&logits, &clusters)?;
        vals[3] = l.value;
        for ((d, v), g) in draw.iter_mut().zip(&views).zip(&l.grads) {
            let back = head.classifier_backward(&v.raw, g, &mut grads);
            vector::axpy(d, 1.0, &back);
        }
    }
    if terms.i2i && views.len() >= 2 {
        let a: Vec<Vec<f64>> = views.iter().map(|v| vector::l2_normalize(&v.raw).0).collect();
        let b: Vec<Vec<f64>> = aug.iter().map(|v| vector::l2_normalize(&v.raw).0).collect();
        let l = losses::loss_i2i(&a, &b, cfg.tau)?;
        vals[2] = l.value;
        let n = views.len();
        for (i, d) in draw.iter_mut().enumerate() {
            vector::axpy(d, 1.0, &vector::l2_normalize_backward(&views[i].raw, &l.grads[i]));
        }
        for (i, v) in aug.iter().enumerate() {
            let g = vector::l2_normalize_backward(&v.raw, &l.grads[n + i]);
            head.backward(&v.tape, &g, &mut grads)?;
        }
    }
    for (v, d) in views.iter().zip(&draw) {
        head.backward(&v.tape, d, &mut grads)?;
    }

    if terms.ce && !lab_batch.is_empty() {
        let mut lab = Vec::with_capacity(lab_batch.len());
        let mut targets = Vec::with_capacity(lab_batch.len());
        for &inst in lab_batch {
            let i = &ds.instances()[inst];
            let seed = derive_seed(cfg.seed, &[SEED_DROPOUT, seed_tags[0], seed_tags[1], inst as u64, 2]);
            let (zl, tape) = head.forward(&i.embedding, Mode::Train, seed)?;
            let target = protos
                .matching
                .cluster_of(i.gt_label as usize)
                .ok_or_else(|| Error::invalid(format!("known category {} is unmatched", i.gt_label)))?;
            debug_assert!(target < k);
            targets.push(target);
            lab.push((zl, tape));
        }
        let logits: Vec<Vec<f64>> = lab.iter().map(|(zl, _)| head.logits(zl)).collect();
        let l = losses::loss_ce(&logits, &targets)?;
        vals[4] = l.value;
        for ((zl, tape), g) in lab.iter().zip(&l.grads) {
            let scaled: Vec<f64> = g.iter().map(|v| cfg.beta * v).collect();
            let dz = head.classifier_backward(zl, &scaled, &mut grads);
            head.backward(tape, &dz, &mut grads)?;
        }
    }

    opt.step(head, &grads)?;
    Ok(losses::total_loss(vals, cfg.beta, cfg.tau, terms))
}

/// Alignment training. `head` should come from [`pretrain`]; its classifier
/// is replaced by a K'-way one on the first epoch. `truth` (true category
/// centers in input space) is only used for reporting.
pub fn train(
    head: EncoderHead,
    ds: &Dataset,
    cfg: &TrainConfig,
    truth: Option<&PrototypeSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k_clusters = resolve_cluster_count(&head, ds, cfg)?;
    let m = ds.num_known();
    if k_clusters < m {
        return Err(Error::config(format!(
            "{k_clusters} clusters cannot host {m} known categories"
        )));
    }
    let unl = ds.split_indices(Split::Unlabeled);
    let lab = ds.split_indices(Split::Labeled);
    if unl.len() < 2 {
        return Err(Error::invalid("training needs at least two unlabeled instances"));
    }

    let mut head = head;
    let mut opt = AdamW::new(cfg.lr_train).weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_SHUFFLE]));
    let mut protos: Option<EpochPrototypes> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut classifier_ready = false;

    for epoch in 1..=cfg.epochs {
        if protos.is_none() || (epoch - 1) % cfg.refresh_every == 0 {
            let prev = protos.as_ref().map(|p| &p.unlabeled);
            let fresh = estimate_prototypes(&head, ds, cfg, k_clusters, epoch, prev)?;
            if !classifier_ready {
                let cls = expand_classifier(
                    &head,
                    &fresh.matching,
                    ds,
                    k_clusters,
                    derive_seed(cfg.seed, &[SEED_CLASSIFIER]),
                );
                head.set_classifier(cls)?;
                opt.reset();
                classifier_ready = true;
            }
            protos = Some(fresh);
        }
        let p = protos.as_ref().expect("prototypes estimated");

        let mut order: Vec<(usize, usize)> = unl.iter().copied().zip(p.clustering.assignment.iter().copied()).collect();
        order.shuffle(&mut rng);
        let mut lab_order = lab.clone();
        lab_order.shuffle(&mut rng);
        let lab_batch = cfg.batch_size.min(lab_order.len());

        let mut epoch_loss = LossBreakdown::default();
        let mut n_steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let lb: Vec<usize> = if lab_batch == 0 {
                Vec::new()
            } else {
                (0..lab_batch)
                    .map(|j| lab_order[(step * lab_batch + j) % lab_order.len()])
                    .collect()
            };
            let b = train_step(&mut head, &mut opt, ds, cfg, p, chunk, &lb, [epoch as u64, step as u64])?;
            epoch_loss.add_scaled(&b, 1.0);
            n_steps += 1;
        }
        if n_steps > 0 {
            let mut mean = LossBreakdown::default();
            mean.add_scaled(&epoch_loss, 1.0 / n_steps as f64);
            epoch_loss = mean;
        }

        let mut metrics = evaluate(&head, ds, k_clusters, derive_seed(cfg.seed, &[epoch as u64]), cfg.per_subset_mapping)?;
        let unl_gt: Vec<CategoryId> = unl.iter().map(|&i| ds.instances()[i].gt_label).collect();
        metrics.pseudo_label_acc = Some(evaluation::pseudo_label_accuracy(&p.clustering.assignment, &unl_gt)?);
        if let Some(t) = truth {
            if let Some((b, a)) = input_space_calibration(ds, cfg, t, &p.clustering)? {
                metrics.proto_dist_before = Some(b);
                metrics.proto_dist_after = Some(a);
            }
        }
        info!(
            "epoch {epoch}: loss {:.4} h-score {:.2} known {:.2} novel {:.2} pseudo {:.2}",
            epoch_loss.total,
            100.0 * metrics.h_score,
            100.0 * metrics.known_acc.unwrap_or(f64::NAN),
            100.0 * metrics.novel_acc.unwrap_or(f64::NAN),
            100.0 * metrics.pseudo_label_acc.unwrap_or(f64::NAN),
        );
        reports.push(EpochReport {
            epoch,
            loss: epoch_loss,
            match_cost: p.matching.total_cost,
            metrics,
        });
    }

    Ok(TrainOutcome {
        head,
        k_clusters,
        epochs: reports,
        last_prototypes: protos,
    })
}

/// Prototype calibration measured in input space. Prototypes are recomputed
/// from raw embeddings under `clustering` (a partition of the unlabeled
/// split), optionally perturbed by Gaussian noise of std `proto_noise`,
/// calibrated, and compared with the true centers.
pub fn input_space_report(
    ds: &Dataset,
    clustering: &Clustering,
    k_top: usize,
    alpha: f64,
    truth: &PrototypeSet,
    proto_noise: f64,
    noise_seed: u64,
) -> Result<evaluation::PrototypeDistanceReport> {
    let unl = ds.split_indices(Split::Unlabeled);
    let unl_raw = ds.embeddings(&unl);
    let mut pu = prototypes::unlabeled_prototypes(clustering, &unl_raw)?;
    if proto_noise > 0.0 {
        let noise = Normal::new(0.0, proto_noise).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in &mut pu.vectors {
            for x in v.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let raw: Vec<Vec<f64>> = ds.instances().iter().map(|i| i.embedding.clone()).collect();
    let pl = prototypes::labeled_prototypes(ds, &raw)?;
    let mm = prototypes::match_prototypes(&pl, &pu)?;
    let (pc, _) = prototypes::calibrate(&pu, &pl, k_top.min(pl.len()), alpha)?;
    evaluation::prototype_distance_report(&pu, &pc, truth, Some(&mm))
}

fn input_space_calibration(
    ds: &Dataset,
    cfg: &TrainConfig,
    truth: &PrototypeSet,
    clustering: &Clustering,
) -> Result<Option<(f64, f64)>> {
    if truth.dim() != ds.dim() {
        return Ok(None);
    }
    let r = input_space_report(ds, clustering, cfg.k_top, cfg.effective_alpha(), truth, 0.0, 0)?;
    Ok(Some((r.before, r.after)))
}

/// Pretrain-then-train for one variant.
pub fn run_ablation(variant: Variant, ds: &Dataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    let (pretrained, _) = pretrain(init_head(ds, cfg)?, ds, cfg)?;
    run_ablation_from(&pretrained, variant, ds, cfg)
}

/// Train `variant` starting from an already pretrained head.
pub fn run_ablation_from(
    pretrained: &EncoderHead,
    variant: Variant,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let cfg = TrainConfig {
        variant,
        ..cfg.clone()
    };
    let out = train(pretrained.clone(), ds, &cfg, None)?;
    out.final_metrics()
        .cloned()
        .ok_or_else(|| Error::config("training ran for zero epochs"))
}

/// Cluster pretrained features with no alignment training.
pub fn kmeans_baseline(pretrained: &EncoderHead, ds: &Dataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    let k = resolve_cluster_count(pretrained, ds, cfg)?;
    evaluate(pretrained, ds, k, derive_seed(cfg.seed, &[cfg.epochs as u64]), cfg.per_subset_mapping)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;

    #[test]
    fn cluster_count_parsing() {
        assert_eq!("known".parse::<ClusterCount>().unwrap(), ClusterCount::Known);
        assert_eq!("estimate".parse::<ClusterCount>().unwrap(), ClusterCount::Estimate);
        assert_eq!("24".parse::<ClusterCount>().unwrap(), ClusterCount::Fixed(24));
        assert_eq!(
            "overcluster_1.2".parse::<ClusterCount>().unwrap(),
            ClusterCount::Overcluster(1.2)
        );
        for bad in ["0", "-3", "overcluster_0.5", "overcluster_x", "many"] {
            assert!(bad.parse::<ClusterCount>().is_err(), "{bad}");
        }
        for c in [ClusterCount::Known, ClusterCount::Fixed(7), ClusterCount::Overcluster(1.2)] {
            let j = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ClusterCount>(&j).unwrap(), c);
        }
        assert_eq!(serde_json::from_str::<ClusterCount>("30").unwrap(), ClusterCount::Fixed(30));
    }

    #[test]
    fn overcluster_rounds_up() {
        assert_eq!(overcluster_size(20, 1.2), 24);
        assert_eq!(overcluster_size(77, 1.2), 93);
        assert_eq!(overcluster_size(10, 1.0), 10);
        assert_eq!(overcluster_size(3, 1.5), 5);
    }

    #[test]
    fn variants() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("no_everything".parse::<Variant>().is_err());
        assert!(!Variant::NoCe.terms().ce);
        assert!(!Variant::NoI2p.terms().i2p);
        assert_eq!(Variant::NoP2p.terms(), LossTerms::default());
        let cfg = TrainConfig {
            variant: Variant::NoP2p,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_alpha(), 1.0);
        assert_eq!(TrainConfig::default().effective_alpha(), 0.8);
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.k_top, c.alpha, c.beta, c.tau), (5, 0.8, 100.0, 0.07));
        assert_eq!((c.epochs, c.batch_size, c.lr_train, c.early_stop_patience), (20, 64, 1e-3, 20));
        assert_eq!(c.k_clusters, ClusterCount::Known);
    }

    #[test]
    fn config_json_is_partial_and_strict() {
        let c: TrainConfig = serde_json::from_str(r#"{"alpha": 0.5, "k_clusters": "overcluster_1.2"}"#).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.k_top, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alhpa": 0.5}"#).is_err());
        let bad = TrainConfig {
            alpha: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn derived_seeds_depend_on_every_tag() {
        let a = derive_seed(1, &[2, 3]);
        assert_eq!(a, derive_seed(1, &[2, 3]));
        assert_ne!(a, derive_seed(1, &[3, 2]));
        assert_ne!(a, derive_seed(0, &[2, 3]));
        assert_ne!(a, derive_seed(1, &[2, 3, 0]));
    }

    fn tiny() -> Dataset {
        let mut inst = Vec::new();
        for (c, center) in [(0u32, [0.0, 0.0]), (1, [5.0, 0.0]), (2, [0.0, 5.0])] {
            for i in 0..6 {
                let j = i as f64 * 0.01;
                let split = match (c, i) {
                    (2, 0..=4) => Split::Unlabeled,
                    (_, 0..=1) => Split::Labeled,
                    (_, 5) => Split::Test,
                    _ => Split::Unlabeled,
                };
                inst.push(Instance {
                    id: format!("{c}-{i}"),
                    embedding: vec![center[0] + j, center[1] - j],
                    split,
                    gt_label: c,
                });
            }
        }
        Dataset::new(2, inst).unwrap()
    }

    #[test]
    fn zero_pretrain_epochs_return_the_head_unchanged() {
        let ds = tiny();
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..TrainConfig::default()
        };
        let head = init_head(&ds, &cfg).unwrap();
        let (out, report) = pretrain(head.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.tensors(), head.tensors());
        assert_eq!(report.epochs_run, 0);
    }

    #[test]
    fn too_few_clusters_is_an_error() {
        let ds = tiny();
        let cfg = TrainConfig {
            k_clusters: ClusterCount::Fixed(1),
            epochs: 1,
            ..TrainConfig::default()
        };
        let head = init_head(&ds, &cfg).unwrap();
        assert!(matches!(train(head, &ds, &cfg, None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn training_replaces_the_classifier_and_reports_each_epoch() {
        let ds = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            pretrain_epochs: 2,
            ..TrainConfig::default()
        };
        let (head, _) = pretrain(init_head(&ds, &cfg).unwrap(), &ds, &cfg).unwrap();
        assert_eq!(head.n_classes(), 2);
        let out = train(head, &ds, &cfg, None).unwrap();
        assert_eq!(out.k_clusters, 3);
        assert_eq!(out.head.n_classes(), 3);
        assert_eq!(out.epochs.len(), 2);
        for e in &out.epochs {
            let l = &e.loss;
            let sum = l.l_p2i + l.l_i2p + l.l_i2i + l.l_u + l.beta * l.l_ce;
            assert!((l.total - sum).abs() <= 1e-9 * l.total.abs().max(1.0));
            assert!(e.metrics.pseudo_label_acc.is_some());
        }
    }
}
