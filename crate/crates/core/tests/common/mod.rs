//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tan_gcd::clustering::KMeans;
use tan_gcd::encoder::{EncoderHead, HeadConfig, Mode};
use tan_gcd::evaluation::{h_score, hungarian_accuracy};
use tan_gcd::losses;
use tan_gcd::prototypes::{self, MatchMap, PrototypeKind, PrototypeSet};
use tan_gcd::vector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(r: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r))
        .collect()
}

pub fn gaussian_rows(r: &mut impl Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| gaussian_vec(r, dim, scale)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    P2i,
    I2p,
    I2i,
    Ce,
}

/// One randomized loss evaluated through a head in Train mode with fixed
/// dropout masks.
struct GradCase {
    kind: LossKind,
    head: EncoderHead,
    xs: Vec<Vec<f64>>,
    clusters: Vec<usize>,
    labeled: PrototypeSet,
    matching: MatchMap,
    calibrated: PrototypeSet,
    targets: Vec<usize>,
    tau: f64,
}

impl GradCase {
    fn new(kind: LossKind, seed: u64) -> Self {
        let mut r = rng(seed);
        let input_dim = r.random_range(2..6);
        let hidden = r.random_range(3..8);
        let out_dim = r.random_range(2..5);
        let k = r.random_range(3..6);
        let m = r.random_range(1..=k);
        let b = r.random_range(3..7);
        let cfg = HeadConfig {
            input_dim,
            hidden: vec![hidden],
            output_dim: out_dim,
            n_classes: k,
            dropout: 0.2,
            input_noise: 0.0,
        };
        let head = EncoderHead::new(&cfg, r.random()).unwrap();
        let xs = gaussian_rows(&mut r, b, input_dim, 1.0);
        let clusters: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let labeled = PrototypeSet::new(PrototypeKind::Labeled, (0..m).collect(), gaussian_rows(&mut r, m, out_dim, 1.0))
            .unwrap();
        let mut cl: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            cl.swap(i, r.random_range(0..=i));
        }
        let matching = MatchMap {
            pairs: (0..m).map(|i| (i, cl[i])).collect(),
            total_cost: 0.0,
        };
        let calibrated =
            PrototypeSet::new(PrototypeKind::Calibrated, (0..k).collect(), gaussian_rows(&mut r, k, out_dim, 1.0))
                .unwrap();
        let targets = (0..b).map(|_| r.random_range(0..k)).collect();
        let mut case = Self {
            kind,
            head,
            xs,
            clusters,
            labeled,
            matching,
            calibrated,
            targets,
            tau: 0.07,
        };
        // Make sure the matched-cluster loss has at least one contributing row.
        case.clusters[0] = case.matching.pairs[0].1;
        case
    }

    /// Smallest feature norm over every view the loss sees.
    fn min_view_norm(&self) -> f64 {
        (0..2)
            .flat_map(|view| {
                self.xs
                    .iter()
                    .enumerate()
                    .map(move |(i, x)| (i, x, view))
            })
            .map(|(i, x, view)| vector::norm(&self.head.forward(x, Mode::Train, Self::seed(i, view)).unwrap().0))
            .fold(f64::INFINITY, f64::min)
    }

    fn seed(i: usize, view: u64) -> u64 {
        1000 * i as u64 + view
    }

    /// Loss value and analytic parameter gradient (flattened in tensor order).
    fn eval(&self, head: &EncoderHead) -> (f64, Vec<f64>) {
        let mut grads = head.zero_grads();
        let fw: Vec<_> = self
            .xs
            .iter()
            .enumerate()
            .map(|(i, x)| head.forward(x, Mode::Train, Self::seed(i, 0)).unwrap())
            .collect();
        let z: Vec<Vec<f64>> = fw.iter().map(|(z, _)| z.clone()).collect();
        let value = match self.kind {
            LossKind::P2i | LossKind::I2p => {
                let l = if self.kind == LossKind::P2i {
                    losses::loss_p2i(&z, &self.clusters, &self.labeled, &self.matching).unwrap()
                } else {
                    losses::loss_i2p(&z, &self.clusters, &self.calibrated).unwrap()
                };
                for ((_, tape), g) in fw.iter().zip(&l.grads) {
                    head.backward(tape, g, &mut grads).unwrap();
                }
                l.value
            }
            LossKind::Ce => {
                let logits: Vec<Vec<f64>> = z.iter().map(|zi| head.logits(zi)).collect();
                let l = losses::loss_ce(&logits, &self.targets).unwrap();
                for ((zi, tape), g) in fw.iter().zip(&l.grads) {
                    let dz = head.classifier_backward(zi, g, &mut grads);
                    head.backward(tape, &dz, &mut grads).unwrap();
                }
                l.value
            }
            LossKind::I2i => {
                let aug: Vec<_> = self
                    .xs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| head.forward(x, Mode::Train, Self::seed(i, 1)).unwrap())
                    .collect();
                let a: Vec<Vec<f64>> = z.iter().map(|v| vector::l2_normalize(v).0).collect();
                let b: Vec<Vec<f64>> = aug.iter().map(|(v, _)| vector::l2_normalize(v).0).collect();
                let l = losses::loss_i2i(&a, &b, self.tau).unwrap();
                let n = a.len();
                for (i, (zi, tape)) in fw.iter().chain(&aug).enumerate() {
                    let g = vector::l2_normalize_backward(zi, &l.grads[i]);
                    head.backward(tape, &g, &mut grads).unwrap();
                }
                assert_eq!(l.grads.len(), 2 * n);
                l.value
            }
        };
        (value, grads.tensors().concat())
    }
}

/// Norm-wise relative error between the analytic gradient and central finite
/// differences (step `eps`) over every parameter of the head.
pub fn gradient_relative_error(kind: LossKind, seed: u64, eps: f64) -> f64 {
    let mut case = GradCase::new(kind, seed);
    // Normalization has no derivative at the origin; redraw until every view is
    // clear of it.
    let mut redraw = 0;
    while kind == LossKind::I2i && case.min_view_norm() < 1e-2 {
        redraw += 1;
        case = GradCase::new(kind, seed ^ (redraw << 40));
    }
    let (_, analytic) = case.eval(&case.head);
    let sizes: Vec<usize> = case.head.tensors().iter().map(|t| t.len()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (t, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let mut plus = case.head.clone();
            plus.tensors_mut()[t][j] += eps;
            let mut minus = case.head.clone();
            minus.tensors_mut()[t][j] -= eps;
            numeric.push((case.eval(&plus).0 - case.eval(&minus).0) / (2.0 * eps));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = vector::norm(&analytic).max(vector::norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn translated(rows: &[Vec<f64>], t: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().zip(t).map(|(a, b)| a + b).collect()).collect()
}

/// Well-separated blobs so that the partition is stable under translation.
fn blobs(r: &mut impl Rng, k: usize, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<u32>) {
    let centers = gaussian_rows(r, k, dim, 10.0);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            pts.push(center.iter().zip(gaussian_vec(r, dim, 0.3)).map(|(a, b)| a + b).collect());
            labels.push(c as u32);
        }
    }
    (pts, labels)
}

pub fn check_kmeans_translation(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(1..5);
    let k = r.random_range(1..5);
    let (pts, _) = blobs(&mut r, k, 6, dim);
    let t = gaussian_vec(&mut r, dim, 5.0);
    let a = KMeans::new(k).seed(seed).fit(&pts).map_err(|e| e.to_string())?;
    let b = KMeans::new(k).seed(seed).fit(&translated(&pts, &t)).map_err(|e| e.to_string())?;
    if a.assignment != b.assignment {
        return Err("assignment changed under translation".into());
    }
    for (ca, cb) in translated(&a.centers, &t).iter().zip(&b.centers) {
        if !close(ca, cb, 1e-9) {
            return Err(format!("center {ca:?} + t != {cb:?}"));
        }
    }
    Ok(())
}

pub fn check_prototype_translation(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(1..5);
    let n = r.random_range(1..20);
    let feats = gaussian_rows(&mut r, n, dim, 2.0);
    let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
    let t = gaussian_vec(&mut r, dim, 5.0);
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let moved = translated(&feats, &t);
    let mrefs: Vec<&[f64]> = moved.iter().map(Vec::as_slice).collect();
    let a = prototypes::class_means(&labels, &refs, PrototypeKind::Labeled).map_err(|e| e.to_string())?;
    let b = prototypes::class_means(&labels, &mrefs, PrototypeKind::Labeled).map_err(|e| e.to_string())?;
    if a.ids != b.ids {
        return Err("ids changed".into());
    }
    for (va, vb) in translated(&a.vectors, &t).iter().zip(&b.vectors) {
        if !close(va, vb, 1e-9) {
            return Err(format!("prototype {va:?} + t != {vb:?}"));
        }
    }
    Ok(())
}

fn random_sets(r: &mut impl Rng, dim: usize) -> (PrototypeSet, PrototypeSet, usize, f64) {
    let m = r.random_range(1..6);
    let ku = r.random_range(1..8);
    let pl = PrototypeSet::new(PrototypeKind::Labeled, (0..m).collect(), gaussian_rows(r, m, dim, 2.0)).unwrap();
    let pu = PrototypeSet::new(PrototypeKind::Unlabeled, (0..ku).collect(), gaussian_rows(r, ku, dim, 2.0)).unwrap();
    let k = r.random_range(1..=m);
    let alpha = r.random::<f64>();
    (pu, pl, k, alpha)
}

pub fn check_calibration_translation(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(1..6);
    let (pu, pl, k, alpha) = random_sets(&mut r, dim);
    let t = gaussian_vec(&mut r, dim, 5.0);
    let (a, sa) = prototypes::calibrate(&pu, &pl, k, alpha).map_err(|e| e.to_string())?;
    let pu2 = PrototypeSet::new(pu.kind, pu.ids.clone(), translated(&pu.vectors, &t)).unwrap();
    let pl2 = PrototypeSet::new(pl.kind, pl.ids.clone(), translated(&pl.vectors, &t)).unwrap();
    let (b, sb) = prototypes::calibrate(&pu2, &pl2, k, alpha).map_err(|e| e.to_string())?;
    if sa.sets != sb.sets {
        return Err("transfer sets changed under translation".into());
    }
    for (va, vb) in translated(&a.vectors, &t).iter().zip(&b.vectors) {
        if !close(va, vb, 1e-9) {
            return Err(format!("calibrated {va:?} + t != {vb:?}"));
        }
    }
    Ok(())
}

pub fn check_alpha_one_identity(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(1..6);
    let (pu, pl, k, _) = random_sets(&mut r, dim);
    let (c, _) = prototypes::calibrate(&pu, &pl, k, 1.0).map_err(|e| e.to_string())?;
    if c.vectors != pu.vectors {
        return Err("alpha = 1 changed a prototype".into());
    }
    Ok(())
}

pub fn check_softmax_simplex(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dim = r.random_range(1..6);
    let (pu, pl, k, alpha) = random_sets(&mut r, dim);
    let (c, spec) = prototypes::calibrate(&pu, &pl, k, alpha).map_err(|e| e.to_string())?;
    for (i, (set, w)) in spec.sets.iter().zip(&spec.weights).enumerate() {
        if set.len() != k || w.len() != k {
            return Err(format!("transfer set {i} has size {} (k = {k})", set.len()));
        }
        if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(format!("weights {w:?} are not on the simplex"));
        }
        let d: Vec<f64> = set.iter().map(|&j| vector::dist(&pu.vectors[i], pl.get(j).unwrap())).collect();
        for a in 0..k {
            for b in 0..k {
                if d[a] <= d[b] && w[a] < w[b] - 1e-12 {
                    return Err("weight increases with distance".into());
                }
            }
        }
        // Every selected prototype is at least as close as every unselected one.
        let worst = d.iter().cloned().fold(f64::MIN, f64::max);
        for j in pl.ids.iter().filter(|j| !set.contains(j)) {
            if vector::dist(&pu.vectors[i], pl.get(*j).unwrap()) < worst - 1e-12 {
                return Err("a closer labeled prototype was left out".into());
            }
        }
        // Convex hull: c_i = alpha * u_i + (1 - alpha) * sum w_j l_j.
        let mut expect: Vec<f64> = pu.vectors[i].iter().map(|v| alpha * v).collect();
        for (&j, &wj) in set.iter().zip(w) {
            vector::axpy(&mut expect, (1.0 - alpha) * wj, pl.get(j).unwrap());
        }
        if !close(&expect, &c.vectors[i], 1e-9) {
            return Err("calibrated prototype is not the stated convex combination".into());
        }
    }
    Ok(())
}

pub fn check_h_score_bounds(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for _ in 0..100 {
        let (k, n) = (r.random::<f64>(), r.random::<f64>());
        let (k, n) = match r.random_range(0..4) {
            0 => (0.0, n),
            1 => (k, 0.0),
            _ => (k, n),
        };
        let h = h_score(k, n);
        if !(0.0..=1.0).contains(&h) {
            return Err(format!("h_score({k}, {n}) = {h} outside [0, 1]"));
        }
        if k > 0.0 && n > 0.0 {
            if h < k.min(n) - 1e-15 || h > k.max(n) + 1e-15 {
                return Err(format!("h_score({k}, {n}) = {h} outside [min, max]"));
            }
            if (h - 2.0 * k * n / (k + n)).abs() > 1e-15 {
                return Err("h_score is not the harmonic mean".into());
            }
        } else if h != 0.0 {
            return Err(format!("h_score({k}, {n}) should be 0"));
        }
    }
    Ok(())
}

pub fn check_metric_permutation(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(1..40);
    let kp = r.random_range(1..6);
    let kc = r.random_range(1..6);
    let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..kp)).collect();
    let gt: Vec<u32> = (0..n).map(|_| r.random_range(0..kc) as u32).collect();
    let mut pp: Vec<usize> = (0..kp).map(|i| i * 7 + 3).collect();
    let mut gp: Vec<u32> = (0..kc as u32).map(|i| 100 - i * 5).collect();
    for i in (1..kp).rev() {
        pp.swap(i, r.random_range(0..=i));
    }
    for i in (1..kc).rev() {
        gp.swap(i, r.random_range(0..=i));
    }
    let base = hungarian_accuracy(&pred, &gt).map_err(|e| e.to_string())?.0;
    let p2: Vec<usize> = pred.iter().map(|&p| pp[p]).collect();
    let g2: Vec<u32> = gt.iter().map(|&g| gp[g as usize]).collect();
    let other = hungarian_accuracy(&p2, &g2).map_err(|e| e.to_string())?.0;
    if base != other {
        return Err(format!("accuracy {base} became {other} after relabeling"));
    }
    Ok(())
}

/// Exhaustive maximum number of matched points over injective cluster -> category maps.
pub fn brute_force_accuracy(pred: &[usize], gt: &[u32]) -> f64 {
    let mut clusters: Vec<usize> = pred.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut cats: Vec<u32> = gt.to_vec();
    cats.sort_unstable();
    cats.dedup();
    let mut counts = vec![vec![0usize; cats.len()]; clusters.len()];
    for (p, g) in pred.iter().zip(gt) {
        let i = clusters.binary_search(p).unwrap();
        let j = cats.binary_search(g).unwrap();
        counts[i][j] += 1;
    }
    fn go(i: usize, counts: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == counts.len() {
            return 0;
        }
        // Cluster i left unmapped.
        let mut best = go(i + 1, counts, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(counts[i][j] + go(i + 1, counts, used));
                used[j] = false;
            }
        }
        best
    }
    go(0, &counts, &mut vec![false; cats.len()]) as f64 / pred.len() as f64
}

/// Exhaustive minimum total cost over injections of the smaller side.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| cost[i][j]).collect()).collect();
        return brute_force_assignment(&t);
    }
    fn go(i: usize, cost: &[Vec<f64>], used: &mut Vec<bool>) -> f64 {
        if i == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[i][j] + go(i + 1, cost, used));
                used[j] = false;
            }
        }
        best
    }
    go(0, cost, &mut vec![false; cols])
}
