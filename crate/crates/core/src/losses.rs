//! Loss terms of the training objective, each returning its value and the
//! gradient with respect to its inputs (features or logits).
//!
//! | term  | pulls                                               |
//! |-------|-----------------------------------------------------|
//! | p2i   | unlabeled features of matched clusters -> labeled prototype |
//! | i2p   | every unlabeled feature -> its cluster's calibrated prototype |
//! | i2i   | feature <-> augmented view (symmetric InfoNCE)       |
//! | u, ce | softmax cross-entropy on pseudo labels / ground truth |
//!
//! Prototypes are constants: no gradient flows into them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::{MatchMap, PrototypeSet};
use crate::vector;

/// A loss value together with one gradient per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    /// Number of rows that contributed to the value.
    pub count: usize,
}

impl LossValue {
    fn zero(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            grads: vec![vec![0.0; dim]; rows],
            count: 0,
        }
    }
}

/// Mean Euclidean distance of each feature to its target; rows without a target
/// are skipped and get a zero gradient. The subgradient at zero distance is 0.
fn mean_distance(features: &[Vec<f64>], targets: &[Option<&[f64]>], normalizer: usize) -> LossValue {
    let dim = features.first().map_or(0, Vec::len);
    let mut out = LossValue::zero(features.len(), dim);
    out.count = targets.iter().filter(|t| t.is_some()).count();
    if normalizer == 0 {
        return out;
    }
    let inv = 1.0 / normalizer as f64;
    for ((z, t), g) in features.iter().zip(targets).zip(&mut out.grads) {
        let Some(mu) = t else { continue };
        let d = vector::dist(z, mu);
        out.value += d;
        if d > 0.0 {
            for ((gi, zi), mi) in g.iter_mut().zip(z).zip(mu.iter()) {
                *gi = inv * (zi - mi) / d;
            }
        }
    }
    out.value *= inv;
    out
}

/// Pull unlabeled features assigned to a matched (known) cluster towards the
/// labeled prototype of the matched category, averaged over those features.
/// When no feature lies in a matched cluster the value is 0 and `count` is 0.
pub fn loss_p2i(
    features: &[Vec<f64>],
    clusters: &[usize],
    labeled: &PrototypeSet,
    matching: &MatchMap,
) -> Result<LossValue> {
    if features.len() != clusters.len() {
        return Err(Error::Shape {
            expected: features.len(),
            actual: clusters.len(),
        });
    }
    let mut targets = Vec::with_capacity(features.len());
    for &c in clusters {
        let t = match matching.category_of(c) {
            Some(cat) => Some(
                labeled
                    .get(cat)
                    .ok_or_else(|| Error::invalid(format!("match refers to unknown category {cat}")))?,
            ),
            None => None,
        };
        targets.push(t);
    }
    let n = targets.iter().filter(|t| t.is_some()).count();
    Ok(mean_distance(features, &targets, n))
}

/// Pull every unlabeled feature towards the calibrated prototype of its cluster,
/// averaged over all unlabeled features.
pub fn loss_i2p(features: &[Vec<f64>], clusters: &[usize], calibrated: &PrototypeSet) -> Result<LossValue> {
    if features.len() != clusters.len() {
        return Err(Error::Shape {
            expected: features.len(),
            actual: clusters.len(),
        });
    }
    let targets = clusters
        .iter()
        .map(|&c| {
            calibrated
                .get(c)
                .map(Some)
                .ok_or_else(|| Error::invalid(format!("no calibrated prototype for cluster {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_distance(features, &targets, features.len()))
}

/// Symmetric InfoNCE over `2B` L2-normalized views.
///
/// View `i < B` is `views[i]`, view `B + i` is `augmented[i]`; the positive of
/// each view is its counterpart. Each anchor's denominator sums over the other
/// `2B - 1` views. The value is the mean over all `2B` anchors. Gradients are
/// returned for the `2B` views in the same order.
pub fn loss_i2i(views: &[Vec<f64>], augmented: &[Vec<f64>], tau: f64) -> Result<LossValue> {
    let b = views.len();
    if b < 2 {
        return Err(Error::invalid(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if augmented.len() != b {
        return Err(Error::Shape {
            expected: b,
            actual: augmented.len(),
        });
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let all: Vec<&[f64]> = views.iter().chain(augmented).map(Vec::as_slice).collect();
    let n = 2 * b;
    let dim = all[0].len();
    let positive = |a: usize| if a < b { a + b } else { a - b };

    // s[a][c] = v_a . v_c / tau
    let s: Vec<Vec<f64>> = all
        .iter()
        .map(|va| all.iter().map(|vc| vector::dot(va, vc) / tau).collect())
        .collect();

    let mut value = 0.0;
    let mut grads = vec![vec![0.0; dim]; n];
    let inv_n = 1.0 / n as f64;
    for a in 0..n {
        let p = positive(a);
        let max = (0..n).filter(|&c| c != a).map(|c| s[a][c]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&c| c != a).map(|c| (s[a][c] - max).exp()).sum();
        let log_denom = max + denom.ln();
        value += log_denom - s[a][p];

        // d/ds[a][c] = softmax_c - [c == p]; ds[a][c]/dv_a = v_c / tau, ds[a][c]/dv_c = v_a / tau
        for c in 0..n {
            if c == a {
                continue;
            }
            let mut coef = (s[a][c] - log_denom).exp();
            if c == p {
                coef -= 1.0;
            }
            let scale = coef * inv_n / tau;
            vector::axpy(&mut grads[a], scale, all[c]);
            vector::axpy(&mut grads[c], scale, all[a]);
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grads,
        count: n,
    })
}

/// Mean softmax cross-entropy. Gradients are with respect to the logits.
pub fn loss_ce(logits: &[Vec<f64>], targets: &[usize]) -> Result<LossValue> {
    if logits.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    if logits.len() != targets.len() {
        return Err(Error::Shape {
            expected: logits.len(),
            actual: targets.len(),
        });
    }
    let inv = 1.0 / logits.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &t) in logits.iter().zip(targets) {
        if t >= l.len() {
            return Err(Error::invalid(format!("target {t} out of range for {} classes", l.len())));
        }
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        value += lse - l[t];
        let mut g: Vec<f64> = l.iter().map(|v| (v - lse).exp() * inv).collect();
        g[t] -= inv;
        grads.push(g);
    }
    Ok(LossValue {
        value: value * inv,
        grads,
        count: logits.len(),
    })
}

/// Which terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub p2i: bool,
    pub i2p: bool,
    pub i2i: bool,
    pub u: bool,
    pub ce: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            p2i: true,
            i2p: true,
            i2i: true,
            u: true,
            ce: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p2i: f64,
    pub l_i2p: f64,
    pub l_i2i: f64,
    pub l_u: f64,
    pub l_ce: f64,
    pub total: f64,
    pub beta: f64,
    pub tau: f64,
}

/// `total = p2i + i2p + i2i + u + beta * ce`, with disabled terms zeroed.
pub fn total_loss(
    [p2i, i2p, i2i, u, ce]: [f64; 5],
    beta: f64,
    tau: f64,
    terms: LossTerms,
) -> LossBreakdown {
    let on = |flag: bool, v: f64| if flag { v } else { 0.0 };
    let mut b = LossBreakdown {
        l_p2i: on(terms.p2i, p2i),
        l_i2p: on(terms.i2p, i2p),
        l_i2i: on(terms.i2i, i2i),
        l_u: on(terms.u, u),
        l_ce: on(terms.ce, ce),
        total: 0.0,
        beta,
        tau,
    };
    b.total = b.l_p2i + b.l_i2p + b.l_i2i + b.l_u + beta * b.l_ce;
    b
}

impl LossBreakdown {
    /// Accumulate another batch's breakdown, weighting by `w`.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.l_p2i += w * other.l_p2i;
        self.l_i2p += w * other.l_i2p;
        self.l_i2i += w * other.l_i2i;
        self.l_u += w * other.l_u;
        self.l_ce += w * other.l_ce;
        self.total += w * other.total;
        self.beta = other.beta;
        self.tau = other.tau;
    }
}
