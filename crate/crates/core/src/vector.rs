//! Small dense-vector helpers shared by the clustering, prototype and loss code.
//!
//! All reductions run in index order so results are bit-reproducible.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `acc += scale * x`
pub fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Mean of the selected rows. Returns `None` when `rows` is empty.
pub fn mean_of<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        axpy(&mut acc, 1.0, r);
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let inv = 1.0 / n as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Some(acc)
}

/// Index of the nearest candidate by squared distance; ties go to the lowest index.
pub fn nearest(point: &[f64], candidates: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// L2-normalize `v`. Returns the normalized vector and the original norm.
/// A zero vector is returned unchanged.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v);
    if n == 0.0 {
        return (v.to_vec(), 0.0);
    }
    (v.iter().map(|x| x / n).collect(), n)
}

/// Pull a gradient with respect to `v / |v|` back to a gradient with respect to `v`.
pub fn l2_normalize_backward(v: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return grad_unit.to_vec();
    }
    let u: Vec<f64> = v.iter().map(|x| x / n).collect();
    let proj = dot(&u, grad_unit);
    grad_unit
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - proj * ui) / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_breaks_ties_low() {
        let c = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(nearest(&[0.0, 0.0], &c).0, 0);
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let v = [0.3, -1.2, 2.0];
        let g = [0.7, 0.1, -0.4];
        let analytic = l2_normalize_backward(&v, &g);
        let eps = 1e-6;
        for i in 0..3 {
            let mut p = v;
            let mut m = v;
            p[i] += eps;
            m[i] -= eps;
            let fp = dot(&l2_normalize(&p).0, &g);
            let fm = dot(&l2_normalize(&m).0, &g);
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() < 1e-8);
        }
    }
}
