//! Rectangular linear assignment (Hungarian algorithm with potentials).

use crate::error::{Error, Result};

/// Optimal assignment for a dense cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column matched to row `r`, or `None` when there
    /// are more rows than columns and `r` is left out.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost injective assignment of the smaller side of `cost` into the larger.
///
/// Runs in O(n^2 m) for an n x m matrix with n <= m (the matrix is transposed
/// internally otherwise). Every row must have the same length and all entries
/// must be finite.
pub fn solve(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Assignment {
            row_to_col: vec![],
            total_cost: 0.0,
        });
    }
    let cols = cost[0].len();
    for row in cost {
        if row.len() != cols {
            return Err(Error::invalid("irregular cost matrix"));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
    }
    if cols == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; rows],
            total_cost: 0.0,
        });
    }

    let row_to_col = if rows <= cols {
        solve_wide(rows, cols, |r, c| cost[r][c])
            .into_iter()
            .map(Some)
            .collect()
    } else {
        let col_to_row = solve_wide(cols, rows, |r, c| cost[c][r]);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r] = Some(c);
        }
        out
    };
    let total_cost = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r][c]))
        .sum();
    Ok(Assignment {
        row_to_col,
        total_cost,
    })
}

/// Maximum-weight variant: negates the weights and solves.
pub fn solve_max(weight: &[Vec<f64>]) -> Result<Assignment> {
    let neg: Vec<Vec<f64>> = weight
        .iter()
        .map(|r| r.iter().map(|w| -w).collect())
        .collect();
    let mut a = solve(&neg)?;
    a.total_cost = -a.total_cost;
    Ok(a)
}

// n <= m. Returns the column for each of the n rows.
fn solve_wide(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based indices; row 0 / column 0 are sentinels.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn picks_unique_optimum() {
        let a = solve(&[vec![1.0, 9.0, 9.0], vec![9.0, 9.0, 1.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(2)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn tall_matrix_leaves_rows_out() {
        let a = solve(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![None, Some(0), None]);
    }

    #[test]
    fn rejects_nan_and_ragged() {
        assert!(solve(&[vec![f64::NAN]]).is_err());
        assert!(solve(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(n..=7);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0..20) as f64).collect())
                .collect();
            let a = solve(&cost).unwrap();
            let mut seen = vec![false; m];
            for c in a.row_to_col.iter().map(|c| c.unwrap()) {
                assert!(!seen[c]);
                seen[c] = true;
            }
            assert_eq!(a.total_cost, brute::min_injection_cost(&cost));
        }
    }
}
