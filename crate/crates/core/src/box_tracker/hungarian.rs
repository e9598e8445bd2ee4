//! Minimum-cost rectangular assignment (Kuhn–Munkres with row/column potentials).

use nalgebra::DMatrix;

/// Solves the rectangular assignment problem exactly.
///
/// Returns `min(rows, cols)` pairs `(row, col)`, sorted by row, minimizing the
/// summed cost. An empty matrix yields an empty assignment.
pub fn hungarian_solve(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut pairs = if rows <= cols {
        solve_wide(rows, cols, |r, c| cost[(r, c)])
    } else {
        solve_wide(cols, rows, |r, c| cost[(c, r)])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &DMatrix<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[(r, c)]).sum()
}

// Shortest augmenting path formulation, O(n²·m) for n ≤ m. Indices are
// 1-based internally; slot 0 is the virtual source column.
fn solve_wide(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
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

    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let a = hungarian_solve(&c);
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &a), 2.0);
    }

    #[test]
    fn identity_cost() {
        let c = DMatrix::from_fn(3, 3, |r, col| if r == col { 0.0 } else { 1.0 });
        let a = hungarian_solve(&c);
        assert_eq!(a, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(assignment_cost(&c, &a), 0.0);
    }

    #[test]
    fn rectangular() {
        let c = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 9.0, 1.0, 5.0, 9.0]);
        let a = hungarian_solve(&c);
        assert_eq!(a, vec![(0, 1), (1, 0)]);
        assert_eq!(assignment_cost(&c, &a), 2.0);

        let tall = c.transpose();
        let a = hungarian_solve(&tall);
        assert_eq!(a, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn empty() {
        assert!(hungarian_solve(&DMatrix::zeros(0, 4)).is_empty());
        assert!(hungarian_solve(&DMatrix::zeros(3, 0)).is_empty());
    }
}
