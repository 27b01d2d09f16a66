//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use ndarray::Array2;

/// Query → target pairs, sorted by query index.
pub type Assignment = Vec<(usize, usize)>;

/// Optimal assignment of `min(rows, cols)` pairs minimizing total cost.
/// Rows are queries, columns targets. Entries must be finite.
pub fn hungarian(cost: &Array2<f64>) -> Assignment {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut pairs = if m <= n {
        // Assign every target (as a row of the transposed problem) a query.
        solve(m, n, |t, q| cost[[q, t]]).into_iter().map(|(t, q)| (q, t)).collect::<Vec<_>>()
    } else {
        solve(n, m, |q, t| cost[[q, t]])
    };
    pairs.sort_unstable();
    pairs
}

/// Rectangular assignment with `n ≤ m`: every row receives a distinct column.
/// Returns `(row, column)` pairs.
fn solve(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                // Strict comparison keeps the lowest column among ties.
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect()
}

/// Total cost of an assignment, summed in target order.
pub fn assignment_cost(cost: &Array2<f64>, assignment: &[(usize, usize)]) -> f64 {
    let mut by_target: Vec<_> = assignment.to_vec();
    by_target.sort_unstable_by_key(|&(_, t)| t);
    by_target.iter().map(|&(q, t)| cost[[q, t]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Minimum over all injections by exhaustive enumeration.
    fn brute_force(cost: &Array2<f64>) -> f64 {
        let (n, m) = cost.dim();
        fn rec(cost: &Array2<f64>, t: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, rows_first: bool) {
            let (n, m) = cost.dim();
            let (outer, inner) = if rows_first { (m, n) } else { (n, m) };
            if t == outer {
                *best = best.min(acc);
                return;
            }
            for q in 0..inner {
                if !used[q] {
                    used[q] = true;
                    let c = if rows_first { cost[[q, t]] } else { cost[[t, q]] };
                    rec(cost, t + 1, used, acc + c, best, rows_first);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        if n == 0 || m == 0 {
            return 0.0;
        }
        let rows_first = m <= n;
        let mut used = vec![false; if rows_first { n } else { m }];
        rec(cost, 0, &mut used, 0.0, &mut best, rows_first);
        best
    }

    #[test]
    fn small_cases() {
        assert_eq!(hungarian(&array![[1.0]]), vec![(0, 0)]);
        let c = array![[1.0, 2.0], [2.0, 1.0]];
        let a = hungarian(&c);
        assert_eq!(a, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &a), 2.0);
        assert!(hungarian(&Array2::zeros((3, 0))).is_empty());
    }

    #[test]
    fn ties_prefer_lowest_query() {
        let c = Array2::from_elem((4, 1), 0.5);
        assert_eq!(hungarian(&c), vec![(0, 0)]);
        let c = Array2::zeros((3, 2));
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1)]);
    }

    proptest! {
        #[test]
        fn matches_exhaustive_search(
            n in 1usize..=7,
            m in 1usize..=7,
            seed in proptest::collection::vec(-5.0..5.0f64, 49)
        ) {
            let c = Array2::from_shape_fn((n, m), |(i, j)| seed[i * 7 + j]);
            let a = hungarian(&c);
            prop_assert_eq!(a.len(), n.min(m));
            let mut qs: Vec<_> = a.iter().map(|p| p.0).collect();
            let mut ts: Vec<_> = a.iter().map(|p| p.1).collect();
            qs.dedup();
            ts.sort_unstable();
            ts.dedup();
            prop_assert_eq!(qs.len(), a.len());
            prop_assert_eq!(ts.len(), a.len());
            prop_assert!((assignment_cost(&c, &a) - brute_force(&c)).abs() < 1e-9);
        }
    }
}
