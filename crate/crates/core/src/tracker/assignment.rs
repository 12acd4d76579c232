//! Minimum-cost linear assignment (Hungarian method with potentials).
//!
//! Among several optimal assignments the one whose sorted `(row, col)` pair
//! list is lexicographically smallest is returned, so results never depend on
//! floating-point accident in the augmenting-path search.

use nalgebra::DMatrix;

/// Relative tolerance used to decide that two assignment totals are equal.
const TIE_TOLERANCE: f64 = 1e-9;

/// Optimal one-to-one assignment of `min(rows, cols)` pairs, sorted by row.
pub fn assignment(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let best = optimal_cost(cost, &all_rows, &all_cols);
    let target = n.min(m);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);

    let mut pairs = Vec::with_capacity(target);
    let mut fixed_cost = 0.0;
    let mut free_cols = vec![true; m];
    for r in 0..n {
        if pairs.len() == target {
            break;
        }
        let rest_rows: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for c in 0..m {
            if !free_cols[c] {
                continue;
            }
            let needed = target - pairs.len() - 1;
            let rest_cols: Vec<usize> = (0..m).filter(|&j| free_cols[j] && j != c).collect();
            if rest_rows.len().min(rest_cols.len()) != needed {
                continue;
            }
            let total = fixed_cost + cost[(r, c)] + optimal_cost(cost, &rest_rows, &rest_cols);
            if (total - best).abs() <= tol {
                chosen = Some(c);
                break;
            }
        }
        if let Some(c) = chosen {
            fixed_cost += cost[(r, c)];
            free_cols[c] = false;
            pairs.push((r, c));
        }
    }
    pairs
}

/// Minimum total cost over the submatrix selected by `rows` x `cols`.
fn optimal_cost(cost: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        hungarian(rows.len(), cols.len(), |i, j| cost[(rows[i], cols[j])])
            .into_iter()
            .map(|(i, j)| cost[(rows[i], cols[j])])
            .sum()
    } else {
        hungarian(cols.len(), rows.len(), |i, j| cost[(rows[j], cols[i])])
            .into_iter()
            .map(|(i, j)| cost[(rows[j], cols[i])])
            .sum()
    }
}

/// Shortest-augmenting-path Hungarian algorithm for `n <= m`.
/// Returns one `(row, col)` pair per row.
fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is a sentinel
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
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
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search over injective maps of the smaller side, keeping the
    /// lexicographically smallest sorted pair list among minimal totals.
    pub(crate) fn brute_force(cost: &DMatrix<f64>) -> (f64, Vec<(usize, usize)>) {
        let (n, m) = cost.shape();
        let k = n.min(m);
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let mut consider = |pairs: Vec<(usize, usize)>| {
            let mut pairs = pairs;
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
            let better = match &best {
                None => true,
                Some((b, p)) => total < *b || (total == *b && pairs < *p),
            };
            if better {
                best = Some((total, pairs));
            }
        };
        // choose which k rows and which k columns, then permute
        fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            if n < k {
                return vec![];
            }
            let mut out = subsets(n - 1, k);
            for mut s in subsets(n - 1, k - 1) {
                s.push(n - 1);
                out.push(s);
            }
            out
        }
        fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items.to_vec()];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.to_vec();
                let x = rest.remove(i);
                for mut p in permutations(&rest) {
                    p.insert(0, x);
                    out.push(p);
                }
            }
            out
        }
        for rows in subsets(n, k) {
            for cols in subsets(m, k) {
                for perm in permutations(&cols) {
                    consider(rows.iter().cloned().zip(perm).collect());
                }
            }
        }
        best.unwrap_or((0.0, Vec::new()))
    }

    #[test]
    fn diagonal_zeros() {
        let cost = DMatrix::from_row_slice(3, 3, &[0.0, 5.0, 9.0, 7.0, 0.0, 8.0, 6.0, 4.0, 0.0]);
        assert_eq!(assignment(&cost), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn single_cell() {
        assert_eq!(assignment(&DMatrix::from_element(1, 1, 3.5)), vec![(0, 0)]);
    }

    #[test]
    fn empty_sides() {
        assert!(assignment(&DMatrix::<f64>::zeros(0, 3)).is_empty());
        assert!(assignment(&DMatrix::<f64>::zeros(2, 0)).is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        let cost = DMatrix::from_element(3, 3, 1.0);
        assert_eq!(assignment(&cost), vec![(0, 0), (1, 1), (2, 2)]);
        let tall = DMatrix::from_element(3, 2, 1.0);
        assert_eq!(assignment(&tall), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn random_4x4_matches_permutation_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let cost = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0..10) as f64);
            assert_eq!(assignment(&cost), brute_force(&cost).1, "{cost}");
        }
    }

    #[test]
    fn rectangular_matches_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
            let cost = DMatrix::from_fn(n, m, |_, _| rng.random_range(-5.0..5.0f64));
            let got = assignment(&cost);
            let (best, pairs) = brute_force(&cost);
            let total: f64 = got.iter().map(|&(r, c)| cost[(r, c)]).sum();
            assert!((total - best).abs() < 1e-9);
            assert_eq!(got, pairs);
        }
    }
}
