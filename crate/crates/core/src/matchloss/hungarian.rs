//! Minimum-cost one-to-one assignment (shortest augmenting paths with
//! potentials).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One-to-one matching between predictions (rows) and ground truths (columns).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left without a ground truth; supervised toward no-object.
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Ground-truth index matched to each query.
    pub fn gt_for_queries(&self, num_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }

    pub fn total(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.at2(q, g)).sum()
    }
}

/// Solve the assignment problem for an `N×G` cost matrix. With `N ≥ G` every
/// ground truth is matched; otherwise the surplus ground truths stay unmatched.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (n, g) = cost.dims2()?;
    for q in 0..n {
        for k in 0..g {
            if !cost.at2(q, k).is_finite() {
                return Err(Error::NonFiniteCost { row: q, col: k });
            }
        }
    }
    let mut pairs = Vec::with_capacity(n.min(g));
    if g <= n {
        // rows of the solver are ground truths
        let transposed: Vec<f64> = (0..g).flat_map(|k| (0..n).map(move |q| (q, k))).map(|(q, k)| cost.at2(q, k)).collect();
        for (k, q) in solve(&transposed, g, n).into_iter().enumerate() {
            pairs.push((q, k));
        }
    } else {
        for (q, k) in solve(cost.data(), n, g).into_iter().enumerate() {
            pairs.push((q, k));
        }
    }
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    for &(q, _) in &pairs {
        matched[q] = true;
    }
    let unmatched = (0..n).filter(|&q| !matched[q]).collect();
    Ok(Assignment { pairs, unmatched })
}

/// Row → column for a row-major `rows×cols` matrix with `rows ≤ cols`.
fn solve(a: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: row (1-based) currently holding column j; way[j]: previous column on the path
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Minimum over all injective maps from the smaller side to the larger, each
    /// candidate summed in query order like [`Assignment::total`].
    fn brute_force(cost: &Tensor) -> f64 {
        let (n, g) = cost.dims2().unwrap();
        fn rec(cost: &Tensor, row: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut f64) {
            let (n, g) = cost.dims2().unwrap();
            if row == n.min(g) {
                let mut sorted = pairs.clone();
                sorted.sort_unstable();
                *best = best.min(sorted.iter().map(|&(q, k)| cost.at2(q, k)).sum());
                return;
            }
            for c in 0..n.max(g) {
                if used[c] {
                    continue;
                }
                used[c] = true;
                pairs.push(if g <= n { (c, row) } else { (row, c) });
                rec(cost, row + 1, used, pairs, best);
                pairs.pop();
                used[c] = false;
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; n.max(g)], &mut Vec::new(), &mut best);
        best
    }

    fn check_valid(a: &Assignment, n: usize, g: usize) {
        assert_eq!(a.pairs.len(), n.min(g));
        let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut gs: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        qs.dedup();
        gs.sort_unstable();
        gs.dedup();
        assert_eq!(qs.len(), n.min(g));
        assert_eq!(gs.len(), n.min(g));
        assert_eq!(a.unmatched.len(), n - n.min(g));
    }

    #[test]
    fn two_by_two() {
        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total(&c), 1.0);
    }

    #[test]
    fn diagonal_preferred() {
        let n = 5;
        let c = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| if i / n == i % n { 0.0 } else { 1.0 + (i % 3) as f64 }).collect(),
        )
        .unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn random_square_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..500 {
            let c = Tensor::new(vec![7, 7], (0..49).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let a = hungarian(&c).unwrap();
            check_valid(&a, 7, 7);
            assert_eq!(a.total(&c), brute_force(&c));
        }
    }

    #[test]
    fn random_rectangular_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let n = rng.gen_range(1..=7);
            let g = rng.gen_range(0..=7);
            let c = Tensor::new(vec![n, g], (0..n * g).map(|_| rng.gen_range(0..20) as f64).collect()).unwrap();
            let a = hungarian(&c).unwrap();
            check_valid(&a, n, g);
            if g > 0 {
                assert_eq!(a.total(&c), brute_force(&c), "{n}x{g}");
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let c = Tensor::matrix(2, 2, vec![1.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::NonFiniteCost { row: 0, col: 1 })));
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::new(vec![6, 3], (0..18).map(|_| rng.gen_range(0..3) as f64).collect()).unwrap();
        assert_eq!(hungarian(&c).unwrap(), hungarian(&c).unwrap());
    }
}
