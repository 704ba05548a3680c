//! Square linear assignment (Hungarian method) with deterministic tie-breaking.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!(
                "cost matrix is {r}x{c}, not square"
            )));
        }
        if let Some(pos) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "cost matrix entry ({}, {}) is not finite",
                pos / c.max(1),
                pos % c.max(1)
            )));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "row of length {} in a matrix with {n} rows",
                bad.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((n, n), flat).expect("shape checked"))
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .map(|(p, &l)| self.entries[[p, l]])
            .sum()
    }

    fn negated(&self) -> Self {
        Self {
            entries: self.entries.mapv(|v| -v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Assignment {
    /// `permutation[p]` is the column assigned to row `p`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching using shortest augmenting paths with
/// row/column potentials. Returns `perm[row] = col`.
fn min_cost_perm(c: &Array2<f64>) -> Vec<usize> {
    let n = c.nrows();
    if n == 0 {
        return Vec::new();
    }
    // 1-based bookkeeping; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    perm
}

fn sub_matrix(c: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| c[[rows[a], cols[b]]])
}

/// Optimal cost of the sub-problem on `rows × cols`.
fn sub_optimum(c: &Array2<f64>, rows: &[usize], cols: &[usize]) -> f64 {
    let sub = sub_matrix(c, rows, cols);
    min_cost_perm(&sub)
        .iter()
        .enumerate()
        .map(|(a, &b)| sub[[a, b]])
        .sum()
}

/// Picks the lexicographically smallest optimal permutation by fixing rows in
/// order and re-solving the remaining sub-problem for each candidate column.
///
/// Different permutations sum the same numbers in different orders, so two
/// mathematically equal optima can differ in the last few ulps; candidates
/// within that rounding window count as ties.
fn lex_smallest_min(c: &Array2<f64>) -> Vec<usize> {
    let n = c.nrows();
    let base = min_cost_perm(c);
    let opt: f64 = base.iter().enumerate().map(|(p, &l)| c[[p, l]]).sum();
    let scale: f64 = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = 4.0 * f64::EPSILON * scale * (n as f64);

    let mut perm = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    let mut free_cols: Vec<usize> = (0..n).collect();
    for p in 0..n {
        let rows: Vec<usize> = (p + 1..n).collect();
        let mut chosen = None;
        for (idx, &l) in free_cols.iter().enumerate() {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != l).collect();
            let total = fixed_cost + c[[p, l]] + sub_optimum(c, &rows, &cols);
            if total <= opt + tol {
                chosen = Some(idx);
                break;
            }
        }
        match chosen {
            Some(idx) => {
                let l = free_cols.remove(idx);
                fixed_cost += c[[p, l]];
                perm.push(l);
            }
            // rounding pushed every candidate outside the window; keep the solver's answer
            None => return base,
        }
    }
    perm
}

pub fn hungarian_min(c: &CostMatrix) -> Assignment {
    let permutation = lex_smallest_min(&c.entries);
    Assignment {
        total_cost: c.cost_of(&permutation),
        permutation,
    }
}

/// Maximum-total-cost assignment; ties resolve to the lexicographically
/// smallest permutation.
pub fn hungarian_max(c: &CostMatrix) -> Assignment {
    let permutation = lex_smallest_min(&c.negated().entries);
    Assignment {
        total_cost: c.cost_of(&permutation),
        permutation,
    }
}

/// Exhaustive maximum over all `n!` permutations, visited in lexicographic
/// order so the first strict maximum wins ties.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment> {
    let n = c.n();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = c.cost_of(&perm);
    while next_permutation(&mut perm) {
        let cost = c.cost_of(&perm);
        if cost > best_cost {
            best_cost = cost;
            best.clone_from(&perm);
        }
    }
    Ok(Assignment {
        permutation: best,
        total_cost: best_cost,
    })
}

/// Advances to the next permutation in lexicographic order.
pub fn next_permutation(a: &mut [usize]) -> bool {
    let n = a.len();
    if n < 2 {
        return false;
    }
    let Some(i) = (0..n - 1).rev().find(|&i| a[i] < a[i + 1]) else {
        return false;
    };
    let j = (i + 1..n)
        .rev()
        .find(|&j| a[j] > a[i])
        .expect("pivot exists");
    a.swap(i, j);
    a[i + 1..].reverse();
    true
}

/// `P[p][l] = 1` iff `perm[p] == l`.
pub fn permutation_matrix(perm: &[usize]) -> Array2<u8> {
    let n = perm.len();
    Array2::from_shape_fn((n, n), |(p, l)| u8::from(perm[p] == l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = hungarian_max(&c);
        assert_eq!(a.permutation, vec![1, 0]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn diagonal_dominant_is_identity() {
        let n = 6;
        let c = CostMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                10.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let a = hungarian_max(&c);
        assert_eq!(a.permutation, (0..n).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 60.0);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let c = CostMatrix::new(Array2::from_elem((4, 4), 2.5)).unwrap();
        assert_eq!(hungarian_max(&c).permutation, vec![0, 1, 2, 3]);
        // two optimal permutations: (1,0,2) and (2,0,1) both cost 3
        let c = CostMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        let a = hungarian_max(&c);
        assert_eq!(a.total_cost, 3.0);
        assert_eq!(a.permutation, vec![1, 0, 2]);
        assert_eq!(
            brute_force_assignment(&c).unwrap().permutation,
            vec![1, 0, 2]
        );
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let c = CostMatrix::new(Array2::from_shape_fn((n, n), |_| rng.gen_range(-5.0..5.0)))
                .unwrap();
            let h = hungarian_max(&c);
            let b = brute_force_assignment(&c).unwrap();
            assert_eq!(h.total_cost, b.total_cost);
        }
    }

    #[test]
    fn integer_ties_match_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..=6);
            let c = CostMatrix::new(Array2::from_shape_fn((n, n), |_| {
                rng.gen_range(0..3) as f64
            }))
            .unwrap();
            assert_eq!(
                hungarian_max(&c).permutation,
                brute_force_assignment(&c).unwrap().permutation
            );
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 0.0]]).is_err());
        let big = CostMatrix::new(Array2::zeros((10, 10))).unwrap();
        assert!(matches!(
            brute_force_assignment(&big),
            Err(Error::TooLarge(10))
        ));
    }

    #[test]
    fn single_entry_and_empty() {
        let c = CostMatrix::from_rows(&[vec![-3.5]]).unwrap();
        assert_eq!(brute_force_assignment(&c).unwrap().total_cost, -3.5);
        assert_eq!(hungarian_max(&c).permutation, vec![0]);
        let e = CostMatrix::new(Array2::zeros((0, 0))).unwrap();
        assert!(hungarian_max(&e).permutation.is_empty());
    }

    #[test]
    fn lexicographic_enumeration() {
        let mut a = vec![0, 1, 2];
        let mut seen = vec![a.clone()];
        while next_permutation(&mut a) {
            seen.push(a.clone());
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(seen[1], vec![0, 2, 1]);
        assert_eq!(seen[5], vec![2, 1, 0]);
    }
}
