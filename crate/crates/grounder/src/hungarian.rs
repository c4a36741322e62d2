//! Minimum-cost bipartite assignment between predicted queries and targets.
//!
//! The core is the O(n³) shortest-augmenting-path algorithm with dual
//! potentials. On top of it, a refinement pass pins the documented
//! tie-break: among all minimum-cost assignments, the returned pair list
//! (sorted by query index) is lexicographically smallest.

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// (query index, target index), sorted by query index, injective on
    /// both sides; length min(n_queries, n_targets).
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

const UNMATCHED: usize = usize::MAX;

/// Min-cost perfect matching on a square matrix; returns col assigned per row.
fn solve_square(cost: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row: Vec<usize> = vec![UNMATCHED; n + 1];
    for root in 0..n {
        col_row[n] = root;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut way = vec![n; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[i0 * n + j] - u[i0] - v[j];
                    if cur < min_slack[j] {
                        min_slack[j] = cur;
                        way[j] = j0;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    if col_row[j] != UNMATCHED {
                        u[col_row[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == UNMATCHED {
                break;
            }
        }
        // augment back along the alternating tree
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut row_col = vec![UNMATCHED; n];
    for j in 0..n {
        if col_row[j] != UNMATCHED {
            row_col[col_row[j]] = j;
        }
    }
    row_col
}

/// Pad to square with zero-cost dummy rows/columns; dummies absorb the
/// unmatched side without changing which real pairs are optimal.
fn padded(cost: &[Vec<f64>], nq: usize, nt: usize) -> (Vec<f64>, usize) {
    let n = nq.max(nt);
    let mut sq = vec![0.0f64; n * n];
    for (r, row) in cost.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            sq[r * n + c] = v;
        }
    }
    (sq, n)
}

fn min_total(cost: &[Vec<f64>], nq: usize, nt: usize) -> f64 {
    let (sq, n) = padded(cost, nq, nt);
    let rc = solve_square(&sq, n);
    rc.iter().enumerate().map(|(r, &c)| sq[r * n + c]).sum()
}

/// Minimum-cost assignment with lexicographic tie-break. Panics on an
/// empty or non-finite cost matrix (contract errors).
pub fn assign(cost: &[Vec<f64>]) -> Assignment {
    let nq = cost.len();
    assert!(nq > 0, "hungarian assign: empty cost matrix");
    let nt = cost[0].len();
    assert!(nt > 0, "hungarian assign: empty cost matrix");
    for (r, row) in cost.iter().enumerate() {
        assert_eq!(row.len(), nt, "hungarian assign: ragged row {r}");
        for (c, &v) in row.iter().enumerate() {
            assert!(v.is_finite(), "hungarian assign: non-finite cost at ({r},{c})");
        }
    }

    let best = min_total(cost, nq, nt);
    let eps = 1e-9 * (1.0 + best.abs());

    // Greedy lexicographic refinement: fix (row, col) pairs in index order
    // whenever a minimum-cost completion still exists. Trying real columns
    // before "unmatched" prefers matching earlier rows, which is the
    // lexicographically smaller pair list.
    let mut rows: Vec<usize> = (0..nq).collect();
    let mut cols: Vec<usize> = (0..nt).collect();
    let mut remaining = best;
    let mut pairs = Vec::new();
    while !rows.is_empty() {
        let r = rows[0];
        let mut chosen: Option<usize> = None;
        for (ci, &c) in cols.iter().enumerate() {
            let sub = submatrix(cost, &rows[1..], &cols, ci);
            let sub_cost = if sub.is_empty() || sub[0].is_empty() {
                0.0
            } else {
                min_total(&sub, sub.len(), sub[0].len())
            };
            if cost[r][c] + sub_cost <= remaining + eps {
                pairs.push((r, c));
                remaining -= cost[r][c];
                chosen = Some(ci);
                break;
            }
        }
        match chosen {
            Some(ci) => {
                cols.remove(ci);
                rows.remove(0);
            }
            None => {
                // row r stays unmatched (more queries than targets)
                rows.remove(0);
            }
        }
    }
    Assignment { pairs, total_cost: best }
}

/// Rows minus none (given list), columns minus index `skip_ci`.
fn submatrix(cost: &[Vec<f64>], rows: &[usize], cols: &[usize], skip_ci: usize) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|&r| {
            cols.iter()
                .enumerate()
                .filter(|(ci, _)| *ci != skip_ci)
                .map(|(_, &c)| cost[r][c])
                .collect()
        })
        .collect()
}

/// Exhaustive minimum over all injective assignments; the test oracle.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let nq = cost.len();
    let nt = cost[0].len();
    let (sq, n) = padded(cost, nq, nt);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(r, &c)| sq[r * n + c]).sum();
        if total < best {
            best = total;
        }
    });
    best
}

fn permute(xs: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == xs.len() {
        visit(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permute(xs, k + 1, visit);
        xs.swap(k, i);
    }
}
