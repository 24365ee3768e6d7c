//! Minimum-cost bipartite assignment between annotations (rows) and
//! predictions (columns).
//!
//! Rectangular matrices are padded to a square with zero-cost dummy rows or
//! columns; pairs touching a dummy are dropped from the result. Among all
//! optimal matchings the lexicographically smallest pair set is returned, so
//! results are reproducible when costs tie.

use serde::{Deserialize, Serialize};

use crate::geometry::CostMatrix;

/// Optimal matching. `pairs` is sorted by annotation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    pub fn prediction_for(&self, annotation: usize) -> Option<usize> {
        self.pairs.iter().find(|(a, _)| *a == annotation).map(|(_, p)| *p)
    }

    pub fn annotation_for(&self, prediction: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, p)| *p == prediction).map(|(a, _)| *a)
    }
}

pub fn optimal_assignment(m: &CostMatrix) -> Assignment {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Assignment::empty();
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| if i < rows && j < cols { m.get(i, j) } else { 0.0 };

    let (row_pot, col_pot, mut col_of) = hungarian(n, &cost);

    let scale = m.entries().iter().fold(1.0_f64, |acc, &e| acc.max(e));
    let eps = 1e-11 * scale;
    let tight = |i: usize, j: usize| (cost(i, j) - row_pot[i] - col_pot[j]).abs() <= eps;

    lexicographic_refine(n, &tight, &mut col_of);

    let pairs: Vec<(usize, usize)> = (0..rows)
        .filter_map(|i| (col_of[i] < cols).then_some((i, col_of[i])))
        .collect();
    let total_cost = pairs.iter().map(|&(i, j)| m.get(i, j)).sum();
    Assignment { pairs, total_cost }
}

/// Square Hungarian method with potentials, O(n^3).
///
/// Returns row potentials, column potentials and the column assigned to each
/// row. On return `cost(i, j) - u[i] - v[j] >= 0` everywhere, with equality
/// on the matched edges.
fn hungarian(n: usize, cost: &impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based internally; index 0 is the virtual root column.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of_col[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), col_of)
}

/// Rewrites `col_of` into the lexicographically smallest perfect matching of
/// the tight-edge subgraph. Every perfect matching on tight edges of an
/// optimal dual is optimal, so the total cost is unchanged.
fn lexicographic_refine(n: usize, tight: &impl Fn(usize, usize) -> bool, col_of: &mut [usize]) {
    let mut row_of = vec![0usize; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    for i in 0..n {
        for j in 0..n {
            if col_of[i] == j {
                break;
            }
            // columns held by fixed rows stay put
            if row_of[j] < i || !tight(i, j) {
                continue;
            }
            if reroute(i, j, n, tight, col_of, &mut row_of) {
                break;
            }
        }
    }
}

/// Tries to give column `j` to row `i` while keeping rows `< i` fixed.
/// The row currently holding `j` must find an alternating path to the column
/// `i` gives up.
fn reroute(
    i: usize,
    j: usize,
    n: usize,
    tight: &impl Fn(usize, usize) -> bool,
    col_of: &mut [usize],
    row_of: &mut [usize],
) -> bool {
    let start = row_of[j];
    let target = col_of[i];
    let mut seen = vec![false; n];
    seen[j] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    // row that reached each visited column
    let mut via_col = vec![usize::MAX; n];
    let mut found = None;

    'bfs: while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if seen[col] || !tight(row, col) || row_of[col] < i {
                continue;
            }
            seen[col] = true;
            via_col[col] = row;
            if col == target {
                found = Some(col);
                break 'bfs;
            }
            queue.push_back(row_of[col]);
        }
    }

    let Some(mut col) = found else {
        return false;
    };
    // Walk back: via_col[col] is the row that takes `col`; that row releases
    // its current column, which is the next step back.
    loop {
        let row = via_col[col];
        let released = col_of[row];
        col_of[row] = col;
        row_of[col] = row;
        if row == start {
            break;
        }
        col = released;
    }
    col_of[i] = j;
    row_of[j] = i;
    true
}
