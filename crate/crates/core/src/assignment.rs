//! Maximum-weight bipartite matching with a deterministic tie-break.
//!
//! Rows and columns may stay unmatched. The problem is embedded in a square
//! min-cost assignment of size `rows + cols`: each row has a private "stay
//! unmatched" column and each column a private "stay unmatched" row, both at
//! cost 0. The Hungarian method (shortest augmenting paths with potentials)
//! solves it exactly in integers.
//!
//! Among all optimal matchings the one returned is the lexicographically
//! smallest list of `(row, col)` pairs: row 0 takes the smallest column it can
//! while staying optimal, or stays unmatched only if it must, then row 1, and
//! so on. Optimal matchings are exactly the perfect matchings on edges that
//! are tight under the optimal potentials, so each choice is checked with one
//! alternating-path search instead of a re-solve.

use std::collections::VecDeque;

const FORBIDDEN: i64 = 1 << 50;

/// `weights[r][c]` is `Some(w)` with `w > 0` for an allowed edge.
/// Returns, for every row, the matched column.
///
/// Panics if a weight is not positive or exceeds 2^40, or rows are ragged.
pub fn max_weight_matching(weights: &[Vec<Option<i64>>]) -> Vec<Option<usize>> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let m = weights[0].len();
    assert!(weights.iter().all(|r| r.len() == m), "ragged weight matrix");
    if m == 0 {
        return vec![None; n];
    }
    let size = n + m;
    let cost = |r: usize, c: usize| -> i64 {
        match (r < n, c < m) {
            (true, true) => match weights[r][c] {
                Some(w) => {
                    assert!(w > 0 && w <= 1 << 40, "weights must lie in 1..=2^40");
                    -w
                }
                None => FORBIDDEN,
            },
            (true, false) => {
                if c - m == r {
                    0
                } else {
                    FORBIDDEN
                }
            }
            (false, true) => {
                if r - n == c {
                    0
                } else {
                    FORBIDDEN
                }
            }
            (false, false) => 0,
        }
    };
    let (row_of_col, u, v) = hungarian(size, &cost);
    let mut col_of_row = vec![0usize; size];
    for (c, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = c;
    }
    let tight = |r: usize, c: usize| -> bool {
        let a = cost(r, c);
        a != FORBIDDEN && a - u[r] - v[c] == 0
    };
    let mut owner = row_of_col;

    // Fix real rows in order to their best available option.
    let mut fixed_col = vec![false; size];
    for r in 0..n {
        let options = (0..m).filter(|&c| weights[r][c].is_some()).chain([m + r]);
        for c in options {
            if fixed_col[c] || !tight(r, c) {
                continue;
            }
            if col_of_row[r] == c
                || reroute(r, c, &mut col_of_row, &mut owner, &fixed_col, size, &tight)
            {
                fixed_col[c] = true;
                break;
            }
        }
        debug_assert!(fixed_col[col_of_row[r]], "current column is always feasible");
    }

    (0..n)
        .map(|r| {
            let c = col_of_row[r];
            (c < m).then_some(c)
        })
        .collect()
}

/// Try to move row `r` onto column `c` while keeping a perfect matching on
/// tight edges that leaves fixed columns alone.
fn reroute(
    r: usize,
    c: usize,
    col_of_row: &mut [usize],
    owner: &mut [usize],
    fixed_col: &[bool],
    size: usize,
    tight: &dyn Fn(usize, usize) -> bool,
) -> bool {
    let target = col_of_row[r];
    let start = owner[c];
    // BFS over rows. A row y reached through its column `col` by row x means
    // x would take `col` and y must move on.
    let mut parent: Vec<Option<usize>> = vec![None; size];
    let mut seen = vec![false; size];
    seen[start] = true;
    seen[r] = true;
    let mut queue = VecDeque::from([start]);
    let mut end_row = None;
    'search: while let Some(x) = queue.pop_front() {
        for col in 0..size {
            if col == c || fixed_col[col] || !tight(x, col) {
                continue;
            }
            if col == target {
                end_row = Some(x);
                break 'search;
            }
            let y = owner[col];
            if !seen[y] {
                seen[y] = true;
                parent[y] = Some(x);
                queue.push_back(y);
            }
        }
    }
    let Some(mut x) = end_row else {
        return false;
    };
    // The last row takes `target`; every row hands its old column to its parent.
    let mut give = target;
    loop {
        let old = col_of_row[x];
        col_of_row[x] = give;
        owner[give] = x;
        if x == start {
            break;
        }
        give = old;
        x = parent[x].expect("path rows have a parent");
    }
    col_of_row[r] = c;
    owner[c] = r;
    true
}

/// Square min-cost assignment with integer costs. Returns the row assigned to
/// each column and optimal potentials `(u, v)` with `u[r] + v[c] <= cost`
/// everywhere and equality on assigned pairs.
fn hungarian(size: usize, cost: &dyn Fn(usize, usize) -> i64) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    // 1-based arrays, index 0 is the virtual source column.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; size + 1];
    let mut v = vec![0i64; size + 1];
    let mut p = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=size {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=size {
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
    let row_of_col = (1..=size).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Total weight of a matching.
pub fn matching_weight(weights: &[Vec<Option<i64>>], m: &[Option<usize>]) -> i64 {
    m.iter()
        .enumerate()
        .filter_map(|(r, c)| c.and_then(|c| weights[r][c]))
        .sum()
}
