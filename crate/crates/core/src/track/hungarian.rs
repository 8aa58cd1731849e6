//! Rectangular linear assignment with forbidden pairs.
//!
//! The solver returns a feasible matching of maximum cardinality and, among
//! those, minimum total cost. Internally forbidden entries get a penalty
//! larger than any achievable spread of feasible costs, the matrix is padded
//! square with zero-cost dummies, and a shortest-augmenting-path Hungarian
//! pass (O(n³)) solves it.

/// Dense cost matrix with an infeasibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
    feasible: Vec<bool>,
}

impl CostMatrix {
    /// All entries feasible with cost 0.
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cost: vec![0.0; rows * cols], feasible: vec![true; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::new(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged cost matrix");
            for (c, &v) in row.iter().enumerate() {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn set(&mut self, r: usize, c: usize, cost: f64) {
        let i = r * self.cols + c;
        if cost.is_finite() {
            self.cost[i] = cost;
            self.feasible[i] = true;
        } else {
            self.feasible[i] = false;
        }
    }

    pub fn forbid(&mut self, r: usize, c: usize) {
        self.feasible[r * self.cols + c] = false;
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let i = r * self.cols + c;
        self.feasible[i].then(|| self.cost[i])
    }

    pub fn is_feasible(&self, r: usize, c: usize) -> bool {
        self.feasible[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

pub fn hungarian_assign(m: &CostMatrix) -> Assignment {
    let n = m.rows.max(m.cols);
    let feasible_costs = || (0..m.rows * m.cols).filter(|&i| m.feasible[i]).map(|i| m.cost[i]);
    let (lo, hi) = feasible_costs().fold((0.0f64, 0.0f64), |(lo, hi), c| (lo.min(c), hi.max(c)));
    // Exceeds the cost difference between any two matchings that use the same
    // number of forbidden cells.
    let penalty = (n as f64 + 1.0) * (hi - lo + 1.0);

    let entry = |r: usize, c: usize| -> f64 {
        if r >= m.rows || c >= m.cols {
            0.0
        } else if m.feasible[r * m.cols + c] {
            m.cost[r * m.cols + c] - lo
        } else {
            penalty
        }
    };

    // Potentials-based Hungarian, 1-indexed with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut out = Assignment::default();
    let mut row_matched = vec![false; m.rows];
    let mut col_matched = vec![false; m.cols];
    for j in 1..=n {
        let (r, c) = (row_of_col[j] - 1, j - 1);
        if r < m.rows && c < m.cols && m.feasible[r * m.cols + c] {
            out.pairs.push((r, c));
            out.total_cost += m.cost[r * m.cols + c];
            row_matched[r] = true;
            col_matched[c] = true;
        }
    }
    out.pairs.sort_unstable();
    out.unmatched_rows = (0..m.rows).filter(|&r| !row_matched[r]).collect();
    out.unmatched_cols = (0..m.cols).filter(|&c| !col_matched[c]).collect();
    out
}
