//! Kuhn–Munkres (Hungarian) assignment with row/column potentials and
//! shortest augmenting paths, O(rows^2 * cols).

/// Minimum-cost assignment of every row to a distinct column.
///
/// `cost` is row-major with `rows <= cols`. Returns the column chosen for
/// each row. Among optimal assignments the one found first by the column scan
/// (lowest indices) is returned.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(rows <= cols, "need rows <= cols, got {rows} x {cols}");
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");

    // 1-based internally; column 0 is the virtual start of each augmenting path
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut row_of = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for r in 1..=rows {
        row_of[0] = r;
        let mut col = 0usize;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[col] = true;
            let row = row_of[col];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[row - 1][j - 1] - u[row] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    next = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col = next;
            if row_of[col] == 0 {
                break;
            }
        }
        // flip the augmenting path
        loop {
            let prev = way[col];
            row_of[col] = row_of[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; rows];
    for j in 1..=cols {
        if row_of[j] != 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-weight assignment, solved as minimum cost on negated weights.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let negated: Vec<Vec<f64>> = weights
        .iter()
        .map(|r| r.iter().map(|w| -w).collect())
        .collect();
    min_cost_assignment(&negated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(w: &[Vec<f64>], a: &[usize]) -> f64 {
        a.iter().enumerate().map(|(r, &c)| w[r][c]).sum()
    }

    #[test]
    fn finds_swap() {
        let w = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        assert_eq!(max_weight_assignment(&w), vec![1, 0]);
    }

    #[test]
    fn classic_min_cost() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = min_cost_assignment(&c);
        assert_eq!(total(&c, &a), 5.0);
    }

    #[test]
    fn rectangular() {
        let w = vec![vec![1.0, 9.0, 2.0], vec![8.0, 7.0, 1.0]];
        let a = max_weight_assignment(&w);
        assert_eq!(a, vec![1, 0]);
    }

    #[test]
    fn empty() {
        assert!(min_cost_assignment(&[]).is_empty());
    }
}
