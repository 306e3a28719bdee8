//! Minimum-cost assignment with row and column potentials, `O(R^2 C)`.

use ndarray::ArrayView2;

use crate::error::{Result, SaeError};

/// Assign every row to a distinct column minimizing total cost. Requires
/// `R <= C`. Among equally good augmenting steps the lowest column wins.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Vec<usize>> {
    let (rows, cols) = cost.dim();
    if rows > cols {
        return Err(SaeError::Input(format!(
            "assignment needs rows <= columns, got {rows}x{cols}"
        )));
    }
    if let Some(((i, j), v)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(SaeError::Input(format!("cost[{i}][{j}] = {v} is not finite")));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }

    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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

    let mut assignment = vec![usize::MAX; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Sum of `cost[i][assignment[i]]` in row order.
pub fn assignment_cost(cost: ArrayView2<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}
