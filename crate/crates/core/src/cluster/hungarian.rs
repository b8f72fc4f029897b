use crate::error::{RaplError, Result};
use crate::numerics::Tensor;

/// Minimum-cost perfect matching on a square cost matrix (Kuhn–Munkres with
/// row/column potentials, O(K³)). Returns `assignment[row] = column`.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    let k = match cost.shape() {
        [r, c] if r == c => *r,
        s => {
            return Err(RaplError::Dimension(format!(
                "assignment needs a square cost matrix, got {s:?}"
            )))
        }
    };
    if !cost.is_finite() {
        return Err(RaplError::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * k + (j - 1)];

    // 1-based; column 0 is a virtual column used while growing the tree.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut row_of_col = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for row in 1..=k {
        row_of_col[0] = row;
        let mut j0 = 0;
        let mut min_slack = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
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
    let mut assignment = vec![0; k];
    for j in 1..=k {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &Tensor, assignment: &[usize]) -> f64 {
    let k = cost.rows();
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.data()[i * k + j])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_reversal() {
        let k = 4;
        let diag = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&diag).unwrap(), vec![0, 1, 2, 3]);
        let anti = Tensor::from_fn(&[k, k], |i| if i / k + i % k == k - 1 { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&anti).unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&Tensor::zeros(&[2, 3])).is_err());
        let mut c = Tensor::zeros(&[2, 2]);
        c.data_mut()[1] = f64::INFINITY;
        assert!(hungarian(&c).is_err());
    }

    #[test]
    fn handles_negative_and_tied_costs() {
        let c = Tensor::from_rows(&[vec![-1.0, -1.0], vec![-1.0, -1.0]]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(assignment_cost(&c, &a), -2.0);
        let c = Tensor::from_rows(&[
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ])
        .unwrap();
        assert_eq!(assignment_cost(&c, &hungarian(&c).unwrap()), 5.0);
    }
}
