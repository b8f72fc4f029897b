//! Row-wise softmax kernels shared by the tape ops and the value-level
//! helpers in the loss modules.

/// Softmax over the entries of `row` where `support` is true (all entries when
/// `support` is `None`). Entries outside the support are set to exactly 0.
///
/// Returns false when the support is empty.
pub fn masked_softmax_row(row: &[f64], support: Option<&[bool]>, out: &mut [f64]) -> bool {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| in_support(support, j))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return false;
    }
    let mut total = 0.0;
    for (j, (o, &x)) in out.iter_mut().zip(row).enumerate() {
        *o = if in_support(support, j) {
            (x - max).exp()
        } else {
            0.0
        };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    true
}

/// Log-softmax restricted to the support; off-support entries are 0.
pub fn masked_log_softmax_row(row: &[f64], support: Option<&[bool]>, out: &mut [f64]) -> bool {
    let Some(lse) = masked_logsumexp_row(row, support) else {
        out.fill(0.0);
        return false;
    };
    for (j, (o, &x)) in out.iter_mut().zip(row).enumerate() {
        *o = if in_support(support, j) { x - lse } else { 0.0 };
    }
    true
}

/// `log Σ_support exp(x)` computed with max subtraction. `None` on empty support.
pub fn masked_logsumexp_row(row: &[f64], support: Option<&[bool]>) -> Option<f64> {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| in_support(support, j))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| in_support(support, j))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    Some(max + sum.ln())
}

#[inline]
pub fn in_support(support: Option<&[bool]>, j: usize) -> bool {
    support.map_or(true, |s| s[j])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_large_logits() {
        let mut out = [0.0; 3];
        masked_softmax_row(&[0.0, 0.0, 0.0], None, &mut out);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut out = [0.0; 2];
        masked_softmax_row(&[1000.0, 1000.0], None, &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn empty_support_is_reported() {
        let mut out = [1.0; 2];
        assert!(!masked_softmax_row(&[1.0, 2.0], Some(&[false, false]), &mut out));
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn off_support_entries_are_exact_zero() {
        let mut out = [9.0; 4];
        masked_softmax_row(&[0.3, 5.0, -1.0, 0.0], Some(&[true, false, true, false]), &mut out);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[3], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }
}
