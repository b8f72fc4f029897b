use std::f64::consts::PI;

/// Learning rate for `epoch` (0-based): linear warm-up to `lr` over
/// `warmup` epochs, then cosine decay towards 0 at `total`.
pub fn lr_at(epoch: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if epoch < warmup {
        return lr * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((epoch - warmup) as f64 / span).min(1.0);
    lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 0.1, 5, 40), 0.1 / 5.0);
        assert_eq!(lr_at(5, 0.1, 5, 40), 0.1);
        assert!(lr_at(39, 0.1, 5, 40) < 0.001);
        assert_eq!(lr_at(0, 0.1, 0, 10), 0.1);
    }

    #[test]
    fn schedule_is_monotone_on_each_side() {
        for (warmup, total) in [(5, 40), (1, 3), (0, 7), (10, 11)] {
            let lrs: Vec<f64> = (0..total).map(|e| lr_at(e, 1.0, warmup, total)).collect();
            assert!(lrs[..warmup.min(total)].windows(2).all(|w| w[0] <= w[1]));
            assert!(lrs[warmup.saturating_sub(1)..].windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
