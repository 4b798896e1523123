//! Learning-rate schedule: linear warmup from zero, then cosine decay to zero.

use std::f64::consts::PI;

/// Learning rate for a 0-based global step.
///
/// During warmup the rate rises linearly from 0, reaching `peak` exactly at
/// `warmup_steps`; afterwards it follows a half cosine down to 0 at
/// `total_steps`.
pub fn learning_rate(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    debug_assert!(warmup_steps <= total_steps);
    if step >= total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let t = (step - warmup_steps) as f64 / span;
    peak * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_at_zero_and_peaks_after_warmup() {
        let peak = 1e-3;
        assert_eq!(learning_rate(0, 100, 10, peak), 0.0);
        assert_eq!(learning_rate(5, 100, 10, peak), peak * 0.5);
        assert_eq!(learning_rate(10, 100, 10, peak), peak);
    }

    #[test]
    fn cosine_decays_monotonically_to_zero() {
        let peak = 0.1;
        let mut prev = learning_rate(10, 100, 10, peak);
        for step in 11..100 {
            let lr = learning_rate(step, 100, 10, peak);
            assert!(lr < prev, "step {step}");
            assert!(lr > 0.0);
            prev = lr;
        }
        assert_eq!(learning_rate(100, 100, 10, peak), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(learning_rate(0, 50, 0, 0.2), 0.2);
    }

    #[test]
    fn halfway_through_decay_is_half_peak() {
        let lr = learning_rate(55, 100, 10, 1.0);
        assert!((lr - 0.5).abs() < 1e-12);
    }
}
