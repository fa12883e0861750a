//! Closed-form speculative decoding arithmetic.
//!
//! Two counting conventions coexist. [`expected_accepted`] is the geometric
//! sum `Σ_{k=0}^{γ} α^k`, i.e. accepted draft tokens plus the verifier's own
//! token. [`expected_accepted_strict`] is `Σ_{k=1}^{W} α^k`, the accepted
//! draft tokens alone, and extends to real-valued windows so that cascades
//! can feed an expected candidate length into the next level.

/// `(1 − x^n) / (1 − x)` for real `n ≥ 0`, accurate near `x = 1`.
fn geometric_ratio(x: f64, n: f64) -> f64 {
    if x == 1.0 {
        return n;
    }
    if x == 0.0 {
        return if n > 0.0 { 1.0 } else { 0.0 };
    }
    (n * x.ln()).exp_m1() / (x - 1.0)
}

fn check_alpha(alpha: f64) {
    assert!(
        (0.0..=1.0).contains(&alpha),
        "acceptance probability {alpha} outside [0, 1]"
    );
}

/// Expected tokens per verification round, `(1 − α^{γ+1}) / (1 − α)`,
/// with the limit `γ + 1` at `α = 1`.
pub fn expected_accepted(alpha: f64, gamma: u32) -> f64 {
    check_alpha(alpha);
    geometric_ratio(alpha, f64::from(gamma) + 1.0)
}

/// Expected accepted draft tokens out of a window of `window` proposals,
/// `α (1 − α^W) / (1 − α)`, limit `W` at `α = 1`. `window` may be fractional.
pub fn expected_accepted_strict(alpha: f64, window: f64) -> f64 {
    check_alpha(alpha);
    assert!(window >= 0.0, "window {window} is negative");
    alpha * geometric_ratio(alpha, window)
}

/// Improvement factor of two-model speculation over plain decoding,
/// `(1 − α^{γ+1}) / ((1 − α)(γc + 1))` where `c = T_draft / T_target`.
/// `γ = 0` (no speculation) gives exactly 1.
pub fn theoretical_speedup(alpha: f64, gamma: u32, cost_ratio: f64) -> f64 {
    assert!(cost_ratio > 0.0, "cost ratio {cost_ratio} must be positive");
    expected_accepted(alpha, gamma) / (f64::from(gamma) * cost_ratio + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Oracle: direct power summation.
    fn sum_powers(alpha: f64, from: u32, to: u32) -> f64 {
        (from..=to).map(|k| alpha.powi(k as i32)).sum()
    }

    #[test]
    fn expected_accepted_examples() {
        assert_eq!(expected_accepted(0.0, 4), 1.0);
        assert_eq!(expected_accepted(1.0, 4), 5.0);
        let oracle = sum_powers(0.8, 0, 4);
        assert!((oracle - 3.3616).abs() < 1e-12);
        assert!((expected_accepted(0.8, 4) - oracle).abs() < 1e-12);
    }

    #[test]
    fn strict_variant_drops_the_zeroth_term() {
        for &a in &[0.0, 0.3, 0.8, 0.999_999_9, 1.0] {
            for w in 1..=8 {
                let got = expected_accepted_strict(a, f64::from(w));
                let oracle = sum_powers(a, 1, w);
                assert!((got - oracle).abs() < 1e-9, "α={a} W={w}");
                assert!((got + 1.0 - expected_accepted(a, w)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn speedup_examples() {
        // perfect, nearly free drafter
        let s = theoretical_speedup(1.0, 4, 1e-12);
        assert!((s - 5.0).abs() < 1e-9);
        assert!((theoretical_speedup(0.0, 1, 0.1) - 1.0 / 1.1).abs() < 1e-12);
        let oracle = sum_powers(0.8, 0, 4) / 1.4;
        assert!((theoretical_speedup(0.8, 4, 0.1) - oracle).abs() < 1e-12);
        assert!((oracle - 2.4011).abs() < 1e-4);
    }

    #[test]
    fn no_speculation_is_unit_speedup() {
        for &a in &[0.0, 0.5, 1.0] {
            assert_eq!(theoretical_speedup(a, 0, 0.3), 1.0);
        }
    }

    #[test]
    fn accurate_near_one() {
        let a = 1.0 - 1e-13;
        assert!((expected_accepted(a, 8) - 9.0).abs() < 1e-9);
    }

    #[test]
    #[should_panic]
    fn rejects_alpha_above_one() {
        expected_accepted(1.5, 2);
    }

    proptest! {
        #[test]
        fn expected_accepted_monotone_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 1u32..16) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let e_lo = expected_accepted(lo, g);
            let e_hi = expected_accepted(hi, g);
            prop_assert!(e_lo <= e_hi + 1e-12);
            prop_assert!(expected_accepted(hi, g) <= expected_accepted(hi, g + 1) + 1e-12);
            prop_assert!(e_lo >= 1.0 - 1e-12 && e_lo <= f64::from(g) + 1.0 + 1e-12);
        }
    }
}
