//! Binary log-loss.

const CLAMP: f64 = 1e-12;

fn clamp(p: f64) -> f64 {
    p.clamp(CLAMP, 1.0 - CLAMP)
}

/// `-(y ln p + (1 - y) ln(1 - p))`, with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn logloss(p: f64, y: u8) -> f64 {
    let p = clamp(p);
    if y == 1 {
        -libm::log(p)
    } else {
        -libm::log(1.0 - p)
    }
}

/// Derivative of [`logloss`] with respect to `p`.
pub fn logloss_grad(p: f64, y: u8) -> f64 {
    let p = clamp(p);
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert!((logloss(0.5, 0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((logloss(0.5, 1) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(logloss(1.0, 1) < 1e-10);
        assert!(logloss(0.0, 0) < 1e-10);
        assert!(logloss(0.0, 1).is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-7;
        for &p in &[0.1, 0.35, 0.5, 0.8, 0.97] {
            for y in [0u8, 1] {
                let n = (logloss(p + h, y) - logloss(p - h, y)) / (2.0 * h);
                assert!((logloss_grad(p, y) - n).abs() < 1e-6, "p={p} y={y}");
            }
        }
    }
}
