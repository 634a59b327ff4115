use crate::error::{Error, Result};

/// Asymptotic log shaping for non-negative rewards:
/// `ln(((eᵃ − a)/a)·x + 1)` for `x ≤ a`, else `a/(a²+1)·(x − a) + a`.
///
/// The two branches do not meet at `x = a`; see [`shape_reward_branch_gap`].
pub fn shape_reward(x: f64, a: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("reward shaping needs x >= 0, got {x}")));
    }
    if !(a > 0.0) {
        return Err(Error::Domain(format!("reward shaping needs a > 0, got {a}")));
    }
    if x <= a {
        Ok((((a.exp() - a) / a) * x + 1.0).ln())
    } else {
        Ok(a / (a * a + 1.0) * (x - a) + a)
    }
}

/// `|g(a) − a|`: the jump between the log branch at `x = a` and the linear
/// branch's limit from the right.
pub fn shape_reward_branch_gap(a: f64) -> f64 {
    ((a.exp() - a + 1.0).ln() - a).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_values() {
        assert_eq!(shape_reward(0.0, 3.0).unwrap(), 0.0);
        assert_abs_diff_eq!(shape_reward(3.0, 3.0).unwrap(), 2.89511, epsilon = 1e-5);
        assert_eq!(shape_reward(4.0, 3.0).unwrap(), 3.3);
    }

    #[test]
    fn negative_reward_rejected() {
        assert!(matches!(shape_reward(-0.1, 3.0), Err(Error::Domain(_))));
        assert!(shape_reward(1.0, 0.0).is_err());
    }

    #[test]
    fn documented_gap() {
        assert_abs_diff_eq!(shape_reward_branch_gap(3.0), 0.10489, epsilon = 1e-5);
    }

    #[test]
    fn monotone_on_grid() {
        let a = 3.0;
        let mut prev = shape_reward(0.0, a).unwrap();
        for i in 1..=30_000 {
            let x = i as f64 * 1e-3;
            let v = shape_reward(x, a).unwrap();
            assert!(v >= prev, "decrease at x = {x}");
            prev = v;
        }
    }
}
