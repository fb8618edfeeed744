//! Smooth cutoff primitives built from `e^{−1/t}`.

/// `C^∞` step: 0 for `t ≤ 0`, 1 for `t ≥ 1`, strictly monotone in between.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / t).exp();
        let b = (-1.0 / (1.0 - t)).exp();
        a / (a + b)
    }
}

/// Ramp rising from 0 at `a` to 1 at `b` (`a < b`).
pub fn ramp(x: f64, a: f64, b: f64) -> f64 {
    smooth_step((x - a) / (b - a))
}

/// Plateau bump: 0 outside `(a, d)`, 1 on `[b, c]`, smooth in between.
pub fn plateau(x: f64, a: f64, b: f64, c: f64, d: f64) -> f64 {
    ramp(x, a, b) * (1.0 - ramp(x, c, d))
}

/// Odd smoothing of `sgn`: exactly `±1` for `|x| ≥ eps`.
pub fn smooth_sign(x: f64, eps: f64) -> f64 {
    if eps <= 0.0 {
        return if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    2.0 * smooth_step((x / eps + 1.0) / 2.0) - 1.0
}
