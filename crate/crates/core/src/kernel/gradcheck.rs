/// Denominator floor in the relative error `|a - n| / max(|a|, |n|, floor)`.
/// Without it, coordinates whose true gradient is zero would turn rounding
/// noise into arbitrarily large relative errors.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub parameters_checked: usize,
    pub step_size: f64,
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares an analytic gradient with central differences of `f` at `theta`.
pub fn check_gradients(f: impl FnMut(&[f64]) -> f64, theta: &[f64], analytic: &[f64], h: f64) -> GradCheckReport {
    assert_eq!(theta.len(), analytic.len(), "gradient length must match parameters");
    let numeric = finite_diff_grad(f, theta, h);
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max);
    GradCheckReport {
        max_relative_error,
        parameters_checked: theta.len(),
        step_size: h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn report_fields() {
        let r = check_gradients(|t| t[0] * t[1], &[2.0, 5.0], &[5.0, 2.0], 1e-5);
        assert_eq!(r.parameters_checked, 2);
        assert_eq!(r.step_size, 1e-5);
        assert!(r.max_relative_error >= 0.0 && r.max_relative_error < 1e-9);
    }
}
