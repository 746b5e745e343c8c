use super::ProblemError;

/// Ψ(z) = ½(1 + erf(z/√2)), evaluated through erfc to keep the lower tail accurate.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Ψ'(z).
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn h_gamma(sigma: f64, strike: f64, x: f64, t: f64) -> f64 {
    -((x / strike).ln() + t * sigma * sigma / 2.0) / (t.sqrt() * sigma)
}

/// Black-Scholes put price without interest rate; the payoff at t = 0.
pub fn bs_put(sigma: f64, strike: f64, x: f64, t: f64) -> f64 {
    if t == 0.0 {
        return (strike - x).max(0.0);
    }
    let h = h_gamma(sigma, strike, x, t);
    strike * normal_cdf(h + t.sqrt() * sigma) - x * normal_cdf(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsGreeks {
    pub delta: f64,
    pub vega: f64,
    pub theta: f64,
}

/// Fourth-order central difference of `f` at `z`.
fn five_point(f: impl Fn(f64) -> f64, z: f64, h: f64) -> f64 {
    (f(z - 2.0 * h) - 8.0 * f(z - h) + 8.0 * f(z + h) - f(z + 2.0 * h)) / (12.0 * h)
}

/// Delta, Vega and Theta of the closed form. Vega uses x√t Ψ'(−h_γ);
/// delta and theta are finite differences of [`bs_put`].
pub fn analytic_greeks_bs(sigma: f64, strike: f64, x: f64, t: f64) -> Result<BsGreeks, ProblemError> {
    if t <= 0.0 {
        return Err(ProblemError::Boundary(format!(
            "theta is undefined at t = {t}; use expiry_delta_bs for the payoff delta"
        )));
    }
    let h = h_gamma(sigma, strike, x, t);
    let vega = x * t.sqrt() * normal_pdf(-h);
    let delta = five_point(|s| bs_put(sigma, strike, s, t), x, 1e-3 * x);
    let ht = (1e-3_f64).min(t / 4.0);
    let theta = -five_point(|tau| bs_put(sigma, strike, x, tau), t, ht);
    Ok(BsGreeks { delta, vega, theta })
}

/// Delta of the put payoff: −1 in the money, 0 out of the money, −½ at the strike.
pub fn expiry_delta_bs(strike: f64, x: f64) -> f64 {
    if x < strike {
        -1.0
    } else if x > strike {
        0.0
    } else {
        -0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series for |z| < 3, Lentz continued fraction for erfc beyond.
    fn erf_oracle(z: f64) -> f64 {
        let a = z.abs();
        let v = if a < 3.0 {
            let mut term = a;
            let mut sum = a;
            let mut n = 0.0;
            while term.abs() > 1e-300 && n < 400.0 {
                n += 1.0;
                term *= -a * a / n;
                let add = term / (2.0 * n + 1.0);
                sum += add;
                if add.abs() < 1e-18 * sum.abs() {
                    break;
                }
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            // erfc(a) = exp(-a^2)/sqrt(pi) * 1/(a + (1/2)/(a + 1/(a + (3/2)/(a + ...))))
            let mut f = a;
            let tiny = 1e-300;
            let mut c = f;
            let mut d = 0.0;
            for k in 1..300 {
                let an = k as f64 / 2.0;
                d = a + an * d;
                d = if d.abs() < tiny { tiny } else { d };
                c = a + an / c;
                c = if c.abs() < tiny { tiny } else { c };
                d = 1.0 / d;
                let delta = c * d;
                f *= delta;
                if (delta - 1.0).abs() < 1e-16 {
                    break;
                }
            }
            1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / f
        };
        v.copysign(z)
    }

    fn put_oracle(sigma: f64, strike: f64, x: f64, t: f64) -> f64 {
        let psi = |z: f64| 0.5 * (1.0 + erf_oracle(z / std::f64::consts::SQRT_2));
        let h = -((x / strike).ln() + t * sigma * sigma / 2.0) / (t.sqrt() * sigma);
        strike * psi(h + t.sqrt() * sigma) - x * psi(h)
    }

    #[test]
    fn erf_matches_series_oracle() {
        for k in -600..=600 {
            let z = k as f64 / 100.0;
            assert!((libm::erf(z) - erf_oracle(z)).abs() <= 1e-12, "z = {z}");
        }
    }

    #[test]
    fn closed_form_matches_oracle() {
        let v = bs_put(0.35, 11.0, 9.5, 0.5);
        assert!((v - put_oracle(0.35, 11.0, 9.5, 0.5)).abs() <= 1e-12);
        assert!(v > 1.5 && v < 2.0);
        for (s, k, x, t) in [(0.1, 10.0, 9.0, 0.01), (0.6, 12.0, 10.0, 1.0), (0.25, 10.5, 9.9, 0.3)] {
            assert!((bs_put(s, k, x, t) - put_oracle(s, k, x, t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn put_call_parity() {
        // zero rate: C - P = x - K with C = x Ψ(d1) - K Ψ(d2)
        for (s, k, x, t) in [(0.35f64, 11.0f64, 9.5f64, 0.5f64), (0.1, 10.0, 9.9, 0.9), (0.6, 12.0, 9.0, 0.05)] {
            let d1 = ((x / k).ln() + 0.5 * s * s * t) / (s * t.sqrt());
            let call = x * normal_cdf(d1) - k * normal_cdf(d1 - s * t.sqrt());
            assert!((call - bs_put(s, k, x, t) - (x - k)).abs() < 1e-12);
        }
    }

    #[test]
    fn vega_matches_finite_difference() {
        let g = analytic_greeks_bs(0.35, 11.0, 9.5, 0.5).unwrap();
        let h = 1e-4;
        let fd = (bs_put(0.35 + h, 11.0, 9.5, 0.5) - bs_put(0.35 - h, 11.0, 9.5, 0.5)) / (2.0 * h);
        assert!((g.vega - fd).abs() / g.vega.abs() <= 1e-6);
    }

    #[test]
    fn vega_vanishes_as_t_goes_to_zero() {
        let g = analytic_greeks_bs(0.35, 11.0, 9.5, 1e-12).unwrap();
        assert!(g.vega.abs() < 1e-12);
    }

    #[test]
    fn delta_matches_closed_form_derivative() {
        // ∂/∂x of the put is −Ψ(h_γ)
        for (s, k, x, t) in [(0.35, 11.0, 9.5, 0.5), (0.2, 10.0, 9.2, 0.8)] {
            let g = analytic_greeks_bs(s, k, x, t).unwrap();
            assert!((g.delta + normal_cdf(h_gamma(s, k, x, t))).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_matches_closed_form_derivative() {
        // with zero rate, ∂ū/∂t = ½ σ² x² Γ = x σ Ψ'(h) / (2√t)
        let (s, k, x, t) = (0.35, 11.0, 9.5, 0.5);
        let g = analytic_greeks_bs(s, k, x, t).unwrap();
        let expect = -x * s * normal_pdf(h_gamma(s, k, x, t)) / (2.0 * t.sqrt());
        assert!((g.theta - expect).abs() < 1e-8);
    }

    #[test]
    fn boundary_handling() {
        assert!(matches!(analytic_greeks_bs(0.35, 11.0, 9.5, 0.0), Err(ProblemError::Boundary(_))));
        assert_eq!(expiry_delta_bs(11.0, 9.5), -1.0);
        assert_eq!(expiry_delta_bs(10.0, 10.5), 0.0);
        assert_eq!(expiry_delta_bs(10.0, 10.0), -0.5);
        assert_eq!(bs_put(0.3, 11.0, 9.5, 0.0), 1.5);
    }

    #[test]
    fn delta_in_unit_interval_and_monotone() {
        let mut seed = 17u64;
        let mut u = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let (s, k, x, t) = (0.1 + 0.5 * u(), 10.0 + 2.0 * u(), 9.0 + u(), 0.01 + 0.99 * u());
            let g = analytic_greeks_bs(s, k, x, t).unwrap();
            assert!((-1.0 - 1e-9..=1e-9).contains(&g.delta), "delta {}", g.delta);
            let dk = (bs_put(s, k + 1e-4, x, t) - bs_put(s, k - 1e-4, x, t)) / 2e-4;
            assert!(dk >= -1e-9);
        }
    }
}
