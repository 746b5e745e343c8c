//! Executable checks of the Feynman-Kac identity, the Euler-Maruyama rate and
//! the explicit ReLU constructions for squaring and the heat paraboloid.

use serde::Serialize;
use thiserror::Error;

use crate::data::{em_path, gbm_terminal, mc_reference, DataError, RngStream};
use crate::kernel::Tensor;
use crate::problems::{Interval, ParamPoint, ProblemError, ProblemKind, ProblemSpec};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub mc_mean: f64,
    pub std_err: f64,
    pub analytic: f64,
    pub z_score: f64,
}

/// Compares the Monte Carlo mean of φ_γ(S_λ) with the closed-form ū(λ).
pub fn regression_identity_check(
    spec: &ProblemSpec,
    gamma: &ParamPoint,
    x: &[f64],
    t: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<IdentityCheck, TheoryError> {
    if !spec.has_closed_form() {
        return Err(TheoryError::Contract(format!("{} has no closed-form solution", spec.kind)));
    }
    if m < 100 {
        return Err(TheoryError::Contract(format!("need at least 100 samples, got {m}")));
    }
    let est = mc_reference(spec, gamma, x, t, m, 0, rng)?;
    let analytic = spec.analytic_solution(gamma, x, t)?;
    let diff = (est.mean - analytic).abs();
    let z_score = if diff == 0.0 { 0.0 } else { diff / est.std_err };
    Ok(IdentityCheck {
        mc_mean: est.mean,
        std_err: est.std_err,
        analytic,
        z_score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateFit {
    /// (M, mean strong error) pairs.
    pub points: Vec<(usize, f64)>,
    /// Least-squares slope of log error against log M; `None` when exact.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// The scheme reproduces the solution exactly (additive noise, no drift).
    pub exact: bool,
}

/// Least-squares line through (ln x, ln y).
pub fn loglog_fit(points: &[(usize, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(m, e)| ((m as f64).ln(), e.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Strong error E|S^{M,M} − S| of Euler-Maruyama against the exact solution
/// on coupled paths: every path draws Brownian increments on the finest grid
/// and coarser schemes use their sums.
pub fn em_rate_check(
    spec: &ProblemSpec,
    gamma: &ParamPoint,
    x: &[f64],
    t: f64,
    grid: &[usize],
    paths: usize,
    rng: &mut RngStream,
) -> Result<RateFit, TheoryError> {
    if !spec.has_exact_sde() {
        return Err(ProblemError::NoExactSampler(spec.kind).into());
    }
    if grid.len() < 4 || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return Err(TheoryError::Contract("the M grid needs at least 4 strictly increasing positive entries".into()));
    }
    let finest = *grid.last().unwrap();
    if let Some(m) = grid.iter().find(|&&m| finest % m != 0) {
        return Err(TheoryError::Contract(format!("grid entry {m} does not divide {finest}")));
    }
    if paths < 1000 {
        return Err(TheoryError::Contract(format!("need at least 1000 paths, got {paths}")));
    }
    if spec.is_additive() {
        return Ok(RateFit {
            points: grid.iter().map(|&m| (m, 0.0)).collect(),
            slope: None,
            intercept: None,
            exact: true,
        });
    }
    if spec.kind != ProblemKind::BlackScholes {
        return Err(TheoryError::Contract(format!("no exact comparison solution for {}", spec.kind)));
    }
    let sigma = spec.scalar_sigma(gamma).expect("black-scholes volatility");
    let sd = (t / finest as f64).sqrt();
    let mut fine = vec![0.0; finest];
    let mut coarse = vec![0.0; finest];
    let mut out = [0.0];
    let mut sums = vec![0.0; grid.len()];
    for _ in 0..paths {
        for v in fine.iter_mut() {
            *v = sd * rng.normal();
        }
        let exact = gbm_terminal(x[0], sigma, t, fine.iter().sum());
        for (k, &m) in grid.iter().enumerate() {
            let r = finest / m;
            for (c, chunk) in coarse[..m].iter_mut().zip(fine.chunks_exact(r)) {
                *c = chunk.iter().sum();
            }
            em_path(spec, gamma.values(), x, t, &coarse[..m], &mut out);
            sums[k] += (out[0] - exact).abs();
        }
    }
    let points: Vec<(usize, f64)> = grid.iter().zip(&sums).map(|(&m, s)| (m, s / paths as f64)).collect();
    let (slope, intercept) = loglog_fit(&points);
    Ok(RateFit {
        points,
        slope: Some(slope),
        intercept: Some(intercept),
        exact: false,
    })
}

/// A fully connected ReLU network given by explicit affine layers; ReLU acts
/// between layers, not after the last one. Weights are `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitReluNet {
    pub layers: Vec<(Tensor, Vec<f64>)>,
    /// Declared input box.
    pub domain: Vec<Interval>,
}

impl ExplicitReluNet {
    /// A single affine map `x ↦ x W + b`.
    pub fn affine(weight: Tensor, bias: Vec<f64>, domain: Vec<Interval>) -> Self {
        assert_eq!(weight.rows(), domain.len(), "domain must match the input width");
        assert_eq!(weight.cols(), bias.len(), "bias must match the output width");
        Self {
            layers: vec![(weight, bias)],
            domain,
        }
    }

    /// Passes non-negative inputs through `depth` ReLU layers unchanged.
    pub fn identity(domain: Vec<Interval>, depth: usize) -> Self {
        assert!(domain.iter().all(|iv| iv.lo >= 0.0), "identity through ReLUs needs non-negative inputs");
        let w = domain.len();
        Self {
            layers: (0..=depth).map(|_| (Tensor::identity(w), vec![0.0; w])).collect(),
            domain,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().0.cols()
    }

    /// Number of ReLU layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Nonzero weights and biases.
    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.data().iter().chain(b).filter(|v| **v != 0.0).count())
            .sum()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (i, hv) in h.iter().enumerate() {
                if *hv != 0.0 {
                    for (n, wv) in next.iter_mut().zip(w.row(i)) {
                        *n += hv * wv;
                    }
                }
            }
            if k + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h
    }

    /// `outer ∘ inner`; the last affine map of `inner` is folded into the
    /// first of `outer`.
    pub fn compose(outer: &Self, inner: &Self) -> Self {
        assert_eq!(inner.output_width(), outer.input_width(), "incompatible widths");
        let (wi, bi) = inner.layers.last().unwrap();
        let (wo, bo) = &outer.layers[0];
        let (n_in, n_mid, n_out) = (wi.rows(), wi.cols(), wo.cols());
        let mut w = vec![0.0; n_in * n_out];
        for r in 0..n_in {
            for k in 0..n_mid {
                let a = wi.at(r, k);
                if a != 0.0 {
                    for c in 0..n_out {
                        w[r * n_out + c] += a * wo.at(k, c);
                    }
                }
            }
        }
        let mut b = bo.clone();
        for (k, bk) in bi.iter().enumerate() {
            for (c, bc) in b.iter_mut().enumerate() {
                *bc += bk * wo.at(k, c);
            }
        }
        let mut layers = inner.layers[..inner.layers.len() - 1].to_vec();
        layers.push((Tensor::matrix(n_in, n_out, w).unwrap(), b));
        layers.extend(outer.layers[1..].iter().cloned());
        Self {
            layers,
            domain: inner.domain.clone(),
        }
    }

    /// Block-diagonal stacking of nets of equal depth acting on disjoint inputs.
    pub fn parallel(nets: &[Self]) -> Self {
        let depth = nets[0].depth();
        assert!(nets.iter().all(|n| n.depth() == depth), "parallel nets need equal depth");
        let mut layers = Vec::with_capacity(depth + 1);
        for k in 0..=depth {
            let rows: usize = nets.iter().map(|n| n.layers[k].0.rows()).sum();
            let cols: usize = nets.iter().map(|n| n.layers[k].0.cols()).sum();
            let mut w = vec![0.0; rows * cols];
            let mut b = Vec::with_capacity(cols);
            let (mut r0, mut c0) = (0, 0);
            for n in nets {
                let (wn, bn) = &n.layers[k];
                for r in 0..wn.rows() {
                    for c in 0..wn.cols() {
                        w[(r0 + r) * cols + c0 + c] = wn.at(r, c);
                    }
                }
                b.extend_from_slice(bn);
                r0 += wn.rows();
                c0 += wn.cols();
            }
            layers.push((Tensor::matrix(rows, cols, w).unwrap(), b));
        }
        Self {
            layers,
            domain: nets.iter().flat_map(|n| n.domain.iter().copied()).collect(),
        }
    }
}

/// ReLU net for f_L(x) = x − Σ_{s=1}^{L} g_s(x)/4^s on [0, 1], where g_s is
/// the s-fold hat function. Hidden units per layer: x, three hat pieces of
/// g_{s−1}, and the running sum Σ_{r<s} g_r/4^r.
pub fn build_sq_relu_net(levels: usize) -> ExplicitReluNet {
    assert!(levels >= 1, "at least one level");
    let w = 5;
    let mut layers = Vec::with_capacity(levels + 1);
    // x ↦ (x, x, x − 1/2, x − 1, 0)
    layers.push((Tensor::matrix(1, w, vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap(), vec![0.0, 0.0, -0.5, -1.0, 0.0]));
    for s in 2..=levels {
        // h = g_{s−1} = 2a − 4b + 2c; acc += h / 4^{s−1}
        let q = 0.25f64.powi(s as i32 - 1);
        #[rustfmt::skip]
        let m = vec![
            1.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 2.0, 2.0, 2.0, 2.0 * q,
            0.0, -4.0, -4.0, -4.0, -4.0 * q,
            0.0, 2.0, 2.0, 2.0, 2.0 * q,
            0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        layers.push((Tensor::matrix(w, w, m).unwrap(), vec![0.0, 0.0, -0.5, -1.0, 0.0]));
    }
    let q = 0.25f64.powi(levels as i32);
    layers.push((Tensor::matrix(w, 1, vec![1.0, -2.0 * q, 4.0 * q, -2.0 * q, -1.0]).unwrap(), vec![0.0]));
    ExplicitReluNet {
        layers,
        domain: vec![Interval::new(0.0, 1.0)],
    }
}

/// The defining formula of the sq-net, evaluated directly.
pub fn sq_formula(levels: usize, x: f64) -> f64 {
    let hat = |v: f64| if v <= 0.5 { 2.0 * v } else { 2.0 - 2.0 * v };
    let mut g = x;
    let mut acc = 0.0;
    for s in 1..=levels {
        g = hat(g);
        acc += g * 0.25f64.powi(s as i32);
    }
    x - acc
}

fn scaled_sq(levels: usize, scale: f64, lo: f64, hi: f64) -> ExplicitReluNet {
    // v ↦ scale² · f(v / scale) for v ∈ [lo, hi] ⊂ [0, scale]
    let pre = ExplicitReluNet::affine(Tensor::matrix(1, 1, vec![1.0 / scale]).unwrap(), vec![0.0], vec![Interval::new(lo, hi)]);
    let post = ExplicitReluNet::affine(Tensor::matrix(1, 1, vec![scale * scale]).unwrap(), vec![0.0], vec![Interval::new(0.0, 1.0)]);
    let mut sq = build_sq_relu_net(levels);
    sq.domain = vec![Interval::new(lo / scale, hi / scale)];
    ExplicitReluNet::compose(&post, &ExplicitReluNet::compose(&sq, &pre))
}

/// ReLU net for ū(γ, x, t) = ‖x‖² + t Σ γ_ij² on γ ∈ [0, 1]^{d×d},
/// x ∈ [0.5, 1.5]^d, t ∈ [0, 1]; inputs ordered (γ row-major, x, t).
/// Squares use sq-nets with `levels` levels; products t·s use the
/// polarization t s = 2 sq((t + s)/2) − sq(t)/2 − sq(s)/2.
pub fn build_paraboloid_relu_net(d: usize, levels: usize) -> ExplicitReluNet {
    assert!(d >= 1 && levels >= 1);
    let spec = ProblemSpec::heat_paraboloid(d);
    let (g, unit) = (d * d, Interval::new(0.0, 1.0));
    let x_box = spec.space;

    // stage 1: (γ, x, t) ↦ (sq(γ_ij), ‖x_i‖² terms, t)
    let mut first: Vec<ExplicitReluNet> = (0..g).map(|_| build_sq_relu_net(levels)).collect();
    first.extend((0..d).map(|_| scaled_sq(levels, 2.0, x_box.lo, x_box.hi)));
    first.push(ExplicitReluNet::identity(vec![unit], levels));
    let stage1 = ExplicitReluNet::parallel(&first);

    // between stages: (s, X, t) ↦ per ij ((t + s)/2, t, s), then X
    let (n_mid, n_in) = (3 * g + d, g + d + 1);
    let mut w = vec![0.0; n_in * n_mid];
    for ij in 0..g {
        let (s_row, t_row) = (ij, g + d);
        w[s_row * n_mid + 3 * ij] = 0.5;
        w[t_row * n_mid + 3 * ij] = 0.5;
        w[t_row * n_mid + 3 * ij + 1] = 1.0;
        w[s_row * n_mid + 3 * ij + 2] = 1.0;
    }
    for i in 0..d {
        w[(g + i) * n_mid + 3 * g + i] = 1.0;
    }
    let x_sq = Interval::new(x_box.lo * x_box.lo, x_box.hi * x_box.hi);
    let mut mid_domain = vec![unit; g];
    mid_domain.extend(std::iter::repeat(x_sq).take(d));
    mid_domain.push(unit);
    let mix = ExplicitReluNet::affine(Tensor::matrix(n_in, n_mid, w).unwrap(), vec![0.0; n_mid], mid_domain);

    // stage 2: three sq-nets per product, identity on the x terms
    let mut second: Vec<ExplicitReluNet> = (0..3 * g).map(|_| build_sq_relu_net(levels)).collect();
    second.push(ExplicitReluNet::identity(vec![x_sq; d], levels));
    let stage2 = ExplicitReluNet::parallel(&second);

    let mut out = Vec::with_capacity(3 * g + d);
    for _ in 0..g {
        out.extend_from_slice(&[2.0, -0.5, -0.5]);
    }
    out.extend(std::iter::repeat(1.0).take(d));
    let mut out_domain = vec![unit; 3 * g];
    out_domain.extend(std::iter::repeat(x_sq).take(d));
    let sum = ExplicitReluNet::affine(Tensor::matrix(3 * g + d, 1, out).unwrap(), vec![0.0], out_domain);

    let net = ExplicitReluNet::compose(&sum, &ExplicitReluNet::compose(&stage2, &ExplicitReluNet::compose(&mix, &stage1)));
    let mut domain = vec![unit; g];
    domain.extend(std::iter::repeat(x_box).take(d));
    domain.push(spec.time_interval());
    ExplicitReluNet { domain, ..net }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SqNetReport {
    pub levels: usize,
    pub params: usize,
    pub grid_points: usize,
    pub sup_error: f64,
    /// Sup error of the finite-difference slope against 2x, away from kinks.
    pub sup_gradient_error: f64,
}

/// Sup errors of the sq-net on `n` equispaced points of [0, 1].
pub fn sq_net_report(levels: usize, n: usize) -> SqNetReport {
    let net = build_sq_relu_net(levels);
    let mut sup: f64 = 0.0;
    let mut sup_grad: f64 = 0.0;
    let kink = 0.5f64.powi(levels as i32);
    let h = 1e-7;
    for i in 0..n {
        let x = i as f64 / (n - 1) as f64;
        sup = sup.max((net.eval(&[x])[0] - x * x).abs());
        let frac = (x / kink).fract();
        if x + h <= 1.0 && x - h >= 0.0 && frac * kink > 2.0 * h && (1.0 - frac) * kink > 2.0 * h {
            let slope = (net.eval(&[x + h])[0] - net.eval(&[x - h])[0]) / (2.0 * h);
            sup_grad = sup_grad.max((slope - 2.0 * x).abs());
        }
    }
    SqNetReport {
        levels,
        params: net.count_params(),
        grid_points: n,
        sup_error: sup,
        sup_gradient_error: sup_grad,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParaboloidNetReport {
    pub d: usize,
    pub levels: usize,
    pub params: usize,
    pub depth: usize,
    pub points: usize,
    pub sup_error: f64,
}

/// Sup error of the paraboloid net against the closed form on `n` uniform
/// random points of its domain.
pub fn paraboloid_net_report(d: usize, levels: usize, n: usize, rng: &mut RngStream) -> ParaboloidNetReport {
    let net = build_paraboloid_relu_net(d, levels);
    let spec = ProblemSpec::heat_paraboloid(d);
    let mut sup: f64 = 0.0;
    let mut z = vec![0.0; net.domain.len()];
    for _ in 0..n {
        for (v, iv) in z.iter_mut().zip(&net.domain) {
            *v = rng.uniform_in(iv.lo, iv.hi);
        }
        let (g, rest) = z.split_at(d * d);
        let exact = spec.analytic_raw(g, &rest[..d], rest[d]).expect("closed form");
        sup = sup.max((net.eval(&z)[0] - exact).abs());
    }
    ParaboloidNetReport {
        d,
        levels,
        params: net.count_params(),
        depth: net.depth(),
        points: n,
        sup_error: sup,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stream;

    #[test]
    fn sq_net_matches_formula_at_dyadics() {
        for levels in 1..=8 {
            let net = build_sq_relu_net(levels);
            assert_eq!(net.eval(&[0.0])[0], 0.0);
            assert_eq!(net.eval(&[1.0])[0], 1.0);
            assert_eq!(net.eval(&[0.5])[0], 0.25);
            let n = 1usize << (levels + 2);
            for k in 0..=n {
                let x = k as f64 / n as f64;
                assert!((net.eval(&[x])[0] - sq_formula(levels, x)).abs() <= 1e-12);
                if k % 4 == 0 {
                    assert_eq!(net.eval(&[x])[0], x * x, "dyadic {x} at L = {levels}");
                }
            }
        }
    }

    #[test]
    fn sq_net_error_contracts() {
        let reports: Vec<SqNetReport> = (1..=6).map(|l| sq_net_report(l, 20_001)).collect();
        for r in &reports {
            // the interpolation error of x² on a mesh of width 2^-L is 4^-(L+1)
            assert!(r.sup_error <= 0.25f64.powi(r.levels as i32 + 1) + 1e-15);
            assert!(r.sup_gradient_error <= 0.5f64.powi(r.levels as i32) + 1e-6);
        }
        for w in reports.windows(2) {
            let ratio = w[0].sup_error / w[1].sup_error;
            assert!((ratio / 4.0 - 1.0).abs() <= 0.25, "ratio {ratio}");
        }
    }

    #[test]
    fn composition_and_parallel() {
        let a = ExplicitReluNet::affine(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), vec![0.5, 0.5], vec![Interval::new(0.0, 1.0)]);
        let id = ExplicitReluNet::identity(vec![Interval::new(0.0, 1.0); 2], 2);
        let c = ExplicitReluNet::compose(&id, &a);
        assert_eq!(c.eval(&[0.25]), vec![0.75, 0.25]);
        let p = ExplicitReluNet::parallel(&[build_sq_relu_net(3), build_sq_relu_net(3)]);
        assert_eq!(p.eval(&[0.5, 0.25]), vec![0.25, 0.0625]);
        assert_eq!(p.count_params(), 2 * build_sq_relu_net(3).count_params());
    }

    #[test]
    fn paraboloid_net_accuracy() {
        let mut rng = RngStream::new(0, stream::aux(20));
        let r = paraboloid_net_report(1, 6, 20_000, &mut rng);
        assert!(r.sup_error <= 3.0 * 0.25f64.powi(6), "{r:?}");
        // zero volatility slice: only the squares of x and products with 0
        let d = 2;
        let net = build_paraboloid_relu_net(d, 5);
        let eps = 0.25f64.powi(6);
        let spec = ProblemSpec::heat_paraboloid(d);
        for _ in 0..2000 {
            let x = [rng.uniform_in(0.5, 1.5), rng.uniform_in(0.5, 1.5)];
            let t = rng.uniform();
            let mut z = vec![0.0; d * d];
            z.extend_from_slice(&x);
            z.push(t);
            let exact = spec.analytic_raw(&[0.0; 4], &x, t).unwrap();
            assert!((net.eval(&z)[0] - exact).abs() <= d as f64 * 4.0 * eps + (d * d) as f64 * 2.0 * eps);
        }
    }

    #[test]
    fn paraboloid_param_growth() {
        let count = |d, l| build_paraboloid_relu_net(d, l).count_params() as f64;
        let mut per_unit = Vec::new();
        for d in 1..=3 {
            let (c4, c6, c8) = (count(d, 4), count(d, 6), count(d, 8));
            // linear in the number of levels
            assert_eq!(c8 - c6, c6 - c4);
            // every square costs the same per level: d² + d in stage 1, 3d² in stage 2
            per_unit.push((c8 - c6) / 2.0 / (4 * d * d + d) as f64);
        }
        assert!(per_unit.windows(2).all(|w| (w[0] - w[1]).abs() <= 1.0), "{per_unit:?}");
    }

    #[test]
    fn identity_checks() {
        let mut rng = RngStream::new(1, stream::aux(21));
        let bs = ProblemSpec::black_scholes();
        let g = bs.param_point(vec![0.35, 11.0]).unwrap();
        let r = regression_identity_check(&bs, &g, &[9.5], 0.5, 200_000, &mut rng).unwrap();
        assert!(r.z_score <= 3.0, "{r:?}");
        let r = regression_identity_check(&bs, &g, &[9.5], 0.0, 1000, &mut rng).unwrap();
        assert_eq!((r.std_err, r.z_score, r.mc_mean), (0.0, 0.0, 1.5));
        assert!(regression_identity_check(&ProblemSpec::basket_put(), &ProblemSpec::basket_put().param_point(vec![0.3; 48].into_iter().chain([11.0]).collect()).unwrap(), &[9.5; 3], 0.5, 1000, &mut rng).is_err());
        assert!(regression_identity_check(&bs, &g, &[9.5], 0.5, 10, &mut rng).is_err());
    }

    #[test]
    fn em_rate_on_gbm() {
        let spec = ProblemSpec::black_scholes();
        let g = spec.param_point(vec![0.5, 11.0]).unwrap();
        let grid = [4, 8, 16, 32, 64, 128, 256];
        let mut rng = RngStream::new(2, stream::aux(22));
        let fit = em_rate_check(&spec, &g, &[9.5], 1.0, &grid, 4000, &mut rng).unwrap();
        let slope = fit.slope.unwrap();
        assert!((-0.65..=-0.35).contains(&slope), "{fit:?}");
        assert!(!fit.exact);
    }

    #[test]
    fn em_rate_additive_and_errors() {
        let heat = ProblemSpec::heat_paraboloid(2);
        let g = heat.param_point(vec![0.5; 4]).unwrap();
        let mut rng = RngStream::new(3, stream::aux(23));
        let fit = em_rate_check(&heat, &g, &[1.0, 1.0], 1.0, &[4, 8, 16, 32], 1000, &mut rng).unwrap();
        assert!(fit.exact && fit.slope.is_none());
        assert!(fit.points.iter().all(|p| p.1 == 0.0));
        let bs = ProblemSpec::black_scholes();
        let gb = bs.param_point(vec![0.5, 11.0]).unwrap();
        assert!(em_rate_check(&bs, &gb, &[9.5], 1.0, &[4, 8, 16], 1000, &mut rng).is_err());
        assert!(em_rate_check(&bs, &gb, &[9.5], 1.0, &[3, 4, 8, 16], 1000, &mut rng).is_err());
        let basket = ProblemSpec::basket_put();
        let gp = basket.param_point(vec![0.3; 48].into_iter().chain([11.0]).collect()).unwrap();
        assert!(em_rate_check(&basket, &gp, &[9.5; 3], 1.0, &[4, 8, 16, 32], 1000, &mut rng).is_err());
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let pts: Vec<(usize, f64)> = [4usize, 8, 16, 32].iter().map(|&m| (m, 3.0 * (m as f64).powf(-0.5))).collect();
        let (s, c) = loglog_fit(&pts);
        assert!((s + 0.5).abs() < 1e-12 && (c - 3f64.ln()).abs() < 1e-12);
    }
}
