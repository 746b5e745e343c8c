//! Sampling of predictor points Λ = (Γ, X, 𝒯), simulation of SDE terminal
//! states, target construction and Monte Carlo reference values.

mod rng;

pub use rng::{philox4x32_10, stream, RngStream};

use std::io::{self, Write};

use thiserror::Error;

use crate::kernel::Tensor;
use crate::problems::{Interval, ParamPoint, ProblemError, ProblemKind, ProblemSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("{0}")]
    Contract(String),
}

/// A batch of predictor points and their standardized network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaBatch {
    /// `len × gamma_len`, free γ coordinates.
    pub gamma: Vec<f64>,
    /// `len × d`.
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// `len × dim_in`.
    pub flat: Tensor,
    gamma_len: usize,
    d: usize,
}

impl LambdaBatch {
    /// Builds a batch from raw coordinates, validating each against its box.
    pub fn from_raw(spec: &ProblemSpec, gamma: Vec<f64>, x: Vec<f64>, t: Vec<f64>) -> Result<Self, DataError> {
        let n = t.len();
        let (g, d) = (spec.gamma_len(), spec.d);
        if n == 0 || gamma.len() != n * g || x.len() != n * d {
            return Err(DataError::Contract(format!(
                "batch of {n} points needs {} gamma and {} x values, got {} and {}",
                n * g,
                n * d,
                gamma.len(),
                x.len()
            )));
        }
        let p = spec.dim_in();
        let mut flat = vec![0.0; n * p];
        for i in 0..n {
            let gi = if g == 0 { &[][..] } else { &gamma[i * g..(i + 1) * g] };
            flatten_raw(spec, gi, &x[i * d..(i + 1) * d], t[i], &mut flat[i * p..(i + 1) * p])?;
        }
        Ok(Self {
            flat: Tensor::matrix(n, p, flat).expect("non-empty batch"),
            gamma,
            x,
            t,
            gamma_len: g,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn gamma_row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.gamma_len..(i + 1) * self.gamma_len]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

fn standardize(u: f64, iv: Interval, what: &str) -> Result<f64, ProblemError> {
    if !iv.contains(u) {
        return Err(ProblemError::OutOfDomain {
            what: what.to_string(),
            value: u,
            lo: iv.lo,
            hi: iv.hi,
        });
    }
    Ok((u - iv.mid()) / iv.uniform_std())
}

fn flatten_raw(spec: &ProblemSpec, gamma: &[f64], x: &[f64], t: f64, out: &mut [f64]) -> Result<(), ProblemError> {
    let mut k = 0;
    for (v, iv) in gamma.iter().zip(spec.gamma_intervals()) {
        out[k] = standardize(*v, iv, "gamma")?;
        k += 1;
    }
    if !spec.space.is_pinned() {
        for v in x {
            out[k] = standardize(*v, spec.space, "x")?;
            k += 1;
        }
    }
    let time = spec.time_interval();
    if !time.is_pinned() {
        out[k] = standardize(t, time, "t")?;
    }
    Ok(())
}

/// Network input for (γ, x, t): free coordinates in the order γ, x, t, each
/// mapped to zero mean and unit variance under its uniform law.
pub fn flatten_input(spec: &ProblemSpec, gamma: &ParamPoint, x: &[f64], t: f64) -> Result<Vec<f64>, ProblemError> {
    if x.len() != spec.d {
        return Err(ProblemError::Length {
            what: "x",
            expected: spec.d,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; spec.dim_in()];
    flatten_raw(spec, gamma.values(), x, t, &mut out)?;
    Ok(out)
}

/// Draws `n` i.i.d. uniform predictor points.
pub fn sample_lambda(spec: &ProblemSpec, rng: &mut RngStream, n: usize) -> Result<LambdaBatch, DataError> {
    if n == 0 {
        return Err(DataError::Contract("batch size must be at least 1".into()));
    }
    let gi = spec.gamma_intervals();
    let d = spec.d;
    let mut gamma = Vec::with_capacity(n * gi.len());
    let mut x = Vec::with_capacity(n * d);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        gamma.extend(gi.iter().map(|iv| rng.uniform_in(iv.lo, iv.hi)));
        x.extend((0..d).map(|_| rng.uniform_in(spec.space.lo, spec.space.hi)));
        t.push(rng.uniform_in(0.0, spec.horizon));
    }
    LambdaBatch::from_raw(spec, gamma, x, t)
}

fn exact_row(spec: &ProblemSpec, gamma: &[f64], x: &[f64], t: f64, normals: &[f64], out: &mut [f64]) {
    let st = t.sqrt();
    match spec.kind {
        ProblemKind::BlackScholes => {
            let s = gamma[0];
            out[0] = x[0] * (-0.5 * t * s * s + st * s * normals[0]).exp();
        }
        _ => {
            out.copy_from_slice(x);
            let db: Vec<f64> = normals.iter().map(|z| st * z).collect();
            spec.diffuse(gamma, x, &db, out);
        }
    }
}

/// Terminal states `len × d` from the closed-form SDE solution.
pub fn simulate_exact(spec: &ProblemSpec, batch: &LambdaBatch, rng: &mut RngStream) -> Result<Vec<f64>, DataError> {
    if !spec.has_exact_sde() {
        return Err(ProblemError::NoExactSampler(spec.kind).into());
    }
    let d = spec.d;
    let mut out = vec![0.0; batch.len() * d];
    let mut z = vec![0.0; d];
    for i in 0..batch.len() {
        rng.fill_normal(&mut z);
        exact_row(spec, batch.gamma_row(i), batch.x_row(i), batch.t[i], &z, &mut out[i * d..(i + 1) * d]);
    }
    Ok(out)
}

/// Euler-Maruyama from `x` driven by the given Brownian increments (`M × d`).
pub(crate) fn em_path(spec: &ProblemSpec, gamma: &[f64], x: &[f64], t: f64, increments: &[f64], out: &mut [f64]) {
    let d = spec.d;
    let m = increments.len() / d;
    let dt = t / m as f64;
    let mut s = x.to_vec();
    let mut drift = vec![0.0; d];
    out.copy_from_slice(x);
    for step in increments.chunks_exact(d) {
        spec.drift(gamma, &s, &mut drift);
        for (o, mu) in out.iter_mut().zip(&drift) {
            *o += mu * dt;
        }
        spec.diffuse(gamma, &s, step, out);
        s.copy_from_slice(out);
    }
}

/// Terminal states `len × d` after `m_steps` Euler-Maruyama steps with
/// independent increments per sample.
pub fn euler_maruyama(
    spec: &ProblemSpec,
    batch: &LambdaBatch,
    m_steps: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>, DataError> {
    if m_steps == 0 {
        return Err(DataError::Contract("Euler-Maruyama needs at least one step".into()));
    }
    let d = spec.d;
    let mut out = vec![0.0; batch.len() * d];
    let mut inc = vec![0.0; m_steps * d];
    for i in 0..batch.len() {
        let sd = (batch.t[i] / m_steps as f64).sqrt();
        for v in inc.iter_mut() {
            *v = sd * rng.normal();
        }
        em_path(spec, batch.gamma_row(i), batch.x_row(i), batch.t[i], &inc, &mut out[i * d..(i + 1) * d]);
    }
    Ok(out)
}

/// Terminal states with the exact sampler when `em_steps == 0`, else Euler-Maruyama.
pub fn simulate(spec: &ProblemSpec, batch: &LambdaBatch, em_steps: usize, rng: &mut RngStream) -> Result<Vec<f64>, DataError> {
    if em_steps == 0 {
        simulate_exact(spec, batch, rng)
    } else {
        euler_maruyama(spec, batch, em_steps, rng)
    }
}

/// y_i = φ_{γ_i}(s_i).
pub fn make_targets(spec: &ProblemSpec, batch: &LambdaBatch, states: &[f64]) -> Vec<f64> {
    let d = spec.d;
    assert_eq!(states.len(), batch.len() * d, "terminal states must align with the batch");
    (0..batch.len())
        .map(|i| spec.initial_condition_raw(batch.gamma_row(i), &states[i * d..(i + 1) * d]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Welford accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMoments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two values).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Monte Carlo estimate of ū(γ, x, t) = E[φ_γ(S_{γ,x,t})] from `m` paths.
/// Uses the exact sampler when the problem has one, otherwise Euler-Maruyama
/// with `em_steps` steps.
pub fn mc_reference(
    spec: &ProblemSpec,
    gamma: &ParamPoint,
    x: &[f64],
    t: f64,
    m: usize,
    em_steps: usize,
    rng: &mut RngStream,
) -> Result<McEstimate, DataError> {
    if m < 2 {
        return Err(DataError::Contract(format!("Monte Carlo needs at least 2 samples, got {m}")));
    }
    if x.len() != spec.d {
        return Err(ProblemError::Length {
            what: "x",
            expected: spec.d,
            got: x.len(),
        }
        .into());
    }
    if t == 0.0 {
        return Ok(McEstimate {
            mean: spec.initial_condition(gamma, x),
            std_err: 0.0,
            samples: m,
        });
    }
    let exact = spec.has_exact_sde();
    if !exact && em_steps == 0 {
        return Err(DataError::Contract(format!(
            "{} needs Euler-Maruyama steps for Monte Carlo",
            spec.kind
        )));
    }
    let d = spec.d;
    let g = gamma.values();
    let mut z = vec![0.0; d];
    let mut inc = vec![0.0; em_steps.max(1) * d];
    let mut s = vec![0.0; d];
    let mut acc = RunningMoments::default();
    let sd = (t / em_steps.max(1) as f64).sqrt();
    for _ in 0..m {
        if exact {
            rng.fill_normal(&mut z);
            exact_row(spec, g, x, t, &z, &mut s);
        } else {
            for v in inc.iter_mut() {
                *v = sd * rng.normal();
            }
            em_path(spec, g, x, t, &inc, &mut s);
        }
        acc.push(spec.initial_condition_raw(g, &s));
    }
    Ok(McEstimate {
        mean: acc.mean(),
        std_err: acc.std_err(),
        samples: m,
    })
}

/// Writes a batch and its targets as CSV with header `gamma_*,x_*,t,y`.
pub fn write_samples_csv<W: Write>(mut w: W, batch: &LambdaBatch, y: &[f64]) -> io::Result<()> {
    let mut header: Vec<String> = (0..batch.gamma_len).map(|i| format!("gamma_{i}")).collect();
    header.extend((0..batch.d).map(|i| format!("x_{i}")));
    header.push("t".into());
    header.push("y".into());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..batch.len() {
        let row: Vec<String> = batch
            .gamma_row(i)
            .iter()
            .chain(batch.x_row(i))
            .chain([&batch.t[i], &y[i]])
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Exact GBM state at time `t` given the Brownian value `B_t`.
pub(crate) fn gbm_terminal(x: f64, sigma: f64, t: f64, brownian: f64) -> f64 {
    x * (-0.5 * t * sigma * sigma + sigma * brownian).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bs() -> ProblemSpec {
        ProblemSpec::black_scholes()
    }

    #[test]
    fn sampled_points_stay_in_their_boxes() {
        let spec = bs();
        let mut rng = RngStream::new(0, stream::aux(1));
        let b = sample_lambda(&spec, &mut rng, 100_000).unwrap();
        for i in 0..b.len() {
            let g = b.gamma_row(i);
            assert!((0.1..=0.6).contains(&g[0]) && (10.0..=12.0).contains(&g[1]));
            assert!((9.0..=10.0).contains(&b.x[i]));
            assert!((0.0..=1.0).contains(&b.t[i]));
        }
        assert_eq!(b.flat.shape(), &[100_000, 4]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ProblemSpec::basket_put();
        let a = sample_lambda(&spec, &mut RngStream::new(5, stream::train(9)), 64).unwrap();
        let b = sample_lambda(&spec, &mut RngStream::new(5, stream::train(9)), 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_mean_is_one_half() {
        let spec = bs();
        let n = 1_000_000;
        let b = sample_lambda(&spec, &mut RngStream::new(3, stream::aux(2)), n).unwrap();
        let mean = b.t.iter().sum::<f64>() / n as f64;
        let se = (1.0 / 12.0 / n as f64).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn flatten_examples() {
        let spec = bs();
        let lo = spec.param_point(vec![0.1, 10.0]).unwrap();
        let f = flatten_input(&spec, &lo, &[9.0], 0.0).unwrap();
        for v in f {
            assert!((v + 3f64.sqrt()).abs() < 1e-15);
        }
        let mid = spec.param_point(vec![0.35, 11.0]).unwrap();
        assert_eq!(flatten_input(&spec, &mid, &[9.5], 0.5).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            flatten_input(&spec, &mid, &[10.5], 0.5),
            Err(ProblemError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn exact_sampler_edge_cases() {
        let spec = ProblemSpec::heat_gaussian(150);
        let mut rng = RngStream::new(0, 0);
        let x: Vec<f64> = (0..300).map(|i| (i as f64 / 1500.0) - 0.1).collect();
        let b = LambdaBatch::from_raw(&spec, vec![0.0, 0.05], x.clone(), vec![0.7, 0.0]).unwrap();
        let s = simulate_exact(&spec, &b, &mut rng).unwrap();
        assert_eq!(&s[..150], &x[..150]);
        assert_eq!(&s[150..], &x[150..]);

        let basket = ProblemSpec::basket_put();
        let b = sample_lambda(&basket, &mut rng, 2).unwrap();
        assert!(matches!(simulate_exact(&basket, &b, &mut rng), Err(DataError::Problem(_))));
    }

    #[test]
    fn gbm_is_a_martingale() {
        let spec = bs();
        let n = 1_000_000;
        let b = LambdaBatch::from_raw(&spec, [0.35, 11.0].repeat(n), vec![9.5; n], vec![1.0; n]).unwrap();
        let s = simulate_exact(&spec, &b, &mut RngStream::new(11, stream::aux(3))).unwrap();
        let mut acc = RunningMoments::default();
        s.iter().for_each(|v| acc.push(*v));
        assert!((acc.mean() - 9.5).abs() <= 3.0 * acc.std_err());
    }

    #[test]
    fn em_contract_and_degenerate_cases() {
        let spec = bs();
        let mut rng = RngStream::new(0, 0);
        let b = sample_lambda(&spec, &mut rng, 8).unwrap();
        assert!(matches!(euler_maruyama(&spec, &b, 0, &mut rng), Err(DataError::Contract(_))));

        // heat with σ = 0: μ = σ = 0 so the scheme stays at X
        let heat = ProblemSpec::heat_paraboloid(2);
        let b = LambdaBatch::from_raw(&heat, vec![0.0; 8], vec![0.7, 1.2, 1.5, 0.5], vec![1.0, 0.3]).unwrap();
        for m in [1, 5, 40] {
            assert_eq!(euler_maruyama(&heat, &b, m, &mut rng).unwrap(), b.x);
        }
    }

    #[test]
    fn em_is_exact_for_constant_sigma() {
        // increments telescope: S = X + C·Σ ΔB
        let heat = ProblemSpec::heat_paraboloid(3);
        let c: Vec<f64> = (0..9).map(|k| 0.1 * k as f64).collect();
        let x = [0.6, 1.0, 1.4];
        let t = 0.8;
        let m = 16;
        let mut rng = RngStream::new(4, 0);
        let inc: Vec<f64> = (0..m * 3).map(|_| rng.normal() * (t / m as f64).sqrt()).collect();
        let mut out = [0.0; 3];
        em_path(&heat, &c, &x, t, &inc, &mut out);
        let mut b = [0.0; 3];
        for step in inc.chunks_exact(3) {
            for k in 0..3 {
                b[k] += step[k];
            }
        }
        for r in 0..3 {
            let expect = x[r] + (0..3).map(|i| c[r * 3 + i] * b[i]).sum::<f64>();
            assert!((out[r] - expect).abs() < 1e-13);
        }
    }

    #[test]
    fn em_matches_exact_in_distribution_for_heat() {
        let heat = ProblemSpec::heat_paraboloid(2);
        let n = 200_000;
        let gamma = [0.3, 0.5, 0.1, 0.8].repeat(n);
        let b = LambdaBatch::from_raw(&heat, gamma, [1.0, 0.5].repeat(n), vec![1.0; n]).unwrap();
        let em = euler_maruyama(&heat, &b, 7, &mut RngStream::new(1, 0)).unwrap();
        let ex = simulate_exact(&heat, &b, &mut RngStream::new(2, 0)).unwrap();
        for k in 0..2 {
            let (mut a, mut e) = (RunningMoments::default(), RunningMoments::default());
            for i in 0..n {
                a.push(em[i * 2 + k]);
                e.push(ex[i * 2 + k]);
            }
            let se = (a.std_err().powi(2) + e.std_err().powi(2)).sqrt();
            assert!((a.mean() - e.mean()).abs() <= 4.0 * se);
            assert!((a.variance() / e.variance() - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn targets() {
        let spec = ProblemSpec::heat_gaussian(150);
        let mut rng = RngStream::new(0, 1);
        let b = sample_lambda(&spec, &mut rng, 256).unwrap();
        let s = simulate_exact(&spec, &b, &mut rng).unwrap();
        assert!(make_targets(&spec, &b, &s).iter().all(|y| *y > 0.0 && *y <= 1.0));

        let bs = bs();
        let b = LambdaBatch::from_raw(&bs, vec![0.3, 11.0, 0.5, 10.0], vec![9.2, 9.9], vec![0.0, 0.0]).unwrap();
        let s = simulate_exact(&bs, &b, &mut rng).unwrap();
        assert_eq!(make_targets(&bs, &b, &s), vec![11.0 - 9.2, 10.0 - 9.9]);

        let b = sample_lambda(&bs, &mut rng, 4096).unwrap();
        let s = simulate_exact(&bs, &b, &mut rng).unwrap();
        let y = make_targets(&bs, &b, &s);
        for i in 0..b.len() {
            assert!(y[i] >= 0.0 && y[i] <= b.gamma_row(i)[1]);
        }
    }

    #[test]
    fn mc_reference_paraboloid() {
        let heat = ProblemSpec::heat_paraboloid(10);
        let mut c = vec![0.0; 100];
        for i in 0..10 {
            c[i * 11] = 0.5;
        }
        let g = heat.param_point(c).unwrap();
        let est = mc_reference(&heat, &g, &[1.0; 10], 1.0, 100_000, 0, &mut RngStream::new(8, stream::reference(0))).unwrap();
        assert!((est.mean - 12.5).abs() <= 3.0 * est.std_err, "{est:?}");
    }

    #[test]
    fn mc_reference_edge_cases() {
        let spec = bs();
        let g = spec.param_point(vec![0.35, 11.0]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let est = mc_reference(&spec, &g, &[9.5], 0.0, 10, 0, &mut rng).unwrap();
        assert_eq!((est.mean, est.std_err), (1.5, 0.0));
        assert!(matches!(mc_reference(&spec, &g, &[9.5], 0.5, 1, 0, &mut rng), Err(DataError::Contract(_))));
    }

    #[test]
    fn mc_std_err_shrinks_like_inverse_sqrt() {
        let spec = bs();
        let g = spec.param_point(vec![0.35, 11.0]).unwrap();
        let mut ratios = Vec::new();
        for rep in 0..5 {
            let mut rng = RngStream::new(rep, stream::reference(rep));
            let a = mc_reference(&spec, &g, &[9.5], 0.5, 4_000, 0, &mut rng).unwrap();
            let b = mc_reference(&spec, &g, &[9.5], 0.5, 16_000, 0, &mut rng).unwrap();
            ratios.push(b.std_err / a.std_err);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{ratios:?}");
    }

    #[test]
    fn basket_reference_uses_euler_maruyama() {
        let spec = ProblemSpec::basket_put();
        let mut v = vec![0.1; spec.gamma_len()];
        *v.last_mut().unwrap() = 11.0;
        let g = spec.param_point(v).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(mc_reference(&spec, &g, &[9.5; 3], 0.5, 100, 0, &mut rng).is_err());
        let est = mc_reference(&spec, &g, &[9.5; 3], 0.5, 1 << 12, 25, &mut rng).unwrap();
        assert!(est.mean >= 0.0 && est.mean < 11.0 && est.std_err > 0.0);
    }

    #[test]
    fn csv_dump() {
        let spec = bs();
        let b = LambdaBatch::from_raw(&spec, vec![0.3, 11.0], vec![9.5], vec![0.25]).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &b, &[1.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gamma_0,gamma_1,x_0,t,y\n0.3,11,9.5,0.25,1.25\n");
    }
}
