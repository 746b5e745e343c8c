//! The four benchmark families of parametric Kolmogorov PDEs.
//!
//! A parameter tuple γ = (γ_σ, γ_μ, γ_φ) is laid out as a list of
//! [`ParamBlock`]s. Blocks with a zero-width interval are pinned: they are
//! constants of the problem, never sampled and never fed to the network.
//! A [`ParamPoint`] holds the values of the free blocks only, concatenated in
//! block order.

mod black_scholes;

pub use black_scholes::{analytic_greeks_bs, bs_put, expiry_delta_bs, normal_cdf, normal_pdf, BsGreeks};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("unknown problem `{0}` (expected black_scholes, basket_put, heat_paraboloid or heat_gaussian)")]
    UnknownProblem(String),
    #[error("{0} has no closed-form solution")]
    NoClosedForm(ProblemKind),
    #[error("{0} has no exact SDE sampler")]
    NoExactSampler(ProblemKind),
    #[error("{0}")]
    Boundary(String),
    #[error("{what} = {value} lies outside [{lo}, {hi}]")]
    OutOfDomain { what: String, value: f64, lo: f64, hi: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    BlackScholes,
    BasketPut,
    HeatParaboloid,
    HeatGaussian,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [
        ProblemKind::BlackScholes,
        ProblemKind::BasketPut,
        ProblemKind::HeatParaboloid,
        ProblemKind::HeatGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::BlackScholes => "black_scholes",
            ProblemKind::BasketPut => "basket_put",
            ProblemKind::HeatParaboloid => "heat_paraboloid",
            ProblemKind::HeatGaussian => "heat_gaussian",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = ProblemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ProblemError::UnknownProblem(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn is_pinned(&self) -> bool {
        self.hi == self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// Standard deviation of the uniform law on the interval.
    pub fn uniform_std(&self) -> f64 {
        self.width() / 12f64.sqrt()
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Which part of the affine coefficient maps a block parametrizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// γ_{σ,1..d}: d matrices of size d×d; column i of σ(x) gets γ_{σ,i}·x.
    SigmaLinear,
    /// γ_{σ,d+1}: constant d×d matrix added to σ(x).
    SigmaConst,
    /// Scalar multiple of the identity used as constant σ.
    SigmaScaledIdentity,
    /// γ_{μ,1}: d×d matrix, μ(x) gets γ_{μ,1}·x.
    MuLinear,
    /// γ_{μ,2}: constant drift vector.
    MuConst,
    /// Payoff parameter (strike).
    Phi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub role: Role,
    pub len: usize,
    pub interval: Interval,
}

impl ParamBlock {
    fn new(role: Role, len: usize, interval: Interval) -> Self {
        Self { role, len, interval }
    }

    pub fn is_pinned(&self) -> bool {
        self.interval.is_pinned()
    }
}

/// Values of the free (non-pinned) coordinates of γ in block order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPoint {
    values: Vec<f64>,
}

impl ParamPoint {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub d: usize,
    pub blocks: Vec<ParamBlock>,
    pub space: Interval,
    pub horizon: f64,
}

/// A view of one block's values for a given parameter point.
#[derive(Clone, Copy, Debug)]
enum BlockValues<'a> {
    Free(&'a [f64]),
    Pinned(f64),
}

impl BlockValues<'_> {
    fn get(&self, i: usize) -> f64 {
        match self {
            BlockValues::Free(v) => v[i],
            BlockValues::Pinned(c) => *c,
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, BlockValues::Pinned(c) if *c == 0.0)
    }
}

pub fn build_problem(name: &str) -> Result<ProblemSpec, ProblemError> {
    Ok(ProblemSpec::new(name.parse()?))
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::BlackScholes => Self::black_scholes(),
            ProblemKind::BasketPut => Self::basket_put(),
            ProblemKind::HeatParaboloid => Self::heat_paraboloid(10),
            ProblemKind::HeatGaussian => Self::heat_gaussian(150),
        }
    }

    pub fn black_scholes() -> Self {
        let zero = Interval::point(0.0);
        Self {
            kind: ProblemKind::BlackScholes,
            d: 1,
            blocks: vec![
                ParamBlock::new(Role::SigmaLinear, 1, Interval::new(0.1, 0.6)),
                ParamBlock::new(Role::SigmaConst, 1, zero),
                ParamBlock::new(Role::MuLinear, 1, zero),
                ParamBlock::new(Role::MuConst, 1, zero),
                ParamBlock::new(Role::Phi, 1, Interval::new(10.0, 12.0)),
            ],
            space: Interval::new(9.0, 10.0),
            horizon: 1.0,
        }
    }

    pub fn basket_put() -> Self {
        let d = 3;
        let box_ = Interval::new(0.1, 0.6);
        Self {
            kind: ProblemKind::BasketPut,
            d,
            blocks: vec![
                ParamBlock::new(Role::SigmaLinear, d * d * d, box_),
                ParamBlock::new(Role::SigmaConst, d * d, box_),
                ParamBlock::new(Role::MuLinear, d * d, box_),
                ParamBlock::new(Role::MuConst, d, box_),
                ParamBlock::new(Role::Phi, 1, Interval::new(10.0, 12.0)),
            ],
            space: Interval::new(9.0, 10.0),
            horizon: 1.0,
        }
    }

    /// Heat equation with paraboloid initial condition in dimension `d`.
    pub fn heat_paraboloid(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        let zero = Interval::point(0.0);
        Self {
            kind: ProblemKind::HeatParaboloid,
            d,
            blocks: vec![
                ParamBlock::new(Role::SigmaLinear, d * d * d, zero),
                ParamBlock::new(Role::SigmaConst, d * d, Interval::new(0.0, 1.0)),
                ParamBlock::new(Role::MuLinear, d * d, zero),
                ParamBlock::new(Role::MuConst, d, zero),
            ],
            space: Interval::new(0.5, 1.5),
            horizon: 1.0,
        }
    }

    pub fn heat_gaussian(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        let zero = Interval::point(0.0);
        Self {
            kind: ProblemKind::HeatGaussian,
            d,
            blocks: vec![
                ParamBlock::new(Role::SigmaLinear, d * d * d, zero),
                ParamBlock::new(Role::SigmaScaledIdentity, 1, Interval::new(0.0, 0.1)),
                ParamBlock::new(Role::MuLinear, d * d, zero),
                ParamBlock::new(Role::MuConst, d, zero),
            ],
            space: Interval::new(-0.1, 0.1),
            horizon: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Number of free γ coordinates.
    pub fn gamma_len(&self) -> usize {
        self.blocks.iter().filter(|b| !b.is_pinned()).map(|b| b.len).sum()
    }

    /// Interval of every free γ coordinate, in order.
    pub fn gamma_intervals(&self) -> Vec<Interval> {
        self.blocks
            .iter()
            .filter(|b| !b.is_pinned())
            .flat_map(|b| std::iter::repeat(b.interval).take(b.len))
            .collect()
    }

    pub fn time_interval(&self) -> Interval {
        Interval::new(0.0, self.horizon)
    }

    /// Interval of every network input coordinate, zero-width ones dropped.
    pub fn input_intervals(&self) -> Vec<Interval> {
        let mut v = self.gamma_intervals();
        if !self.space.is_pinned() {
            v.extend(std::iter::repeat(self.space).take(self.d));
        }
        let time = self.time_interval();
        if !time.is_pinned() {
            v.push(time);
        }
        v
    }

    pub fn dim_in(&self) -> usize {
        self.input_intervals().len()
    }

    pub fn has_exact_sde(&self) -> bool {
        self.kind != ProblemKind::BasketPut
    }

    pub fn has_closed_form(&self) -> bool {
        self.kind != ProblemKind::BasketPut
    }

    /// Offset of block `idx` inside a [`ParamPoint`] (pinned blocks have none).
    fn block_offset(&self, idx: usize) -> Option<usize> {
        if self.blocks[idx].is_pinned() {
            return None;
        }
        Some(self.blocks[..idx].iter().filter(|b| !b.is_pinned()).map(|b| b.len).sum())
    }

    fn values_of<'a>(&self, gamma: &'a [f64], role: Role) -> Option<BlockValues<'a>> {
        let idx = self.blocks.iter().position(|b| b.role == role)?;
        let block = &self.blocks[idx];
        Some(match self.block_offset(idx) {
            Some(off) => BlockValues::Free(&gamma[off..off + block.len]),
            None => BlockValues::Pinned(block.interval.lo),
        })
    }

    /// Free values of the block with `role`, if it is present and free.
    pub fn block<'a>(&self, point: &'a ParamPoint, role: Role) -> Option<&'a [f64]> {
        match self.values_of(&point.values, role)? {
            BlockValues::Free(v) => Some(v),
            BlockValues::Pinned(_) => None,
        }
    }

    pub fn param_point(&self, values: Vec<f64>) -> Result<ParamPoint, ProblemError> {
        if values.len() != self.gamma_len() {
            return Err(ProblemError::Length {
                what: "gamma",
                expected: self.gamma_len(),
                got: values.len(),
            });
        }
        for (v, iv) in values.iter().zip(self.gamma_intervals()) {
            if !iv.contains(*v) {
                return Err(ProblemError::OutOfDomain {
                    what: "gamma".into(),
                    value: *v,
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        Ok(ParamPoint { values })
    }

    /// Parameter point without the domain check, for callers that already
    /// validated or deliberately probe outside D (finite differences).
    pub fn param_point_unchecked(&self, values: Vec<f64>) -> ParamPoint {
        assert_eq!(values.len(), self.gamma_len(), "gamma length");
        ParamPoint { values }
    }

    /// Evaluates μ_γ(x) and σ_γ(x) (row-major d×d).
    pub fn coefficients(&self, gamma: &ParamPoint, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let mut mu = vec![0.0; d];
        self.drift(&gamma.values, x, &mut mu);
        let mut sigma = vec![0.0; d * d];
        if let Some(lin) = self.values_of(&gamma.values, Role::SigmaLinear).filter(|b| !b.is_zero()) {
            for i in 0..d {
                for r in 0..d {
                    sigma[r * d + i] += (0..d).map(|c| lin.get(i * d * d + r * d + c) * x[c]).sum::<f64>();
                }
            }
        }
        if let Some(c) = self.values_of(&gamma.values, Role::SigmaConst).filter(|b| !b.is_zero()) {
            for (k, s) in sigma.iter_mut().enumerate() {
                *s += c.get(k);
            }
        }
        if let Some(s) = self.values_of(&gamma.values, Role::SigmaScaledIdentity) {
            for i in 0..d {
                sigma[i * d + i] += s.get(0);
            }
        }
        (mu, sigma)
    }

    /// Writes μ_γ(x) into `out`.
    pub(crate) fn drift(&self, gamma: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.d;
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(a) = self.values_of(gamma, Role::MuLinear).filter(|b| !b.is_zero()) {
            for r in 0..d {
                out[r] += (0..d).map(|c| a.get(r * d + c) * x[c]).sum::<f64>();
            }
        }
        if let Some(b) = self.values_of(gamma, Role::MuConst).filter(|b| !b.is_zero()) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += b.get(r);
            }
        }
    }

    /// Adds σ_γ(x)·db to `out` without forming σ.
    pub(crate) fn diffuse(&self, gamma: &[f64], x: &[f64], db: &[f64], out: &mut [f64]) {
        let d = self.d;
        if let Some(lin) = self.values_of(gamma, Role::SigmaLinear).filter(|b| !b.is_zero()) {
            for (i, &dbi) in db.iter().enumerate() {
                for (r, o) in out.iter_mut().enumerate() {
                    let base = i * d * d + r * d;
                    *o += dbi * (0..d).map(|c| lin.get(base + c) * x[c]).sum::<f64>();
                }
            }
        }
        if let Some(c) = self.values_of(gamma, Role::SigmaConst).filter(|b| !b.is_zero()) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += (0..d).map(|i| c.get(r * d + i) * db[i]).sum::<f64>();
            }
        }
        if let Some(s) = self.values_of(gamma, Role::SigmaScaledIdentity) {
            let s = s.get(0);
            for (o, b) in out.iter_mut().zip(db) {
                *o += s * b;
            }
        }
    }

    /// True when σ does not depend on x and μ vanishes, so Euler-Maruyama is exact.
    pub fn is_additive(&self) -> bool {
        let zero = |role| {
            self.blocks
                .iter()
                .find(|b| b.role == role)
                .map_or(true, |b| b.is_pinned() && b.interval.lo == 0.0)
        };
        zero(Role::SigmaLinear) && zero(Role::MuLinear) && zero(Role::MuConst)
    }

    pub fn strike(&self, gamma: &ParamPoint) -> Option<f64> {
        self.values_of(&gamma.values, Role::Phi).map(|v| v.get(0))
    }

    /// Scalar volatility of the Black-Scholes and heat Gaussian problems.
    pub fn scalar_sigma(&self, gamma: &ParamPoint) -> Option<f64> {
        match self.kind {
            ProblemKind::BlackScholes => self.values_of(&gamma.values, Role::SigmaLinear).map(|v| v.get(0)),
            ProblemKind::HeatGaussian => self.values_of(&gamma.values, Role::SigmaScaledIdentity).map(|v| v.get(0)),
            _ => None,
        }
    }

    pub(crate) fn initial_condition_raw(&self, gamma: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            ProblemKind::BlackScholes => {
                let k = self.values_of(gamma, Role::Phi).unwrap().get(0);
                (k - x[0]).max(0.0)
            }
            ProblemKind::BasketPut => {
                let k = self.values_of(gamma, Role::Phi).unwrap().get(0);
                (k - x.iter().sum::<f64>() / x.len() as f64).max(0.0)
            }
            ProblemKind::HeatParaboloid => x.iter().map(|v| v * v).sum(),
            ProblemKind::HeatGaussian => (-x.iter().map(|v| v * v).sum::<f64>()).exp(),
        }
    }

    /// φ_γ(x).
    pub fn initial_condition(&self, gamma: &ParamPoint, x: &[f64]) -> f64 {
        self.initial_condition_raw(&gamma.values, x)
    }

    pub(crate) fn analytic_raw(&self, gamma: &[f64], x: &[f64], t: f64) -> Result<f64, ProblemError> {
        if !self.has_closed_form() {
            return Err(ProblemError::NoClosedForm(self.kind));
        }
        if t == 0.0 {
            return Ok(self.initial_condition_raw(gamma, x));
        }
        Ok(match self.kind {
            ProblemKind::BlackScholes => {
                let s = self.values_of(gamma, Role::SigmaLinear).unwrap().get(0);
                let k = self.values_of(gamma, Role::Phi).unwrap().get(0);
                bs_put(s, k, x[0], t)
            }
            ProblemKind::HeatParaboloid => {
                let c = self.values_of(gamma, Role::SigmaConst).unwrap();
                let trace: f64 = (0..self.d * self.d).map(|k| c.get(k).powi(2)).sum();
                x.iter().map(|v| v * v).sum::<f64>() + t * trace
            }
            ProblemKind::HeatGaussian => {
                let s = self.values_of(gamma, Role::SigmaScaledIdentity).unwrap().get(0);
                let a = 1.0 + 2.0 * t * s * s;
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                a.powf(-(self.d as f64) / 2.0) * (-norm2 / a).exp()
            }
            ProblemKind::BasketPut => unreachable!(),
        })
    }

    /// ū(γ, x, t); at t = 0 this is φ_γ(x).
    pub fn analytic_solution(&self, gamma: &ParamPoint, x: &[f64], t: f64) -> Result<f64, ProblemError> {
        self.analytic_raw(&gamma.values, x, t)
    }
}
