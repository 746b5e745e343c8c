//! Relative L¹ evaluation, Greeks, calibration and uncertainty estimates.

use serde::Serialize;
use thiserror::Error;

use crate::data::{mc_reference, sample_lambda, DataError, LambdaBatch, RngStream, RunningMoments};
use crate::kernel::{KernelError, Mode, Tape, Tensor};
use crate::multilevel::{ModelError, MultilevelNet};
use crate::problems::{Interval, ParamPoint, ProblemError, ProblemKind, ProblemSpec, Role};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{0}")]
    Contract(String),
}

/// Anything that maps predictor points to approximate solution values.
pub trait Surrogate {
    fn predict(&self, spec: &ProblemSpec, batch: &LambdaBatch) -> Result<Vec<f64>, EvalError>;

    /// Value and gradient with respect to the raw network-input coordinates
    /// (free γ, x, t in input order).
    fn value_and_gradient(&self, spec: &ProblemSpec, gamma: &ParamPoint, x: &[f64], t: f64) -> Result<(f64, Vec<f64>), EvalError>;
}

impl Surrogate for MultilevelNet {
    fn predict(&self, _spec: &ProblemSpec, batch: &LambdaBatch) -> Result<Vec<f64>, EvalError> {
        Ok(MultilevelNet::predict(self, &batch.flat)?)
    }

    fn value_and_gradient(&self, spec: &ProblemSpec, gamma: &ParamPoint, x: &[f64], t: f64) -> Result<(f64, Vec<f64>), EvalError> {
        let flat = crate::data::flatten_input(spec, gamma, x, t)?;
        let n = flat.len();
        let mut tape = Tape::new();
        let input = tape.param(Tensor::matrix(1, n, flat)?);
        let rec = self.record(&mut tape, input, Mode::Eval, false)?;
        let out = tape.sum(rec.output);
        let grads = tape.backward(out)?;
        let g = grads.get(input).expect("input gradient").data();
        let scaled = g
            .iter()
            .zip(spec.input_intervals())
            .map(|(d, iv)| d / iv.uniform_std())
            .collect();
        Ok((tape.value(out).data()[0], scaled))
    }
}

/// Φ = scale·ū + offset built on the closed-form solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedForm {
    pub scale: f64,
    pub offset: f64,
}

impl ClosedForm {
    pub fn exact() -> Self {
        Self { scale: 1.0, offset: 0.0 }
    }

    fn value(&self, spec: &ProblemSpec, gamma: &[f64], x: &[f64], t: f64) -> Result<f64, ProblemError> {
        Ok(self.scale * spec.analytic_raw(gamma, x, t)? + self.offset)
    }
}

impl Surrogate for ClosedForm {
    fn predict(&self, spec: &ProblemSpec, batch: &LambdaBatch) -> Result<Vec<f64>, EvalError> {
        (0..batch.len())
            .map(|i| Ok(self.value(spec, batch.gamma_row(i), batch.x_row(i), batch.t[i])?))
            .collect()
    }

    /// Central differences in each raw coordinate, one-sided at t = 0.
    fn value_and_gradient(&self, spec: &ProblemSpec, gamma: &ParamPoint, x: &[f64], t: f64) -> Result<(f64, Vec<f64>), EvalError> {
        let mut coords: Vec<f64> = gamma.values().to_vec();
        let (g, d) = (coords.len(), spec.d);
        coords.extend_from_slice(x);
        coords.push(t);
        let eval = |c: &[f64]| self.value(spec, &c[..g], &c[g..g + d], c[g + d]);
        let value = eval(&coords)?;
        let mut grad = Vec::with_capacity(coords.len());
        for k in 0..coords.len() {
            let h = 1e-6 * coords[k].abs().max(1.0);
            let mut up = coords.clone();
            let mut down = coords.clone();
            up[k] += h;
            if k == g + d && t - h < 0.0 {
                grad.push((eval(&up)? - value) / h);
                continue;
            }
            down[k] -= h;
            grad.push((eval(&up)? - eval(&down)?) / (2.0 * h));
        }
        Ok((value, grad))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub batches: usize,
    pub batch_size: usize,
    /// Monte Carlo samples per reference value (problems without closed form).
    pub mc_samples: usize,
    /// Euler-Maruyama steps for Monte Carlo references.
    pub mc_em_steps: usize,
    /// Keep per-point records in the report.
    pub keep_points: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointRecord {
    pub gamma: Vec<f64>,
    pub x: Vec<f64>,
    pub t: f64,
    pub prediction: f64,
    pub reference: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub l1_error: f64,
    /// Standard error of the mean of the per-point errors.
    pub std_err: f64,
    pub n_samples: usize,
    pub per_batch: Vec<f64>,
    pub reference_mode: ReferenceMode,
    pub points: Vec<PointRecord>,
}

/// Mean of |Φ(λ) − ū(λ)| / (1 + |ū(λ)|) over fresh uniform points.
pub fn l1_relative_error(
    surrogate: &dyn Surrogate,
    spec: &ProblemSpec,
    settings: &EvalSettings,
    rng: &mut RngStream,
) -> Result<EvalReport, EvalError> {
    if settings.batch_size < 2 || settings.batches == 0 {
        return Err(EvalError::Contract(format!(
            "evaluation needs at least one batch of size >= 2 (got {} x {})",
            settings.batches, settings.batch_size
        )));
    }
    let mode = if spec.has_closed_form() {
        ReferenceMode::Analytic
    } else {
        ReferenceMode::MonteCarlo
    };
    let mut all = RunningMoments::default();
    let mut per_batch = Vec::with_capacity(settings.batches);
    let mut points = Vec::new();
    let mut point_index = 0u64;
    for _ in 0..settings.batches {
        let batch = sample_lambda(spec, rng, settings.batch_size)?;
        let pred = surrogate.predict(spec, &batch)?;
        let mut acc = RunningMoments::default();
        for i in 0..batch.len() {
            let (g, x, t) = (batch.gamma_row(i), batch.x_row(i), batch.t[i]);
            let reference = match mode {
                ReferenceMode::Analytic => spec.analytic_raw(g, x, t)?,
                ReferenceMode::MonteCarlo => {
                    let mut mc_rng = rng.substream(point_index);
                    let gamma = spec.param_point_unchecked(g.to_vec());
                    mc_reference(spec, &gamma, x, t, settings.mc_samples, settings.mc_em_steps, &mut mc_rng)?.mean
                }
            };
            point_index += 1;
            let err = (pred[i] - reference).abs() / (1.0 + reference.abs());
            acc.push(err);
            all.push(err);
            if settings.keep_points {
                points.push(PointRecord {
                    gamma: g.to_vec(),
                    x: x.to_vec(),
                    t,
                    prediction: pred[i],
                    reference,
                    error: err,
                });
            }
        }
        per_batch.push(acc.mean());
    }
    Ok(EvalReport {
        l1_error: all.mean(),
        std_err: all.std_err(),
        n_samples: all.count(),
        per_batch,
        reference_mode: mode,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GreeksReport {
    pub value: f64,
    /// ∂Φ/∂x_i.
    pub delta: Vec<f64>,
    /// ∂Φ/∂γ_σ for problems with a scalar volatility.
    pub vega: Option<f64>,
    /// −∂Φ/∂t.
    pub theta: f64,
    /// ∂Φ/∂γ for every free γ coordinate.
    pub gamma: Vec<f64>,
    /// Parameter blocks that are not network inputs; their derivatives are 0.
    pub pinned: Vec<Role>,
}

/// Derivatives of the surrogate with respect to raw (unstandardized) inputs.
pub fn network_greeks(
    surrogate: &dyn Surrogate,
    spec: &ProblemSpec,
    gamma: &ParamPoint,
    x: &[f64],
    t: f64,
) -> Result<GreeksReport, EvalError> {
    let (value, grad) = surrogate.value_and_gradient(spec, gamma, x, t)?;
    let g = spec.gamma_len();
    let d = spec.d;
    let vega = match spec.kind {
        ProblemKind::BlackScholes | ProblemKind::HeatGaussian => Some(grad[0]),
        _ => None,
    };
    Ok(GreeksReport {
        value,
        delta: grad[g..g + d].to_vec(),
        vega,
        theta: -grad[g + d],
        gamma: grad[..g].to_vec(),
        pinned: spec.blocks.iter().filter(|b| b.is_pinned()).map(|b| b.role).collect(),
    })
}

/// An observed solution value u at (x, t).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub x: Vec<f64>,
    pub t: f64,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub steps: usize,
    /// Step size in standardized γ coordinates.
    pub lr: f64,
    /// Which free γ coordinates are optimized; `None` means all.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub gamma: ParamPoint,
    /// Σ (Φ(γ, x_i, t_i) − u_i)² at the returned γ.
    pub loss: f64,
    pub iterations: usize,
}

fn calibration_loss(
    surrogate: &dyn Surrogate,
    spec: &ProblemSpec,
    gamma: &ParamPoint,
    data: &[Observation],
    g: usize,
) -> Result<(f64, Vec<f64>), EvalError> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; g];
    for obs in data {
        let (v, dv) = surrogate.value_and_gradient(spec, gamma, &obs.x, obs.t)?;
        let r = v - obs.u;
        loss += r * r;
        for (a, b) in grad.iter_mut().zip(&dv[..g]) {
            *a += 2.0 * r * b;
        }
    }
    Ok((loss, grad))
}

/// Projected gradient descent on γ through a frozen surrogate. Iterates are
/// kept inside D after every step; the best iterate is returned.
pub fn calibrate(
    surrogate: &dyn Surrogate,
    spec: &ProblemSpec,
    data: &[Observation],
    init: &ParamPoint,
    options: &CalibrationOptions,
) -> Result<Calibration, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Contract("calibration needs at least one observation".into()));
    }
    let intervals: Vec<Interval> = spec.gamma_intervals();
    let g = intervals.len();
    let mask = options.mask.clone().unwrap_or_else(|| vec![true; g]);
    if mask.len() != g {
        return Err(EvalError::Contract(format!("mask has {} entries, gamma has {g}", mask.len())));
    }
    let mut gamma = spec.param_point(init.values().to_vec())?;
    let (mut loss, mut grad) = calibration_loss(surrogate, spec, &gamma, data, g)?;
    let mut best = (loss, gamma.clone());
    for _ in 0..options.steps {
        for k in 0..g {
            if mask[k] {
                let iv = intervals[k];
                // gradient step in z = (γ − mid)/std, i.e. Δγ = −lr·std²·∂L/∂γ
                let step = options.lr * iv.uniform_std().powi(2) * grad[k];
                gamma.values_mut()[k] = iv.clamp(gamma.values()[k] - step);
            }
        }
        (loss, grad) = calibration_loss(surrogate, spec, &gamma, data, g)?;
        if loss < best.0 {
            best = (loss, gamma.clone());
        }
    }
    Ok(Calibration {
        gamma: best.1,
        loss: best.0,
        iterations: options.steps,
    })
}

/// Unbiased sample variance of Φ(ξ_i, x, t) over the given parameter draws.
pub fn uncertainty_variance(
    surrogate: &dyn Surrogate,
    spec: &ProblemSpec,
    xi: &[ParamPoint],
    x: &[f64],
    t: f64,
) -> Result<f64, EvalError> {
    if xi.len() < 2 {
        return Err(EvalError::Contract(format!("variance needs at least 2 samples, got {}", xi.len())));
    }
    let gamma: Vec<f64> = xi.iter().flat_map(|p| p.values().iter().copied()).collect();
    let batch = LambdaBatch::from_raw(spec, gamma, x.repeat(xi.len()), vec![t; xi.len()])?;
    let mut acc = RunningMoments::default();
    surrogate.predict(spec, &batch)?.into_iter().for_each(|v| acc.push(v));
    Ok(acc.variance())
}
