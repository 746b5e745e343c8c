//! AdamW, the step-decay schedule and the ERM loop on a never-repeating data stream.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_targets, sample_lambda, simulate, stream, DataError, RngStream};
use crate::evaluation::{l1_relative_error, EvalError, EvalSettings};
use crate::kernel::{KernelError, Mode, Tape, Tensor};
use crate::multilevel::{Architecture, ModelError, MultilevelConfig, MultilevelNet, NormKind};
use crate::problems::{ProblemKind, ProblemSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch in optimizer: parameter {index} has {param} entries, gradient has {grad}")]
    Shape { index: usize, param: usize, grad: usize },
    #[error("training diverged at step {step}: loss {loss}, lr {lr}, gradient norm {grad_norm}, max |θ| {max_param}")]
    Divergence {
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
        max_param: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(rename = "L")]
    pub levels: usize,
    pub q: usize,
    pub chi: u8,
    pub norm: NormKind,
    pub architecture: Architecture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub init_lr: f64,
    pub min_lr: f64,
    pub decay: f64,
    pub patience: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: u64,
    /// Euler-Maruyama steps for the training targets; 0 uses the exact sampler.
    pub em_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    /// Evaluate every this many steps; the final step is always evaluated.
    pub eval_every: u64,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub mc_samples: usize,
    pub mc_em_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    /// Spatial dimension of the heat problems; `None` keeps the default.
    pub dimension: Option<usize>,
    pub seed: u64,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub validation: ValidationSection,
}

impl TrainConfig {
    /// The full-scale training setup of the benchmark.
    pub fn paper(problem: ProblemKind) -> Self {
        let (q, batch, init_lr, decay, steps) = match problem {
            ProblemKind::BlackScholes => (5, 1 << 16, 1e-2, 0.25, 24_000),
            ProblemKind::BasketPut => (5, 1 << 17, 1e-3, 0.4, 28_000),
            ProblemKind::HeatParaboloid | ProblemKind::HeatGaussian => (4, 1 << 17, 1e-3, 0.4, 28_000),
        };
        let basket = problem == ProblemKind::BasketPut;
        Self {
            problem,
            dimension: None,
            seed: 0,
            network: NetworkSection {
                levels: 4,
                q,
                chi: 1,
                norm: NormKind::Batch,
                architecture: Architecture::Multilevel,
            },
            training: TrainingSection {
                batch_size: batch,
                init_lr,
                min_lr: 1e-8,
                decay,
                patience: 4000,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                steps,
                em_steps: if basket { 25 } else { 0 },
            },
            validation: ValidationSection {
                eval_every: 4000,
                eval_batches: if basket { 1 } else { 150 },
                eval_batch_size: batch,
                mc_samples: if basket { 1 << 20 } else { 0 },
                mc_em_steps: if basket { 25 } else { 0 },
            },
        }
    }

    /// Scaled-down profile for a single CPU core: batch 4096, 4000 steps,
    /// a small evaluation set, schedule otherwise unchanged.
    pub fn desk(problem: ProblemKind) -> Self {
        let mut c = Self::paper(problem);
        c.training.batch_size = 4096;
        c.training.steps = 4000;
        c.validation.eval_every = 1000;
        c.validation.eval_batches = 1;
        if problem == ProblemKind::BasketPut {
            c.validation.eval_batch_size = 256;
            c.validation.mc_samples = 1 << 14;
        } else {
            c.validation.eval_batch_size = 8192;
        }
        c
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        match (self.problem, self.dimension) {
            (ProblemKind::HeatParaboloid, Some(d)) => ProblemSpec::heat_paraboloid(d),
            (ProblemKind::HeatGaussian, Some(d)) => ProblemSpec::heat_gaussian(d),
            (kind, _) => ProblemSpec::new(kind),
        }
    }

    pub fn net_config(&self) -> MultilevelConfig {
        let n = &self.network;
        MultilevelConfig::new(self.problem_spec().dim_in(), n.levels, n.q, n.chi, n.norm)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let v = &self.validation;
        EvalSettings {
            batches: v.eval_batches,
            batch_size: v.eval_batch_size,
            mc_samples: v.mc_samples,
            mc_em_steps: v.mc_em_steps,
            keep_points: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.training;
        let err = |m: String| Err(TrainError::Config(m));
        if !(t.decay > 0.0 && t.decay < 1.0) {
            return err(format!("decay factor must lie in (0, 1), got {}", t.decay));
        }
        if !(t.init_lr > 0.0) || !(t.min_lr > 0.0) || t.min_lr > t.init_lr {
            return err(format!("need 0 < min_lr <= init_lr, got min_lr {} and init_lr {}", t.min_lr, t.init_lr));
        }
        if t.patience == 0 {
            return err("patience must be positive".into());
        }
        if !(t.adam_eps > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return err("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(t.weight_decay >= 0.0) {
            return err(format!("weight decay must be non-negative, got {}", t.weight_decay));
        }
        if t.batch_size < 1 || (self.network.norm == NormKind::Batch && t.batch_size < 2) {
            return err(format!("batch size {} is too small", t.batch_size));
        }
        if matches!(self.dimension, Some(0)) {
            return err("dimension must be positive".into());
        }
        if self.dimension.is_some() && !matches!(self.problem, ProblemKind::HeatParaboloid | ProblemKind::HeatGaussian) {
            return err(format!("{} has a fixed dimension", self.problem));
        }
        if self.problem == ProblemKind::BasketPut && t.em_steps == 0 {
            return err("basket_put has no exact sampler; em_steps must be positive".into());
        }
        let v = &self.validation;
        if v.eval_batches == 0 || v.eval_batch_size < 2 {
            return err("evaluation needs at least one batch of size >= 2".into());
        }
        if !self.problem_spec().has_closed_form() && (v.mc_samples < 2 || v.mc_em_steps == 0) {
            return err("Monte Carlo references need mc_samples >= 2 and mc_em_steps >= 1".into());
        }
        self.net_config().validate()?;
        Ok(())
    }

    /// Departures from the hyperparameter search ranges of the benchmark.
    /// These are advisory only.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let (n, t) = (&self.network, &self.training);
        if !(3..=4).contains(&n.levels) || !(4..=6).contains(&n.q) {
            w.push(format!("(L, q) = ({}, {}) is outside the searched range {{3,4}} x {{4,5,6}}", n.levels, n.q));
        }
        if ![16384, 32768, 65536, 131072].contains(&t.batch_size) {
            w.push(format!("batch size {} is not one of 16384, 32768, 65536, 131072", t.batch_size));
        }
        if !(1e-5..=1e-1).contains(&t.init_lr) {
            w.push(format!("initial lr {} is outside [1e-5, 1e-1]", t.init_lr));
        }
        if !(0.2..=0.6).contains(&t.decay) {
            w.push(format!("decay factor {} is outside [0.2, 0.6]", t.decay));
        }
        w
    }
}

/// lr = max(min_lr, init_lr · decay^⌊step / patience⌋).
pub fn lr_schedule(step: u64, training: &TrainingSection) -> f64 {
    let k = (step / training.patience).min(i32::MAX as u64) as i32;
    (training.init_lr * training.decay.powi(k)).max(training.min_lr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(training: &TrainingSection, lr: f64) -> Self {
        Self {
            lr,
            weight_decay: training.weight_decay,
            beta1: training.beta1,
            beta2: training.beta2,
            eps: training.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptState, hp: &AdamW) -> Result<(), TrainError> {
    if !(hp.lr > 0.0 && hp.eps > 0.0) {
        return Err(TrainError::Config(format!("lr and eps must be positive, got {} and {}", hp.lr, hp.eps)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape {
            index: params.len().min(grads.len()),
            param: params.len(),
            grad: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(TrainError::Shape {
                index: i,
                param: p.len(),
                grad: g.len(),
            });
        }
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((th, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mk = hp.beta1 * *mk + (1.0 - hp.beta1) * gk;
            *vk = hp.beta2 * *vk + (1.0 - hp.beta2) * gk * gk;
            let update = (*mk / bc1) / ((*vk / bc2).sqrt() + hp.eps);
            *th -= hp.lr * update + hp.lr * hp.weight_decay * *th;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub time_s: f64,
    pub train_mse: f64,
    pub lr: f64,
    pub l1_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "step,time_s,train_mse,lr,l1_error";

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        assert!(
            self.rows.last().map_or(true, |r| r.step < row.step),
            "metrics steps must be strictly increasing"
        );
        self.rows.push(row);
    }

    /// Rows with an l1 error, as (step, time, error).
    pub fn evaluations(&self) -> impl Iterator<Item = (u64, f64, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.l1_error.map(|e| (r.step, r.time_s, e)))
    }

    pub fn final_l1(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.l1_error)
    }

    pub fn to_csv(&self, with_time: bool) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let time = if with_time { format!("{}", r.time_s) } else { String::new() };
            let l1 = r.l1_error.map(|e| format!("{e:e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{:e},{:e},{}", r.step, time, r.train_mse, r.lr, l1);
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_csv(true).as_bytes())
    }
}

/// A range of Philox counters: blocks `0..blocks` of `stream` under `key`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CounterSpan {
    pub key: u64,
    pub stream: u64,
    pub blocks: u64,
}

impl CounterSpan {
    fn of(rng: &RngStream) -> Self {
        Self {
            key: rng.seed(),
            stream: rng.stream_id(),
            blocks: rng.blocks_used(),
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub spec: ProblemSpec,
    pub net: MultilevelNet,
    pub opt: OptState,
    step: u64,
    elapsed: f64,
    counters: Vec<CounterSpan>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let spec = config.problem_spec();
        let net = MultilevelNet::build(config.net_config(), config.network.architecture, config.seed)?;
        let opt = OptState::new(net.params());
        Ok(Self {
            config,
            spec,
            net,
            opt,
            step: 0,
            elapsed: 0.0,
            counters: Vec::new(),
        })
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Seconds spent in training steps; evaluation is excluded.
    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    /// Counters consumed by every training batch so far, one span per step.
    pub fn counter_log(&self) -> &[CounterSpan] {
        &self.counters
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.step, &self.config.training)
    }

    /// One AdamW step on the given batch in train mode; returns the MSE
    /// before the update.
    pub fn fit_batch(&mut self, x: &Tensor, y: &[f64]) -> Result<f64, TrainError> {
        let lr = self.current_lr();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let rec = self.net.record(&mut tape, input, Mode::Train, true)?;
        let loss_var = tape.mse(rec.output, y)?;
        let loss = tape.value(loss_var).data()[0];
        let mut grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor> = rec.params.iter().map(|v| grads.take(*v).expect("parameter gradient")).collect();
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            let grad_norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            let max_param = self.net.params().iter().flat_map(|p| p.data()).fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(TrainError::Divergence {
                step: self.step + 1,
                loss,
                lr,
                grad_norm,
                max_param,
            });
        }
        let hp = AdamW::from_config(&self.config.training, lr);
        adamw_step(self.net.params_mut(), &grads, &mut self.opt, &hp)?;
        self.net.apply_batch_stats(&rec.batch_stats);
        self.step += 1;
        Ok(loss)
    }

    /// Draws the next batch from its own stream and takes one step.
    pub fn train_step(&mut self) -> Result<MetricsRow, TrainError> {
        let start = Instant::now();
        let lr = self.current_lr();
        let mut rng = RngStream::new(self.config.seed, stream::train(self.step));
        let batch = sample_lambda(&self.spec, &mut rng, self.config.training.batch_size)?;
        let states = simulate(&self.spec, &batch, self.config.training.em_steps, &mut rng)?;
        let y = make_targets(&self.spec, &batch, &states);
        self.counters.push(CounterSpan::of(&rng));
        let loss = self.fit_batch(&batch.flat, &y)?;
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(MetricsRow {
            step: self.step,
            time_s: self.elapsed,
            train_mse: loss,
            lr,
            l1_error: None,
        })
    }

    /// Relative L¹ error on the evaluation stream of the current step.
    pub fn evaluate(&self) -> Result<f64, TrainError> {
        let mut rng = RngStream::new(self.config.seed, stream::eval(self.step));
        let report = l1_relative_error(&self.net, &self.spec, &self.config.eval_settings(), &mut rng)?;
        Ok(report.l1_error)
    }

    fn is_eval_step(&self) -> bool {
        let every = self.config.validation.eval_every;
        self.step == self.config.training.steps || (every > 0 && self.step % every == 0)
    }

    /// Runs the remaining steps, calling `observe` after every row.
    pub fn run(&mut self, mut observe: impl FnMut(&MetricsRow)) -> Result<MetricsLog, TrainError> {
        let mut log = MetricsLog::default();
        while self.step < self.config.training.steps {
            let mut row = self.train_step()?;
            if self.is_eval_step() {
                row.l1_error = Some(self.evaluate()?);
            }
            observe(&row);
            log.push(row);
        }
        Ok(log)
    }
}

/// Trains a fresh network for `config`.
pub fn train(config: &TrainConfig) -> Result<(MultilevelNet, MetricsLog), TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run(|_| {})?;
    Ok((trainer.net, log))
}
