//! The Multilevel network and its feed-forward ablation.
//!
//! Level l has 2^l blocks. Block i maps the previous block output, plus the
//! residual Φ_{l+1}^{2i−2} from the next deeper level when χ = 1, through
//! Norm, ReLU and a linear map; the last map of each level is affine and
//! produces a scalar. The network output is the sum of all level outputs.
//! Residuals only enter levels 1..L−2.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stream, RngStream};
use crate::kernel::{BatchStats, KernelError, Mode, RunningStats, Tape, Tensor, Var, NORM_EPS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input has {got} columns, network expects {expected}")]
    Width { expected: usize, got: usize },
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint is malformed: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity: declared {declared} parameters, found {actual}")]
    Integrity { declared: usize, actual: usize },
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    None,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
            NormKind::None => "none",
        })
    }
}

impl FromStr for NormKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            "none" => Ok(NormKind::None),
            other => Err(ModelError::Config(format!("unknown norm `{other}` (batch, layer or none)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Multilevel,
    FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelConfig {
    pub p: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    pub q: usize,
    pub chi: u8,
    pub norm: NormKind,
}

impl MultilevelConfig {
    pub fn new(p: usize, levels: usize, q: usize, chi: u8, norm: NormKind) -> Self {
        Self { p, levels, q, chi, norm }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.p == 0 || self.levels == 0 || self.q == 0 {
            return Err(ModelError::Config(format!(
                "p, L and q must be at least 1 (got p={}, L={}, q={})",
                self.p, self.levels, self.q
            )));
        }
        if self.chi > 1 {
            return Err(ModelError::Config(format!("chi must be 0 or 1, got {}", self.chi)));
        }
        if self.levels > 12 {
            return Err(ModelError::Config(format!("L = {} would allocate 2^L blocks per level", self.levels)));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.q * self.p
    }

    /// Closed-form number of trainable parameters.
    pub fn expected_params(&self, arch: Architecture) -> usize {
        let (p, w) = (self.p, self.width());
        let level = |l: usize| p * w + ((1usize << l) - 1) * w * w + w + 1;
        let norm = |sites: usize| if self.norm == NormKind::None { 0 } else { 2 * w * sites };
        match arch {
            Architecture::Multilevel => {
                (0..self.levels).map(level).sum::<usize>() + norm((1usize << self.levels) - 1)
            }
            Architecture::FeedForward => level(self.levels) + norm(1usize << self.levels),
        }
    }
}

#[derive(Clone, Debug)]
struct NormSite {
    scale: usize,
    shift: usize,
    stats: Option<usize>,
}

#[derive(Clone, Debug)]
struct Level {
    index: usize,
    /// Maps A^0 .. A^{2^l}; the last one is the exit map.
    maps: Vec<usize>,
    exit_bias: usize,
    /// Norm^1 .. Norm^{2^l}, empty without normalization.
    norms: Vec<NormSite>,
}

impl Level {
    fn blocks(&self) -> usize {
        self.maps.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct MultilevelNet {
    config: MultilevelConfig,
    architecture: Architecture,
    names: Vec<String>,
    params: Vec<Tensor>,
    levels: Vec<Level>,
    stats_names: Vec<String>,
    running: Vec<RunningStats>,
}

/// Result of recording a forward pass on a tape.
pub struct Recording {
    pub output: Var,
    /// One variable per parameter tensor, in canonical order.
    pub params: Vec<Var>,
    /// Batch statistics of every batch-norm site in train mode.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

pub struct MseGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Smallest |input| over all relu units of the pass.
    pub min_relu_margin: f64,
}

const PREDICT_CHUNK: usize = 8192;

impl MultilevelNet {
    fn allocate(config: MultilevelConfig, architecture: Architecture) -> Result<Self, ModelError> {
        config.validate()?;
        let mut net = Self {
            config,
            architecture,
            names: Vec::new(),
            params: Vec::new(),
            levels: Vec::new(),
            stats_names: Vec::new(),
            running: Vec::new(),
        };
        let level_ids: Vec<usize> = match architecture {
            Architecture::Multilevel => (0..config.levels).collect(),
            Architecture::FeedForward => vec![config.levels],
        };
        let (p, w) = (config.p, config.width());
        for l in level_ids {
            let blocks = 1usize << l;
            let mut maps = vec![net.push(format!("level{l}.A0.weight"), &[p, w])];
            let mut norms = Vec::new();
            let mut exit_bias = 0;
            for i in 1..=blocks {
                if config.norm != NormKind::None {
                    let scale = net.push(format!("level{l}.norm{i}.scale"), &[w]);
                    let shift = net.push(format!("level{l}.norm{i}.shift"), &[w]);
                    let stats = (config.norm == NormKind::Batch).then(|| {
                        net.stats_names.push(format!("level{l}.norm{i}"));
                        net.running.push(RunningStats::new(w));
                        net.running.len() - 1
                    });
                    norms.push(NormSite { scale, shift, stats });
                }
                if i < blocks {
                    maps.push(net.push(format!("level{l}.A{i}.weight"), &[w, w]));
                } else {
                    maps.push(net.push(format!("level{l}.A{i}.weight"), &[w, 1]));
                    exit_bias = net.push(format!("level{l}.A{i}.bias"), &[1]);
                }
            }
            net.levels.push(Level {
                index: l,
                maps,
                exit_bias,
                norms,
            });
        }
        Ok(net)
    }

    fn push(&mut self, name: String, shape: &[usize]) -> usize {
        self.names.push(name);
        self.params.push(Tensor::zeros(shape));
        self.params.len() - 1
    }

    /// Allocates and initializes a Multilevel network.
    pub fn build_multilevel(config: MultilevelConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        let mut net = Self::allocate(config, Architecture::Multilevel)?;
        net.init_params(rng);
        Ok(net)
    }

    /// Level L of an (L+1)-level network with χ = 0: a single chain of 2^L blocks.
    pub fn build_feedforward(config: MultilevelConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        let mut net = Self::allocate(config, Architecture::FeedForward)?;
        net.init_params(rng);
        Ok(net)
    }

    /// Builds the requested architecture with the initialization stream of `seed`.
    pub fn build(config: MultilevelConfig, architecture: Architecture, seed: u64) -> Result<Self, ModelError> {
        let mut rng = RngStream::new(seed, stream::INIT);
        match architecture {
            Architecture::Multilevel => Self::build_multilevel(config, &mut rng),
            Architecture::FeedForward => Self::build_feedforward(config, &mut rng),
        }
    }

    /// Weights ~ U[−d_in^{−1/2}, d_in^{−1/2}], exit biases 0, norm scale 1 and shift 0.
    pub fn init_params(&mut self, rng: &mut RngStream) {
        for (name, t) in self.names.iter().zip(self.params.iter_mut()) {
            if name.ends_with(".weight") {
                let xi = (t.shape()[0] as f64).powf(-0.5);
                for v in t.data_mut() {
                    *v = rng.uniform_in(-xi, xi);
                }
            } else if name.ends_with(".scale") {
                t.data_mut().fill(1.0);
            } else {
                t.data_mut().fill(0.0);
            }
        }
        for s in &mut self.running {
            *s = RunningStats::new(s.features());
        }
    }

    pub fn config(&self) -> &MultilevelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Flat copy of all parameters in canonical order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.count_params(), "flat parameter length");
        let mut k = 0;
        for t in &mut self.params {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_names(&self) -> &[String] {
        &self.stats_names
    }

    fn uses_residual(&self, level: usize) -> bool {
        self.architecture == Architecture::Multilevel
            && self.config.chi == 1
            && level >= 1
            && level + 2 <= self.config.levels
    }

    /// Records the forward pass of a `batch × p` input on `tape`. With
    /// `track` false the parameters enter as constants.
    pub fn record(&self, tape: &mut Tape, input: Var, mode: Mode, track: bool) -> Result<Recording, ModelError> {
        let got = tape.value(input).cols();
        if got != self.config.p || tape.value(input).shape().len() != 2 {
            return Err(ModelError::Width {
                expected: self.config.p,
                got,
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let mut batch_stats = Vec::new();
        let mut deeper: Vec<Var> = Vec::new();
        let mut output: Option<Var> = None;
        for level in self.levels.iter().rev() {
            let residual = self.uses_residual(level.index);
            let blocks = level.blocks();
            let mut outs = Vec::with_capacity(blocks + 1);
            outs.push(tape.matmul(input, params[level.maps[0]])?);
            for i in 1..=blocks {
                let mut h = outs[i - 1];
                if residual {
                    h = tape.add(h, deeper[2 * i - 2])?;
                }
                if let Some(site) = level.norms.get(i - 1) {
                    let (scale, shift) = (params[site.scale], params[site.shift]);
                    h = match self.config.norm {
                        NormKind::Batch => {
                            let idx = site.stats.expect("batch norm site has running stats");
                            let (v, stats) = tape.batch_norm(h, scale, shift, mode, &self.running[idx], NORM_EPS)?;
                            if let Some(s) = stats {
                                batch_stats.push((idx, s));
                            }
                            v
                        }
                        NormKind::Layer => tape.layer_norm(h, scale, shift, NORM_EPS)?,
                        NormKind::None => unreachable!(),
                    };
                }
                h = tape.relu(h);
                h = tape.matmul(h, params[level.maps[i]])?;
                if i == blocks {
                    h = tape.add_bias(h, params[level.exit_bias])?;
                }
                outs.push(h);
            }
            let exit = outs[blocks];
            output = Some(match output {
                None => exit,
                Some(acc) => tape.add(acc, exit)?,
            });
            deeper = outs;
        }
        Ok(Recording {
            output: output.expect("at least one level"),
            params,
            batch_stats,
        })
    }

    /// Mean squared error against `y` and its gradient with respect to all
    /// parameters (flattened in canonical order). Running statistics are left
    /// untouched.
    pub fn mse_gradient(&self, x: &Tensor, y: &[f64], mode: Mode) -> Result<MseGradient, ModelError> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let rec = self.record(&mut tape, input, mode, true)?;
        let loss = tape.mse(rec.output, y)?;
        let grads = tape.backward(loss)?;
        let grad = rec
            .params
            .iter()
            .flat_map(|v| grads.get(*v).expect("parameter gradient").data().iter().copied())
            .collect();
        Ok(MseGradient {
            loss: tape.value(loss).data()[0],
            grad,
            min_relu_margin: tape.min_abs_relu_input().unwrap_or(f64::INFINITY),
        })
    }

    /// Folds recorded batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            s.apply_to(&mut self.running[*idx]);
        }
    }

    /// Forward pass returning one output per row. Train mode with batch norm
    /// updates the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let rec = self.record(&mut tape, input, mode, false)?;
        self.apply_batch_stats(&rec.batch_stats);
        Ok(tape.value(rec.output).data().to_vec())
    }

    /// Eval-mode outputs, computed in chunks to bound tape memory.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let (rows, cols) = x.dims2();
        let mut out = Vec::with_capacity(rows);
        for start in (0..rows).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(rows);
            let chunk = Tensor::matrix(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
            let mut tape = Tape::new();
            let input = tape.constant(chunk);
            let rec = self.record(&mut tape, input, Mode::Eval, false)?;
            out.extend_from_slice(tape.value(rec.output).data());
        }
        Ok(out)
    }

    pub(crate) fn from_parts(
        config: MultilevelConfig,
        architecture: Architecture,
        params: Vec<Tensor>,
        running: Vec<RunningStats>,
    ) -> Result<Self, ModelError> {
        let mut net = Self::allocate(config, architecture)?;
        if params.len() != net.params.len() || running.len() != net.running.len() {
            return Err(ModelError::Shape("tensor list does not match the architecture".into()));
        }
        net.params = params;
        net.running = running;
        Ok(net)
    }
}
