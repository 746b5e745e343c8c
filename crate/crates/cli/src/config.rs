use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use kolmogorov::multilevel::{Architecture, NormKind};
use kolmogorov::problems::ProblemKind;
use kolmogorov::training::TrainConfig;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(rename = "L")]
    pub levels: Option<usize>,
    pub q: Option<usize>,
    pub chi: Option<u8>,
    pub norm: Option<NormKind>,
    pub architecture: Option<Architecture>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingFile {
    pub batch_size: Option<usize>,
    pub init_lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub decay: Option<f64>,
    pub patience: Option<u64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub steps: Option<u64>,
    pub em_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationFile {
    pub eval_every: Option<u64>,
    pub eval_batches: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub mc_samples: Option<usize>,
    pub mc_em_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionFile {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub desk: Option<bool>,
}

/// On-disk run description. Every section is optional; missing values come
/// from the problem's default training setup.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemKind,
    pub dimension: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub network: NetworkFile,
    #[serde(default)]
    pub training: TrainingFile,
    #[serde(default)]
    pub validation: ValidationFile,
    #[serde(default)]
    pub execution: ExecutionFile,
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    Ok(serde_json::from_str(text)?)
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub problem: Option<ProblemKind>,
    pub dimension: Option<usize>,
    pub desk: bool,
    pub network: NetworkFile,
    pub training: TrainingFile,
    pub validation: ValidationFile,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub desk: bool,
}

fn pick<T: Copy>(dst: &mut T, sources: [Option<T>; 2]) {
    if let Some(v) = sources.into_iter().flatten().last() {
        *dst = v;
    }
}

pub fn resolve(file: Option<ConfigFile>, flags: Overrides) -> Result<RunConfig> {
    let problem = match (flags.problem, file.as_ref().map(|f| f.problem)) {
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => bail!("no problem given; pass --problem or a config file"),
    };
    let exec = file.as_ref().map(|f| f.execution.clone()).unwrap_or_default();
    let desk = flags.desk || exec.desk.unwrap_or(false);
    let mut c = if desk { TrainConfig::desk(problem) } else { TrainConfig::paper(problem) };

    let (fnet, ftr, fval) = match &file {
        Some(f) => (f.network.clone(), f.training.clone(), f.validation.clone()),
        None => Default::default(),
    };
    let (onet, otr, oval) = (&flags.network, &flags.training, &flags.validation);

    c.dimension = flags.dimension.or(file.as_ref().and_then(|f| f.dimension));
    let seed_file = file.as_ref().and_then(|f| f.seed);

    let n = &mut c.network;
    pick(&mut n.levels, [fnet.levels, onet.levels]);
    pick(&mut n.q, [fnet.q, onet.q]);
    pick(&mut n.chi, [fnet.chi, onet.chi]);
    pick(&mut n.norm, [fnet.norm, onet.norm]);
    pick(&mut n.architecture, [fnet.architecture, onet.architecture]);

    let t = &mut c.training;
    pick(&mut t.batch_size, [ftr.batch_size, otr.batch_size]);
    pick(&mut t.init_lr, [ftr.init_lr, otr.init_lr]);
    pick(&mut t.min_lr, [ftr.min_lr, otr.min_lr]);
    pick(&mut t.decay, [ftr.decay, otr.decay]);
    pick(&mut t.patience, [ftr.patience, otr.patience]);
    pick(&mut t.weight_decay, [ftr.weight_decay, otr.weight_decay]);
    pick(&mut t.beta1, [ftr.beta1, otr.beta1]);
    pick(&mut t.beta2, [ftr.beta2, otr.beta2]);
    pick(&mut t.adam_eps, [ftr.adam_eps, otr.adam_eps]);
    pick(&mut t.steps, [ftr.steps, otr.steps]);
    pick(&mut t.em_steps, [ftr.em_steps, otr.em_steps]);

    // the full-scale profile evaluates on batches of the training size
    if !desk {
        c.validation.eval_batch_size = c.training.batch_size;
    }
    let v = &mut c.validation;
    pick(&mut v.eval_every, [fval.eval_every, oval.eval_every]);
    pick(&mut v.eval_batches, [fval.eval_batches, oval.eval_batches]);
    pick(&mut v.eval_batch_size, [fval.eval_batch_size, oval.eval_batch_size]);
    pick(&mut v.mc_samples, [fval.mc_samples, oval.mc_samples]);
    pick(&mut v.mc_em_steps, [fval.mc_em_steps, oval.mc_em_steps]);

    let seeds = flags
        .seeds
        .or(exec.seeds)
        .or(seed_file.map(|s| vec![s]))
        .unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    c.seed = seeds[0];
    c.validate()?;
    Ok(RunConfig {
        train: c,
        seeds,
        out: flags.out.or(exec.out).unwrap_or_else(|| PathBuf::from("runs")),
        checkpoint: flags.checkpoint.or(exec.checkpoint),
        desk,
    })
}
