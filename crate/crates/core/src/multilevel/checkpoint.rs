use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Architecture, ModelError, MultilevelConfig, MultilevelNet};
use crate::kernel::{RunningStats, Tensor, BN_MOMENTUM};
use crate::problems::ProblemSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub problem: String,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    version: u32,
    problem: String,
    config: MultilevelConfig,
    architecture: Architecture,
    step: u64,
    seed: u64,
    param_count: usize,
    params: IndexMap<String, Value>,
    running_stats: IndexMap<String, Stats>,
}

fn tensor_to_json(t: &Tensor) -> Value {
    match t.shape() {
        [_] => Value::from(t.data().to_vec()),
        _ => Value::from((0..t.rows()).map(|r| Value::from(t.row(r).to_vec())).collect::<Vec<_>>()),
    }
}

fn json_to_values(name: &str, v: &Value) -> Result<(Vec<usize>, Vec<f64>), ModelError> {
    let bad = || ModelError::Format(format!("parameter {name} is not a numeric array"));
    let arr = v.as_array().ok_or_else(bad)?;
    if arr.first().is_some_and(Value::is_array) {
        let mut data = Vec::new();
        let mut cols = None;
        for row in arr {
            let row = row.as_array().ok_or_else(bad)?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(ModelError::Format(format!("parameter {name} has ragged rows")));
            }
            for x in row {
                data.push(x.as_f64().ok_or_else(bad)?);
            }
        }
        Ok((vec![arr.len(), cols.unwrap_or(0)], data))
    } else {
        let data = arr.iter().map(|x| x.as_f64().ok_or_else(bad)).collect::<Result<Vec<_>, _>>()?;
        Ok((vec![data.len()], data))
    }
}

pub fn save_checkpoint(net: &MultilevelNet, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let file = File {
        version: CHECKPOINT_VERSION,
        problem: meta.problem.clone(),
        config: net.config,
        architecture: net.architecture,
        step: meta.step,
        seed: meta.seed,
        param_count: net.count_params(),
        params: net.names.iter().cloned().zip(net.params.iter().map(tensor_to_json)).collect(),
        running_stats: net
            .stats_names
            .iter()
            .cloned()
            .zip(net.running.iter().map(|s| Stats {
                mean: s.mean.clone(),
                var: s.var.clone(),
            }))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| ModelError::Format(e.to_string()))?;
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MultilevelNet, CheckpointMeta), ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| ModelError::Format(e.to_string()))?;
    let version = raw.get("version").and_then(Value::as_u64);
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(ModelError::Version {
            found: version.unwrap_or(0) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: File = serde_json::from_value(raw).map_err(|e| ModelError::Format(e.to_string()))?;
    let template = MultilevelNet::allocate(file.config, file.architecture)?;

    let mut params = Vec::with_capacity(template.params.len());
    let mut actual = 0;
    for (name, v) in &file.params {
        actual += json_to_values(name, v)?.1.len();
    }
    if actual != file.param_count || file.param_count != template.count_params() {
        return Err(ModelError::Integrity {
            declared: file.param_count,
            actual,
        });
    }
    for (name, expect) in template.names.iter().zip(&template.params) {
        let v = file
            .params
            .get(name)
            .ok_or_else(|| ModelError::Shape(format!("missing parameter {name}")))?;
        let (shape, data) = json_to_values(name, v)?;
        if shape != expect.shape() {
            return Err(ModelError::Shape(format!(
                "{name} has shape {shape:?}, configuration implies {:?}",
                expect.shape()
            )));
        }
        params.push(Tensor::new(shape, data)?);
    }
    let mut running = Vec::with_capacity(template.running.len());
    for (name, expect) in template.stats_names.iter().zip(&template.running) {
        let s = file
            .running_stats
            .get(name)
            .ok_or_else(|| ModelError::Shape(format!("missing running statistics {name}")))?;
        if s.mean.len() != expect.features() || s.var.len() != expect.features() {
            return Err(ModelError::Shape(format!("running statistics {name} have the wrong width")));
        }
        running.push(RunningStats {
            mean: s.mean.clone(),
            var: s.var.clone(),
            momentum: BN_MOMENTUM,
        });
    }
    let net = MultilevelNet::from_parts(file.config, file.architecture, params, running)?;
    Ok((
        net,
        CheckpointMeta {
            problem: file.problem,
            step: file.step,
            seed: file.seed,
        },
    ))
}

/// Loads a checkpoint and checks that it was trained for `spec`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, spec: &ProblemSpec) -> Result<(MultilevelNet, CheckpointMeta), ModelError> {
    let (net, meta) = load_checkpoint(path)?;
    if net.config.p != spec.dim_in() {
        return Err(ModelError::Shape(format!(
            "checkpoint input width {} does not match {} (dim_in {})",
            net.config.p,
            spec.name(),
            spec.dim_in()
        )));
    }
    Ok((net, meta))
}
