use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use kolmogorov::multilevel::{save_checkpoint, CheckpointMeta};
use kolmogorov::training::{MetricsLog, Trainer};

use crate::config::RunConfig;

pub struct SeedRun {
    pub seed: u64,
    pub log: MetricsLog,
    pub dir: PathBuf,
}

fn seed_dir(rc: &RunConfig, seed: u64) -> PathBuf {
    if rc.seeds.len() == 1 {
        rc.out.clone()
    } else {
        rc.out.join(format!("seed-{seed}"))
    }
}

fn report_text(rc: &RunConfig, trainer: &Trainer, log: &MetricsLog) -> String {
    let c = &trainer.config;
    let mut s = String::new();
    let _ = writeln!(s, "problem        {}", c.problem);
    let _ = writeln!(s, "dimension      {}", trainer.spec.d);
    let _ = writeln!(s, "profile        {}", if rc.desk { "desk" } else { "paper" });
    let _ = writeln!(s, "seed           {}", c.seed);
    let _ = writeln!(
        s,
        "network        {:?} L={} q={} chi={} norm={}",
        c.network.architecture, c.network.levels, c.network.q, c.network.chi, c.network.norm
    );
    let _ = writeln!(s, "parameters     {}", trainer.net.count_params());
    let t = &c.training;
    let _ = writeln!(
        s,
        "training       steps={} batch={} lr={}..{} decay={} patience={} wd={} em_steps={}",
        t.steps, t.batch_size, t.init_lr, t.min_lr, t.decay, t.patience, t.weight_decay, t.em_steps
    );
    let _ = writeln!(s, "train time (s) {:.3}", trainer.elapsed());
    for (step, time, l1) in log.evaluations() {
        let _ = writeln!(s, "step {step:>7}  time {time:>10.3} s  L1 {l1:.6}");
    }
    for w in c.warnings() {
        let _ = writeln!(s, "warning        {w}");
    }
    s
}

/// Trains one seed and writes metrics.csv, report.txt and the checkpoint.
pub fn train_seed(rc: &RunConfig, seed: u64, verbose: bool) -> Result<SeedRun> {
    let mut config = rc.train.clone();
    config.seed = seed;
    let dir = seed_dir(rc, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut trainer = Trainer::new(config)?;
    let log = trainer.run(|row| {
        if let (true, Some(l1)) = (verbose, row.l1_error) {
            eprintln!("seed {seed} step {} time {:.1}s mse {:.3e} L1 {:.5}", row.step, row.time_s, row.train_mse, l1);
        }
    })?;
    fs::write(dir.join("metrics.csv"), log.to_csv(true))?;
    fs::write(dir.join("report.txt"), report_text(rc, &trainer, &log))?;
    let ckpt = match (&rc.checkpoint, rc.seeds.len()) {
        (Some(p), 1) => p.clone(),
        (Some(p), _) => with_seed_suffix(p, seed),
        (None, _) => dir.join("checkpoint.json"),
    };
    let meta = CheckpointMeta {
        problem: trainer.spec.name().to_string(),
        step: trainer.step_count(),
        seed,
    };
    save_checkpoint(&trainer.net, &meta, &ckpt)?;
    Ok(SeedRun { seed, log, dir })
}

fn with_seed_suffix(p: &Path, seed: u64) -> PathBuf {
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = p.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    p.with_file_name(format!("{stem}-seed{seed}{ext}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub step: u64,
    pub time_mean: f64,
    pub time_std: f64,
    pub l1_mean: f64,
    pub l1_std: f64,
    pub runs: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation across seeds at every evaluation step.
pub fn aggregate(runs: &[SeedRun]) -> Vec<AggregateRow> {
    let mut steps: Vec<u64> = runs.iter().flat_map(|r| r.log.evaluations().map(|e| e.0)).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|step| {
            let (times, l1s): (Vec<f64>, Vec<f64>) = runs
                .iter()
                .filter_map(|r| r.log.evaluations().find(|e| e.0 == step).map(|e| (e.1, e.2)))
                .unzip();
            let (time_mean, time_std) = mean_std(&times);
            let (l1_mean, l1_std) = mean_std(&l1s);
            AggregateRow {
                step,
                time_mean,
                time_std,
                l1_mean,
                l1_std,
                runs: times.len(),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("step,avg_time_s,std_time_s,avg_l1_error,std_l1_error,runs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.time_mean, r.time_std, r.l1_mean, r.l1_std, r.runs);
    }
    s
}

pub fn aggregate_table(rows: &[AggregateRow]) -> String {
    let mut s = format!("{:>8}  {:>22}  {:>24}\n", "step", "avg. time (s)", "avg. L1-error");
    for r in rows {
        let time = format!("{:.1} ± {:.1}", r.time_mean, r.time_std);
        let l1 = format!("{:.4} ± {:.4}", r.l1_mean, r.l1_std);
        let _ = writeln!(s, "{:>8}  {:>22}  {:>24}", r.step, time, l1);
    }
    s
}

pub fn train_all(rc: &RunConfig, verbose: bool) -> Result<Vec<SeedRun>> {
    let runs = rc
        .seeds
        .iter()
        .map(|&seed| train_seed(rc, seed, verbose))
        .collect::<Result<Vec<_>>>()?;
    let rows = aggregate(&runs);
    fs::write(rc.out.join("aggregate.csv"), aggregate_csv(&rows))?;
    fs::write(rc.out.join("aggregate.txt"), aggregate_table(&rows))?;
    Ok(runs)
}
