use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use kolmogorov::data::{sample_lambda, stream, RngStream};
use kolmogorov::evaluation::{
    calibrate, l1_relative_error, network_greeks, CalibrationOptions, ClosedForm, EvalSettings, Observation, Surrogate,
};
use kolmogorov::multilevel::{load_checkpoint_for, MultilevelNet};
use kolmogorov::problems::{analytic_greeks_bs, ProblemKind, ProblemSpec};
use kolmogorov::theory::{
    em_rate_check, loglog_fit, paraboloid_net_report, regression_identity_check, sq_net_report,
};
use kolmogorov::training::{TrainConfig, Trainer};

/// The problem instance whose network input width is `p`.
pub fn spec_for_width(kind: ProblemKind, p: usize) -> Result<ProblemSpec> {
    let spec = match kind {
        ProblemKind::HeatParaboloid => (1..=p)
            .find(|d| d * d + d + 1 == p)
            .map(ProblemSpec::heat_paraboloid),
        ProblemKind::HeatGaussian => p.checked_sub(2).filter(|d| *d > 0).map(ProblemSpec::heat_gaussian),
        k => Some(ProblemSpec::new(k)).filter(|s| s.dim_in() == p),
    };
    spec.with_context(|| format!("no {kind} instance has {p} network inputs"))
}

pub fn load_net(path: &Path) -> Result<(MultilevelNet, ProblemSpec)> {
    let (net, meta) = kolmogorov::multilevel::load_checkpoint(path)?;
    let kind: ProblemKind = meta.problem.parse()?;
    let spec = spec_for_width(kind, net.config().p)?;
    // re-read against the resolved problem to run the shape checks
    let (net, _) = load_checkpoint_for(path, &spec)?;
    Ok((net, spec))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub settings: EvalSettings,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (net, spec) = load_net(&a.checkpoint)?;
    let mut rng = RngStream::new(a.seed, stream::aux(1));
    let report = l1_relative_error(&net, &spec, &a.settings, &mut rng)?;
    println!(
        "{}  L1 {:.6} ± {:.6} (std. err., n = {}, reference {:?})",
        spec.name(),
        report.l1_error,
        report.std_err,
        report.n_samples,
        report.reference_mode
    );
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

pub fn greeks(checkpoint: &Path, gamma: Vec<f64>, x: Vec<f64>, t: f64) -> Result<()> {
    let (net, spec) = load_net(checkpoint)?;
    let point = spec.param_point(gamma)?;
    let g = network_greeks(&net, &spec, &point, &x, t)?;
    let mut out = json!({ "network": g });
    if spec.kind == ProblemKind::BlackScholes && t > 0.0 {
        let a = analytic_greeks_bs(point.values()[0], point.values()[1], x[0], t)?;
        out["analytic"] = json!({ "delta": a.delta, "vega": a.vega, "theta": a.theta });
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub struct CalibrateArgs {
    pub problem: ProblemKind,
    pub checkpoint: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub synthetic: Option<(usize, Vec<f64>)>,
    pub init: Vec<f64>,
    pub fixed: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Reads `x_1,…,x_d,t,u` rows after a header line.
pub fn read_observations(path: &Path, d: usize) -> Result<Vec<Observation>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut obs = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let v = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: not a number", path.display(), i + 1))?;
        if v.len() != d + 2 {
            bail!("{}:{}: expected {} columns, found {}", path.display(), i + 1, d + 2, v.len());
        }
        obs.push(Observation {
            x: v[..d].to_vec(),
            t: v[d],
            u: v[d + 1],
        });
    }
    Ok(obs)
}

/// Noise-free observations of the closed form at random (x, t).
pub fn synthetic_observations(spec: &ProblemSpec, truth: &[f64], n: usize, seed: u64) -> Result<Vec<Observation>> {
    let gamma = spec.param_point(truth.to_vec())?;
    let mut rng = RngStream::new(seed, stream::aux(2));
    let ti = spec.time_interval();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..spec.d).map(|_| rng.uniform_in(spec.space.lo, spec.space.hi)).collect();
            let t = rng.uniform_in(ti.lo, ti.hi);
            let u = spec.analytic_solution(&gamma, &x, t)?;
            Ok(Observation { x, t, u })
        })
        .collect()
}

pub fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let (surrogate, spec): (Box<dyn Surrogate>, ProblemSpec) = match &a.checkpoint {
        Some(p) => {
            let (net, spec) = load_net(p)?;
            (Box::new(net), spec)
        }
        None => (Box::new(ClosedForm::exact()), ProblemSpec::new(a.problem)),
    };
    let data = match (&a.observations, &a.synthetic) {
        (Some(p), _) => read_observations(p, spec.d)?,
        (None, Some((n, truth))) => synthetic_observations(&spec, truth, *n, a.seed)?,
        (None, None) => bail!("pass --observations or --synthetic"),
    };
    let g = spec.gamma_len();
    let mut mask = vec![true; g];
    for &k in &a.fixed {
        if k >= g {
            bail!("--fix {k} is out of range (γ has {g} coordinates)");
        }
        mask[k] = false;
    }
    let init = spec.param_point(a.init)?;
    let options = CalibrationOptions {
        steps: a.steps,
        lr: a.lr,
        mask: Some(mask),
    };
    let cal = calibrate(surrogate.as_ref(), &spec, &data, &init, &options)?;
    let out = json!({
        "gamma": cal.gamma.values(),
        "loss": cal.loss,
        "iterations": cal.iterations,
        "observations": data.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

pub struct EmRateArgs {
    pub problem: ProblemKind,
    pub dimension: Option<usize>,
    pub gamma: Option<Vec<f64>>,
    pub x: Option<Vec<f64>>,
    pub t: f64,
    pub grid: Vec<usize>,
    pub paths: usize,
    pub seed: u64,
}

fn dimensioned(kind: ProblemKind, d: Option<usize>) -> ProblemSpec {
    match (kind, d) {
        (ProblemKind::HeatParaboloid, Some(d)) => ProblemSpec::heat_paraboloid(d),
        (ProblemKind::HeatGaussian, Some(d)) => ProblemSpec::heat_gaussian(d),
        (k, _) => ProblemSpec::new(k),
    }
}

pub fn em_rate(a: EmRateArgs) -> Result<()> {
    let spec = dimensioned(a.problem, a.dimension);
    let gamma = match a.gamma {
        Some(g) => g,
        None => spec.gamma_intervals().iter().map(|iv| iv.mid()).collect(),
    };
    let gamma = spec.param_point(gamma)?;
    let x = a.x.unwrap_or_else(|| vec![spec.space.mid(); spec.d]);
    let mut rng = RngStream::new(a.seed, stream::aux(3));
    let fit = em_rate_check(&spec, &gamma, &x, a.t, &a.grid, a.paths, &mut rng)?;
    println!("{:>6}  {:>14}", "M", "strong error");
    for (m, e) in &fit.points {
        println!("{m:>6}  {e:>14.6e}");
    }
    match fit.slope {
        Some(s) => println!("log-log slope {s:.4}"),
        None => println!("exact scheme: additive noise, error identically 0"),
    }
    Ok(())
}

pub fn sq_net(max_levels: usize, points: usize) -> Result<()> {
    if max_levels == 0 || points < 2 {
        bail!("need at least one level and two grid points");
    }
    println!("{:>3}  {:>7}  {:>12}  {:>12}  {:>12}  {:>8}", "L", "params", "sup error", "4^-(L+1)", "slope error", "ratio");
    let mut prev: Option<f64> = None;
    for l in 1..=max_levels {
        let r = sq_net_report(l, points);
        let ratio = prev.map(|p| format!("{:.3}", p / r.sup_error)).unwrap_or_default();
        println!(
            "{:>3}  {:>7}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {:>8}",
            l,
            r.params,
            r.sup_error,
            0.25f64.powi(l as i32 + 1),
            r.sup_gradient_error,
            ratio
        );
        prev = Some(r.sup_error);
    }
    Ok(())
}

pub fn paraboloid_net(d: usize, levels: usize, points: usize, seed: u64) -> Result<()> {
    if d == 0 || levels == 0 {
        bail!("d and levels must be positive");
    }
    let mut rng = RngStream::new(seed, stream::aux(4));
    let r = paraboloid_net_report(d, levels, points, &mut rng);
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

pub fn regression(kind: ProblemKind, dimension: Option<usize>, points: usize, samples: usize, seed: u64) -> Result<()> {
    let spec = dimensioned(kind, dimension);
    let mut rng = RngStream::new(seed, stream::aux(5));
    let batch = sample_lambda(&spec, &mut rng, points)?;
    let mut pass = 0;
    let mut worst: f64 = 0.0;
    for i in 0..points {
        let gamma = spec.param_point(batch.gamma_row(i).to_vec())?;
        let mut sub = rng.substream(i as u64);
        let r = regression_identity_check(&spec, &gamma, batch.x_row(i), batch.t[i], samples, &mut sub)?;
        if r.z_score <= 3.0 {
            pass += 1;
        }
        worst = worst.max(r.z_score);
    }
    println!("{}: {pass}/{points} points with z <= 3 (max z {worst:.3}, m = {samples})", spec.name());
    Ok(())
}

pub struct DimSweepArgs {
    pub dims: Vec<usize>,
    pub target: f64,
    pub eval_every: u64,
    pub max_steps: u64,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Trains the heat paraboloid in each dimension until the L1 target is met
/// and records the steps and training time it took.
pub fn dim_sweep(a: DimSweepArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("d,params,steps,time_s,l1_error,reached\n");
    let mut reached = Vec::new();
    for &d in &a.dims {
        let mut c = TrainConfig::desk(ProblemKind::HeatParaboloid);
        c.dimension = Some(d);
        c.seed = a.seed;
        c.training.steps = a.max_steps;
        c.validation.eval_every = a.eval_every;
        if let Some(b) = a.batch_size {
            c.training.batch_size = b;
        }
        let mut trainer = Trainer::new(c)?;
        let start = Instant::now();
        let mut last = f64::NAN;
        let mut hit = false;
        while trainer.step_count() < a.max_steps {
            trainer.train_step()?;
            if trainer.step_count() % a.eval_every == 0 || trainer.step_count() == a.max_steps {
                last = trainer.evaluate()?;
                if last <= a.target {
                    hit = true;
                    break;
                }
            }
        }
        let time = trainer.elapsed();
        eprintln!("d = {d}: {} steps, {time:.1} s training ({:.1} s total), L1 {last:.5}", trainer.step_count(), start.elapsed().as_secs_f64());
        let _ = writeln!(csv, "{d},{},{},{time},{last},{hit}", trainer.net.count_params(), trainer.step_count());
        if hit {
            reached.push((d, time));
        }
    }
    fs::write(a.out.join("dim_sweep.csv"), &csv)?;
    print!("{csv}");
    if reached.len() >= 2 {
        let (slope, _) = loglog_fit(&reached);
        println!("log-log slope of time to target against d: {slope:.3}");
    }
    Ok(())
}
