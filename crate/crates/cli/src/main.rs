use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use kolmogorov::evaluation::EvalSettings;
use kolmogorov::multilevel::{Architecture, MultilevelConfig, NormKind};
use kolmogorov::problems::ProblemKind;

mod commands;
mod config;
mod run;

use config::{load_config, resolve, NetworkFile, Overrides, TrainingFile, ValidationFile};

#[derive(Parser)]
#[command(name = "kolmo", version, about = "Learn parametric solutions of Kolmogorov PDEs from simulated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network for each seed and write metrics, reports and checkpoints.
    Train(TrainArgs),
    /// Relative L1 error of a checkpoint on fresh predictor points.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        batches: usize,
        #[arg(long, default_value_t = 8192)]
        batch_size: usize,
        /// Monte Carlo samples per reference value (problems without a closed form).
        #[arg(long, default_value_t = 1 << 14)]
        mc_samples: usize,
        #[arg(long, default_value_t = 25)]
        mc_em_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derivatives of a trained network at one point.
    Greeks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gamma: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        #[arg(long)]
        t: f64,
    },
    /// Fit γ to observed solution values through a frozen surrogate.
    Calibrate {
        #[arg(long, default_value = "black_scholes")]
        problem: ProblemKind,
        /// Network to calibrate through; the closed form is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV with header and columns x_1..x_d,t,u.
        #[arg(long, conflicts_with = "synthetic")]
        observations: Option<PathBuf>,
        /// Number of noise-free observations generated at --truth.
        #[arg(long, requires = "truth")]
        synthetic: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        truth: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', required = true)]
        init: Vec<f64>,
        /// γ coordinates held at their initial value.
        #[arg(long, value_delimiter = ',')]
        fix: Vec<usize>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Number of trainable parameters of a network configuration.
    CountParams {
        #[arg(long)]
        problem: ProblemKind,
        #[arg(long)]
        dimension: Option<usize>,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long, default_value_t = 1)]
        chi: u8,
        #[arg(long, default_value = "batch")]
        norm: NormKind,
        #[arg(long, value_enum, default_value = "multilevel")]
        architecture: ArchArg,
    },
    /// Numerical checks of the approximation and simulation results.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Steps and time to reach a target L1 error on the heat paraboloid across dimensions.
    DimSweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1e-2)]
        target: f64,
        #[arg(long, default_value_t = 250)]
        eval_every: u64,
        #[arg(long, default_value_t = 4000)]
        max_steps: u64,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/dim-sweep")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ArchArg {
    Multilevel,
    FeedForward,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Multilevel => Architecture::Multilevel,
            ArchArg::FeedForward => Architecture::FeedForward,
        }
    }
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Strong error of Euler-Maruyama against the exact solution.
    EmRate {
        #[arg(long, default_value = "black_scholes")]
        problem: ProblemKind,
        #[arg(long)]
        dimension: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128,256")]
        grid: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sup errors of the ReLU squaring network for L = 1..max.
    SqNet {
        #[arg(long, default_value_t = 6)]
        max_levels: usize,
        #[arg(long, default_value_t = 100_000)]
        points: usize,
    },
    /// Monte Carlo mean of the payoff against the closed form at random points.
    Regression {
        #[arg(long)]
        problem: ProblemKind,
        #[arg(long)]
        dimension: Option<usize>,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sup error of the explicit ReLU network for the heat paraboloid.
    ParaboloidNet {
        #[arg(long, default_value_t = 1)]
        d: usize,
        #[arg(long, default_value_t = 6)]
        levels: usize,
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<ProblemKind>,
    /// Spatial dimension of the heat problems.
    #[arg(long)]
    dimension: Option<usize>,
    /// Scaled-down single-core profile.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    chi: Option<u8>,
    #[arg(long)]
    norm: Option<NormKind>,
    #[arg(long, value_enum)]
    architecture: Option<ArchArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    patience: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    em_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_batches: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            problem: self.problem,
            dimension: self.dimension,
            desk: self.desk,
            network: NetworkFile {
                levels: self.levels,
                q: self.q,
                chi: self.chi,
                norm: self.norm,
                architecture: self.architecture.map(Into::into),
            },
            training: TrainingFile {
                batch_size: self.batch_size,
                init_lr: self.lr,
                min_lr: self.min_lr,
                decay: self.decay,
                patience: self.patience,
                weight_decay: self.weight_decay,
                em_steps: self.em_steps,
                steps: self.steps,
                ..Default::default()
            },
            validation: ValidationFile {
                eval_every: self.eval_every,
                eval_batches: self.eval_batches,
                eval_batch_size: self.eval_batch_size,
                ..Default::default()
            },
            seeds: self.seeds.clone().or(self.seed.map(|s| vec![s])),
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let file = a.config.as_deref().map(load_config).transpose()?;
    let rc = resolve(file, a.overrides())?;
    for w in rc.train.warnings() {
        eprintln!("warning: {w}");
    }
    let runs = run::train_all(&rc, !a.quiet)?;
    let rows = run::aggregate(&runs);
    print!("{}", run::aggregate_table(&rows));
    for r in &runs {
        eprintln!("seed {} written to {}", r.seed, r.dir.display());
    }
    Ok(())
}

fn count_params(
    problem: ProblemKind,
    dimension: Option<usize>,
    levels: usize,
    q: Option<usize>,
    chi: u8,
    norm: NormKind,
    arch: Architecture,
) -> Result<()> {
    let mut c = kolmogorov::training::TrainConfig::paper(problem);
    c.dimension = dimension;
    let p = c.problem_spec().dim_in();
    let config = MultilevelConfig::new(p, levels, q.unwrap_or(c.network.q), chi, norm);
    config.validate()?;
    println!("{}", config.expected_params(arch));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval {
            checkpoint,
            batches,
            batch_size,
            mc_samples,
            mc_em_steps,
            seed,
            out,
        } => commands::eval(commands::EvalArgs {
            checkpoint,
            settings: EvalSettings {
                batches,
                batch_size,
                mc_samples,
                mc_em_steps,
                keep_points: false,
            },
            seed,
            out,
        }),
        Command::Greeks { checkpoint, gamma, x, t } => commands::greeks(&checkpoint, gamma, x, t),
        Command::Calibrate {
            problem,
            checkpoint,
            observations,
            synthetic,
            truth,
            init,
            fix,
            steps,
            lr,
            seed,
        } => commands::calibrate_cmd(commands::CalibrateArgs {
            problem,
            checkpoint,
            observations,
            synthetic: synthetic.zip(truth),
            init,
            fixed: fix,
            steps,
            lr,
            seed,
        }),
        Command::CountParams {
            problem,
            dimension,
            levels,
            q,
            chi,
            norm,
            architecture,
        } => count_params(problem, dimension, levels, q, chi, norm, architecture.into()),
        Command::Theory(t) => match t {
            TheoryCommand::EmRate {
                problem,
                dimension,
                gamma,
                x,
                t,
                grid,
                paths,
                seed,
            } => commands::em_rate(commands::EmRateArgs {
                problem,
                dimension,
                gamma,
                x,
                t,
                grid,
                paths,
                seed,
            }),
            TheoryCommand::SqNet { max_levels, points } => commands::sq_net(max_levels, points),
            TheoryCommand::Regression {
                problem,
                dimension,
                points,
                samples,
                seed,
            } => commands::regression(problem, dimension, points, samples, seed),
            TheoryCommand::ParaboloidNet { d, levels, points, seed } => commands::paraboloid_net(d, levels, points, seed),
        },
        Command::DimSweep {
            dims,
            target,
            eval_every,
            max_steps,
            batch_size,
            seed,
            out,
        } => commands::dim_sweep(commands::DimSweepArgs {
            dims,
            target,
            eval_every,
            max_steps,
            batch_size,
            seed,
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
