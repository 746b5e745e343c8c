//! Stream-loss behaviour at desk scale. Each problem is trained for three
//! 200-step windows with four seeds; the window means must not increase for
//! at least three of the seeds.

use kolmogorov::problems::ProblemKind;
use kolmogorov::training::{TrainConfig, Trainer};

fn window_means(kind: ProblemKind, batch: usize, seed: u64) -> [f64; 3] {
    let mut c = TrainConfig::desk(kind);
    c.training.batch_size = batch;
    c.training.steps = 600;
    c.validation.eval_every = 0;
    c.validation.eval_batch_size = 2;
    c.validation.mc_samples = 2;
    c.seed = seed;
    let mut t = Trainer::new(c).unwrap();
    let mut w = [0.0; 3];
    for k in 0..600 {
        w[k / 200] += t.train_step().unwrap().train_mse / 200.0;
    }
    w
}

fn check(kind: ProblemKind, batch: usize) {
    let windows: Vec<[f64; 3]> = (0..4).map(|s| window_means(kind, batch, s)).collect();
    let good = windows.iter().filter(|w| w[1] <= w[0] && w[2] <= w[1]).count();
    assert!(good >= 3, "{kind}: {windows:?}");
}

#[test]
fn black_scholes_windows() {
    check(ProblemKind::BlackScholes, 4096);
}

#[test]
fn basket_windows() {
    check(ProblemKind::BasketPut, 1024);
}

#[test]
fn heat_paraboloid_windows() {
    check(ProblemKind::HeatParaboloid, 1024);
}

#[test]
fn heat_gaussian_windows() {
    check(ProblemKind::HeatGaussian, 1024);
}
