//! Runs stochastic ascent on the -theta_1^2 quadratic with injected noise
//! and compares the mean suboptimality with the finite-sample bounds of both
//! step-size schedules.

use grpo_lab::analysis::quadratic::SyntheticQuadratic;
use grpo_lab::landscape::Landscape;
use grpo_lab::optim::{lemma2_bound, BoundParams, LrSchedule};
use grpo_lab::rng::stream;
use nalgebra::DMatrix;

fn main() -> grpo_lab::error::Result<()> {
    let quad = SyntheticQuadratic::diagonal(&[2.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]))?;
    let (mu, l) = quad.pl_and_smoothness();
    let m = quad.noise_trace();
    let theta0 = [0.3, 1.0];
    let record = [10, 100, 1000, 10_000];
    for sched in [LrSchedule::Constant(0.1), LrSchedule::InverseIter(1.0)] {
        let mut mean = vec![0.0; record.len()];
        let runs = 200;
        for r in 0..runs {
            for (a, g) in mean.iter_mut().zip(quad.run_sgd(sched, &theta0, &record, &mut stream(3, r))) {
                *a += g / runs as f64;
            }
        }
        println!("{sched:?}");
        for (n, d) in record.iter().zip(&mean) {
            let params = BoundParams { mu, l, m, beta: sched.beta(), delta0: quad.gap(&theta0) };
            println!("  n = {n:>5}: mean gap {d:.3e}  bound {:.3e}", lemma2_bound(sched, params, *n)?);
        }
    }
    Ok(())
}
