//! Draws one batch of groups and compares the baselines: vanilla,
//! leave-one-out, oracle value and normalized advantages. The leave-one-out
//! estimate equals the pairwise U-statistic exactly.

use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::grad::{collect_batch, estimate_gradient_meta, estimate_gradient_normalized, BaselineKind, EpsPolicy};
use grpo_lab::policy::{exact_gradient, PolicyParams};
use grpo_lab::rng::stream;
use grpo_lab::ustat::ustat_average;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(3, 0, 3, 2, "bounded-random").with_seed(4))?;
    let p = PolicyParams::random(&env, 1.0, &mut stream(2, 0));
    let truth = exact_gradient(&p, &env).total;
    let batch = collect_batch(&p, &env, 4, 8, &mut stream(2, 1))?;
    for b in [BaselineKind::Vanilla, BaselineKind::LeaveOneOut, BaselineKind::OracleValue] {
        let est = estimate_gradient_meta(&p, &env, &batch, &b)?;
        println!("{:<14} |g_hat - g| = {:.5}", est.estimator, dist(&est.vector, &truth));
    }
    let norm = estimate_gradient_normalized(&p, &env, &batch, EpsPolicy::HardZero)?;
    println!("{:<14} |g_hat| = {:.5} (a different target)", norm.estimator, dist(&norm.vector, &vec![0.0; truth.len()]));

    let one = grpo_lab::grad::GroupBatch::new(vec![batch.groups[0].clone()], batch.snapshot);
    let loo = estimate_gradient_meta(&p, &env, &one, &BaselineKind::LeaveOneOut)?.vector;
    let u = ustat_average(&p, &env, &batch.groups[0])?;
    println!("U-statistic vs leave-one-out on one group: {:.2e}", dist(&u, &loo));
    Ok(())
}
