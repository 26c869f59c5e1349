//! Exact gradient MSE of each estimator against the group size, and the
//! gap between leave-one-out and the oracle baseline shrinking like 1/G^2.

use grpo_lab::analysis::mse::{mse_exact, mse_monte_carlo, oracle_convergence_curve};
use grpo_lab::analysis::EstimatorKind;
use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::policy::PolicyParams;
use grpo_lab::rng::stream;

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(2, 0, 2, 3, "bounded-random").with_seed(7))?;
    let p = PolicyParams::random(&env, 1.0, &mut stream(1, 0));
    let kinds = [EstimatorKind::vanilla(), EstimatorKind::leave_one_out(), EstimatorKind::oracle(), EstimatorKind::normalized()];
    println!("  G  {:>12} {:>12} {:>12} {:>12}", "vanilla", "loo", "oracle", "normalized");
    for g in [2usize, 4, 8] {
        let row: Vec<String> = kinds
            .iter()
            .map(|k| mse_exact(&p, &env, k, 1, g).map(|s| format!("{:>12.4e}", s.total)))
            .collect::<Result<_, _>>()?;
        println!("{g:>3}  {}", row.join(" "));
    }
    let mc = mse_monte_carlo(&p, &env, &EstimatorKind::leave_one_out(), 1, 8, 20_000, 3)?;
    println!("Monte-Carlo leave-one-out at G = 8: {:.4e} +- {:.1e}", mc.mse_mean, mc.ci_halfwidth);

    let curve = oracle_convergence_curve(&p, &env, &[2, 4, 8, 16, 32, 64])?;
    for r in &curve.rows {
        println!("  G = {:>2}: MSE(loo) - MSE(oracle) = {:.4e}", r.g, r.difference);
    }
    println!("slope {:.3}, spread of G * MSE(oracle) {:.1e}", curve.slope, curve.oracle_scaled_spread);
    Ok(())
}
