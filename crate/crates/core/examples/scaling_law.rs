//! Estimates the constants of the fixed-budget MSE law, the predicted best
//! group size G*, and compares it with a small training sweep.

use grpo_lab::analysis::scaling::{estimate_constants, fixed_budget_curve, group_size_sweep};
use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::grad::BaselineKind;
use grpo_lab::optim::{LrSchedule, TrainConfig, TrainEstimator};
use grpo_lab::policy::PolicyParams;

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(3, 0, 4, 2, "match-target"))?;
    let p = PolicyParams::zeros(&env);
    let est = estimate_constants(std::slice::from_ref(&p), &env, 6, 12)?;
    println!("c1 = {:.4e}  c2 = {:.4e}  c3 = {:.4e}  G* = {:.2}", est.c1, est.c2, est.c3, est.g_star);
    let gs = [2, 4, 8, 16, 32];
    for r in fixed_budget_curve(&p, &env, 64, &gs, &est)? {
        println!("  G = {:>2}: exact {:.4e}  law {:.4e}  ({:.2}%)", r.g, r.exact, r.predicted, 100.0 * r.rel_error);
    }
    let template = TrainConfig::new(
        1,
        1,
        16,
        LrSchedule::Constant(3.0),
        TrainEstimator::Meta { baseline: BaselineKind::LeaveOneOut },
        0,
    );
    let sweep = group_size_sweep(&env, 64, &gs, &template, 1000, 1)?;
    for r in &sweep.rows {
        println!("  G = {:>2}: final J {:.5} [{:.5}, {:.5}]", r.g, r.mean, r.ci_lo, r.ci_hi);
    }
    println!("best G in the sweep: {}", sweep.best_g);
    Ok(())
}
