//! Off-policy behaviour of the practical estimator: bias against the
//! displacement of the current policy, the K3 KL diagnostic, and the arcsin
//! objective that normalized advantages ascend.

use grpo_lab::analysis::practical::{arcsin_gradient_check, practical_bias_curve, BiasOptions};
use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::grad::{collect_batch, exact_kl, k3_kl_estimate};
use grpo_lab::policy::PolicyParams;
use grpo_lab::rng::stream;

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::explicit(3, 0, 2, vec![
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0],
    ]))?;
    let old = PolicyParams::random(&env, 0.5, &mut stream(9, 0));
    let reference = PolicyParams::random(&env, 0.5, &mut stream(9, 1));
    let dir = PolicyParams::random(&env, 1.0, &mut stream(9, 2)).logits().to_vec();
    let opts = BiasOptions { kappa: 1.0, g: 4, b: 4, reps: 2000, seed: 3 };
    let curve = practical_bias_curve(&env, &old, &reference, &dir, &[0.0, 0.01, 0.03, 0.1, 0.3], opts)?;
    for r in &curve.rows {
        println!("  s = {:<5} exact bias {:.4e}  MC {:.4e}", r.displacement, r.bias_exact, r.bias_mc.unwrap_or(f64::NAN));
    }
    println!("bias slope {:.3}", curve.slope);

    let batch = collect_batch(&old, &env, 5000, 4, &mut stream(9, 3))?;
    println!("K3 {:.5} vs exact KL {:.5}", k3_kl_estimate(&old, &reference, &env, &batch)?, exact_kl(&old, &reference, &env));

    let rep = arcsin_gradient_check(&old, &env, 64, 0.05)?;
    println!("arcsin check at G = 64: max relative error {:.2e} ({})", rep.max_rel_error, rep.mode);
    Ok(())
}
