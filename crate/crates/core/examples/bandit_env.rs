//! Builds a small token environment, enumerates its outputs and evaluates
//! the exact value and policy gradient of a random softmax policy.

use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::policy::{exact_gradient, objective, output_distribution, PolicyParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(3, 0, 2, 2, "bounded-random").with_seed(3))?;
    let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let table = p.probability_table();
    println!("{} outputs per prompt, d = {}", env.outputs().len(), p.dim());
    for x in 0..env.num_prompts() {
        let probs = output_distribution(&table, &env, x);
        for (y, q) in probs.iter().enumerate() {
            println!(
                "  x = {x}  y = {:?}{}  pi = {q:.4}  z = {:.4}",
                env.outputs().sequence(y),
                if env.outputs().is_truncated(y) { " (truncated)" } else { "" },
                env.reward_of(x, y)
            );
        }
    }
    let g = exact_gradient(&p, &env);
    let norm: f64 = g.total.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("J = {:.6}, J* = {:.6}, |grad J| = {norm:.6}", objective(&p, &env), env.optimal_value());
    Ok(())
}
