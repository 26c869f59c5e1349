//! Splits the group gradient into kernel mean, first-order projection and
//! degenerate remainder, and checks the moments of the parts against their
//! closed forms.

use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::grad::GroupSample;
use grpo_lab::policy::{PolicyParams, PromptView};
use grpo_lab::rng::stream;
use grpo_lab::ustat::{hoeffding_with_view, PairMoments};

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(3, 0, 1, 2, "bounded-random").with_seed(5))?;
    let p = PolicyParams::random(&env, 1.0, &mut stream(5, 0));
    let table = p.probability_table();
    let view = PromptView::new(&table, &env, 0);
    let m = PairMoments::from_view(&view);
    let mut rng = stream(5, 1);
    println!("  G   E|first|^2 (MC / exact)     E|second|^2 (MC / exact)");
    for g in [2usize, 4, 8, 16, 32] {
        let reps = 20_000;
        let (mut f, mut s) = (0.0, 0.0);
        for _ in 0..reps {
            let ids = (0..g).map(|_| table.sample(&env, 0, &mut rng)).collect();
            let parts = hoeffding_with_view(&table, &view, &env, &GroupSample::from_ids(&env, 0, ids))?;
            f += parts.first_order_norm_sq;
            s += parts.second_order_norm_sq;
        }
        let gf = g as f64;
        println!(
            "{g:>3}   {:.3e} / {:.3e}       {:.3e} / {:.3e}",
            f / reps as f64,
            m.oracle_trace / gf,
            s / reps as f64,
            2.0 * m.zeta2_sq / (gf * (gf - 1.0))
        );
    }
    Ok(())
}
