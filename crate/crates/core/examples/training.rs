//! Trains the tabular policy with the leave-one-out meta estimator and with
//! the practical GRPO estimator without clipping (importance ratios and a KL
//! term), and writes both traces as CSV to stdout.

use grpo_lab::env::{build_env, EnvSpec};
use grpo_lab::grad::BaselineKind;
use grpo_lab::optim::{train_grpo_practical, train_meta, LrSchedule, TrainConfig, TrainEstimator};
use grpo_lab::rng::stream;

fn main() -> grpo_lab::error::Result<()> {
    let env = build_env(&EnvSpec::uniform(3, 0, 4, 2, "match-target"))?;
    let mut meta = TrainConfig::new(8, 8, 100, LrSchedule::Constant(2.0), TrainEstimator::Meta { baseline: BaselineKind::LeaveOneOut }, 1);
    meta.record_stride = 25;
    let t = train_meta(&env, &meta, &mut stream(1, 0))?;
    println!("# leave-one-out meta estimator");
    t.write_csv(std::io::stdout())?;

    let practical = TrainEstimator::Practical { kappa: 0.05, m: 2, floor: 1e-8, eps: Default::default() };
    let mut grpo = TrainConfig::new(8, 8, 100, LrSchedule::Constant(0.5), practical, 1);
    grpo.record_stride = 25;
    let t = train_grpo_practical(&env, &grpo, &mut stream(1, 1))?;
    println!("# practical estimator, two minibatch steps per iteration");
    t.write_csv(std::io::stdout())?;
    Ok(())
}
