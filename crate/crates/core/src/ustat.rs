//! The leave-one-out group gradient as a second-order U-statistic, and its
//! Hoeffding decomposition conditional on the prompt.

use serde::{Deserialize, Serialize};

use crate::env::{Environment, Token};
use crate::error::{LabError, Result};
use crate::grad::GroupSample;
use crate::policy::{axpy, norm_sq, PolicyParams, ProbTable, PromptView};

/// `h = 1/2 (score(y_i) - score(y_j)) (z_i - z_j)`.
pub fn kernel_h(
    p: &PolicyParams,
    env: &Environment,
    x: usize,
    (y_i, z_i): (&[Token], f64),
    (y_j, z_j): (&[Token], f64),
) -> Result<Vec<f64>> {
    let table = p.probability_table();
    let a = env.resolve(x, y_i)?;
    let b = env.resolve(x, y_j)?;
    let mut out = vec![0.0; p.dim()];
    add_kernel(&table, env, x, (a, z_i), (b, z_j), 1.0, &mut out);
    Ok(out)
}

fn add_kernel(
    table: &ProbTable,
    env: &Environment,
    x: usize,
    (a, z_i): (usize, f64),
    (b, z_j): (usize, f64),
    scale: f64,
    out: &mut [f64],
) {
    let c = 0.5 * (z_i - z_j) * scale;
    if c != 0.0 {
        table.add_score(env, x, a, c, out);
        table.add_score(env, x, b, -c, out);
    }
}

/// Average of the kernel over all unordered pairs of the group, summed
/// pair by pair.
pub fn ustat_average(p: &PolicyParams, env: &Environment, group: &GroupSample) -> Result<Vec<f64>> {
    ustat_with_table(&p.probability_table(), env, group)
}

pub fn ustat_with_table(table: &ProbTable, env: &Environment, group: &GroupSample) -> Result<Vec<f64>> {
    let g = group.len();
    if g < 2 {
        return Err(LabError::GroupTooSmall {
            group: g,
            reason: "a pairwise U-statistic needs at least two outputs",
        });
    }
    let pairs = (g * (g - 1) / 2) as f64;
    let mut out = vec![0.0; table.as_slice().len()];
    for i in 0..g {
        for j in i + 1..g {
            add_kernel(
                table,
                env,
                group.prompt,
                (group.outputs[i], group.rewards[i]),
                (group.outputs[j], group.rewards[j]),
                1.0 / pairs,
                &mut out,
            );
        }
    }
    Ok(out)
}

/// Kernel mean, first-order projection and degenerate remainder of one
/// group's U-statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingParts {
    pub h0: Vec<f64>,
    pub first_order: Vec<f64>,
    pub second_order: Vec<f64>,
    pub h0_norm_sq: f64,
    pub first_order_norm_sq: f64,
    pub second_order_norm_sq: f64,
}

impl HoeffdingParts {
    pub fn total(&self) -> Vec<f64> {
        self.h0
            .iter()
            .zip(&self.first_order)
            .zip(&self.second_order)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

pub fn hoeffding_decompose(p: &PolicyParams, env: &Environment, x: usize, group: &GroupSample) -> Result<HoeffdingParts> {
    let table = p.probability_table();
    let view = PromptView::new(&table, env, x);
    hoeffding_with_view(&table, &view, env, group)
}

/// Decomposition with the prompt's exact quantities precomputed.
///
/// `h1(y) = 1/2 [score(y)(z - V) + g]`, so the first-order part
/// `(2/G) sum (h1 - h0)` is the oracle-baseline estimator minus `g`.
pub fn hoeffding_with_view(
    table: &ProbTable,
    view: &PromptView,
    env: &Environment,
    group: &GroupSample,
) -> Result<HoeffdingParts> {
    let u = ustat_with_table(table, env, group)?;
    let g = group.len() as f64;
    let h0 = view.gradient.clone();
    let mut first = vec![0.0; h0.len()];
    for (&y, &z) in group.outputs.iter().zip(&group.rewards) {
        let c = (z - view.value) / g;
        if c != 0.0 {
            table.add_score(env, group.prompt, y, c, &mut first);
        }
    }
    axpy(-1.0, &h0, &mut first);
    let second: Vec<f64> = u
        .iter()
        .zip(&h0)
        .zip(&first)
        .map(|((u, a), b)| u - a - b)
        .collect();
    Ok(HoeffdingParts {
        h0_norm_sq: norm_sq(&h0),
        first_order_norm_sq: norm_sq(&first),
        second_order_norm_sq: norm_sq(&second),
        h0,
        first_order: first,
        second_order: second,
    })
}

/// Exact second moments of one prompt's kernel pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    /// `E ||score||^2`.
    pub score_sq: f64,
    /// `Var(Z | x)`.
    pub reward_var: f64,
    /// `||g(x)||^2`.
    pub grad_sq: f64,
    /// `trace Cov(score (Z - V))`, the oracle estimator's per-sample variance.
    pub oracle_trace: f64,
    /// `E ||zeta2||^2 = 1/2 [E||score||^2 Var(Z) + ||g||^2]`.
    pub zeta2_sq: f64,
    /// `E ||h||^2` for one independent pair.
    pub kernel_sq: f64,
}

impl PairMoments {
    pub fn from_view(view: &PromptView) -> Self {
        let mut score_sq = 0.0;
        let mut reward_var = 0.0;
        let mut weighted = 0.0;
        for ((q, z), s) in view.probs.iter().zip(&view.rewards).zip(&view.scores) {
            let ns = norm_sq(s);
            let a = z - view.value;
            score_sq += q * ns;
            reward_var += q * a * a;
            weighted += q * ns * a * a;
        }
        let grad_sq = norm_sq(&view.gradient);
        let oracle_trace = weighted - grad_sq;
        let zeta2_sq = 0.5 * (score_sq * reward_var + grad_sq);
        // Var(h) = 2 Var(h1) + E||zeta2||^2 with Var(h1) = oracle_trace / 4
        let kernel_sq = 0.5 * oracle_trace + zeta2_sq + grad_sq;
        Self {
            score_sq,
            reward_var,
            grad_sq,
            oracle_trace,
            zeta2_sq,
            kernel_sq,
        }
    }

    /// Exact `E ||U - g(x)||^2` of the leave-one-out estimator at group size `g`.
    pub fn loo_mse(&self, g: usize) -> f64 {
        let g = g as f64;
        self.oracle_trace / g + 2.0 * self.zeta2_sq / (g * (g - 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvSpec};
    use crate::grad::{collect_batch, estimate_gradient_meta, BaselineKind, GroupBatch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Environment, PolicyParams) {
        let env = build_env(&EnvSpec::uniform(3, 0, 2, 2, "bounded-random").with_seed(seed)).unwrap();
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        (env, p)
    }

    #[test]
    fn equal_rewards_annihilate_and_swap_is_symmetric() {
        let (env, p) = setup(1);
        let a = env.outputs().sequence(1).to_vec();
        let b = env.outputs().sequence(4).to_vec();
        let zero = kernel_h(&p, &env, 0, (&a, 0.7), (&b, 0.7)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let h1 = kernel_h(&p, &env, 0, (&a, 1.2), (&b, 0.2)).unwrap();
        let h2 = kernel_h(&p, &env, 0, (&b, 0.2), (&a, 1.2)).unwrap();
        for (u, v) in h1.iter().zip(&h2) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_matches_hand_expansion() {
        // 3 tokens, horizon 1: d = 3, one state
        let env = build_env(&EnvSpec::explicit(3, 2, 1, vec![vec![1.0, 0.5, 0.0]])).unwrap();
        let p = PolicyParams::from_logits(&env, vec![0.4, -0.3, 0.1]).unwrap();
        let z: f64 = [0.4f64, -0.3, 0.1].iter().map(|v| v.exp()).sum();
        let pi: Vec<f64> = [0.4f64, -0.3, 0.1].iter().map(|v| v.exp() / z).collect();
        // y_i = token 0, y_j = token 1
        let h = kernel_h(&p, &env, 0, (&[0, 2], 1.0), (&[1, 2], 0.5)).unwrap();
        let si = [1.0 - pi[0], -pi[1], -pi[2]];
        let sj = [-pi[0], 1.0 - pi[1], -pi[2]];
        for k in 0..3 {
            let hand = 0.5 * (si[k] - sj[k]) * (1.0 - 0.5);
            assert!((h[k] - hand).abs() < 1e-15);
        }
    }

    #[test]
    fn average_equals_loo_estimator() {
        let (env, p) = setup(2);
        for g in [2usize, 3, 7, 16] {
            let batch = collect_batch(&p, &env, 1, g, &mut ChaCha8Rng::seed_from_u64(g as u64)).unwrap();
            let u = ustat_average(&p, &env, &batch.groups[0]).unwrap();
            let loo = estimate_gradient_meta(&p, &env, &batch, &BaselineKind::LeaveOneOut).unwrap();
            let scale = loo.vector.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for (a, b) in u.iter().zip(&loo.vector) {
                assert!((a - b).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn small_group_edge_cases() {
        let (env, p) = setup(3);
        let group = GroupSample::from_ids(&env, 0, vec![2]);
        assert!(ustat_average(&p, &env, &group).is_err());
        let group = GroupSample::from_ids(&env, 0, vec![2, 5]);
        let u = ustat_average(&p, &env, &group).unwrap();
        let seq = |y: usize| env.outputs().sequence(y).to_vec();
        let h = kernel_h(&p, &env, 0, (&seq(2), group.rewards[0]), (&seq(5), group.rewards[1])).unwrap();
        assert_eq!(u, h);
        let constant = GroupSample {
            prompt: 0,
            outputs: vec![1, 2, 3],
            rewards: vec![0.4; 3],
        };
        assert!(ustat_average(&p, &env, &constant).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decomposition_identities() {
        let (env, p) = setup(4);
        let table = p.probability_table();
        for seed in 0..20 {
            let batch = collect_batch(&p, &env, 1, 6, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let group = &batch.groups[0];
            let parts = hoeffding_decompose(&p, &env, group.prompt, group).unwrap();
            let u = ustat_average(&p, &env, group).unwrap();
            for (a, b) in parts.total().iter().zip(&u) {
                assert!((a - b).abs() < 1e-10);
            }
            let oracle = estimate_gradient_meta(
                &p,
                &env,
                &GroupBatch::new(vec![group.clone()], 0),
                &BaselineKind::OracleValue,
            )
            .unwrap();
            let g = PromptView::new(&table, &env, group.prompt).gradient;
            for ((f, o), gi) in parts.first_order.iter().zip(&oracle.vector).zip(&g) {
                assert!((f - (o - gi)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn second_order_moment_by_enumeration() {
        // E||zeta2||^2 over all ordered pairs, from the decomposition itself
        let (env, p) = setup(5);
        let table = p.probability_table();
        let view = PromptView::new(&table, &env, 1);
        let n = view.num_outputs();
        let mut direct = 0.0;
        let mut kernel = 0.0;
        for a in 0..n {
            for b in 0..n {
                let group = GroupSample::from_ids(&env, 1, vec![a, b]);
                let parts = hoeffding_with_view(&table, &view, &env, &group).unwrap();
                let w = view.probs[a] * view.probs[b];
                direct += w * parts.second_order_norm_sq;
                kernel += w * norm_sq(&ustat_with_table(&table, &env, &group).unwrap());
            }
        }
        let m = PairMoments::from_view(&view);
        assert!((direct - m.zeta2_sq).abs() < 1e-12 * m.zeta2_sq.max(1.0));
        assert!((kernel - m.kernel_sq).abs() < 1e-12 * m.kernel_sq.max(1.0));
    }

    #[test]
    fn parts_serialize_with_norms() {
        let (env, p) = setup(6);
        let group = GroupSample::from_ids(&env, 0, vec![0, 3, 5]);
        let parts = hoeffding_decompose(&p, &env, 0, &group).unwrap();
        let v: serde_json::Value = serde_json::to_value(&parts).unwrap();
        assert!(v["second_order_norm_sq"].as_f64().unwrap() >= 0.0);
        assert_eq!(v["h0"].as_array().unwrap().len(), p.dim());
    }
}
