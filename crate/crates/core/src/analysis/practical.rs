//! Off-policy bias of the practical estimator and the arcsin objective that
//! normalized advantages ascend.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::log_log_slope;
use super::mse::{enumerate_prompt, for_each_group};
use super::EstimatorKind;
use crate::env::{Environment, DEFAULT_ENUMERATION_CAP};
use crate::error::{LabError, Result};
use crate::grad::{
    advantage_normalized, collect_batch_with_table, practical_gradient_with_tables, GroupBatch, GroupSample,
    PracticalOptions,
};
use crate::policy::{axpy, norm_sq, output_distribution, value_from_table, PolicyParams, ProbTable};
use crate::rng::stream;

/// Exact `E_old` of the practical estimator with one group per batch (the
/// expectation does not depend on `B`).
pub fn practical_expectation(
    cur: &ProbTable,
    old: &ProbTable,
    reference: &ProbTable,
    env: &Environment,
    g: usize,
    opts: PracticalOptions,
    cap: u64,
) -> Result<Vec<f64>> {
    let d = cur.as_slice().len();
    let mut out = vec![0.0; d];
    for x in 0..env.num_prompts() {
        let probs = output_distribution(old, env, x);
        let w = env.weight(x);
        let mut err = None;
        for_each_group(&probs, g, cap, |q, ys| {
            if err.is_some() {
                return;
            }
            let batch = GroupBatch::new(vec![GroupSample::from_ids(env, x, ys.to_vec())], 0);
            match practical_gradient_with_tables(cur, old, reference, env, &batch, opts) {
                Ok(v) => axpy(w * q, &v, &mut out),
                Err(e) => err = Some(e),
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(out)
}

/// Target of the practical estimator: the same advantages and KL term, but
/// reweighted by the sequence-level ratio `pi_cur(y) / pi_old(y)` instead of
/// the per-token ratios.
///
/// `E_old[(1/G) sum_g mu(y_g) (A_g score_cur(y_g) + kappa sum_t (ref_t / cur_t - 1) grad log cur_t)]`
pub fn target_gradient(
    cur: &ProbTable,
    old: &ProbTable,
    reference: &ProbTable,
    env: &Environment,
    g: usize,
    kappa: f64,
    cap: u64,
) -> Result<Vec<f64>> {
    let d = cur.as_slice().len();
    let ix = cur.indexer();
    let vocab = ix.vocab();
    let mut out = vec![0.0; d];
    for x in 0..env.num_prompts() {
        let n = env.outputs().len();
        let probs = output_distribution(old, env, x);
        // per output: sequence ratio, current score, KL direction
        let mut ratio = vec![0.0; n];
        let mut score = vec![vec![0.0; d]; n];
        let mut kl = vec![vec![0.0; d]; n];
        for y in 0..n {
            if probs[y] == 0.0 {
                continue;
            }
            ratio[y] = cur.output_prob(env, x, y) / probs[y];
            for &(s, t) in env.outputs().path(y) {
                let qc = cur.prob(x, s, t);
                let c = reference.prob(x, s, t) / qc - 1.0;
                let start = ix.row(x, s);
                for (k, &q) in cur.row(x, s).iter().enumerate() {
                    score[y][start + k] -= q;
                    kl[y][start + k] -= c * q;
                }
                score[y][start + t as usize] += 1.0;
                kl[y][start + t as usize] += c;
            }
            debug_assert_eq!(vocab, cur.row(x, 0).len());
        }
        let w = env.weight(x);
        let gf = g as f64;
        let mut err = None;
        for_each_group(&probs, g, cap, |q, ys| {
            if err.is_some() {
                return;
            }
            let rewards: Vec<f64> = ys.iter().map(|&y| env.reward_of(x, y)).collect();
            let adv = match advantage_normalized(&rewards, Default::default()) {
                Ok(a) => a,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            };
            for (&y, a) in ys.iter().zip(&adv) {
                let c = w * q * ratio[y] / gf;
                axpy(c * a, &score[y], &mut out);
                if kappa != 0.0 {
                    axpy(c * kappa, &kl[y], &mut out);
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub displacement: f64,
    /// `||E estimator - target||`, by enumeration.
    pub bias_exact: f64,
    /// `||MC mean - target||` over `reps` batches, when requested.
    pub bias_mc: Option<f64>,
    /// `sqrt(sum_i se_i^2)` of the Monte-Carlo mean, the size of a zero bias
    /// after sampling.
    pub mc_noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub kappa: f64,
    #[serde(rename = "G")]
    pub g: usize,
    pub rows: Vec<BiasRow>,
    /// Log-log slope of the exact bias over the positive displacements.
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasOptions {
    pub kappa: f64,
    #[serde(rename = "G")]
    pub g: usize,
    /// Groups per Monte-Carlo batch.
    #[serde(rename = "B")]
    pub b: usize,
    /// Monte-Carlo batches per displacement; 0 skips the simulation.
    pub reps: usize,
    pub seed: u64,
}

/// Bias of the practical estimator at `theta_cur = theta_old + s * direction`
/// for every displacement `s`.
pub fn practical_bias_curve(
    env: &Environment,
    old: &PolicyParams,
    reference: &PolicyParams,
    direction: &[f64],
    displacements: &[f64],
    opts: BiasOptions,
) -> Result<BiasCurve> {
    if direction.len() != old.dim() || reference.dim() != old.dim() {
        return Err(LabError::Dimension("direction and reference must match the policy dimension".into()));
    }
    if opts.g < 2 {
        return Err(LabError::GroupTooSmall {
            group: opts.g,
            reason: "normalized advantages need at least two outputs",
        });
    }
    let popts = PracticalOptions::new(opts.kappa);
    let old_t = old.probability_table();
    let ref_t = reference.probability_table();
    let rows = displacements
        .iter()
        .enumerate()
        .map(|(cell, &s)| {
            let cur = old.displaced(direction, s);
            let cur_t = cur.probability_table();
            let target = target_gradient(&cur_t, &old_t, &ref_t, env, opts.g, opts.kappa, DEFAULT_ENUMERATION_CAP)?;
            let expect = practical_expectation(&cur_t, &old_t, &ref_t, env, opts.g, popts, DEFAULT_ENUMERATION_CAP)?;
            let diff: Vec<f64> = expect.iter().zip(&target).map(|(a, b)| a - b).collect();
            let (bias_mc, mc_noise) = if opts.reps > 0 {
                let (m, se) = practical_monte_carlo(&cur_t, &old_t, &ref_t, env, opts, cell as u64)?;
                let d: Vec<f64> = m.iter().zip(&target).map(|(a, b)| a - b).collect();
                (Some(norm_sq(&d).sqrt()), Some(norm_sq(&se).sqrt()))
            } else {
                (None, None)
            };
            Ok(BiasRow {
                displacement: s,
                bias_exact: norm_sq(&diff).sqrt(),
                bias_mc,
                mc_noise,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pos: Vec<&BiasRow> = rows.iter().filter(|r| r.displacement > 0.0 && r.bias_exact > 0.0).collect();
    let slope = if pos.len() >= 2 {
        log_log_slope(
            &pos.iter().map(|r| r.displacement).collect::<Vec<_>>(),
            &pos.iter().map(|r| r.bias_exact).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    Ok(BiasCurve {
        kappa: opts.kappa,
        g: opts.g,
        rows,
        slope,
    })
}

fn practical_monte_carlo(
    cur: &ProbTable,
    old: &ProbTable,
    reference: &ProbTable,
    env: &Environment,
    opts: BiasOptions,
    cell: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let popts = PracticalOptions::new(opts.kappa);
    let samples: Vec<Vec<f64>> = (0..opts.reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(opts.seed, crate::rng::job_id(cell, rep));
            let batch = collect_batch_with_table(old, env, opts.b.max(1), opts.g, 0, &mut rng);
            practical_gradient_with_tables(cur, old, reference, env, &batch, popts)
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let d = cur.as_slice().len();
    let mut mean = vec![0.0; d];
    for s in &samples {
        axpy(1.0 / n, s, &mut mean);
    }
    let mut var = vec![0.0; d];
    for s in &samples {
        for ((v, a), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (a - m).powi(2) / (n - 1.0);
        }
    }
    Ok((mean, var.iter().map(|v| (v / n).sqrt()).collect()))
}

/// `sum_x w(x) 2 arcsin(sqrt(V(x)))`.
pub fn arcsin_objective(p: &PolicyParams, env: &Environment) -> f64 {
    let t = p.probability_table();
    (0..env.num_prompts())
        .map(|x| env.weight(x) * 2.0 * value_from_table(&t, env, x).clamp(0.0, 1.0).sqrt().asin())
        .sum()
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    // recursive, stable for the moderate n used here
    let mut out = vec![0.0; n + 1];
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let mut ln_c = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        out[k] = (ln_c + k as f64 * ln_p + (n - k) as f64 * ln_q).exp();
    }
    out
}

/// For binary rewards, `E[g_hat(x)] = c_G(V) g(x)` under normalized
/// advantages with the hard-zero rule.
pub fn normalized_coefficient(v: f64, g: usize) -> f64 {
    let gf = g as f64;
    let se = |s: usize| {
        let s = s as f64;
        (s * (gf - s) / (gf * (gf - 1.0))).sqrt()
    };
    let pmf = binomial_pmf(g - 1, v);
    let mut a1 = 0.0;
    let mut a0 = 0.0;
    for (k, q) in pmf.iter().enumerate() {
        let s1 = se(k + 1);
        if s1 > 0.0 {
            a1 += q * ((g - 1 - k) as f64 / (gf - 1.0)) / s1;
        }
        let s0 = se(k);
        if s0 > 0.0 {
            a0 -= q * (k as f64 / (gf - 1.0)) / s0;
        }
    }
    a1 - a0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcsinReport {
    #[serde(rename = "G")]
    pub g: usize,
    pub values: Vec<f64>,
    pub objective: f64,
    /// `c_G(V(x))` per prompt.
    pub coefficients: Vec<f64>,
    /// Max relative error of the exact finite-`G` expectation.
    pub max_rel_error_finite: f64,
    /// Same with `c = 1 / sqrt(V (1 - V))`, the large-`G` limit.
    pub max_rel_error_large_g: f64,
    /// The error the check is judged on.
    pub max_rel_error: f64,
    /// `finite_g` or `large_g`.
    pub mode: String,
}

/// Tolerance of the arcsin check.
pub const ARCSIN_TOL: f64 = 1e-2;

/// Compares the expected normalized-advantage estimate at `p` with central
/// differences of the arcsin objective.
///
/// The exact finite-`G` expectation is used when it is within
/// [`ARCSIN_TOL`]; otherwise the large-`G` limit is reported as the verdict.
pub fn arcsin_gradient_check(p: &PolicyParams, env: &Environment, g: usize, delta: f64) -> Result<ArcsinReport> {
    if g < 2 {
        return Err(LabError::GroupTooSmall {
            group: g,
            reason: "normalized advantages need at least two outputs",
        });
    }
    for x in 0..env.num_prompts() {
        if env.rewards(x).iter().any(|&z| z != 0.0 && z != 1.0) {
            return Err(LabError::InvalidArgument(format!("prompt {x} has non-binary rewards")));
        }
    }
    let table = p.probability_table();
    let values: Vec<f64> = (0..env.num_prompts()).map(|x| value_from_table(&table, env, x)).collect();
    for (x, &v) in values.iter().enumerate() {
        if !(v > delta && v < 1.0 - delta) {
            return Err(LabError::InvalidArgument(format!(
                "prompt {x} has V = {v}, outside ({delta}, {}); the reward std is degenerate",
                1.0 - delta
            )));
        }
    }
    let exact = crate::policy::exact_gradient_from_table(&table, env);
    let d = p.dim();
    let coefficients: Vec<f64> = values.iter().map(|&v| normalized_coefficient(v, g)).collect();
    let mut finite = vec![0.0; d];
    let mut large = vec![0.0; d];
    for x in 0..env.num_prompts() {
        let w = env.weight(x);
        axpy(w * coefficients[x], &exact.per_prompt[x], &mut finite);
        let v = values[x];
        axpy(w / (v * (1.0 - v)).sqrt(), &exact.per_prompt[x], &mut large);
    }
    let h = 1e-5;
    let fd: Vec<f64> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            (arcsin_objective(&p.displaced(&e, h), env) - arcsin_objective(&p.displaced(&e, -h), env)) / (2.0 * h)
        })
        .collect();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = |a: &[f64]| a.iter().zip(&fd).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
    let ef = rel(&finite);
    let el = rel(&large);
    let (max_rel_error, mode) = if ef <= ARCSIN_TOL { (ef, "finite_g") } else { (el, "large_g") };
    Ok(ArcsinReport {
        g,
        objective: arcsin_objective(p, env),
        values,
        coefficients,
        max_rel_error_finite: ef,
        max_rel_error_large_g: el,
        max_rel_error,
        mode: mode.to_string(),
    })
}

/// Exact expected normalized-advantage estimate by group enumeration.
pub fn normalized_expectation(p: &PolicyParams, env: &Environment, g: usize, cap: u64) -> Result<Vec<f64>> {
    let table = p.probability_table();
    let mut out = vec![0.0; p.dim()];
    for x in 0..env.num_prompts() {
        let (m, _, _) = enumerate_prompt(&table, env, x, &EstimatorKind::normalized(), g, cap, false)?;
        axpy(env.weight(x), &m, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvSpec};
    use crate::grad::normalized_gradient_with_table;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bias_env() -> (Environment, PolicyParams, PolicyParams, Vec<f64>) {
        // two tokens, three content steps: four outputs, hard rewards
        let env = build_env(&EnvSpec::explicit(2, 0, 3, vec![vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let old = PolicyParams::random(&env, 0.6, &mut rng);
        let reference = PolicyParams::random(&env, 0.6, &mut rng);
        let dir = PolicyParams::random(&env, 1.0, &mut rng).logits().to_vec();
        (env, old, reference, dir)
    }

    #[test]
    fn on_policy_target_is_the_normalized_expectation() {
        let (env, old, reference, _) = bias_env();
        let t = old.probability_table();
        let r = reference.probability_table();
        let target = target_gradient(&t, &t, &r, &env, 3, 0.0, 10_000).unwrap();
        let norm = normalized_expectation(&old, &env, 3, 10_000).unwrap();
        for (a, b) in target.iter().zip(&norm) {
            assert!((a - b).abs() < 1e-14);
        }
        // the estimator on one batch matches the normalized meta estimator
        let batch = collect_batch_with_table(&t, &env, 4, 3, 0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = practical_gradient_with_tables(&t, &t, &r, &env, &batch, PracticalOptions::new(0.0)).unwrap();
        let b = normalized_gradient_with_table(&t, &env, &batch, Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bias_is_zero_on_policy_and_grows_linearly() {
        let (env, old, reference, dir) = bias_env();
        let opts = BiasOptions {
            kappa: 1.0,
            g: 4,
            b: 4,
            reps: 4000,
            seed: 5,
        };
        let c = practical_bias_curve(&env, &old, &reference, &dir, &[0.0, 0.01, 0.03, 0.1], opts).unwrap();
        assert!(c.rows[0].bias_exact < 1e-14);
        let r0 = c.rows[0];
        assert!(r0.bias_mc.unwrap() <= 3.0 * r0.mc_noise.unwrap(), "{r0:?}");
        assert!(c.slope >= 0.8, "slope {}", c.slope);
    }

    #[test]
    fn kl_term_adds_bias() {
        let (env, old, reference, dir) = bias_env();
        let mk = |kappa| BiasOptions {
            kappa,
            g: 4,
            b: 1,
            reps: 0,
            seed: 0,
        };
        let a = practical_bias_curve(&env, &old, &reference, &dir, &[0.05], mk(0.0)).unwrap();
        let b = practical_bias_curve(&env, &old, &reference, &dir, &[0.05], mk(1.0)).unwrap();
        assert!(b.rows[0].bias_exact >= a.rows[0].bias_exact);
    }

    #[test]
    fn coefficient_matches_enumeration() {
        let env = build_env(&EnvSpec::explicit(3, 0, 1, vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]])).unwrap();
        let p = PolicyParams::random(&env, 0.7, &mut ChaCha8Rng::seed_from_u64(2));
        let t = p.probability_table();
        for g in [2, 3, 5] {
            for x in 0..2 {
                let (m, _, _) = enumerate_prompt(&t, &env, x, &EstimatorKind::normalized(), g, 100_000, false).unwrap();
                let v = value_from_table(&t, &env, x);
                let gx = crate::policy::prompt_gradient(&t, &env, x);
                let c = normalized_coefficient(v, g);
                for (a, b) in m.iter().zip(&gx) {
                    assert!((a - c * b).abs() < 1e-13, "G={g}");
                }
            }
        }
    }

    #[test]
    fn half_value_contributes_half_pi() {
        let env = build_env(&EnvSpec::explicit(2, 0, 1, vec![vec![1.0, 0.0]])).unwrap();
        let p = PolicyParams::zeros(&env);
        assert!((arcsin_objective(&p, &env) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn arcsin_check_at_64() {
        let env = build_env(&EnvSpec::explicit(3, 0, 2, vec![
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0],
        ]))
        .unwrap();
        let p = PolicyParams::random(&env, 0.5, &mut ChaCha8Rng::seed_from_u64(8));
        let r = arcsin_gradient_check(&p, &env, 64, 0.05).unwrap();
        assert!(r.max_rel_error <= 1e-2, "{r:?}");
    }

    #[test]
    fn uniform_rewards_are_rejected() {
        let env = build_env(&EnvSpec::explicit(2, 0, 1, vec![vec![1.0, 1.0]])).unwrap();
        assert!(arcsin_gradient_check(&PolicyParams::zeros(&env), &env, 8, 0.05).is_err());
    }
}
