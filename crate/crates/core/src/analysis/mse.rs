//! Mean squared error of the group estimators, exactly and by simulation.
//!
//! With `B` independent groups of equal size the estimate is the mean of `B`
//! i.i.d. per-group estimates, so everything reduces to the per-prompt mean
//! `m(x)` and spread `E||g_hat(x) - m(x)||^2`:
//!
//! `MSE = ||m - g||^2 + (1/B) sum_x w(x) (E||g_hat(x) - m(x)||^2 + ||m(x) - m||^2)`.
//!
//! For the unbiased baselines `m(x) = g(x)` and this is the split into the
//! prompt-variance term and the averaged per-prompt MSE.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_log_slope, mean_ci, EstimatorKind};
use crate::env::{Environment, DEFAULT_ENUMERATION_CAP};
use crate::error::{LabError, Result};
use crate::grad::{collect_batch_with_table, oracle_values, BaselineKind, GroupBatch, GroupSample};
use crate::policy::{axpy, exact_gradient_from_table, norm_sq, PolicyParams, ProbTable, PromptView};
use crate::rng::stream;
use crate::ustat::PairMoments;

/// Calls `f(prob, outputs)` for every ordered group of `g` outputs with
/// positive probability under `probs`.
pub(crate) fn for_each_group(probs: &[f64], g: usize, cap: u64, mut f: impl FnMut(f64, &[usize])) -> Result<()> {
    let support: Vec<usize> = (0..probs.len()).filter(|&y| probs[y] > 0.0).collect();
    let count = (support.len() as u128).checked_pow(g as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(LabError::EnumerationCap { count, cap });
    }
    let mut idx = vec![0usize; g];
    let mut outputs: Vec<usize> = vec![support[0]; g];
    loop {
        let prob: f64 = outputs.iter().map(|&y| probs[y]).product();
        f(prob, &outputs);
        let mut k = 0;
        loop {
            if k == g {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < support.len() {
                outputs[k] = support[idx[k]];
                break;
            }
            idx[k] = 0;
            outputs[k] = support[0];
            k += 1;
        }
    }
}

/// Exact per-prompt moments of one group estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMse {
    pub prompt: usize,
    /// `E g_hat(x)`.
    pub mean: Vec<f64>,
    /// `E||g_hat(x) - m(x)||^2`.
    pub variance_trace: f64,
    /// `E||g_hat(x) - g(x)||^2`.
    pub mse: f64,
}

fn check_group(kind: &EstimatorKind, g: usize) -> Result<()> {
    if g < kind.min_group() {
        return Err(LabError::GroupTooSmall {
            group: g,
            reason: "the estimator needs at least two outputs per group",
        });
    }
    Ok(())
}

fn constant_baseline(kind: &EstimatorKind, view: &PromptView, x: usize) -> Result<Option<f64>> {
    Ok(match kind {
        EstimatorKind::Meta { baseline } => match baseline {
            BaselineKind::Vanilla => Some(0.0),
            BaselineKind::OracleValue => Some(view.value),
            BaselineKind::Custom(v) => Some(
                *v.get(x)
                    .ok_or_else(|| LabError::Baseline(format!("custom baseline has no entry for prompt {x}")))?,
            ),
            BaselineKind::LeaveOneOut => None,
        },
        EstimatorKind::Normalized { .. } => None,
    })
}

/// Per-prompt MSE in closed form for the meta estimators and by group
/// enumeration for normalized advantages.
pub fn prompt_mse_exact(
    table: &ProbTable,
    env: &Environment,
    x: usize,
    kind: &EstimatorKind,
    g: usize,
    cap: u64,
) -> Result<PromptMse> {
    check_group(kind, g)?;
    let view = PromptView::new(table, env, x);
    prompt_mse_from_view(table, env, &view, x, kind, g, cap)
}

fn prompt_mse_from_view(
    table: &ProbTable,
    env: &Environment,
    view: &PromptView,
    x: usize,
    kind: &EstimatorKind,
    g: usize,
    cap: u64,
) -> Result<PromptMse> {
    let gf = g as f64;
    if let Some(c) = constant_baseline(kind, view, x)? {
        let second: f64 = view
            .probs
            .iter()
            .zip(&view.rewards)
            .zip(&view.scores)
            .map(|((q, z), s)| q * norm_sq(s) * (z - c).powi(2))
            .sum();
        let var = (second - norm_sq(&view.gradient)) / gf;
        return Ok(PromptMse {
            prompt: x,
            mean: view.gradient.clone(),
            variance_trace: var,
            mse: var,
        });
    }
    if matches!(kind, EstimatorKind::Meta { .. }) {
        let var = PairMoments::from_view(view).loo_mse(g);
        return Ok(PromptMse {
            prompt: x,
            mean: view.gradient.clone(),
            variance_trace: var,
            mse: var,
        });
    }
    prompt_mse_enumerated(table, env, x, kind, g, cap)
}

/// Per-prompt moments by summing over every ordered group.
pub fn prompt_mse_enumerated(
    table: &ProbTable,
    env: &Environment,
    x: usize,
    kind: &EstimatorKind,
    g: usize,
    cap: u64,
) -> Result<PromptMse> {
    let (mean, second, _) = enumerate_prompt(table, env, x, kind, g, cap, false)?;
    let gx = PromptView::new(table, env, x).gradient;
    let variance_trace = (second - norm_sq(&mean)).max(0.0);
    let bias: Vec<f64> = mean.iter().zip(&gx).map(|(a, b)| a - b).collect();
    Ok(PromptMse {
        prompt: x,
        variance_trace,
        mse: variance_trace + norm_sq(&bias),
        mean,
    })
}

/// `(E g_hat, E||g_hat||^2, E g_hat g_hat')` for one prompt by enumeration.
pub(crate) fn enumerate_prompt(
    table: &ProbTable,
    env: &Environment,
    x: usize,
    kind: &EstimatorKind,
    g: usize,
    cap: u64,
    want_outer: bool,
) -> Result<(Vec<f64>, f64, Option<DMatrix<f64>>)> {
    check_group(kind, g)?;
    let probs = crate::policy::output_distribution(table, env, x);
    let d = table.as_slice().len();
    let oracle = kind.needs_oracle().then(|| oracle_values(table, env));
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    let mut outer = want_outer.then(|| DMatrix::zeros(d, d));
    let mut err = None;
    for_each_group(&probs, g, cap, |q, outputs| {
        if err.is_some() {
            return;
        }
        let batch = GroupBatch::new(vec![GroupSample::from_ids(env, x, outputs.to_vec())], 0);
        match kind.estimate(table, env, &batch, oracle.as_deref()) {
            Ok(v) => {
                axpy(q, &v, &mut mean);
                second += q * norm_sq(&v);
                if let Some(o) = outer.as_mut() {
                    let col = nalgebra::DVector::from_column_slice(&v);
                    o.ger(q, &col, &col, 1.0);
                }
            }
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok((mean, second, outer))
}

/// Exact MSE of the minibatch estimate, split into its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSplit {
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub total: f64,
    /// `(1/B) sum_x w ||m(x) - m||^2`; equals `(1/B) E||g(X) - g||^2` when unbiased.
    pub prompt_variance: f64,
    /// `sum_x w E||g_hat(x) - m(x)||^2`, before dividing by `B`.
    pub per_prompt_mean: f64,
    /// `||m - g||^2`.
    pub bias_sq: f64,
    pub per_prompt: Vec<f64>,
}

/// Exact minibatch MSE at a parameter.
pub fn mse_exact(p: &PolicyParams, env: &Environment, kind: &EstimatorKind, b: usize, g: usize) -> Result<MseSplit> {
    mse_exact_with_table(&p.probability_table(), env, kind, b, g, DEFAULT_ENUMERATION_CAP)
}

pub fn mse_exact_with_table(
    table: &ProbTable,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    cap: u64,
) -> Result<MseSplit> {
    if b == 0 {
        return Err(LabError::InvalidArgument("B must be at least 1".into()));
    }
    check_group(kind, g)?;
    let exact = exact_gradient_from_table(table, env);
    let d = exact.total.len();
    let per: Vec<PromptMse> = (0..env.num_prompts())
        .map(|x| {
            let view = PromptView::new(table, env, x);
            prompt_mse_from_view(table, env, &view, x, kind, g, cap)
        })
        .collect::<Result<_>>()?;
    let mut m = vec![0.0; d];
    for (x, pm) in per.iter().enumerate() {
        axpy(env.weight(x), &pm.mean, &mut m);
    }
    let mut spread = 0.0;
    let mut inner = 0.0;
    for (x, pm) in per.iter().enumerate() {
        let diff: Vec<f64> = pm.mean.iter().zip(&m).map(|(a, c)| a - c).collect();
        spread += env.weight(x) * norm_sq(&diff);
        inner += env.weight(x) * pm.variance_trace;
    }
    let bias: Vec<f64> = m.iter().zip(&exact.total).map(|(a, c)| a - c).collect();
    let bias_sq = norm_sq(&bias);
    let bf = b as f64;
    Ok(MseSplit {
        b,
        g,
        total: bias_sq + (spread + inner) / bf,
        prompt_variance: spread / bf,
        per_prompt_mean: inner,
        bias_sq,
        per_prompt: per.iter().map(|pm| pm.mse).collect(),
    })
}

/// Exact MSE by summing over every batch realization: all `B`-tuples of
/// (prompt, ordered group) pairs.
pub fn mse_exact_small(
    p: &PolicyParams,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    cap: u64,
) -> Result<f64> {
    check_group(kind, g)?;
    if b == 0 {
        return Err(LabError::InvalidArgument("B must be at least 1".into()));
    }
    let table = p.probability_table();
    let exact = exact_gradient_from_table(&table, env).total;
    let oracle = kind.needs_oracle().then(|| oracle_values(&table, env));
    let y = env.outputs().len() as u128;
    let per_group = (env.num_prompts() as u128).saturating_mul(y.checked_pow(g as u32).unwrap_or(u128::MAX));
    let count = per_group.checked_pow(b as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(LabError::EnumerationCap { count, cap });
    }
    // every group realization with its probability and estimate
    let mut groups: Vec<(f64, Vec<f64>)> = Vec::new();
    for x in 0..env.num_prompts() {
        let probs: Vec<f64> = (0..env.outputs().len()).map(|y| table.output_prob(env, x, y)).collect();
        let idx_all: Vec<usize> = (0..probs.len()).collect();
        let mut err = None;
        // enumerate the full product, zero-probability outputs included
        let ones = vec![1.0; probs.len()];
        for_each_group(&ones, g, u64::MAX, |_, outs| {
            if err.is_some() {
                return;
            }
            let q: f64 = env.weight(x) * outs.iter().map(|&o| probs[idx_all[o]]).product::<f64>();
            let batch = GroupBatch::new(vec![GroupSample::from_ids(env, x, outs.to_vec())], 0);
            match kind.estimate(&table, env, &batch, oracle.as_deref()) {
                Ok(v) => groups.push((q, v)),
                Err(e) => err = Some(e),
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
    }
    let k = groups.len();
    let d = exact.len();
    let mut idx = vec![0usize; b];
    let mut total = 0.0;
    let mut sum = vec![0.0; d];
    loop {
        let prob: f64 = idx.iter().map(|&i| groups[i].0).product();
        if prob > 0.0 {
            sum.iter_mut().for_each(|v| *v = 0.0);
            for &i in &idx {
                axpy(1.0 / b as f64, &groups[i].1, &mut sum);
            }
            let err: f64 = sum.iter().zip(&exact).map(|(a, c)| (a - c).powi(2)).sum();
            total += prob * err;
        }
        let mut j = 0;
        loop {
            if j == b {
                return Ok(total);
            }
            idx[j] += 1;
            if idx[j] < k {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Monte-Carlo MSE with a 95% confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub estimator: String,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub replications: usize,
    pub mse_mean: f64,
    pub ci_halfwidth: f64,
    pub exact_mse: Option<f64>,
}

impl MseReport {
    pub fn covers(&self, value: f64) -> bool {
        (self.mse_mean - value).abs() <= self.ci_halfwidth
    }
}

/// Minimum replication count accepted by [`mse_monte_carlo`].
pub const MIN_REPLICATIONS: usize = 100;

/// Independent batches, one seed stream per replication.
fn replicate<T: Send>(
    table: &ProbTable,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    reps: usize,
    seed: u64,
    f: impl Fn(Vec<f64>) -> T + Sync,
) -> Result<Vec<T>> {
    check_group(kind, g)?;
    if b == 0 {
        return Err(LabError::InvalidArgument("B must be at least 1".into()));
    }
    let oracle = kind.needs_oracle().then(|| oracle_values(table, env));
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, rep);
            let batch = collect_batch_with_table(table, env, b, g, 0, &mut rng);
            kind.estimate(table, env, &batch, oracle.as_deref()).map(&f)
        })
        .collect()
}

/// Mean of `||g_hat - g||^2` over `reps` independent batches.
pub fn mse_monte_carlo(
    p: &PolicyParams,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    reps: usize,
    seed: u64,
) -> Result<MseReport> {
    if reps < MIN_REPLICATIONS {
        return Err(LabError::InvalidArgument(format!(
            "need at least {MIN_REPLICATIONS} replications, got {reps}"
        )));
    }
    let table = p.probability_table();
    let exact = exact_gradient_from_table(&table, env).total;
    let errs = replicate(&table, env, kind, b, g, reps, seed, |v| {
        v.iter().zip(&exact).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
    })?;
    let (mse_mean, ci_halfwidth) = mean_ci(&errs);
    Ok(MseReport {
        estimator: kind.label(),
        b,
        g,
        replications: reps,
        mse_mean,
        ci_halfwidth,
        exact_mse: None,
    })
}

/// Componentwise Monte-Carlo mean of the estimate and its standard error.
pub fn monte_carlo_mean(
    p: &PolicyParams,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    reps: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let table = p.probability_table();
    let d = table.as_slice().len();
    let samples = replicate(&table, env, kind, b, g, reps, seed, |v| v)?;
    let n = samples.len() as f64;
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
    let se = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok((mean, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleCurveRow {
    #[serde(rename = "G")]
    pub g: usize,
    pub mse_loo: f64,
    pub mse_oracle: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCurve {
    pub rows: Vec<OracleCurveRow>,
    /// Log-log slope of the difference against `G`.
    pub slope: f64,
    /// `max / min - 1` of `G * MSE(oracle)` over the grid.
    pub oracle_scaled_spread: f64,
}

/// Prompt-averaged exact per-prompt MSE of the leave-one-out and oracle
/// estimators over a grid of group sizes.
pub fn oracle_convergence_curve(p: &PolicyParams, env: &Environment, gs: &[usize]) -> Result<OracleCurve> {
    if gs.len() < 3 {
        return Err(LabError::InvalidArgument("need at least three group sizes".into()));
    }
    if gs.iter().any(|&g| g < 2) {
        return Err(LabError::InvalidArgument("group sizes must be at least 2".into()));
    }
    let table = p.probability_table();
    let moments: Vec<(f64, PairMoments)> = (0..env.num_prompts())
        .map(|x| (env.weight(x), PairMoments::from_view(&PromptView::new(&table, env, x))))
        .collect();
    let rows: Vec<OracleCurveRow> = gs
        .iter()
        .map(|&g| {
            let gf = g as f64;
            let loo: f64 = moments.iter().map(|(w, m)| w * m.loo_mse(g)).sum();
            let oracle: f64 = moments.iter().map(|(w, m)| w * m.oracle_trace / gf).sum();
            OracleCurveRow {
                g,
                mse_loo: loo,
                mse_oracle: oracle,
                difference: loo - oracle,
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.g as f64).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.difference).collect();
    let scaled: Vec<f64> = rows.iter().map(|r| r.mse_oracle * r.g as f64).collect();
    let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
    Ok(OracleCurve {
        slope: log_log_slope(&xs, &ds),
        oracle_scaled_spread: hi / lo - 1.0,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CovarianceMode {
    Exact,
    MonteCarlo { reps: usize, seed: u64 },
}

fn outer_moment(view: &PromptView, coef: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let d = view.gradient.len();
    let mut m = DMatrix::zeros(d, d);
    for ((q, z), s) in view.probs.iter().zip(&view.rewards).zip(&view.scores) {
        let c = q * coef(*z);
        if c != 0.0 {
            let v = nalgebra::DVector::from_column_slice(s);
            m.ger(c, &v, &v, 1.0);
        }
    }
    m
}

/// Per-prompt covariance of one group estimate and its mean.
fn prompt_covariance(
    table: &ProbTable,
    env: &Environment,
    x: usize,
    kind: &EstimatorKind,
    g: usize,
    cap: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let view = PromptView::new(table, env, x);
    let gv = nalgebra::DVector::from_column_slice(&view.gradient);
    let ggt = &gv * gv.transpose();
    let gf = g as f64;
    if let Some(c) = constant_baseline(kind, &view, x)? {
        let second = outer_moment(&view, |z| (z - c).powi(2));
        return Ok((view.gradient.clone(), (second - ggt) / gf));
    }
    if matches!(kind, EstimatorKind::Meta { .. }) {
        let sigma_o = outer_moment(&view, |z| (z - view.value).powi(2)) - &ggt;
        let var_z: f64 = view.probs.iter().zip(&view.rewards).map(|(q, z)| q * (z - view.value).powi(2)).sum();
        let zeta2 = (outer_moment(&view, |_| 1.0) * var_z + &ggt) * 0.5;
        return Ok((view.gradient.clone(), sigma_o / gf + zeta2 * (2.0 / (gf * (gf - 1.0)))));
    }
    let (mean, _, outer) = enumerate_prompt(table, env, x, kind, g, cap, true)?;
    let mv = nalgebra::DVector::from_column_slice(&mean);
    let cov = outer.expect("requested") - &mv * mv.transpose();
    Ok((mean, cov))
}

/// Covariance of the minibatch estimate at a fixed parameter.
pub fn gradient_covariance(
    p: &PolicyParams,
    env: &Environment,
    kind: &EstimatorKind,
    b: usize,
    g: usize,
    mode: CovarianceMode,
) -> Result<DMatrix<f64>> {
    check_group(kind, g)?;
    let table = p.probability_table();
    let d = table.as_slice().len();
    match mode {
        CovarianceMode::Exact => {
            if b == 0 {
                return Err(LabError::InvalidArgument("B must be at least 1".into()));
            }
            let parts: Vec<(Vec<f64>, DMatrix<f64>)> = (0..env.num_prompts())
                .map(|x| prompt_covariance(&table, env, x, kind, g, DEFAULT_ENUMERATION_CAP))
                .collect::<Result<_>>()?;
            let mut m = vec![0.0; d];
            for (x, (mx, _)) in parts.iter().enumerate() {
                axpy(env.weight(x), mx, &mut m);
            }
            let mut cov = DMatrix::zeros(d, d);
            for (x, (mx, cx)) in parts.iter().enumerate() {
                let diff = nalgebra::DVector::from_iterator(d, mx.iter().zip(&m).map(|(a, c)| a - c));
                cov += cx * env.weight(x);
                cov.ger(env.weight(x), &diff, &diff, 1.0);
            }
            cov /= b as f64;
            Ok((&cov + cov.transpose()) * 0.5)
        }
        CovarianceMode::MonteCarlo { reps, seed } => {
            if reps < 2 {
                return Err(LabError::InvalidArgument("need at least two replications".into()));
            }
            let samples = replicate(&table, env, kind, b, g, reps, seed, |v| v)?;
            let n = samples.len() as f64;
            let mut mean = vec![0.0; d];
            for s in &samples {
                axpy(1.0 / n, s, &mut mean);
            }
            let mut cov = DMatrix::zeros(d, d);
            for s in &samples {
                let v = nalgebra::DVector::from_iterator(d, s.iter().zip(&mean).map(|(a, c)| a - c));
                cov.ger(1.0 / (n - 1.0), &v, &v, 1.0);
            }
            Ok(cov)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvSpec};
    use crate::ustat::hoeffding_with_view;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_token() -> Environment {
        // outputs: [eos] -> 1, [1] truncated -> 0
        build_env(&EnvSpec::explicit(2, 0, 1, vec![vec![1.0, 0.0]])).unwrap()
    }

    fn small(seed: u64) -> (Environment, PolicyParams) {
        let env = build_env(&EnvSpec::uniform(3, 0, 2, 1, "bounded-random").with_seed(seed)).unwrap();
        let p = PolicyParams::random(&env, 0.8, &mut ChaCha8Rng::seed_from_u64(seed));
        (env, p)
    }

    #[test]
    fn vanilla_two_token_is_one_eighth() {
        let env = two_token();
        let p = PolicyParams::zeros(&env);
        let kind = EstimatorKind::vanilla();
        let exact = mse_exact(&p, &env, &kind, 1, 1).unwrap().total;
        assert!((exact - 0.125).abs() < 1e-15);
        assert!((mse_exact_small(&p, &env, &kind, 1, 1, 1000).unwrap() - 0.125).abs() < 1e-15);
        let mc = mse_monte_carlo(&p, &env, &kind, 1, 1, 20_000, 7).unwrap();
        assert!(mc.covers(0.125), "{mc:?}");
    }

    #[test]
    fn deterministic_policy_has_zero_mse() {
        let env = two_token();
        let mut p = PolicyParams::zeros(&env);
        p.set(0, 0, 0, 800.0);
        let mc = mse_monte_carlo(&p, &env, &EstimatorKind::vanilla(), 2, 2, 200, 0).unwrap();
        assert_eq!(mc.mse_mean, 0.0);
    }

    #[test]
    fn ci_halves_at_four_times_the_reps() {
        let (env, p) = small(1);
        let k = EstimatorKind::leave_one_out();
        let a = mse_monte_carlo(&p, &env, &k, 2, 3, 4000, 1).unwrap();
        let b = mse_monte_carlo(&p, &env, &k, 2, 3, 16000, 2).unwrap();
        let ratio = a.ci_halfwidth / b.ci_halfwidth;
        assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn closed_form_matches_brute_force() {
        for seed in 0..4 {
            let (env, p) = small(seed);
            for kind in [
                EstimatorKind::vanilla(),
                EstimatorKind::leave_one_out(),
                EstimatorKind::oracle(),
                EstimatorKind::meta(BaselineKind::Custom(vec![0.3, 1.1])),
                EstimatorKind::normalized(),
            ] {
                for (b, g) in [(1, 2), (2, 2), (1, 3)] {
                    let brute = mse_exact_small(&p, &env, &kind, b, g, 1_000_000).unwrap();
                    let closed = mse_exact(&p, &env, &kind, b, g).unwrap();
                    assert!((brute - closed.total).abs() < 1e-10 * brute.max(1.0), "{kind:?} {b} {g}");
                }
            }
        }
    }

    #[test]
    fn brute_force_agrees_with_monte_carlo() {
        let (env, p) = small(5);
        let k = EstimatorKind::leave_one_out();
        let exact = mse_exact_small(&p, &env, &k, 2, 2, 1_000_000).unwrap();
        let mc = mse_monte_carlo(&p, &env, &k, 2, 2, 100_000, 3).unwrap();
        assert!((mc.mse_mean - exact).abs() <= 2.0 * mc.ci_halfwidth, "{exact} {mc:?}");
    }

    #[test]
    fn loo_at_two_is_the_kernel_second_moment_minus_g() {
        // with G = 2 the estimator is the kernel itself, so
        // E||h - g||^2 = E||h||^2 - ||g||^2
        let (env, p) = small(2);
        let table = p.probability_table();
        for x in 0..env.num_prompts() {
            let view = PromptView::new(&table, &env, x);
            let m = PairMoments::from_view(&view);
            let pm = prompt_mse_exact(&table, &env, x, &EstimatorKind::leave_one_out(), 2, 1000).unwrap();
            assert!((pm.mse - (m.kernel_sq - m.grad_sq)).abs() < 1e-12);
            // and the same from the explicit decomposition over pairs
            let mut direct = 0.0;
            for_each_group(&view.probs, 2, 1000, |q, ys| {
                let grp = GroupSample::from_ids(&env, x, ys.to_vec());
                let parts = hoeffding_with_view(&table, &view, &env, &grp).unwrap();
                let diff: Vec<f64> = parts.total().iter().zip(&view.gradient).map(|(a, b)| a - b).collect();
                direct += q * norm_sq(&diff);
            })
            .unwrap();
            assert!((pm.mse - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn split_holds_exactly() {
        for seed in 0..6 {
            let (env, p) = small(seed + 10);
            let k = EstimatorKind::leave_one_out();
            let s = mse_exact(&p, &env, &k, 2, 2).unwrap();
            let brute = mse_exact_small(&p, &env, &k, 2, 2, 1_000_000).unwrap();
            let table = p.probability_table();
            let exact = exact_gradient_from_table(&table, &env);
            let pv: f64 = (0..env.num_prompts())
                .map(|x| {
                    let d: Vec<f64> = exact.per_prompt[x].iter().zip(&exact.total).map(|(a, b)| a - b).collect();
                    env.weight(x) * norm_sq(&d)
                })
                .sum();
            let avg: f64 = s.per_prompt.iter().enumerate().map(|(x, m)| env.weight(x) * m).sum();
            assert!((brute - (pv / 2.0 + avg / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn cap_rejects_with_count() {
        let (env, p) = small(0);
        match mse_exact_small(&p, &env, &EstimatorKind::vanilla(), 3, 4, 1000) {
            Err(LabError::EnumerationCap { count, cap }) => {
                assert_eq!(cap, 1000);
                assert_eq!(count, (2u128 * 3u128.pow(4)).pow(3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oracle_curve_shape() {
        let env = build_env(&EnvSpec::uniform(3, 0, 3, 2, "bounded-random").with_seed(4)).unwrap();
        let p = PolicyParams::random(&env, 0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let c = oracle_convergence_curve(&p, &env, &[2, 4, 8, 16, 32, 64]).unwrap();
        assert!(c.rows.iter().all(|r| r.difference > 0.0));
        assert!(c.slope >= -2.6 && c.slope <= -1.4, "slope {}", c.slope);
        assert!(c.oracle_scaled_spread < 1e-10);
    }

    #[test]
    fn covariance_exact_matches_enumeration_and_monte_carlo() {
        let (env, p) = small(3);
        let table = p.probability_table();
        for kind in [EstimatorKind::vanilla(), EstimatorKind::leave_one_out(), EstimatorKind::oracle()] {
            let closed = gradient_covariance(&p, &env, &kind, 1, 3, CovarianceMode::Exact).unwrap();
            // brute force through the enumerated per-prompt moments
            let d = table.as_slice().len();
            let mut second = DMatrix::zeros(d, d);
            let mut mean = vec![0.0; d];
            for x in 0..env.num_prompts() {
                let (mx, _, outer) = enumerate_prompt(&table, &env, x, &kind, 3, 1000, true).unwrap();
                second += outer.unwrap() * env.weight(x);
                axpy(env.weight(x), &mx, &mut mean);
            }
            let mv = nalgebra::DVector::from_column_slice(&mean);
            let brute = second - &mv * mv.transpose();
            assert!((&closed - brute).amax() < 1e-12, "{kind:?}");
            assert!((closed.trace() - mse_exact(&p, &env, &kind, 1, 3).unwrap().total).abs() < 1e-12);
        }
        let kind = EstimatorKind::leave_one_out();
        let exact = gradient_covariance(&p, &env, &kind, 2, 2, CovarianceMode::Exact).unwrap();
        let reps = 200_000;
        let mc = gradient_covariance(&p, &env, &kind, 2, 2, CovarianceMode::MonteCarlo { reps, seed: 9 }).unwrap();
        // standard error of each entry from the same draws
        let samples = replicate(&table, &env, &kind, 2, 2, reps, 9, |v| v).unwrap();
        let d = exact.nrows();
        let n = reps as f64;
        let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
        for i in 0..d {
            for j in 0..d {
                let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
                let (_, half) = mean_ci(&prods);
                let se = half / 1.959_963_984_540_054;
                assert!((mc[(i, j)] - exact[(i, j)]).abs() <= 4.0 * se + 1e-12, "{i} {j}");
            }
        }
    }

    #[test]
    fn deterministic_oracle_covariance_is_zero() {
        let env = two_token();
        let mut p = PolicyParams::zeros(&env);
        p.set(0, 0, 0, 800.0);
        let c = gradient_covariance(&p, &env, &EstimatorKind::oracle(), 1, 2, CovarianceMode::Exact).unwrap();
        assert!(c.amax() < 1e-300);
    }
}
