//! Policy-gradient estimators.
//!
//! `estimate_gradient_meta` is the group estimator with a pluggable baseline
//! (vanilla, leave-one-out, oracle value, or a per-prompt constant).
//! `estimate_gradient_practical` is the production form with normalized
//! advantages, per-token importance ratios and the token-level KL term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Token};
use crate::error::{LabError, Result};
use crate::policy::{value_from_table, PolicyParams, ProbTable};

/// Default lower bound on token probabilities for importance ratios.
pub const DEFAULT_COVERAGE_FLOOR: f64 = 1e-8;

/// One prompt with its group of sampled outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub prompt: usize,
    /// Enumeration indices into the environment's output space.
    pub outputs: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl GroupSample {
    /// Builds a group from explicit token sequences, attaching rewards.
    pub fn from_sequences(env: &Environment, prompt: usize, seqs: &[Vec<Token>]) -> Result<Self> {
        let outputs = seqs
            .iter()
            .map(|s| env.resolve(prompt, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(env, prompt, outputs))
    }

    pub fn from_ids(env: &Environment, prompt: usize, outputs: Vec<usize>) -> Self {
        let rewards = outputs.iter().map(|&y| env.reward_of(prompt, y)).collect();
        Self { prompt, outputs, rewards }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn sequences<'e>(&self, env: &'e Environment) -> Vec<&'e [Token]> {
        self.outputs.iter().map(|&y| env.outputs().sequence(y)).collect()
    }
}

/// `B` groups sampled from one policy snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub groups: Vec<GroupSample>,
    /// Fingerprint of the logits that generated the batch.
    pub snapshot: u64,
}

impl GroupBatch {
    pub fn new(groups: Vec<GroupSample>, snapshot: u64) -> Self {
        Self { groups, snapshot }
    }

    pub fn batch_size(&self) -> usize {
        self.groups.len()
    }

    /// Group size, taken from the first group.
    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, |g| g.len())
    }
}

/// FNV-1a over the bit patterns of the logits.
pub fn snapshot_id(p: &PolicyParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in p.logits() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum BaselineKind {
    Vanilla,
    LeaveOneOut,
    OracleValue,
    /// One constant per prompt, in prompt order.
    Custom(Vec<f64>),
}

impl BaselineKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BaselineKind::Vanilla => "vanilla",
            BaselineKind::LeaveOneOut => "leave_one_out",
            BaselineKind::OracleValue => "oracle_value",
            BaselineKind::Custom(_) => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "leave_one_out" | "loo" | "grpo" => Ok(Self::LeaveOneOut),
            "oracle_value" | "oracle" => Ok(Self::OracleValue),
            other => Err(LabError::InvalidArgument(format!("unknown baseline {other:?}"))),
        }
    }

    pub fn min_group(&self) -> usize {
        match self {
            BaselineKind::LeaveOneOut => 2,
            _ => 1,
        }
    }
}

/// How to treat groups whose rewards have zero spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "eps")]
pub enum EpsPolicy {
    /// `se = 0` gives zero advantages.
    #[default]
    HardZero,
    /// Divide by `se + eps`.
    Additive(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub estimator: String,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub seed: Option<u64>,
    pub vector: Vec<f64>,
}

impl GradientEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimate serializes")
    }
}

/// Categorical draw from probabilities summing to one.
pub(crate) fn sample_categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

pub fn collect_batch(p: &PolicyParams, env: &Environment, b: usize, g: usize, rng: &mut impl Rng) -> Result<GroupBatch> {
    if b == 0 || g == 0 {
        return Err(LabError::InvalidArgument("B and G must be at least 1".into()));
    }
    let table = p.probability_table();
    Ok(collect_batch_with_table(&table, env, b, g, snapshot_id(p), rng))
}

pub fn collect_batch_with_table(
    table: &ProbTable,
    env: &Environment,
    b: usize,
    g: usize,
    snapshot: u64,
    rng: &mut impl Rng,
) -> GroupBatch {
    let weights: Vec<f64> = env.prompts().iter().map(|p| p.weight).collect();
    let groups = (0..b)
        .map(|_| {
            let x = sample_categorical(&weights, rng);
            let outputs = (0..g).map(|_| table.sample(env, x, rng)).collect();
            GroupSample::from_ids(env, x, outputs)
        })
        .collect();
    GroupBatch::new(groups, snapshot)
}

pub fn leave_one_out_means(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(LabError::GroupTooSmall {
            group: g,
            reason: "the leave-one-out mean needs at least two outputs",
        });
    }
    let total: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|z| (total - z) / (g - 1) as f64).collect())
}

/// `z_i - C_i` under the leave-one-out baseline, summed as
/// `sum_{j != i} (z_i - z_j) / (G - 1)` so a constant group gives exact zeros.
pub fn leave_one_out_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(LabError::GroupTooSmall {
            group: g,
            reason: "the leave-one-out mean needs at least two outputs",
        });
    }
    let k = (g - 1) as f64;
    Ok(rewards
        .iter()
        .map(|zi| rewards.iter().map(|zj| zi - zj).sum::<f64>() / k)
        .collect())
}

/// Sample standard deviation with the `G - 1` denominator.
pub fn group_standard_error(rewards: &[f64]) -> f64 {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    (rewards.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (g - 1.0)).sqrt()
}

/// `(z_g - leave-one-out mean) / se`.
pub fn advantage_normalized(rewards: &[f64], eps: EpsPolicy) -> Result<Vec<f64>> {
    let centered = leave_one_out_advantages(rewards).map_err(|_| LabError::GroupTooSmall {
        group: rewards.len(),
        reason: "normalized advantages need at least two outputs",
    })?;
    // An exactly constant group is degenerate; rounding in the mean must
    // not turn it into a division of two tiny numbers.
    if rewards.iter().all(|&z| z == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let se = group_standard_error(rewards);
    let denom = match eps {
        EpsPolicy::HardZero => se,
        EpsPolicy::Additive(e) => se + e,
    };
    if denom == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.iter().map(|a| a / denom).collect())
}

/// Per-output baseline values for one group.
pub(crate) fn baselines(
    group: &GroupSample,
    baseline: &BaselineKind,
    oracle_values: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let g = group.len();
    match baseline {
        BaselineKind::Vanilla => Ok(vec![0.0; g]),
        BaselineKind::LeaveOneOut => leave_one_out_means(&group.rewards),
        BaselineKind::OracleValue => {
            let v = oracle_values.ok_or_else(|| LabError::Baseline("oracle values unavailable".into()))?;
            Ok(vec![v[group.prompt]; g])
        }
        BaselineKind::Custom(map) => {
            let c = map.get(group.prompt).ok_or_else(|| {
                LabError::Baseline(format!("custom baseline has no entry for prompt {}", group.prompt))
            })?;
            Ok(vec![*c; g])
        }
    }
}

fn validate_baseline(env: &Environment, batch: &GroupBatch, baseline: &BaselineKind) -> Result<()> {
    if batch.groups.is_empty() {
        return Err(LabError::InvalidArgument("empty batch".into()));
    }
    if let BaselineKind::Custom(map) = baseline {
        if map.len() != env.num_prompts() {
            return Err(LabError::Baseline(format!(
                "custom baseline lists {} values for {} prompts",
                map.len(),
                env.num_prompts()
            )));
        }
    }
    for group in &batch.groups {
        if group.len() < baseline.min_group() {
            return Err(LabError::GroupTooSmall {
                group: group.len(),
                reason: "the leave-one-out baseline needs at least two outputs",
            });
        }
        if group.is_empty() {
            return Err(LabError::InvalidArgument("empty group".into()));
        }
    }
    Ok(())
}

/// Exact values `V(x)` of every prompt under the snapshot.
pub fn oracle_values(table: &ProbTable, env: &Environment) -> Vec<f64> {
    (0..env.num_prompts()).map(|x| value_from_table(table, env, x)).collect()
}

/// Accumulates `(1/(BG)) sum score * coef` for given per-output coefficients.
fn accumulate(table: &ProbTable, env: &Environment, batch: &GroupBatch, coefs: &[Vec<f64>], out: &mut [f64]) {
    let scale = 1.0 / batch.groups.iter().map(|g| g.len()).sum::<usize>() as f64;
    for (group, c) in batch.groups.iter().zip(coefs) {
        for (&y, &a) in group.outputs.iter().zip(c) {
            if a != 0.0 {
                table.add_score(env, group.prompt, y, a * scale, out);
            }
        }
    }
}

/// Meta estimator with a precomputed probability table and oracle values.
pub fn meta_gradient_with_table(
    table: &ProbTable,
    env: &Environment,
    batch: &GroupBatch,
    baseline: &BaselineKind,
    oracle: Option<&[f64]>,
) -> Result<Vec<f64>> {
    validate_baseline(env, batch, baseline)?;
    let coefs = batch
        .groups
        .iter()
        .map(|g| {
            if matches!(baseline, BaselineKind::LeaveOneOut) {
                return leave_one_out_advantages(&g.rewards);
            }
            let c = baselines(g, baseline, oracle)?;
            Ok(g.rewards.iter().zip(c).map(|(z, c)| z - c).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut out = vec![0.0; table.as_slice().len()];
    accumulate(table, env, batch, &coefs, &mut out);
    Ok(out)
}

/// `(1/(BG)) sum_b sum_g score(y_bg) (z_bg - C_bg)`.
///
/// `p` must be the snapshot that generated `batch`; the oracle baseline is
/// evaluated there.
pub fn estimate_gradient_meta(
    p: &PolicyParams,
    env: &Environment,
    batch: &GroupBatch,
    baseline: &BaselineKind,
) -> Result<GradientEstimate> {
    let table = p.probability_table();
    let oracle = matches!(baseline, BaselineKind::OracleValue).then(|| oracle_values(&table, env));
    let vector = meta_gradient_with_table(&table, env, batch, baseline, oracle.as_deref())?;
    Ok(GradientEstimate {
        estimator: baseline.tag().to_string(),
        b: batch.batch_size(),
        g: batch.group_size(),
        seed: None,
        vector,
    })
}

/// `(1/(BG)) sum score * A` with normalized advantages, on-policy.
pub fn normalized_gradient_with_table(
    table: &ProbTable,
    env: &Environment,
    batch: &GroupBatch,
    eps: EpsPolicy,
) -> Result<Vec<f64>> {
    let coefs = batch
        .groups
        .iter()
        .map(|g| advantage_normalized(&g.rewards, eps))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![0.0; table.as_slice().len()];
    accumulate(table, env, batch, &coefs, &mut out);
    Ok(out)
}

pub fn estimate_gradient_normalized(
    p: &PolicyParams,
    env: &Environment,
    batch: &GroupBatch,
    eps: EpsPolicy,
) -> Result<GradientEstimate> {
    let vector = normalized_gradient_with_table(&p.probability_table(), env, batch, eps)?;
    Ok(GradientEstimate {
        estimator: "normalized".into(),
        b: batch.batch_size(),
        g: batch.group_size(),
        seed: None,
        vector,
    })
}

/// Options of the practical estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PracticalOptions {
    pub kappa: f64,
    pub floor: f64,
    pub eps: EpsPolicy,
}

impl PracticalOptions {
    pub fn new(kappa: f64) -> Self {
        Self {
            kappa,
            floor: DEFAULT_COVERAGE_FLOOR,
            eps: EpsPolicy::HardZero,
        }
    }
}

fn check_token(table: &ProbTable, x: usize, s: usize, t: Token, floor: f64, policy: &'static str) -> Result<f64> {
    let q = table.prob(x, s, t);
    if q < floor {
        return Err(LabError::Coverage {
            prompt: x,
            state: s,
            token: t,
            prob: q,
            floor,
            policy,
        });
    }
    Ok(q)
}

/// The practical estimator on probability tables.
///
/// Per sampled token the coefficient of `grad log pi_cur,t` is
/// `(cur_t / old_t) A + kappa (ref_t / cur_t - 1)`.
pub fn practical_gradient_with_tables(
    cur: &ProbTable,
    old: &ProbTable,
    reference: &ProbTable,
    env: &Environment,
    batch: &GroupBatch,
    opts: PracticalOptions,
) -> Result<Vec<f64>> {
    if !(opts.kappa >= 0.0 && opts.kappa.is_finite()) {
        return Err(LabError::InvalidArgument(format!("kappa must be >= 0, got {}", opts.kappa)));
    }
    let d = cur.as_slice().len();
    let mut out = vec![0.0; d];
    let scale = 1.0 / batch.groups.iter().map(|g| g.len()).sum::<usize>() as f64;
    let ix = cur.indexer();
    let vocab = ix.vocab();
    for group in &batch.groups {
        let adv = advantage_normalized(&group.rewards, opts.eps)?;
        let x = group.prompt;
        for (&y, &a) in group.outputs.iter().zip(&adv) {
            for &(s, t) in env.outputs().path(y) {
                let qc = check_token(cur, x, s, t, opts.floor, "current")?;
                let qo = check_token(old, x, s, t, opts.floor, "old")?;
                let qr = check_token(reference, x, s, t, opts.floor, "reference")?;
                let coef = (qc / qo) * a + opts.kappa * (qr / qc - 1.0);
                if coef == 0.0 {
                    continue;
                }
                let c = coef * scale;
                let start = ix.row(x, s);
                for (o, &q) in out[start..start + vocab].iter_mut().zip(cur.row(x, s)) {
                    *o -= c * q;
                }
                out[start + t as usize] += c;
            }
        }
    }
    Ok(out)
}

/// Production estimator with importance ratios against `p_old` and the
/// token-level KL term towards `p_ref`. The batch must come from `p_old`.
pub fn estimate_gradient_practical(
    p_cur: &PolicyParams,
    p_old: &PolicyParams,
    p_ref: &PolicyParams,
    env: &Environment,
    batch: &GroupBatch,
    opts: PracticalOptions,
) -> Result<GradientEstimate> {
    let vector = practical_gradient_with_tables(
        &p_cur.probability_table(),
        &p_old.probability_table(),
        &p_ref.probability_table(),
        env,
        batch,
        opts,
    )?;
    Ok(GradientEstimate {
        estimator: "practical".into(),
        b: batch.batch_size(),
        g: batch.group_size(),
        seed: None,
        vector,
    })
}

/// `r - log r - 1` with `r = pi_ref(y|x) / pi(y|x)` over whole sequences,
/// averaged over the batch.
pub fn k3_kl_estimate(p: &PolicyParams, p_ref: &PolicyParams, env: &Environment, batch: &GroupBatch) -> Result<f64> {
    let cur = p.probability_table();
    let reference = p_ref.probability_table();
    k3_with_tables(&cur, &reference, env, batch)
}

pub fn k3_with_tables(cur: &ProbTable, reference: &ProbTable, env: &Environment, batch: &GroupBatch) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in &batch.groups {
        for &y in &group.outputs {
            let lp = cur.output_log_prob(env, group.prompt, y);
            if lp == f64::NEG_INFINITY {
                return Err(LabError::ZeroProbability {
                    prompt: group.prompt,
                    output: y,
                });
            }
            let log_r = reference.output_log_prob(env, group.prompt, y) - lp;
            total += k3_term(log_r);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `e^l - l - 1`, accurate near `l = 0`.
pub fn k3_term(log_r: f64) -> f64 {
    (log_r.exp_m1() - log_r).max(0.0)
}

/// `KL(pi || pi_ref)` averaged over prompts, by enumeration.
pub fn exact_kl(p: &PolicyParams, p_ref: &PolicyParams, env: &Environment) -> f64 {
    let cur = p.probability_table();
    let reference = p_ref.probability_table();
    (0..env.num_prompts())
        .map(|x| {
            env.weight(x)
                * (0..env.outputs().len())
                    .map(|y| {
                        let lp = cur.output_log_prob(env, x, y);
                        let q = lp.exp();
                        if q == 0.0 {
                            0.0
                        } else {
                            q * (lp - reference.output_log_prob(env, x, y))
                        }
                    })
                    .sum::<f64>()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvSpec};
    use crate::policy::{exact_gradient, PromptView};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env3(seed: u64) -> Environment {
        build_env(&EnvSpec::uniform(3, 0, 3, 2, "bounded-random").with_seed(seed)).unwrap()
    }

    #[test]
    fn loo_means_examples() {
        assert_eq!(leave_one_out_means(&[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert!(leave_one_out_means(&[0.4; 5]).unwrap().iter().all(|m| (m - 0.4).abs() < 1e-15));
        let m = leave_one_out_means(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        let expected = [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        assert!(m.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(leave_one_out_means(&[1.0]), Err(LabError::GroupTooSmall { .. })));
    }

    #[test]
    fn normalized_advantage_examples() {
        let a = advantage_normalized(&[1.0, 1.0, 0.0, 0.0], EpsPolicy::HardZero).unwrap();
        // se = sqrt(4 * 0.25 / 3) = sqrt(1/3)
        let se = (1.0f64 / 3.0).sqrt();
        assert!((a[0] - (1.0 - 1.0 / 3.0) / se).abs() < 1e-12);
        assert!((a[0] - 1.15470).abs() < 1e-5);
        assert_eq!(advantage_normalized(&[0.3; 4], EpsPolicy::HardZero).unwrap(), vec![0.0; 4]);
        let a = advantage_normalized(&[1.0, 0.0], EpsPolicy::HardZero).unwrap();
        assert!((group_standard_error(&[1.0, 0.0]) - 0.70711).abs() < 1e-5);
        assert!((a[0] - 1.41421).abs() < 1e-5 && (a[1] + 1.41421).abs() < 1e-5);
        assert!(advantage_normalized(&[1.0], EpsPolicy::HardZero).is_err());
        let soft = advantage_normalized(&[0.3; 4], EpsPolicy::Additive(0.1)).unwrap();
        assert_eq!(soft, vec![0.0; 4]);
    }

    #[test]
    fn single_episode_batch() {
        let env = env3(0);
        let p = PolicyParams::zeros(&env);
        let batch = collect_batch(&p, &env, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.batch_size(), 1);
        assert_eq!(batch.group_size(), 1);
        let again = collect_batch(&p, &env, 1, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn prompt_frequencies_follow_weights() {
        let mut spec = EnvSpec::uniform(2, 1, 3, 1, "bounded-random");
        for (p, w) in spec.prompts.iter_mut().zip([0.2, 0.3, 0.5]) {
            p.weight = w;
        }
        let env = build_env(&spec).unwrap();
        let p = PolicyParams::zeros(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let b = collect_batch(&p, &env, 1, 1, &mut rng).unwrap();
            counts[b.groups[0].prompt] += 1;
        }
        for (c, w) in counts.iter().zip([0.2, 0.3, 0.5]) {
            let sd = (n as f64 * w * (1.0 - w)).sqrt();
            assert!((*c as f64 - n as f64 * w).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn constant_rewards_with_loo_give_zero() {
        let env = build_env(&EnvSpec::explicit(3, 0, 2, vec![vec![0.5; 7]])).unwrap();
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let batch = collect_batch(&p, &env, 3, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let g = estimate_gradient_meta(&p, &env, &batch, &BaselineKind::LeaveOneOut).unwrap();
        assert!(g.vector.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn vanilla_single_episode_is_score_times_reward() {
        let env = env3(3);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let batch = collect_batch(&p, &env, 1, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let grp = &batch.groups[0];
        let g = estimate_gradient_meta(&p, &env, &batch, &BaselineKind::Vanilla).unwrap();
        let s = p.probability_table().score_dense(&env, grp.prompt, grp.outputs[0]);
        for (a, b) in g.vector.iter().zip(&s) {
            assert!((a - b * grp.rewards[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_preconditions() {
        let env = env3(5);
        let p = PolicyParams::zeros(&env);
        let batch = collect_batch(&p, &env, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(matches!(
            estimate_gradient_meta(&p, &env, &batch, &BaselineKind::LeaveOneOut),
            Err(LabError::GroupTooSmall { .. })
        ));
        assert!(matches!(
            estimate_gradient_meta(&p, &env, &batch, &BaselineKind::Custom(vec![0.1])),
            Err(LabError::Baseline(_))
        ));
    }

    #[test]
    fn prompt_only_baselines_leave_the_expectation_unchanged() {
        let env = env3(6);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        assert!(p.dim() <= 30);
        let table = p.probability_table();
        let exact = exact_gradient(&p, &env).total;
        let c = [0.3, 1.7, -2.0];
        let mut shifted = vec![0.0; p.dim()];
        for x in 0..env.num_prompts() {
            let view = PromptView::new(&table, &env, x);
            for ((q, z), s) in view.probs.iter().zip(&view.rewards).zip(&view.scores) {
                crate::policy::axpy(env.weight(x) * q * (z - c[x]), s, &mut shifted);
            }
        }
        for (a, b) in exact.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn hand_practical(
        cur: &PolicyParams,
        old: &PolicyParams,
        env: &Environment,
        group: &GroupSample,
    ) -> Vec<f64> {
        // length-1 outputs: one token per output, the single state 0
        let adv = advantage_normalized(&group.rewards, EpsPolicy::HardZero).unwrap();
        let softmax = |l: &[f64]| {
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            l.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let pc = softmax(cur.logits());
        let po = softmax(old.logits());
        let mut g = vec![0.0; cur.dim()];
        for (&y, a) in group.outputs.iter().zip(&adv) {
            let t = env.outputs().sequence(y)[0] as usize;
            let w = pc[t] / po[t] * a;
            for k in 0..g.len() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                g[k] += w * (onehot - pc[k]) / group.len() as f64;
            }
        }
        g
    }

    #[test]
    fn practical_matches_hand_expansion_off_policy() {
        let env = build_env(&EnvSpec::explicit(2, 1, 1, vec![vec![1.0, 0.0]])).unwrap();
        let old = PolicyParams::from_logits(&env, vec![0.2, -0.1]).unwrap();
        let cur = PolicyParams::from_logits(&env, vec![0.5, -0.4]).unwrap();
        let group = GroupSample::from_sequences(&env, 0, &[vec![0, 1], vec![1], vec![0, 1]]).unwrap();
        let batch = GroupBatch::new(vec![group.clone()], 0);
        let g = estimate_gradient_practical(&cur, &old, &old, &env, &batch, PracticalOptions::new(0.0)).unwrap();
        let hand = hand_practical(&cur, &old, &env, &group);
        for (a, b) in g.vector.iter().zip(&hand) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn practical_reduces_on_policy() {
        let env = env3(7);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let batch = collect_batch(&p, &env, 4, 5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let a = estimate_gradient_practical(&p, &p, &p, &env, &batch, PracticalOptions::new(0.0)).unwrap();
        let b = estimate_gradient_normalized(&p, &env, &batch, EpsPolicy::HardZero).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() <= 1e-12);
        }
        // with the reference equal to the current policy the KL term is zero
        let c = estimate_gradient_practical(&p, &p, &p, &env, &batch, PracticalOptions::new(3.0)).unwrap();
        assert_eq!(a.vector, c.vector);
    }

    #[test]
    fn practical_coverage_violation_names_state() {
        let env = build_env(&EnvSpec::explicit(2, 1, 1, vec![vec![1.0, 0.0]])).unwrap();
        let old = PolicyParams::zeros(&env);
        let cur = PolicyParams::from_logits(&env, vec![-25.0, 0.0]).unwrap();
        let batch = GroupBatch::new(vec![GroupSample::from_ids(&env, 0, vec![0, 1])], 0);
        match estimate_gradient_practical(&cur, &old, &old, &env, &batch, PracticalOptions::new(0.0)) {
            Err(LabError::Coverage { state, token, policy, .. }) => {
                assert_eq!((state, token, policy), (0, 0, "current"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn k3_examples() {
        let env = env3(9);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let q = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let batch = collect_batch(&p, &env, 3, 4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(k3_kl_estimate(&p, &p, &env, &batch).unwrap(), 0.0);
        assert!(k3_kl_estimate(&p, &q, &env, &batch).unwrap() >= 0.0);
    }

    #[test]
    fn estimate_json_shape() {
        let est = GradientEstimate {
            estimator: "leave_one_out".into(),
            b: 2,
            g: 4,
            seed: Some(7),
            vector: vec![0.5, -0.5],
        };
        let v: serde_json::Value = serde_json::from_str(&est.to_json()).unwrap();
        assert_eq!(v["B"], 2);
        assert_eq!(v["G"], 4);
        assert_eq!(v["seed"], 7);
        assert_eq!(v["estimator"], "leave_one_out");
        assert_eq!(v["vector"][1], -0.5);
    }
}
