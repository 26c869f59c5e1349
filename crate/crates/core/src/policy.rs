//! Tabular autoregressive softmax policy.
//!
//! There is one softmax per (prompt, prefix state); the logits of all of them
//! live in a single flat vector so that gradients, covariances and Hessians
//! are ordinary dense linear algebra.

use std::io::{Read, Write};

use rand::Rng;

use crate::env::{Environment, Step, Token};
use crate::error::{LabError, Result};

/// Bijection between `(prompt, state, token)` triples and `[0, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateIndexer {
    prompts: usize,
    states: usize,
    vocab: usize,
}

impl StateIndexer {
    pub fn for_env(env: &Environment) -> Self {
        Self {
            prompts: env.num_prompts(),
            states: env.outputs().num_states(),
            vocab: env.alphabet().size() as usize,
        }
    }

    pub fn dim(&self) -> usize {
        self.prompts * self.states * self.vocab
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts
    }

    /// Offset of the first token of a (prompt, state) row.
    pub fn row(&self, prompt: usize, state: usize) -> usize {
        (prompt * self.states + state) * self.vocab
    }

    pub fn index(&self, prompt: usize, state: usize, token: Token) -> usize {
        self.row(prompt, state) + token as usize
    }

    pub fn triple(&self, i: usize) -> (usize, usize, Token) {
        let token = i % self.vocab;
        let row = i / self.vocab;
        (row / self.states, row % self.states, token as Token)
    }

    /// Range of parameter indices belonging to one prompt.
    pub fn prompt_block(&self, prompt: usize) -> std::ops::Range<usize> {
        let len = self.states * self.vocab;
        prompt * len..(prompt + 1) * len
    }
}

/// Logits of the policy together with their indexer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    indexer: StateIndexer,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(env: &Environment) -> Self {
        let indexer = StateIndexer::for_env(env);
        Self {
            indexer,
            logits: vec![0.0; indexer.dim()],
        }
    }

    pub fn from_logits(env: &Environment, logits: Vec<f64>) -> Result<Self> {
        let indexer = StateIndexer::for_env(env);
        if logits.len() != indexer.dim() {
            return Err(LabError::Dimension(format!(
                "expected {} logits, got {}",
                indexer.dim(),
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidArgument("logits must be finite".into()));
        }
        Ok(Self { indexer, logits })
    }

    /// Gaussian logits with the given scale.
    pub fn random(env: &Environment, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(env);
        for v in &mut p.logits {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *v = scale * n;
        }
        p
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn indexer(&self) -> StateIndexer {
        self.indexer
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn set(&mut self, prompt: usize, state: usize, token: Token, value: f64) {
        let i = self.indexer.index(prompt, state, token);
        self.logits[i] = value;
    }

    /// `self + step * direction`.
    pub fn displaced(&self, direction: &[f64], step: f64) -> Self {
        let mut out = self.clone();
        for (v, d) in out.logits.iter_mut().zip(direction) {
            *v += step * d;
        }
        out
    }

    /// Softmax of every row, laid out like the logits.
    pub fn probability_table(&self) -> ProbTable {
        let v = self.indexer.vocab;
        let mut probs = vec![0.0; self.logits.len()];
        for (src, dst) in self.logits.chunks(v).zip(probs.chunks_mut(v)) {
            softmax_into(src, dst);
        }
        ProbTable {
            indexer: self.indexer,
            probs,
        }
    }

    pub fn write_checkpoint(&self, env: &Environment, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["prompt_id", "state_id", "token_id", "logit"])
            .map_err(csv_err)?;
        for (i, &logit) in self.logits.iter().enumerate() {
            let (x, s, t) = self.indexer.triple(i);
            w.write_record([
                env.prompts()[x].id.clone(),
                s.to_string(),
                t.to_string(),
                format!("{logit:e}"),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint(env: &Environment, input: impl Read) -> Result<Self> {
        let mut p = Self::zeros(env);
        let mut seen = vec![false; p.dim()];
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != 4 {
                return Err(LabError::Parse(format!("checkpoint row has {} fields", rec.len())));
            }
            let x = env
                .prompt_index(&rec[0])
                .ok_or_else(|| LabError::Parse(format!("unknown prompt id {:?}", &rec[0])))?;
            let s: usize = rec[1].parse().map_err(|e| LabError::Parse(format!("state id: {e}")))?;
            let t: Token = rec[2].parse().map_err(|e| LabError::Parse(format!("token id: {e}")))?;
            let logit: f64 = rec[3].parse().map_err(|e| LabError::Parse(format!("logit: {e}")))?;
            if s >= p.indexer.states || t as usize >= p.indexer.vocab || !logit.is_finite() {
                return Err(LabError::Parse(format!("checkpoint row out of range: {s},{t},{logit}")));
            }
            let i = p.indexer.index(x, s, t);
            p.logits[i] = logit;
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(LabError::Parse(format!(
                "checkpoint is missing parameter {:?}",
                p.indexer.triple(missing)
            )));
        }
        Ok(p)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> LabError {
    LabError::Parse(e.to_string())
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Per-row token probabilities of a policy.
#[derive(Debug, Clone)]
pub struct ProbTable {
    indexer: StateIndexer,
    probs: Vec<f64>,
}

impl ProbTable {
    pub fn indexer(&self) -> StateIndexer {
        self.indexer
    }

    pub fn row(&self, prompt: usize, state: usize) -> &[f64] {
        let start = self.indexer.row(prompt, state);
        &self.probs[start..start + self.indexer.vocab]
    }

    pub fn prob(&self, prompt: usize, state: usize, token: Token) -> f64 {
        self.probs[self.indexer.index(prompt, state, token)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Smallest token probability over every row of one prompt.
    pub fn min_prob(&self, prompt: usize) -> (usize, Token, f64) {
        let mut best = (0, 0, f64::INFINITY);
        for s in 0..self.indexer.states {
            for (t, &q) in self.row(prompt, s).iter().enumerate() {
                if q < best.2 {
                    best = (s, t as Token, q);
                }
            }
        }
        best
    }

    /// Probability of output `y` (by enumeration index) for prompt `x`.
    pub fn output_prob(&self, env: &Environment, x: usize, y: usize) -> f64 {
        env.outputs()
            .path(y)
            .iter()
            .map(|&(s, t)| self.prob(x, s, t))
            .product()
    }

    pub fn output_log_prob(&self, env: &Environment, x: usize, y: usize) -> f64 {
        env.outputs()
            .path(y)
            .iter()
            .map(|&(s, t)| self.prob(x, s, t).ln())
            .sum()
    }

    /// Adds `coef * score(y)` into `out`, touching only visited rows.
    pub fn add_score(&self, env: &Environment, x: usize, y: usize, coef: f64, out: &mut [f64]) {
        let v = self.indexer.vocab;
        for &(s, t) in env.outputs().path(y) {
            let start = self.indexer.row(x, s);
            let row = &self.probs[start..start + v];
            for (o, &q) in out[start..start + v].iter_mut().zip(row) {
                *o -= coef * q;
            }
            out[start + t as usize] += coef;
        }
    }

    /// Dense score vector of output `y`.
    pub fn score_dense(&self, env: &Environment, x: usize, y: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.indexer.dim()];
        self.add_score(env, x, y, 1.0, &mut out);
        out
    }

    /// Draws one output index for prompt `x`.
    pub fn sample(&self, env: &Environment, x: usize, rng: &mut impl Rng) -> usize {
        let space = env.outputs();
        let mut state = 0;
        loop {
            let token = sample_row(self.row(x, state), rng);
            match space.step(state, token) {
                Step::State(next) => state = next,
                Step::Output(y) => return y,
            }
        }
    }
}

fn sample_row(row: &[f64], rng: &mut impl Rng) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, &q) in row.iter().enumerate() {
        acc += q;
        if u < acc {
            return t as Token;
        }
    }
    // rounding left a sliver above the last cumulative sum
    row.iter().rposition(|&q| q > 0.0).unwrap_or(row.len() - 1) as Token
}

/// Draws one output sequence (eos-terminated) autoregressively.
pub fn sample_output(p: &PolicyParams, env: &Environment, x: usize, rng: &mut impl Rng) -> Vec<Token> {
    let table = p.probability_table();
    env.outputs().sequence(table.sample(env, x, rng)).to_vec()
}

pub fn log_prob(p: &PolicyParams, env: &Environment, x: usize, y: &[Token]) -> Result<f64> {
    let id = env.resolve(x, y)?;
    Ok(p.probability_table().output_log_prob(env, x, id))
}

/// Total score `sum_t grad log pi(y_t | x, y_<t)` as a dense vector.
pub fn score(p: &PolicyParams, env: &Environment, x: usize, y: &[Token]) -> Result<Vec<f64>> {
    let id = env.resolve(x, y)?;
    Ok(p.probability_table().score_dense(env, x, id))
}

/// Output distribution of one prompt, enumerated.
pub fn output_distribution(table: &ProbTable, env: &Environment, x: usize) -> Vec<f64> {
    (0..env.outputs().len())
        .map(|y| table.output_prob(env, x, y))
        .collect()
}

/// `V(x) = E[Z | x]` by enumeration.
pub fn value_exact(p: &PolicyParams, env: &Environment, x: usize) -> f64 {
    let table = p.probability_table();
    value_from_table(&table, env, x)
}

pub fn value_from_table(table: &ProbTable, env: &Environment, x: usize) -> f64 {
    output_distribution(table, env, x)
        .iter()
        .zip(env.rewards(x))
        .map(|(q, z)| q * z)
        .sum()
}

/// `J(theta) = sum_x w(x) V(x)`.
pub fn objective(p: &PolicyParams, env: &Environment) -> f64 {
    let table = p.probability_table();
    (0..env.num_prompts())
        .map(|x| env.weight(x) * value_from_table(&table, env, x))
        .sum()
}

/// Exact gradient of the objective together with the per-prompt gradients
/// `g(x; theta)` (unweighted).
#[derive(Debug, Clone)]
pub struct ExactGradient {
    pub total: Vec<f64>,
    pub per_prompt: Vec<Vec<f64>>,
}

pub fn exact_gradient(p: &PolicyParams, env: &Environment) -> ExactGradient {
    let table = p.probability_table();
    exact_gradient_from_table(&table, env)
}

pub fn exact_gradient_from_table(table: &ProbTable, env: &Environment) -> ExactGradient {
    let d = table.indexer.dim();
    let mut total = vec![0.0; d];
    let mut per_prompt = Vec::with_capacity(env.num_prompts());
    for x in 0..env.num_prompts() {
        let g = prompt_gradient(table, env, x);
        for (t, gi) in total.iter_mut().zip(&g) {
            *t += env.weight(x) * gi;
        }
        per_prompt.push(g);
    }
    ExactGradient { total, per_prompt }
}

/// `g(x; theta) = sum_y pi(y|x) score(y) z(x, y)`.
pub fn prompt_gradient(table: &ProbTable, env: &Environment, x: usize) -> Vec<f64> {
    let mut g = vec![0.0; table.indexer.dim()];
    for (y, &z) in env.rewards(x).iter().enumerate() {
        let q = table.output_prob(env, x, y);
        if q * z != 0.0 {
            table.add_score(env, x, y, q * z, &mut g);
        }
    }
    g
}

/// Everything about one prompt's output distribution that the exact
/// oracles need, computed once.
#[derive(Debug, Clone)]
pub struct PromptView {
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Dense score of every output.
    pub scores: Vec<Vec<f64>>,
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl PromptView {
    pub fn new(table: &ProbTable, env: &Environment, x: usize) -> Self {
        let probs = output_distribution(table, env, x);
        let rewards = env.rewards(x).to_vec();
        let scores: Vec<Vec<f64>> = (0..probs.len()).map(|y| table.score_dense(env, x, y)).collect();
        let value = probs.iter().zip(&rewards).map(|(q, z)| q * z).sum();
        let mut gradient = vec![0.0; table.indexer.dim()];
        for ((q, z), s) in probs.iter().zip(&rewards).zip(&scores) {
            axpy(q * z, s, &mut gradient);
        }
        Self {
            probs,
            rewards,
            scores,
            value,
            gradient,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.probs.len()
    }
}

pub fn prompt_views(p: &PolicyParams, env: &Environment) -> Vec<PromptView> {
    let table = p.probability_table();
    (0..env.num_prompts()).map(|x| PromptView::new(&table, env, x)).collect()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Fails if any token probability of the policy falls below `floor`.
pub fn check_coverage(table: &ProbTable, env: &Environment, floor: f64, policy: &'static str) -> Result<()> {
    for x in 0..env.num_prompts() {
        let (state, token, prob) = table.min_prob(x);
        if prob < floor {
            return Err(LabError::Coverage {
                prompt: x,
                state,
                token,
                prob,
                floor,
                policy,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, EnvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_token_env(rewards: Vec<f64>) -> Environment {
        build_env(&EnvSpec::explicit(2, 1, 1, vec![rewards])).unwrap()
    }

    fn random_env(seed: u64) -> Environment {
        build_env(&EnvSpec::uniform(3, 0, 2, 3, "bounded-random").with_seed(seed)).unwrap()
    }

    #[test]
    fn indexer_is_a_bijection() {
        let env = random_env(1);
        let ix = StateIndexer::for_env(&env);
        for i in 0..ix.dim() {
            let (x, s, t) = ix.triple(i);
            assert_eq!(ix.index(x, s, t), i);
        }
    }

    #[test]
    fn uniform_sampling_is_balanced() {
        let env = two_token_env(vec![1.0, 0.0]);
        let p = PolicyParams::zeros(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let zeros = (0..n).filter(|_| sample_output(&p, &env, 0, &mut rng)[0] == 0).count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((zeros as f64 - n as f64 / 2.0).abs() <= 3.0 * sd);
    }

    #[test]
    fn peaked_logit_dominates() {
        let env = two_token_env(vec![1.0, 0.0]);
        let mut p = PolicyParams::zeros(&env);
        p.set(0, 0, 0, 20.0);
        // softmax(20, 0) = 1 / (1 + e^-20)
        let expected = 1.0 / (1.0 + (-20.0f64).exp());
        assert!(expected >= 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_output(&p, &env, 0, &mut rng)[0] == 0).count();
        assert!(hits as f64 / n as f64 >= 0.9999);
    }

    #[test]
    fn same_seed_same_sequence() {
        let env = random_env(2);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = sample_output(&p, &env, 1, &mut ChaCha8Rng::seed_from_u64(77));
        let b = sample_output(&p, &env, 1, &mut ChaCha8Rng::seed_from_u64(77));
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_examples() {
        let env = two_token_env(vec![1.0, 0.0]);
        let p = PolicyParams::zeros(&env);
        assert!((log_prob(&p, &env, 0, &[0, 1]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let mut peaked = p.clone();
        peaked.set(0, 0, 1, 30.0);
        let lp = log_prob(&peaked, &env, 0, &[1]).unwrap();
        // log softmax(30, 0) = -ln(1 + e^-30)
        assert!((lp + (1.0 + (-30.0f64).exp()).ln()).abs() < 1e-15);
        assert!(lp.abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalize_for_random_logits() {
        for seed in 0..10 {
            let env = random_env(seed);
            let p = PolicyParams::random(&env, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let table = p.probability_table();
            for x in 0..env.num_prompts() {
                let total: f64 = output_distribution(&table, &env, x).iter().sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampled_outputs_are_always_enumerated() {
        let env = random_env(4);
        let p = PolicyParams::random(&env, 1.5, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10_000 {
            let y = sample_output(&p, &env, 0, &mut rng);
            assert!(env.outputs().lookup(&y).is_some());
        }
    }

    #[test]
    fn score_one_hot_minus_uniform() {
        let env = two_token_env(vec![1.0, 0.0]);
        let p = PolicyParams::zeros(&env);
        let s = score(&p, &env, 0, &[0, 1]).unwrap();
        assert_eq!(s, vec![0.5, -0.5]);
    }

    #[test]
    fn score_matches_finite_differences_of_log_prob() {
        let env = random_env(6);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let h = 1e-5;
        for y in [0usize, 3, 7, env.outputs().len() - 1] {
            let seq = env.outputs().sequence(y).to_vec();
            let s = score(&p, &env, 1, &seq).unwrap();
            for i in 0..p.dim() {
                let mut e = vec![0.0; p.dim()];
                e[i] = 1.0;
                let fd = (log_prob(&p.displaced(&e, h), &env, 1, &seq).unwrap()
                    - log_prob(&p.displaced(&e, -h), &env, 1, &seq).unwrap())
                    / (2.0 * h);
                assert!((fd - s[i]).abs() <= 1e-6, "component {i}: {fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn score_structure_and_bound() {
        let env = random_env(7);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let table = p.probability_table();
        let ix = p.indexer();
        let visited_rows: std::collections::HashSet<usize>;
        let y = 5;
        visited_rows = env.outputs().path(y).iter().map(|&(s, _)| ix.row(0, s)).collect();
        let s = table.score_dense(&env, 0, y);
        for row in (0..p.dim()).step_by(ix.vocab()) {
            let chunk = &s[row..row + ix.vocab()];
            if visited_rows.contains(&row) {
                assert!(chunk.iter().sum::<f64>().abs() < 1e-10);
            } else {
                assert!(chunk.iter().all(|&v| v == 0.0));
            }
        }
        let linf = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(linf <= env.max_len() as f64);
    }

    #[test]
    fn score_has_zero_mean_exactly_and_by_sampling() {
        let env = random_env(8);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let table = p.probability_table();
        let view = PromptView::new(&table, &env, 0);
        let mut mean = vec![0.0; p.dim()];
        for (q, s) in view.probs.iter().zip(&view.scores) {
            axpy(*q, s, &mut mean);
        }
        assert!(mean.iter().all(|v| v.abs() < 1e-10));

        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = vec![0.0; p.dim()];
        let mut sum2 = vec![0.0; p.dim()];
        for _ in 0..n {
            let y = table.sample(&env, 0, &mut rng);
            for (i, v) in view.scores[y].iter().enumerate() {
                sum[i] += v;
                sum2[i] += v * v;
            }
        }
        for i in 0..p.dim() {
            let m = sum[i] / n as f64;
            let var = sum2[i] / n as f64 - m * m;
            let se = (var / n as f64).sqrt();
            assert!(m.abs() <= 4.0 * se + 1e-12, "coordinate {i}: mean {m}, se {se}");
        }
    }

    #[test]
    fn value_examples() {
        let env = two_token_env(vec![1.0, 0.0]);
        let p = PolicyParams::zeros(&env);
        assert!((value_exact(&p, &env, 0) - 0.5).abs() < 1e-15);
        let mut greedy = p.clone();
        greedy.set(0, 0, 0, 40.0);
        assert!((value_exact(&greedy, &env, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn value_matches_monte_carlo() {
        let env = random_env(12);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let table = p.probability_table();
        let exact = value_from_table(&table, &env, 1);
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = env.reward_of(1, table.sample(&env, 1, &mut rng));
            s += z;
            s2 += z * z;
        }
        let m = s / n as f64;
        let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((m - exact).abs() <= 4.0 * se);
    }

    #[test]
    fn gradient_two_token_example() {
        let env = two_token_env(vec![1.0, 0.0]);
        let g = exact_gradient(&PolicyParams::zeros(&env), &env);
        assert!((g.total[0] - 0.25).abs() < 1e-15);
        assert!((g.total[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_reward_gradient_vanishes() {
        let env = build_env(&EnvSpec::explicit(3, 0, 2, vec![vec![0.7; 7]])).unwrap();
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(exact_gradient(&p, &env).total.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let env = random_env(14);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(14));
        let g = exact_gradient(&p, &env).total;
        let h = 1e-5;
        for i in 0..p.dim() {
            let mut e = vec![0.0; p.dim()];
            e[i] = 1.0;
            let fd = (objective(&p.displaced(&e, h), &env) - objective(&p.displaced(&e, -h), &env)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn shift_invariance_of_a_row() {
        let env = random_env(15);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(15));
        let mut q = p.clone();
        let ix = p.indexer();
        let start = ix.row(1, 2);
        for v in &mut q.logits_mut()[start..start + ix.vocab()] {
            *v += 3.7;
        }
        for y in 0..env.outputs().len() {
            let seq = env.outputs().sequence(y).to_vec();
            assert!((log_prob(&p, &env, 1, &seq).unwrap() - log_prob(&q, &env, 1, &seq).unwrap()).abs() < 1e-10);
        }
        assert!((value_exact(&p, &env, 1) - value_exact(&q, &env, 1)).abs() < 1e-10);
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = random_env(16);
        let p = PolicyParams::random(&env, 1.0, &mut ChaCha8Rng::seed_from_u64(16));
        let mut buf = Vec::new();
        p.write_checkpoint(&env, &mut buf).unwrap();
        let q = PolicyParams::read_checkpoint(&env, buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let truncated: Vec<u8> = String::from_utf8(buf).unwrap().lines().take(3).collect::<Vec<_>>().join("\n").into_bytes();
        assert!(PolicyParams::read_checkpoint(&env, truncated.as_slice()).is_err());
    }

    #[test]
    fn coverage_floor_names_the_state() {
        let env = two_token_env(vec![1.0, 0.0]);
        let mut p = PolicyParams::zeros(&env);
        p.set(0, 0, 0, 30.0);
        match check_coverage(&p.probability_table(), &env, 1e-8, "current") {
            Err(LabError::Coverage { state, token, .. }) => assert_eq!((state, token), (0, 1)),
            other => panic!("{other:?}"),
        }
        assert!(check_coverage(&PolicyParams::zeros(&env).probability_table(), &env, 1e-8, "current").is_ok());
    }
}
