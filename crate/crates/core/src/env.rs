//! Synthetic verifiable-reward environments.
//!
//! An environment is a finite set of weighted prompts, a token alphabet with a
//! designated end-of-sequence token, a horizon `max_len`, and a frozen reward
//! table over every reachable output. Generation stops when `eos` is emitted
//! or after `max_len` sampled tokens; a truncated output is stored with an
//! implicit trailing `eos`, so every enumerated sequence ends in `eos`.
//!
//! Everything here is small enough to enumerate, which is what makes the
//! exact oracles in the rest of the crate possible.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type Token = u32;

/// Default cap on the number of enumerated output sequences.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlphabet {
    size: u32,
    eos: Token,
}

impl TokenAlphabet {
    pub fn new(size: u32, eos: Token) -> Result<Self> {
        if size < 2 {
            return Err(LabError::InvalidEnv(format!(
                "alphabet size must be at least 2, got {size}"
            )));
        }
        if eos >= size {
            return Err(LabError::InvalidEnv(format!(
                "eos id {eos} is outside the alphabet of size {size}"
            )));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    /// Tokens other than `eos`, in increasing id order.
    pub fn content_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.size).filter(move |&t| t != self.eos)
    }
}

/// Number of terminating sequences for an alphabet of `size` tokens (one of
/// them `eos`) and horizon `max_len`, saturating at `u128::MAX`.
pub fn count_sequences(size: u32, max_len: usize) -> u128 {
    let content = (size - 1) as u128;
    let mut total: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..max_len {
        // sequences that emit eos after `layer`-many content prefixes
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(content);
    }
    total.saturating_add(layer)
}

/// Where a sampled token leads from a given prefix state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    State(usize),
    Output(usize),
}

/// Exhaustive, duplicate-free list of terminating sequences together with the
/// prefix tree used to generate them.
#[derive(Debug, Clone)]
pub struct OutputSpace {
    sequences: Vec<Vec<Token>>,
    truncated: Vec<bool>,
    /// Sampled decisions of each output as `(prefix state, token)` pairs.
    paths: Vec<Vec<(usize, Token)>>,
    /// Non-terminal prefixes; index is the prefix-state id.
    states: Vec<Vec<Token>>,
    /// `transitions[state][token]`.
    transitions: Vec<Vec<Step>>,
    index: HashMap<Vec<Token>, usize>,
}

impl OutputSpace {
    fn build(alphabet: TokenAlphabet, max_len: usize) -> Self {
        let mut space = OutputSpace {
            sequences: Vec::new(),
            truncated: Vec::new(),
            paths: Vec::new(),
            states: Vec::new(),
            transitions: Vec::new(),
            index: HashMap::new(),
        };
        let mut path = Vec::new();
        space.expand(alphabet, max_len, Vec::new(), &mut path);
        space
    }

    fn expand(
        &mut self,
        alphabet: TokenAlphabet,
        max_len: usize,
        prefix: Vec<Token>,
        path: &mut Vec<(usize, Token)>,
    ) -> usize {
        let state = self.states.len();
        self.states.push(prefix.clone());
        self.transitions.push(Vec::new());
        let mut row = Vec::with_capacity(alphabet.size() as usize);
        for token in 0..alphabet.size() {
            path.push((state, token));
            let step = if token == alphabet.eos() {
                let mut seq = prefix.clone();
                seq.push(token);
                Step::Output(self.push_output(seq, false, path.clone()))
            } else if prefix.len() + 1 == max_len {
                let mut seq = prefix.clone();
                seq.push(token);
                seq.push(alphabet.eos());
                Step::Output(self.push_output(seq, true, path.clone()))
            } else {
                let mut next = prefix.clone();
                next.push(token);
                Step::State(self.expand(alphabet, max_len, next, path))
            };
            path.pop();
            row.push(step);
        }
        self.transitions[state] = row;
        state
    }

    fn push_output(&mut self, seq: Vec<Token>, truncated: bool, path: Vec<(usize, Token)>) -> usize {
        let id = self.sequences.len();
        self.index.insert(seq.clone(), id);
        self.sequences.push(seq);
        self.truncated.push(truncated);
        self.paths.push(path);
        id
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn sequence(&self, id: usize) -> &[Token] {
        &self.sequences[id]
    }

    pub fn is_truncated(&self, id: usize) -> bool {
        self.truncated[id]
    }

    pub fn path(&self, id: usize) -> &[(usize, Token)] {
        &self.paths[id]
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_prefix(&self, state: usize) -> &[Token] {
        &self.states[state]
    }

    pub fn step(&self, state: usize, token: Token) -> Step {
        self.transitions[state][token as usize]
    }

    pub fn lookup(&self, seq: &[Token]) -> Option<usize> {
        self.index.get(seq).copied()
    }
}

/// Built-in reward rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum RewardRule {
    /// Reward 1 when the output's content tokens equal the prompt's target.
    MatchTarget,
    /// Uniform on `[0, z_max]`, drawn once from `reward_seed`.
    BoundedRandom,
    /// `1` with probability `success_prob`, else `0`, drawn once from `reward_seed`.
    BinaryRandom { success_prob: f64 },
    /// Rewards listed per prompt in enumeration order.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub weight: f64,
    /// Content tokens of the rewarded output (match-target rule).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<Token>>,
    /// Reward per enumerated output (explicit rule).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

/// Structured environment description; the on-disk form is TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub alphabet_size: u32,
    pub eos_id: Token,
    pub prompts: Vec<PromptSpec>,
    pub max_len: usize,
    pub reward_rule: String,
    #[serde(default)]
    pub reward_seed: u64,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    #[serde(default = "default_success_prob")]
    pub success_prob: f64,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
}

fn default_z_max() -> f64 {
    2.0
}

fn default_success_prob() -> f64 {
    0.5
}

fn default_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}

impl EnvSpec {
    /// Prompts with equal weights and the given rule; convenient for tests.
    pub fn uniform(alphabet_size: u32, eos_id: Token, num_prompts: usize, max_len: usize, rule: &str) -> Self {
        let w = 1.0 / num_prompts as f64;
        EnvSpec {
            alphabet_size,
            eos_id,
            prompts: (0..num_prompts)
                .map(|i| PromptSpec {
                    id: format!("p{i}"),
                    weight: w,
                    target: None,
                    rewards: None,
                })
                .collect(),
            max_len,
            reward_rule: rule.to_string(),
            reward_seed: 0,
            z_max: default_z_max(),
            success_prob: default_success_prob(),
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    /// Single-prompt spec with an explicit reward per enumerated output.
    pub fn explicit(alphabet_size: u32, eos_id: Token, max_len: usize, rewards: Vec<Vec<f64>>) -> Self {
        let mut spec = Self::uniform(alphabet_size, eos_id, rewards.len(), max_len, "explicit");
        for (p, r) in spec.prompts.iter_mut().zip(rewards) {
            p.rewards = Some(r);
        }
        spec
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.reward_seed = seed;
        self
    }

    pub fn with_z_max(mut self, z_max: f64) -> Self {
        self.z_max = z_max;
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("env spec serializes")
    }

    pub fn rule(&self) -> Result<RewardRule> {
        match self.reward_rule.as_str() {
            "match-target" => Ok(RewardRule::MatchTarget),
            "bounded-random" => Ok(RewardRule::BoundedRandom),
            "binary-random" => Ok(RewardRule::BinaryRandom {
                success_prob: self.success_prob,
            }),
            "explicit" => Ok(RewardRule::Explicit),
            other => Err(LabError::InvalidEnv(format!("unknown reward rule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub weight: f64,
}

/// A fully materialized environment. Immutable after [`build_env`].
#[derive(Debug, Clone)]
pub struct Environment {
    alphabet: TokenAlphabet,
    prompts: Vec<Prompt>,
    max_len: usize,
    z_max: f64,
    outputs: OutputSpace,
    /// `rewards[prompt][output]`.
    rewards: Vec<Vec<f64>>,
    spec: EnvSpec,
}

/// Materialize an environment from its description.
pub fn build_env(spec: &EnvSpec) -> Result<Environment> {
    let alphabet = TokenAlphabet::new(spec.alphabet_size, spec.eos_id)?;
    if spec.max_len == 0 {
        return Err(LabError::InvalidEnv("max_len must be positive".into()));
    }
    if spec.prompts.is_empty() {
        return Err(LabError::InvalidEnv("at least one prompt is required".into()));
    }
    if !(spec.z_max.is_finite() && spec.z_max > 0.0) {
        return Err(LabError::InvalidEnv(format!("z_max must be positive and finite, got {}", spec.z_max)));
    }
    let count = count_sequences(spec.alphabet_size, spec.max_len);
    if count > spec.enumeration_cap as u128 {
        return Err(LabError::EnumerationCap {
            count,
            cap: spec.enumeration_cap,
        });
    }

    let mut total = 0.0;
    for p in &spec.prompts {
        if !(p.weight.is_finite() && p.weight > 0.0) {
            return Err(LabError::InvalidEnv(format!(
                "prompt {:?} has non-positive weight {}",
                p.id, p.weight
            )));
        }
        total += p.weight;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(LabError::InvalidEnv(format!("prompt weights sum to {total}, expected 1")));
    }
    let prompts: Vec<Prompt> = spec
        .prompts
        .iter()
        .map(|p| Prompt {
            id: p.id.clone(),
            weight: p.weight / total,
        })
        .collect();
    {
        let mut ids: Vec<&str> = prompts.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != prompts.len() {
            return Err(LabError::InvalidEnv("prompt ids must be unique".into()));
        }
    }

    let outputs = OutputSpace::build(alphabet, spec.max_len);
    let rule = spec.rule()?;
    let rewards = materialize_rewards(spec, &rule, alphabet, &outputs)?;
    for (x, row) in rewards.iter().enumerate() {
        for (y, &z) in row.iter().enumerate() {
            if !(z.is_finite() && (0.0..=spec.z_max).contains(&z)) {
                return Err(LabError::InvalidEnv(format!(
                    "reward {z} for prompt {x} output {y} is outside [0, {}]",
                    spec.z_max
                )));
            }
        }
    }

    Ok(Environment {
        alphabet,
        prompts,
        max_len: spec.max_len,
        z_max: spec.z_max,
        outputs,
        rewards,
        spec: spec.clone(),
    })
}

fn materialize_rewards(
    spec: &EnvSpec,
    rule: &RewardRule,
    alphabet: TokenAlphabet,
    outputs: &OutputSpace,
) -> Result<Vec<Vec<f64>>> {
    let n_out = outputs.len();
    match rule {
        RewardRule::MatchTarget => {
            if spec.z_max < 1.0 {
                return Err(LabError::InvalidEnv("match-target needs z_max >= 1".into()));
            }
            let content: Vec<Token> = alphabet.content_tokens().collect();
            spec.prompts
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let target = match &p.target {
                        Some(t) => t.clone(),
                        None => vec![content[i % content.len()]],
                    };
                    if target.len() > spec.max_len || target.contains(&alphabet.eos()) {
                        return Err(LabError::InvalidEnv(format!(
                            "target {target:?} of prompt {:?} is not a reachable content sequence",
                            p.id
                        )));
                    }
                    let mut seq = target;
                    seq.push(alphabet.eos());
                    let hit = outputs.lookup(&seq).ok_or_else(|| {
                        LabError::InvalidEnv(format!("target of prompt {:?} is unreachable", p.id))
                    })?;
                    Ok((0..n_out).map(|y| if y == hit { 1.0 } else { 0.0 }).collect())
                })
                .collect()
        }
        RewardRule::BoundedRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.reward_seed);
            Ok(spec
                .prompts
                .iter()
                .map(|_| (0..n_out).map(|_| rng.random::<f64>() * spec.z_max).collect())
                .collect())
        }
        RewardRule::BinaryRandom { success_prob } => {
            if !(0.0..=1.0).contains(success_prob) || spec.z_max < 1.0 {
                return Err(LabError::InvalidEnv(
                    "binary-random needs success_prob in [0, 1] and z_max >= 1".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.reward_seed);
            Ok(spec
                .prompts
                .iter()
                .map(|_| {
                    (0..n_out)
                        .map(|_| if rng.random::<f64>() < *success_prob { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect())
        }
        RewardRule::Explicit => spec
            .prompts
            .iter()
            .map(|p| match &p.rewards {
                Some(r) if r.len() == n_out => Ok(r.clone()),
                Some(r) => Err(LabError::InvalidEnv(format!(
                    "prompt {:?} lists {} rewards but there are {n_out} outputs",
                    p.id,
                    r.len()
                ))),
                None => Err(LabError::InvalidEnv(format!(
                    "explicit rule needs rewards for prompt {:?}",
                    p.id
                ))),
            })
            .collect(),
    }
}

impl Environment {
    pub fn alphabet(&self) -> TokenAlphabet {
        self.alphabet
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn weight(&self, x: usize) -> f64 {
        self.prompts[x].weight
    }

    pub fn prompt_index(&self, id: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p.id == id)
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn z_max(&self) -> f64 {
        self.z_max
    }

    pub fn outputs(&self) -> &OutputSpace {
        &self.outputs
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Reward of output `y` (by enumeration index) for prompt `x`.
    pub fn reward_of(&self, x: usize, y: usize) -> f64 {
        self.rewards[x][y]
    }

    pub fn rewards(&self, x: usize) -> &[f64] {
        &self.rewards[x]
    }

    /// Canonical (eos-terminated) form of a sequence, accepting truncated
    /// sequences given without their implicit `eos`.
    pub fn resolve(&self, x: usize, y: &[Token]) -> Result<usize> {
        if let Some(id) = self.outputs.lookup(y) {
            return Ok(id);
        }
        if y.len() == self.max_len && !y.contains(&self.alphabet.eos()) {
            let mut full = y.to_vec();
            full.push(self.alphabet.eos());
            if let Some(id) = self.outputs.lookup(&full) {
                return Ok(id);
            }
        }
        Err(LabError::UnknownOutput {
            prompt: x,
            sequence: y.to_vec(),
        })
    }

    /// `J* = sum_x w(x) max_y reward(x, y)`.
    pub fn optimal_value(&self) -> f64 {
        self.prompts
            .iter()
            .zip(&self.rewards)
            .map(|(p, r)| p.weight * r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum()
    }
}

/// Deterministic reward lookup.
pub fn reward(env: &Environment, x: usize, y: &[Token]) -> Result<f64> {
    if x >= env.num_prompts() {
        return Err(LabError::UnknownOutput {
            prompt: x,
            sequence: y.to_vec(),
        });
    }
    let id = env.resolve(x, y)?;
    Ok(env.reward_of(x, id))
}

/// Complete list of terminating sequences, in a stable depth-first order.
pub fn enumerate_outputs(env: &Environment) -> &OutputSpace {
    &env.outputs
}
