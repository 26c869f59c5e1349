//! Experiment specs, validation and the runner behind the command line.
//!
//! A spec is a TOML file with a `command`, a mandatory `seed`, an
//! environment (a path or an inline `[env]` table), an optional `[policy]`
//! initializer and a `[params]` table whose schema depends on the command.
//! Every run writes `manifest.json`, result files and `summary.txt` into a
//! fresh subdirectory of the output directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::analysis::asymptotics::{asymptotics_pipeline, AsymptoticsReport, PipelineOptions};
use crate::analysis::mse::{mse_exact_with_table, mse_monte_carlo};
use crate::analysis::practical::{arcsin_gradient_check, practical_bias_curve, BiasOptions};
use crate::analysis::quadratic::QuadraticSpec;
use crate::analysis::scaling::{estimate_constants, fixed_budget_curve, group_size_sweep};
use crate::analysis::EstimatorKind;
use crate::env::{build_env, EnvSpec, Environment, DEFAULT_ENUMERATION_CAP};
use crate::error::{LabError, Result};
use crate::grad::{EpsPolicy, DEFAULT_COVERAGE_FLOOR};
use crate::optim::{
    train_grpo_practical, train_meta, LrSchedule, TrainConfig, TrainEstimator, TrainTrace, DEFAULT_BOX_RADIUS,
};
use crate::policy::{value_from_table, PolicyParams, PromptView};
use crate::rng::{job_id, stream};
use crate::ustat::{hoeffding_with_view, PairMoments};

/// Stream of `seed` reserved for the initial policy.
pub const INIT_STREAM: u64 = 1 << 48;
/// Stream for a random reference policy.
pub const REFERENCE_STREAM: u64 = INIT_STREAM + 1;
/// Stream for a random displacement direction.
pub const DIRECTION_STREAM: u64 = INIT_STREAM + 2;
/// Stream for random scaling-law probes.
pub const PROBE_STREAM: u64 = INIT_STREAM + 3;

/// How the top-level seed is split, recorded in every manifest.
pub const STREAM_RULE: &str = "ChaCha8 seeded with the top-level seed; job j uses stream j. \
Sweep cell c, replication r is job (c << 32) | r. The initial policy, reference, direction and probes use \
streams 2^48, 2^48 + 1, 2^48 + 2 and 2^48 + 3. Per-cell Monte-Carlo seeds are the first u64 of stream (c << 32).";

pub const COMMANDS: [&str; 9] = [
    "mse-sweep",
    "decompose",
    "train",
    "grpo-train",
    "scaling-law",
    "group-sweep",
    "asymptotics",
    "bias-curve",
    "arcsin-check",
];

/// Initial logits of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PolicyInit {
    Zeros,
    /// `N(0, scale^2)` logits from the init stream of the seed.
    Random { scale: f64 },
    Logits { values: Vec<f64> },
    /// A checkpoint CSV; resolved to `logits` when the spec is loaded.
    Checkpoint { path: String },
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit::Zeros
    }
}

impl PolicyInit {
    pub fn build(&self, env: &Environment, seed: u64, job: u64) -> Result<PolicyParams> {
        match self {
            PolicyInit::Zeros => Ok(PolicyParams::zeros(env)),
            PolicyInit::Random { scale } => Ok(PolicyParams::random(env, *scale, &mut stream(seed, job))),
            PolicyInit::Logits { values } => PolicyParams::from_logits(env, values.clone()),
            PolicyInit::Checkpoint { path } => PolicyParams::read_checkpoint(env, File::open(path)?),
        }
    }
}

fn default_b() -> usize {
    1
}

fn default_box() -> f64 {
    DEFAULT_BOX_RADIUS
}

fn default_stride() -> usize {
    1
}

fn default_estimators() -> Vec<String> {
    ["vanilla", "leave_one_out", "oracle_value", "normalized"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseSweepParams {
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(rename = "G_grid")]
    pub g_grid: Vec<usize>,
    #[serde(rename = "B", default = "default_b")]
    pub b: usize,
    /// Monte-Carlo replications per cell beside the exact value; 0 skips.
    #[serde(default)]
    pub mc_reps: usize,
    #[serde(default)]
    pub enumeration_cap: Option<u64>,
}

fn default_groups() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeParams {
    #[serde(rename = "G")]
    pub g: usize,
    /// Sampled groups per prompt.
    #[serde(default = "default_groups")]
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub n: usize,
    pub schedule: LrSchedule,
    /// `vanilla`, `leave_one_out`, `oracle_value` or `normalized`.
    #[serde(default = "default_estimator")]
    pub estimator: String,
    /// 0 disables the projection.
    #[serde(default = "default_box")]
    pub box_radius: f64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default)]
    pub snapshot_stride: usize,
}

fn default_estimator() -> String {
    "leave_one_out".into()
}

fn default_floor() -> f64 {
    DEFAULT_COVERAGE_FLOOR
}

fn default_m() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoTrainParams {
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub n: usize,
    pub schedule: LrSchedule,
    pub kappa: f64,
    /// Minibatches per outer iteration.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub eps: EpsPolicy,
    #[serde(default = "default_box")]
    pub box_radius: f64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default)]
    pub snapshot_stride: usize,
    /// Reference policy of the KL term; the initial policy when absent.
    #[serde(default)]
    pub reference: Option<PolicyInit>,
}

fn default_pair() -> [usize; 2] {
    [6, 12]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingLawParams {
    /// Total samples per iteration, `N = B G`.
    pub budget: usize,
    #[serde(rename = "G_grid")]
    pub g_grid: Vec<usize>,
    /// Group sizes that identify `c3`.
    #[serde(rename = "G_pair", default = "default_pair")]
    pub g_pair: [usize; 2],
    /// Random probes in addition to the initial policy.
    #[serde(default)]
    pub random_probes: usize,
    #[serde(default = "default_probe_scale")]
    pub probe_scale: f64,
}

fn default_probe_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSweepParams {
    pub budget: usize,
    #[serde(rename = "G_grid")]
    pub g_grid: Vec<usize>,
    pub runs: usize,
    pub n: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default = "default_box")]
    pub box_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsParams {
    pub beta: f64,
    pub n: usize,
    pub runs: usize,
    pub mixture_samples: usize,
    /// Start of every run; the optimum when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasCurveParams {
    pub kappa: f64,
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "B", default = "default_b")]
    pub b: usize,
    /// Monte-Carlo batches per displacement; 0 reports the exact bias only.
    #[serde(default)]
    pub reps: usize,
    pub displacements: Vec<f64>,
    /// Reference policy; random with scale 0.6 when absent.
    #[serde(default)]
    pub reference: Option<PolicyInit>,
    /// Displacement direction; a standard normal draw when absent.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcsinParams {
    #[serde(rename = "G")]
    pub g: usize,
    /// Central-difference step.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

/// A command with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command", content = "params")]
pub enum Command {
    MseSweep(MseSweepParams),
    Decompose(DecomposeParams),
    Train(TrainParams),
    GrpoTrain(GrpoTrainParams),
    ScalingLaw(ScalingLawParams),
    GroupSweep(GroupSweepParams),
    Asymptotics(AsymptoticsParams),
    BiasCurve(BiasCurveParams),
    ArcsinCheck(ArcsinParams),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MseSweep(_) => "mse-sweep",
            Command::Decompose(_) => "decompose",
            Command::Train(_) => "train",
            Command::GrpoTrain(_) => "grpo-train",
            Command::ScalingLaw(_) => "scaling-law",
            Command::GroupSweep(_) => "group-sweep",
            Command::Asymptotics(_) => "asymptotics",
            Command::BiasCurve(_) => "bias-curve",
            Command::ArcsinCheck(_) => "arcsin-check",
        }
    }

    fn needs_env(&self) -> bool {
        !matches!(self, Command::Asymptotics(_))
    }
}

/// A fully resolved experiment: paths are inlined so the manifest alone
/// determines every result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    #[serde(flatten)]
    pub command: Command,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvSpec>,
    #[serde(default)]
    pub policy: PolicyInit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum EnvRef {
    Path(String),
    Inline(EnvSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    command: Option<String>,
    seed: Option<toml::Value>,
    env: Option<EnvRef>,
    policy: Option<PolicyInit>,
    quadratic: Option<QuadraticSpec>,
    params: Option<toml::Table>,
}

fn parse_params<T: serde::de::DeserializeOwned>(table: toml::Table, diags: &mut Vec<String>) -> Option<T> {
    match toml::Value::Table(table).try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            diags.push(format!("params: {}", e.to_string().trim()));
            None
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn check_estimator(name: &str, g: usize, diags: &mut Vec<String>) {
    match EstimatorKind::parse(name) {
        Ok(k) => {
            if g < k.min_group() {
                diags.push(format!(
                    "baseline precondition: {} needs G >= {}, got G = {g}",
                    k.label(),
                    k.min_group()
                ));
            }
        }
        Err(e) => diags.push(e.to_string()),
    }
}

fn check_radius(r: f64, diags: &mut Vec<String>) {
    if !(r.is_finite() && r >= 0.0) {
        diags.push(format!("box_radius must be finite and >= 0 (0 disables), got {r}"));
    }
}

fn check_schedule(s: &LrSchedule, diags: &mut Vec<String>) {
    if let Err(e) = s.validate() {
        diags.push(e.to_string());
    }
}

fn check_grid(name: &str, gs: &[usize], budget: Option<usize>, diags: &mut Vec<String>) {
    if gs.is_empty() {
        diags.push(format!("{name} is empty"));
    }
    for &g in gs {
        if g == 0 {
            diags.push(format!("{name} contains G = 0"));
        } else if let Some(n) = budget {
            if n % g != 0 {
                diags.push(format!("G = {g} does not divide the budget N = {n}"));
            }
        }
    }
}

fn semantic_checks(cmd: &Command, diags: &mut Vec<String>) {
    match cmd {
        Command::MseSweep(p) => {
            check_grid("G_grid", &p.g_grid, None, diags);
            if p.b == 0 {
                diags.push("B must be at least 1".into());
            }
            if p.mc_reps > 0 && p.mc_reps < crate::analysis::mse::MIN_REPLICATIONS {
                diags.push(format!(
                    "mc_reps must be 0 or at least {}",
                    crate::analysis::mse::MIN_REPLICATIONS
                ));
            }
            for e in &p.estimators {
                for &g in &p.g_grid {
                    check_estimator(e, g, diags);
                }
            }
        }
        Command::Decompose(p) => {
            if p.g < 2 {
                diags.push(format!("baseline precondition: leave_one_out needs G >= 2, got G = {}", p.g));
            }
            if p.groups == 0 {
                diags.push("groups must be at least 1".into());
            }
        }
        Command::Train(p) => {
            check_schedule(&p.schedule, diags);
            check_estimator(&p.estimator, p.g, diags);
            if p.b == 0 || p.g == 0 {
                diags.push("B and G must be at least 1".into());
            }
            if p.record_stride == 0 {
                diags.push("record_stride must be at least 1".into());
            }
            check_radius(p.box_radius, diags);
        }
        Command::GrpoTrain(p) => {
            check_schedule(&p.schedule, diags);
            if p.g < 2 {
                diags.push(format!("normalized advantages need G >= 2, got G = {}", p.g));
            }
            if p.b == 0 {
                diags.push("B must be at least 1".into());
            }
            if !(p.kappa >= 0.0 && p.kappa.is_finite()) {
                diags.push(format!("kappa must be >= 0, got {}", p.kappa));
            }
            if p.m == 0 || p.b % p.m != 0 {
                diags.push(format!("m = {} must divide B = {}", p.m, p.b));
            }
            if p.record_stride == 0 {
                diags.push("record_stride must be at least 1".into());
            }
            check_radius(p.box_radius, diags);
        }
        Command::ScalingLaw(p) => {
            check_grid("G_grid", &p.g_grid, Some(p.budget), diags);
            let [a, b] = p.g_pair;
            if a < 2 || b < 2 || a == b {
                diags.push(format!("G_pair needs two distinct group sizes >= 2, got [{a}, {b}]"));
            }
        }
        Command::GroupSweep(p) => {
            check_grid("G_grid", &p.g_grid, Some(p.budget), diags);
            check_schedule(&p.schedule, diags);
            check_radius(p.box_radius, diags);
            if p.runs == 0 {
                diags.push("runs must be at least 1".into());
            }
            if EstimatorKind::parse(&p.estimator).map(|k| matches!(k, EstimatorKind::Normalized { .. })).unwrap_or(false) {
                diags.push("group-sweep trains with a meta estimator; normalized is not accepted".into());
            }
            for &g in &p.g_grid {
                check_estimator(&p.estimator, g, diags);
            }
        }
        Command::Asymptotics(p) => {
            if !(p.beta > 0.0 && p.beta.is_finite()) {
                diags.push(format!("beta must be positive, got {}", p.beta));
            }
            if p.n == 0 || p.runs == 0 || p.mixture_samples == 0 {
                diags.push("n, runs and mixture_samples must be at least 1".into());
            }
        }
        Command::BiasCurve(p) => {
            if p.g < 2 {
                diags.push(format!("normalized advantages need G >= 2, got G = {}", p.g));
            }
            if !(p.kappa >= 0.0 && p.kappa.is_finite()) {
                diags.push(format!("kappa must be >= 0, got {}", p.kappa));
            }
            if p.displacements.is_empty() {
                diags.push("displacements is empty".into());
            }
        }
        Command::ArcsinCheck(p) => {
            if p.g < 2 {
                diags.push(format!("normalized advantages need G >= 2, got G = {}", p.g));
            }
            if !(p.delta > 0.0) {
                diags.push(format!("delta must be positive, got {}", p.delta));
            }
        }
    }
}

/// Outcome of loading a spec: the experiment, or every problem found.
pub enum Loaded {
    Ok(Box<Experiment>),
    Invalid(Vec<String>),
}

/// Parses and checks the spec at `path` without running anything.
/// `seed_override` stands in for a missing or different `seed`.
pub fn load_spec(path: &Path, seed_override: Option<u64>) -> Result<Loaded> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(load_spec_str(&text, &base, seed_override))
}

pub fn load_spec_str(text: &str, base: &Path, seed_override: Option<u64>) -> Loaded {
    let mut diags = Vec::new();
    let raw: RawSpec = match toml::from_str(text) {
        Ok(r) => r,
        Err(e) => return Loaded::Invalid(vec![format!("spec is not valid: {}", e.to_string().trim())]),
    };
    let seed = match (seed_override, &raw.seed) {
        (Some(s), _) => Some(s),
        (None, Some(toml::Value::Integer(i))) if *i >= 0 => Some(*i as u64),
        (None, Some(v)) => {
            diags.push(format!("seed must be a nonnegative integer, got {v}"));
            None
        }
        (None, None) => {
            diags.push("seed is missing; runs are never seeded from the clock".into());
            None
        }
    };
    let params = raw.params.unwrap_or_default();
    let command = match raw.command.as_deref() {
        None => {
            diags.push(format!("command is missing; expected one of {}", COMMANDS.join(", ")));
            None
        }
        Some(c) => match c {
            "mse-sweep" => parse_params(params, &mut diags).map(Command::MseSweep),
            "decompose" => parse_params(params, &mut diags).map(Command::Decompose),
            "train" => parse_params(params, &mut diags).map(Command::Train),
            "grpo-train" => parse_params(params, &mut diags).map(Command::GrpoTrain),
            "scaling-law" => parse_params(params, &mut diags).map(Command::ScalingLaw),
            "group-sweep" => parse_params(params, &mut diags).map(Command::GroupSweep),
            "asymptotics" => parse_params(params, &mut diags).map(Command::Asymptotics),
            "bias-curve" => parse_params(params, &mut diags).map(Command::BiasCurve),
            "arcsin-check" => parse_params(params, &mut diags).map(Command::ArcsinCheck),
            other => {
                diags.push(format!("unknown command {other:?}; expected one of {}", COMMANDS.join(", ")));
                None
            }
        },
    };
    if let Some(cmd) = &command {
        semantic_checks(cmd, &mut diags);
    }

    let env = match raw.env {
        Some(EnvRef::Inline(spec)) => Some(spec),
        Some(EnvRef::Path(p)) => match EnvSpec::from_path(resolve(base, &p)) {
            Ok(spec) => Some(spec),
            Err(e) => {
                diags.push(format!("env {p}: {e}"));
                None
            }
        },
        None => None,
    };
    let built = match &env {
        Some(spec) => match build_env(spec) {
            Ok(e) => Some(e),
            Err(e) => {
                diags.push(e.to_string());
                None
            }
        },
        None => None,
    };
    let needs_env = command.as_ref().map(Command::needs_env).unwrap_or(false);
    if needs_env && env.is_none() && !diags.iter().any(|d| d.starts_with("env ")) {
        diags.push("env is missing: give a path or an inline [env] table".into());
    }
    if matches!(command, Some(Command::Asymptotics(_))) {
        match &raw.quadratic {
            None => diags.push("asymptotics needs a [quadratic] table".into()),
            Some(q) => {
                if let Err(e) = q.build() {
                    diags.push(e.to_string());
                }
            }
        }
    }

    let mut policy = raw.policy.unwrap_or_default();
    if let PolicyInit::Checkpoint { path } = &policy {
        match &built {
            Some(e) => {
                let full = resolve(base, path);
                match File::open(&full).map_err(LabError::from).and_then(|f| PolicyParams::read_checkpoint(e, f)) {
                    Ok(p) => {
                        policy = PolicyInit::Logits {
                            values: p.logits().to_vec(),
                        }
                    }
                    Err(err) => diags.push(format!("policy checkpoint {path}: {err}")),
                }
            }
            None => diags.push("a checkpoint policy needs an environment".into()),
        }
    }
    if let (Some(e), PolicyInit::Logits { values }) = (&built, &policy) {
        let d = PolicyParams::zeros(e).dim();
        if values.len() != d {
            diags.push(format!("policy has {} logits, the environment needs {d}", values.len()));
        }
    }
    if let PolicyInit::Random { scale } = &policy {
        if !(scale.is_finite() && *scale >= 0.0) {
            diags.push(format!("policy scale must be >= 0, got {scale}"));
        }
    }

    if !diags.is_empty() {
        return Loaded::Invalid(diags);
    }
    Loaded::Ok(Box::new(Experiment {
        command: command.expect("checked"),
        seed: seed.expect("checked"),
        env,
        policy,
        quadratic: raw.quadratic,
    }))
}

/// Every schema violation of the spec at `path`; empty when valid.
pub fn validate(path: &Path) -> Result<Vec<String>> {
    Ok(match load_spec(path, None)? {
        Loaded::Ok(_) => Vec::new(),
        Loaded::Invalid(d) => d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }

    fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: Option<usize>,
    pub format: OutputFormat,
}

/// Where a run wrote its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub summary: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'a Experiment,
    seed: u64,
    stream_rule: &'static str,
    format: OutputFormat,
    workers: usize,
    started_at: String,
    wall_time_secs: f64,
    files: &'a [String],
}

/// Collects result files in memory before they are written.
struct Artifacts {
    format: OutputFormat,
    files: Vec<(String, Vec<u8>)>,
    summary: String,
}

impl Artifacts {
    fn csv_rows<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        if self.format.csv() {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(crate::policy::csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| LabError::Parse(e.to_string()))?;
            self.files.push((format!("{name}.csv"), bytes));
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.format.json() {
            let mut bytes = serde_json::to_vec_pretty(value)?;
            bytes.push(b'\n');
            self.files.push((format!("{name}.json"), bytes));
        }
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.summary.push_str(s.as_ref());
        self.summary.push('\n');
    }
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    stream(seed, job_id(cell as u64, 0)).next_u64()
}

fn fresh_dir(out: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut dir = out.join(format!("{command}-{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{command}-{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir)?;
    Ok(dir)
}

/// Runs the experiment and writes its artifacts into a fresh subdirectory
/// of `opts.out`.
pub fn run(exp: &Experiment, opts: &RunOptions) -> Result<RunOutput> {
    let started = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let mut arts = Artifacts {
        format: opts.format,
        files: Vec::new(),
        summary: String::new(),
    };
    let workers = match opts.workers {
        Some(n) => n.max(1),
        None => rayon::current_num_threads(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LabError::InvalidArgument(format!("worker pool: {e}")))?;
    pool.install(|| execute(exp, &mut arts))?;
    let wall = clock.elapsed().as_secs_f64();

    let dir = fresh_dir(&opts.out, exp.command.name())?;
    let mut names: Vec<String> = arts.files.iter().map(|f| f.0.clone()).collect();
    names.push("summary.txt".into());
    for (name, bytes) in &arts.files {
        fs::write(dir.join(name), bytes)?;
    }
    fs::write(dir.join("summary.txt"), &arts.summary)?;
    let manifest = Manifest {
        tool: "grpo-lab",
        version: env!("CARGO_PKG_VERSION"),
        experiment: exp,
        seed: exp.seed,
        stream_rule: STREAM_RULE,
        format: opts.format,
        workers,
        started_at: started,
        wall_time_secs: wall,
        files: &names,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    names.push("manifest.json".into());
    Ok(RunOutput {
        dir,
        files: names,
        summary: arts.summary,
    })
}

fn env_of(exp: &Experiment) -> Result<Environment> {
    let spec = exp
        .env
        .as_ref()
        .ok_or_else(|| LabError::InvalidArgument("this command needs an environment".into()))?;
    build_env(spec)
}

fn meta_estimator(name: &str) -> Result<TrainEstimator> {
    match EstimatorKind::parse(name)? {
        EstimatorKind::Meta { baseline } => Ok(TrainEstimator::Meta { baseline }),
        EstimatorKind::Normalized { eps } => Ok(TrainEstimator::Normalized { eps }),
    }
}

fn radius(r: f64) -> Option<f64> {
    (r > 0.0).then_some(r)
}

fn execute(exp: &Experiment, arts: &mut Artifacts) -> Result<()> {
    match &exp.command {
        Command::MseSweep(p) => mse_sweep(exp, p, arts),
        Command::Decompose(p) => decompose(exp, p, arts),
        Command::Train(p) => {
            let env = env_of(exp)?;
            let init = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
            let mut cfg = TrainConfig::new(p.b, p.g, p.n, p.schedule, meta_estimator(&p.estimator)?, exp.seed);
            cfg.box_radius = radius(p.box_radius);
            cfg.record_stride = p.record_stride;
            cfg.snapshot_stride = p.snapshot_stride;
            cfg.init = Some(init.logits().to_vec());
            let trace = train_meta(&env, &cfg, &mut stream(exp.seed, 0))?;
            emit_trace(&env, &trace, arts)
        }
        Command::GrpoTrain(p) => {
            let env = env_of(exp)?;
            let init = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
            let estimator = TrainEstimator::Practical {
                kappa: p.kappa,
                m: p.m,
                floor: p.floor,
                eps: p.eps,
            };
            let mut cfg = TrainConfig::new(p.b, p.g, p.n, p.schedule, estimator, exp.seed);
            cfg.box_radius = radius(p.box_radius);
            cfg.record_stride = p.record_stride;
            cfg.snapshot_stride = p.snapshot_stride;
            cfg.init = Some(init.logits().to_vec());
            if let Some(r) = &p.reference {
                cfg.reference = Some(r.build(&env, exp.seed, REFERENCE_STREAM)?.logits().to_vec());
            }
            let trace = train_grpo_practical(&env, &cfg, &mut stream(exp.seed, 0))?;
            emit_trace(&env, &trace, arts)
        }
        Command::ScalingLaw(p) => scaling_law(exp, p, arts),
        Command::GroupSweep(p) => {
            let env = env_of(exp)?;
            let init = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
            let mut template = TrainConfig::new(1, 1, p.n, p.schedule, meta_estimator(&p.estimator)?, exp.seed);
            template.box_radius = radius(p.box_radius);
            template.init = Some(init.logits().to_vec());
            let table = group_size_sweep(&env, p.budget, &p.g_grid, &template, p.runs, exp.seed)?;
            arts.csv_rows("sweep", &table.rows)?;
            arts.json("sweep", &table)?;
            arts.line(format!("group-size sweep, N = {}, n = {}, {} runs per cell", p.budget, p.n, p.runs));
            for r in &table.rows {
                arts.line(format!(
                    "  G = {:>3}  B = {:>3}  final J {:.6} [{:.6}, {:.6}]  gap {:.6}",
                    r.g, r.b, r.mean, r.ci_lo, r.ci_hi, r.mean_gap
                ));
            }
            arts.line(format!("best G = {}", table.best_g));
            Ok(())
        }
        Command::Asymptotics(p) => {
            let quad = exp
                .quadratic
                .as_ref()
                .ok_or_else(|| LabError::InvalidArgument("asymptotics needs a quadratic".into()))?
                .build()?;
            let opts = PipelineOptions {
                beta: p.beta,
                n: p.n,
                runs: p.runs,
                mixture_samples: p.mixture_samples,
                seed: exp.seed,
            };
            let report = asymptotics_pipeline(&quad, opts, p.theta0.as_deref())?;
            emit_asymptotics(&report, arts)
        }
        Command::BiasCurve(p) => bias_curve(exp, p, arts),
        Command::ArcsinCheck(p) => {
            let env = env_of(exp)?;
            let policy = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
            let rep = arcsin_gradient_check(&policy, &env, p.g, p.delta)?;
            #[derive(Serialize)]
            struct Row {
                prompt: usize,
                value: f64,
                coefficient: f64,
            }
            let rows: Vec<Row> = rep
                .values
                .iter()
                .zip(&rep.coefficients)
                .enumerate()
                .map(|(x, (&value, &coefficient))| Row {
                    prompt: x,
                    value,
                    coefficient,
                })
                .collect();
            arts.csv_rows("arcsin", &rows)?;
            arts.json("arcsin", &rep)?;
            arts.line(format!("arcsin check at G = {}, delta = {}", p.g, p.delta));
            arts.line(format!(
                "max relative error: finite G {:.3e}, large G {:.3e}; verdict {} on {:.3e} (tolerance {:.0e})",
                rep.max_rel_error_finite,
                rep.max_rel_error_large_g,
                rep.mode,
                rep.max_rel_error,
                crate::analysis::practical::ARCSIN_TOL
            ));
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct MseRow {
    estimator: String,
    #[serde(rename = "B")]
    b: usize,
    #[serde(rename = "G")]
    g: usize,
    exact_mse: f64,
    bias_sq: f64,
    prompt_variance: f64,
    per_prompt_mean: f64,
    mc_mse: Option<f64>,
    mc_ci_halfwidth: Option<f64>,
}

fn mse_sweep(exp: &Experiment, p: &MseSweepParams, arts: &mut Artifacts) -> Result<()> {
    let env = env_of(exp)?;
    let policy = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
    let table = policy.probability_table();
    let cap = p.enumeration_cap.unwrap_or(DEFAULT_ENUMERATION_CAP);
    let mut rows = Vec::new();
    let mut cell = 0;
    for name in &p.estimators {
        let kind = EstimatorKind::parse(name)?;
        for &g in &p.g_grid {
            let split = mse_exact_with_table(&table, &env, &kind, p.b, g, cap)?;
            let (mc, ci) = if p.mc_reps > 0 {
                let r = mse_monte_carlo(&policy, &env, &kind, p.b, g, p.mc_reps, cell_seed(exp.seed, cell))?;
                (Some(r.mse_mean), Some(r.ci_halfwidth))
            } else {
                (None, None)
            };
            rows.push(MseRow {
                estimator: kind.label(),
                b: p.b,
                g,
                exact_mse: split.total,
                bias_sq: split.bias_sq,
                prompt_variance: split.prompt_variance,
                per_prompt_mean: split.per_prompt_mean,
                mc_mse: mc,
                mc_ci_halfwidth: ci,
            });
            cell += 1;
        }
    }
    arts.csv_rows("mse", &rows)?;
    arts.json("mse", &rows)?;
    arts.line(format!("gradient MSE at B = {}, d = {}", p.b, policy.dim()));
    for r in &rows {
        let mc = match (r.mc_mse, r.mc_ci_halfwidth) {
            (Some(m), Some(h)) => format!("  MC {m:.6e} +- {h:.2e}"),
            _ => String::new(),
        };
        arts.line(format!("  {:<14} G = {:>3}  exact {:.6e}{mc}", r.estimator, r.g, r.exact_mse));
    }
    Ok(())
}

#[derive(Serialize)]
struct DecomposeRow {
    prompt: usize,
    #[serde(rename = "G")]
    g: usize,
    value: f64,
    oracle_trace: f64,
    zeta2_sq: f64,
    /// `E||first-order||^2 = tr(Sigma_oracle) / G`.
    first_order_exact: f64,
    first_order_mc: f64,
    /// `E||second-order||^2 = 2 E||zeta2||^2 / (G (G - 1))`.
    second_order_exact: f64,
    second_order_mc: f64,
    loo_mse_exact: f64,
    groups: usize,
}

fn decompose(exp: &Experiment, p: &DecomposeParams, arts: &mut Artifacts) -> Result<()> {
    let env = env_of(exp)?;
    let policy = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
    let table = policy.probability_table();
    let gf = p.g as f64;
    let mut rows = Vec::new();
    for x in 0..env.num_prompts() {
        let view = PromptView::new(&table, &env, x);
        let m = PairMoments::from_view(&view);
        let mut rng = stream(exp.seed, job_id(x as u64, 0));
        let (mut f1, mut f2) = (0.0, 0.0);
        for _ in 0..p.groups {
            let outputs: Vec<usize> = (0..p.g).map(|_| table.sample(&env, x, &mut rng)).collect();
            let group = crate::grad::GroupSample::from_ids(&env, x, outputs);
            let parts = hoeffding_with_view(&table, &view, &env, &group)?;
            f1 += parts.first_order_norm_sq;
            f2 += parts.second_order_norm_sq;
        }
        let k = p.groups as f64;
        rows.push(DecomposeRow {
            prompt: x,
            g: p.g,
            value: value_from_table(&table, &env, x),
            oracle_trace: m.oracle_trace,
            zeta2_sq: m.zeta2_sq,
            first_order_exact: m.oracle_trace / gf,
            first_order_mc: f1 / k,
            second_order_exact: 2.0 * m.zeta2_sq / (gf * (gf - 1.0)),
            second_order_mc: f2 / k,
            loo_mse_exact: m.loo_mse(p.g),
            groups: p.groups,
        });
    }
    arts.csv_rows("decompose", &rows)?;
    arts.json("decompose", &rows)?;
    arts.line(format!("Hoeffding decomposition at G = {}, {} groups per prompt", p.g, p.groups));
    for r in &rows {
        arts.line(format!(
            "  prompt {}: first order {:.4e} (MC {:.4e}), second order {:.4e} (MC {:.4e})",
            r.prompt, r.first_order_exact, r.first_order_mc, r.second_order_exact, r.second_order_mc
        ));
    }
    Ok(())
}

fn emit_trace(env: &Environment, trace: &TrainTrace, arts: &mut Artifacts) -> Result<()> {
    if arts.format.csv() {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        arts.raw("trace.csv", buf);
        if !trace.snapshots.is_empty() {
            let mut buf = Vec::new();
            trace.write_snapshots_csv(&mut buf)?;
            arts.raw("snapshots.csv", buf);
        }
    }
    arts.json("trace", trace)?;
    let mut ckpt = Vec::new();
    PolicyParams::from_logits(env, trace.final_logits.clone())?.write_checkpoint(env, &mut ckpt)?;
    arts.raw("final_policy.csv", ckpt);
    let first = &trace.records[0];
    let last = trace.last();
    arts.line(format!(
        "trained {} iterations: J {:.6} -> {:.6}, gap {:.6} -> {:.6}, {} clipped records",
        last.iter,
        first.objective,
        last.objective,
        first.gap,
        last.gap,
        trace.clip_count()
    ));
    Ok(())
}

fn scaling_law(exp: &Experiment, p: &ScalingLawParams, arts: &mut Artifacts) -> Result<()> {
    let env = env_of(exp)?;
    let policy = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
    let mut probes = vec![policy.clone()];
    let mut rng = stream(exp.seed, PROBE_STREAM);
    for _ in 0..p.random_probes {
        probes.push(PolicyParams::random(&env, p.probe_scale, &mut rng));
    }
    let est = estimate_constants(&probes, &env, p.g_pair[0], p.g_pair[1])?;
    let rows = fixed_budget_curve(&policy, &env, p.budget, &p.g_grid, &est)?;
    arts.csv_rows("budget_curve", &rows)?;
    #[derive(Serialize)]
    struct Out<'a> {
        constants: &'a crate::analysis::scaling::ScalingEstimate,
        budget: usize,
        rows: &'a [crate::analysis::scaling::BudgetRow],
    }
    arts.json(
        "scaling_law",
        &Out {
            constants: &est,
            budget: p.budget,
            rows: &rows,
        },
    )?;
    if arts.format.csv() {
        let text = format!(
            "key,value\nc1,{}\nc2,{}\nc3,{}\ng_star,{}\nc1_zero,{}\nG_a,{}\nG_b,{}\n",
            est.c1, est.c2, est.c3, est.g_star, est.c1_zero, est.g_pair.0, est.g_pair.1
        );
        arts.raw("constants.csv", text.into_bytes());
    }
    arts.line(format!(
        "c1 = {:.6e}, c2 = {:.6e}, c3 = {:.6e} from G pair {:?} over {}",
        est.c1, est.c2, est.c3, est.g_pair, est.probes
    ));
    if est.c1_zero {
        arts.line("c1 = 0: larger groups are never worse at fixed budget (G* is unbounded)");
    } else {
        arts.line(format!("G* = sqrt(c3 / c1) = {:.4}", est.g_star));
    }
    arts.line(format!("fixed budget N = {}:", p.budget));
    for r in &rows {
        arts.line(format!(
            "  G = {:>3}  B = {:>3}  exact {:.6e}  law {:.6e}  rel error {:.4}",
            r.g, r.b, r.exact, r.predicted, r.rel_error
        ));
    }
    Ok(())
}

fn emit_asymptotics(report: &AsymptoticsReport, arts: &mut Artifacts) -> Result<()> {
    #[derive(Serialize)]
    struct Weight {
        k: usize,
        lambda: f64,
        weight: f64,
    }
    #[derive(Serialize)]
    struct Gap {
        run: usize,
        scaled_gap: f64,
    }
    let weights: Vec<Weight> = report
        .weights
        .iter()
        .enumerate()
        .map(|(k, &weight)| Weight {
            k,
            lambda: report.lambdas.get(k).copied().unwrap_or(f64::NAN),
            weight,
        })
        .collect();
    let gaps: Vec<Gap> = report
        .scaled_gaps
        .iter()
        .enumerate()
        .map(|(run, &scaled_gap)| Gap { run, scaled_gap })
        .collect();
    arts.csv_rows("weights", &weights)?;
    arts.csv_rows("scaled_gaps", &gaps)?;
    arts.json("asymptotics", report)?;
    let mut s = String::new();
    let _ = write!(
        s,
        "rank {} with lambdas {:?}; weights {:?}; min eigenvalue of Omega {:.4e}",
        report.rank, report.lambdas, report.weights, report.omega_min_eigenvalue
    );
    arts.line(s);
    arts.line(format!(
        "n = {}, {} runs: mean n*gap {:.5}, mixture mean {:.5}",
        report.n, report.runs, report.scaled_gap_mean, report.mixture_mean
    ));
    arts.line(format!(
        "KS distance {:.4} (5% critical value {:.4})",
        report.ks_stat, report.ks_critical_5pct
    ));
    Ok(())
}

fn bias_curve(exp: &Experiment, p: &BiasCurveParams, arts: &mut Artifacts) -> Result<()> {
    let env = env_of(exp)?;
    let old = exp.policy.build(&env, exp.seed, INIT_STREAM)?;
    let reference = match &p.reference {
        Some(r) => r.build(&env, exp.seed, REFERENCE_STREAM)?,
        None => PolicyParams::random(&env, 0.6, &mut stream(exp.seed, REFERENCE_STREAM)),
    };
    let direction = match &p.direction {
        Some(d) => d.clone(),
        None => {
            let mut rng = stream(exp.seed, DIRECTION_STREAM);
            (0..old.dim())
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        }
    };
    let opts = BiasOptions {
        kappa: p.kappa,
        g: p.g,
        b: p.b,
        reps: p.reps,
        seed: exp.seed,
    };
    let curve = practical_bias_curve(&env, &old, &reference, &direction, &p.displacements, opts)?;
    arts.csv_rows("bias_curve", &curve.rows)?;
    arts.json("bias_curve", &curve)?;
    arts.line(format!("practical-estimator bias, kappa = {}, G = {}", p.kappa, p.g));
    for r in &curve.rows {
        let mc = match (r.bias_mc, r.mc_noise) {
            (Some(b), Some(n)) => format!("  MC {b:.4e} (noise {n:.2e})"),
            _ => String::new(),
        };
        arts.line(format!("  s = {:<8} exact {:.6e}{mc}", r.displacement, r.bias_exact));
    }
    arts.line(format!("log-log slope {:.4}", curve.slope));
    Ok(())
}

/// Exit status of a run that failed after the spec validated: 3 for a
/// rejection by the owning module, 4 for an internal failure.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Io(_) | LabError::Json(_) | LabError::Parse(_) => 4,
        _ => 3,
    }
}

/// Machine-readable description of a failure.
pub fn error_json(code: i32, kind: &str, message: &str, diagnostics: &[String]) -> String {
    serde_json::json!({
        "exit_code": code,
        "kind": kind,
        "message": message,
        "diagnostics": diagnostics,
    })
    .to_string()
}

/// Name of the error variant, for error reports.
pub fn error_kind(err: &LabError) -> &'static str {
    match err {
        LabError::EnumerationCap { .. } => "enumeration_cap",
        LabError::InvalidEnv(_) => "invalid_env",
        LabError::UnknownOutput { .. } => "unknown_output",
        LabError::Baseline(_) => "baseline",
        LabError::GroupTooSmall { .. } => "group_too_small",
        LabError::Coverage { .. } => "coverage",
        LabError::ZeroProbability { .. } => "zero_probability",
        LabError::DimensionCap { .. } => "dimension_cap",
        LabError::Schedule(_) => "schedule",
        LabError::NoAdmissibleProbes(_) => "no_admissible_probes",
        LabError::Stability(_) => "stability",
        LabError::NotNegativeSemidefinite { .. } => "not_negative_semidefinite",
        LabError::Dimension(_) => "dimension",
        LabError::Diverged { .. } => "diverged",
        LabError::InvalidArgument(_) => "invalid_argument",
        LabError::Io(_) => "io",
        LabError::Json(_) => "json",
        LabError::Parse(_) => "parse",
    }
}
