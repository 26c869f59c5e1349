//! Training loops, suboptimality, and the finite-sample bounds.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{LabError, Result};
use crate::grad::{
    collect_batch_with_table, meta_gradient_with_table, normalized_gradient_with_table, oracle_values,
    practical_gradient_with_tables, snapshot_id, BaselineKind, EpsPolicy, GroupBatch, PracticalOptions,
    DEFAULT_COVERAGE_FLOOR,
};
use crate::landscape::Landscape;
use crate::policy::{self, norm_sq, PolicyParams};

/// Default box radius for the projection step.
pub const DEFAULT_BOX_RADIUS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "beta")]
pub enum LrSchedule {
    Constant(f64),
    /// `eta_i = beta / i`.
    InverseIter(f64),
}

impl LrSchedule {
    pub fn beta(&self) -> f64 {
        match *self {
            LrSchedule::Constant(b) | LrSchedule::InverseIter(b) => b,
        }
    }

    /// Step size `eta_i` for `i >= 1`.
    pub fn rate(&self, i: usize) -> f64 {
        match *self {
            LrSchedule::Constant(b) => b,
            LrSchedule::InverseIter(b) => b / i as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.beta();
        if !(b.is_finite() && b >= 0.0) {
            return Err(LabError::Schedule(format!("beta must be finite and >= 0, got {b}")));
        }
        Ok(())
    }
}

/// Which gradient estimate drives the updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainEstimator {
    Meta { baseline: BaselineKind },
    /// On-policy normalized advantages.
    Normalized {
        #[serde(default)]
        eps: EpsPolicy,
    },
    Practical {
        kappa: f64,
        m: usize,
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default)]
        eps: EpsPolicy,
    },
}

fn default_floor() -> f64 {
    DEFAULT_COVERAGE_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub n: usize,
    pub schedule: LrSchedule,
    pub estimator: TrainEstimator,
    pub seed: u64,
    /// `None` disables the projection.
    pub box_radius: Option<f64>,
    /// Record a parameter snapshot every this many iterations; 0 disables.
    pub snapshot_stride: usize,
    /// Record a trace row every this many iterations (the last one is
    /// always recorded).
    pub record_stride: usize,
    /// Initial logits; zeros when absent.
    pub init: Option<Vec<f64>>,
    /// Reference logits for the KL term; the initial point when absent.
    pub reference: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(b: usize, g: usize, n: usize, schedule: LrSchedule, estimator: TrainEstimator, seed: u64) -> Self {
        Self {
            b,
            g,
            n,
            schedule,
            estimator,
            seed,
            box_radius: Some(DEFAULT_BOX_RADIUS),
            snapshot_stride: 0,
            record_stride: 1,
            init: None,
            reference: None,
        }
    }

    /// Every violated precondition, as text.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.b == 0 {
            out.push("B must be at least 1".to_string());
        }
        if self.g == 0 {
            out.push("G must be at least 1".to_string());
        }
        if self.record_stride == 0 {
            out.push("record_stride must be at least 1".to_string());
        }
        if let Err(e) = self.schedule.validate() {
            out.push(e.to_string());
        }
        if let Some(r) = self.box_radius {
            if !(r > 0.0) {
                out.push(format!("box radius must be positive, got {r}"));
            }
        }
        match &self.estimator {
            TrainEstimator::Meta { baseline } => {
                if self.g < baseline.min_group() {
                    out.push(format!(
                        "baseline precondition: {} needs G >= 2, got G = {}",
                        baseline.tag(),
                        self.g
                    ));
                }
            }
            TrainEstimator::Normalized { .. } => {
                if self.g < 2 {
                    out.push(format!("normalized advantages need G >= 2, got G = {}", self.g));
                }
            }
            TrainEstimator::Practical { kappa, m, .. } => {
                if self.g < 2 {
                    out.push(format!("normalized advantages need G >= 2, got G = {}", self.g));
                }
                if !(*kappa >= 0.0) {
                    out.push(format!("kappa must be >= 0, got {kappa}"));
                }
                if *m == 0 || self.b % m != 0 {
                    out.push(format!("m = {m} must divide B = {}", self.b));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(LabError::InvalidArgument(d.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub gap: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_logits: Vec<f64>,
}

impl TrainTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace has the initial record")
    }

    pub fn clip_count(&self) -> usize {
        self.records.iter().filter(|r| r.clipped).count()
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| LabError::Parse(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format snapshots: `iter, index, logit`.
    pub fn write_snapshots_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "index", "logit"]).map_err(|e| LabError::Parse(e.to_string()))?;
        for (it, logits) in &self.snapshots {
            for (i, v) in logits.iter().enumerate() {
                w.write_record([it.to_string(), i.to_string(), format!("{v:e}")])
                    .map_err(|e| LabError::Parse(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `J* - J(p)`, never negative.
pub fn suboptimality_gap(p: &PolicyParams, env: &Environment) -> f64 {
    (env.optimal_value() - policy::objective(p, env)).max(0.0)
}

/// Clamps into `[-r, r]`; reports whether anything moved.
pub fn project_box(theta: &mut [f64], radius: Option<f64>) -> bool {
    let Some(r) = radius else { return false };
    let mut clipped = false;
    for v in theta.iter_mut() {
        if *v > r {
            *v = r;
            clipped = true;
        } else if *v < -r {
            *v = -r;
            clipped = true;
        }
    }
    clipped
}

struct Recorder<'a> {
    env: &'a Environment,
    config: &'a TrainConfig,
    records: Vec<TraceRecord>,
    snapshots: Vec<(usize, Vec<f64>)>,
    clipped_since: bool,
}

impl<'a> Recorder<'a> {
    fn new(env: &'a Environment, config: &'a TrainConfig, p: &PolicyParams) -> Self {
        let mut r = Self {
            env,
            config,
            records: Vec::new(),
            snapshots: Vec::new(),
            clipped_since: false,
        };
        r.push(0, p, 0.0);
        r
    }

    fn push(&mut self, iter: usize, p: &PolicyParams, grad_norm: f64) {
        let objective = policy::objective(p, self.env);
        self.records.push(TraceRecord {
            iter,
            objective,
            gap: (self.env.optimal_value() - objective).max(0.0),
            grad_norm,
            clipped: self.clipped_since,
        });
        self.clipped_since = false;
        if self.config.snapshot_stride > 0 && iter % self.config.snapshot_stride == 0 {
            self.snapshots.push((iter, p.logits().to_vec()));
        }
    }

    fn step(&mut self, iter: usize, p: &PolicyParams, grad_norm: f64, clipped: bool) {
        self.clipped_since |= clipped;
        if iter % self.config.record_stride == 0 || iter == self.config.n {
            self.push(iter, p, grad_norm);
        }
    }

    fn finish(self, p: &PolicyParams) -> TrainTrace {
        TrainTrace {
            config: self.config.clone(),
            records: self.records,
            snapshots: self.snapshots,
            final_logits: p.logits().to_vec(),
        }
    }
}

fn initial_params(env: &Environment, config: &TrainConfig) -> Result<PolicyParams> {
    match &config.init {
        Some(l) => PolicyParams::from_logits(env, l.clone()),
        None => Ok(PolicyParams::zeros(env)),
    }
}

fn apply_step(p: &mut PolicyParams, grad: &[f64], eta: f64, radius: Option<f64>) -> Result<bool> {
    for (v, g) in p.logits_mut().iter_mut().zip(grad) {
        *v += eta * g;
    }
    let clipped = project_box(p.logits_mut(), radius);
    Ok(clipped)
}

fn diverged(p: &PolicyParams) -> bool {
    p.logits().iter().any(|v| !v.is_finite())
}

/// Plain stochastic ascent with a fresh batch per iteration, using the meta
/// estimator or on-policy normalized advantages.
pub fn train_meta(env: &Environment, config: &TrainConfig, rng: &mut impl Rng) -> Result<TrainTrace> {
    config.validate()?;
    if matches!(config.estimator, TrainEstimator::Practical { .. }) {
        return Err(LabError::InvalidArgument("train_meta needs a meta or normalized estimator".into()));
    }
    let mut p = initial_params(env, config)?;
    let mut rec = Recorder::new(env, config, &p);
    for i in 0..config.n {
        let table = p.probability_table();
        let batch = collect_batch_with_table(&table, env, config.b, config.g, snapshot_id(&p), rng);
        let grad = match &config.estimator {
            TrainEstimator::Meta { baseline } => {
                let oracle = matches!(baseline, BaselineKind::OracleValue).then(|| oracle_values(&table, env));
                meta_gradient_with_table(&table, env, &batch, baseline, oracle.as_deref())?
            }
            TrainEstimator::Normalized { eps } => normalized_gradient_with_table(&table, env, &batch, *eps)?,
            TrainEstimator::Practical { .. } => unreachable!(),
        };
        let clipped = apply_step(&mut p, &grad, config.schedule.rate(i + 1), config.box_radius)?;
        if diverged(&p) {
            return Err(LabError::Diverged {
                iteration: i + 1,
                trace: Box::new(rec.finish(&p)),
            });
        }
        rec.step(i + 1, &p, norm_sq(&grad).sqrt(), clipped);
    }
    Ok(rec.finish(&p))
}

/// Outer loop: snapshot `theta_old`, sample `B` groups under it, then take `m`
/// sequential minibatch steps in sampled order, all with `eta_{i+1}`.
pub fn train_grpo_practical(env: &Environment, config: &TrainConfig, rng: &mut impl Rng) -> Result<TrainTrace> {
    config.validate()?;
    let TrainEstimator::Practical { kappa, m, floor, eps } = config.estimator else {
        return Err(LabError::InvalidArgument("train_grpo_practical needs a practical estimator".into()));
    };
    let opts = PracticalOptions { kappa, floor, eps };
    let mut p = initial_params(env, config)?;
    let p_ref = match &config.reference {
        Some(l) => PolicyParams::from_logits(env, l.clone())?,
        None => p.clone(),
    };
    let ref_table = p_ref.probability_table();
    let mut rec = Recorder::new(env, config, &p);
    let per = config.b / m;
    for i in 0..config.n {
        let old_table = p.probability_table();
        let batch = collect_batch_with_table(&old_table, env, config.b, config.g, snapshot_id(&p), rng);
        let eta = config.schedule.rate(i + 1);
        let mut clipped = false;
        let mut mean_grad = vec![0.0; p.dim()];
        for chunk in batch.groups.chunks(per) {
            let mini = GroupBatch::new(chunk.to_vec(), batch.snapshot);
            let cur_table = p.probability_table();
            let grad = practical_gradient_with_tables(&cur_table, &old_table, &ref_table, env, &mini, opts)?;
            policy::axpy(1.0 / m as f64, &grad, &mut mean_grad);
            clipped |= apply_step(&mut p, &grad, eta, config.box_radius)?;
            if diverged(&p) {
                return Err(LabError::Diverged {
                    iteration: i + 1,
                    trace: Box::new(rec.finish(&p)),
                });
            }
        }
        rec.step(i + 1, &p, norm_sq(&mean_grad).sqrt(), clipped);
    }
    Ok(rec.finish(&p))
}

/// Constants of the finite-sample bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub mu: f64,
    pub l: f64,
    /// Uniform bound on the gradient-estimate MSE.
    pub m: f64,
    pub beta: f64,
    pub delta0: f64,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu", self.mu), ("L", self.l), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LabError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("M", self.m), ("Delta0", self.delta0)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.mu > self.l {
            return Err(LabError::InvalidArgument(format!(
                "mu = {} exceeds L = {}",
                self.mu, self.l
            )));
        }
        Ok(())
    }
}

/// Value of the bound at `n`, with its pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub n: usize,
    pub value: f64,
    /// Constant schedule: `rho^n Delta0`. Inverse schedule: 0.
    pub transient: f64,
    /// Constant schedule: the noise floor. Inverse schedule: the `1/n` branch.
    pub noise: f64,
    /// Inverse schedule only: a measured `c / n` branch, if supplied.
    pub c_branch: Option<f64>,
}

/// Slack in the leading constant of the `1/n` branch.
pub const DEFAULT_BOUND_EPS: f64 = 0.1;

pub fn lemma2_bound(schedule: LrSchedule, params: BoundParams, n: usize) -> Result<f64> {
    Ok(lemma2_bound_detailed(schedule, params, n, DEFAULT_BOUND_EPS, None)?.value)
}

/// Constant step: `rho^n Delta0 + L beta^2 M / (4 mu beta - 2 L mu beta^2)`
/// with `rho = 1 - 2 mu beta + L mu beta^2`, valid for `beta < 1/(2L)`.
///
/// Inverse step: `(1 + eps) L beta^2 M / ((4 mu beta - 2) n)`, valid for
/// `beta > 1/(2 mu)`. A measured `c` is reported as `c / n` beside it.
pub fn lemma2_bound_detailed(
    schedule: LrSchedule,
    params: BoundParams,
    n: usize,
    eps: f64,
    measured_c: Option<f64>,
) -> Result<BoundValue> {
    let BoundParams { mu, l, m, beta, delta0 } = params;
    if (schedule.beta() - beta).abs() > 0.0 {
        return Err(LabError::Schedule(format!(
            "schedule beta {} differs from bound beta {beta}",
            schedule.beta()
        )));
    }
    params.validate()?;
    match schedule {
        LrSchedule::Constant(_) => {
            if beta >= 1.0 / (2.0 * l) {
                return Err(LabError::Schedule(format!(
                    "constant schedule needs beta < 1/(2L) = {}, got {beta}",
                    1.0 / (2.0 * l)
                )));
            }
            let rho = 1.0 - 2.0 * mu * beta + l * mu * beta * beta;
            let transient = rho.powi(n as i32) * delta0;
            let noise = l * beta * beta * m / (4.0 * mu * beta - 2.0 * l * mu * beta * beta);
            Ok(BoundValue {
                n,
                value: transient + noise,
                transient,
                noise,
                c_branch: None,
            })
        }
        LrSchedule::InverseIter(_) => {
            if beta <= 1.0 / (2.0 * mu) {
                return Err(LabError::Schedule(format!(
                    "inverse-iteration schedule needs beta > 1/(2 mu) = {}, got {beta}",
                    1.0 / (2.0 * mu)
                )));
            }
            if n == 0 {
                return Err(LabError::InvalidArgument("the inverse-iteration bound needs n >= 1".into()));
            }
            let noise = (1.0 + eps) * l * beta * beta * m / ((4.0 * mu * beta - 2.0) * n as f64);
            Ok(BoundValue {
                n,
                value: noise,
                transient: 0.0,
                noise,
                c_branch: measured_c.map(|c| c / n as f64),
            })
        }
    }
}

/// `L_hat = max ||g(a) - g(b)|| / ||a - b||` over probe pairs and
/// `mu_hat = min ||g||^2 / (2 Delta)` over probes with `Delta > 1e-6`.
pub fn estimate_smoothness_and_pl(land: &impl Landscape, probes: &[Vec<f64>]) -> Result<(f64, f64)> {
    let grads: Vec<Vec<f64>> = probes.iter().map(|t| land.gradient(t)).collect();
    let mut l_hat: f64 = 0.0;
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let dt: f64 = probes[i].iter().zip(&probes[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dt == 0.0 {
                continue;
            }
            let dg: f64 = grads[i].iter().zip(&grads[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            l_hat = l_hat.max(dg / dt);
        }
    }
    let mut mu_hat = f64::INFINITY;
    for (t, g) in probes.iter().zip(&grads) {
        let gap = land.gap(t);
        if gap > 1e-6 {
            mu_hat = mu_hat.min(norm_sq(g) / (2.0 * gap));
        }
    }
    if !mu_hat.is_finite() {
        return Err(LabError::NoAdmissibleProbes(format!(
            "none of the {} probes has a gap above 1e-6",
            probes.len()
        )));
    }
    Ok((l_hat, mu_hat))
}
