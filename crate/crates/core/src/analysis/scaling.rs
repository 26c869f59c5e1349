//! Constants of the fixed-budget MSE law and the group-size sweep.
//!
//! At budget `N = BG` the leave-one-out MSE is
//! `c1 G / N + c2 / N + c3 / (N G)`: `c1` is the prompt variance of the
//! gradient, `c2` the oracle variance and `c3` the second-order U-statistic
//! term. The best group size for the bound is `G* = sqrt(c3 / c1)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mse::mse_exact;
use super::{mean_ci, EstimatorKind};
use crate::env::Environment;
use crate::error::{LabError, Result};
use crate::optim::{train_meta, TrainConfig};
use crate::policy::{exact_gradient_from_table, norm_sq, PolicyParams, PromptView};
use crate::rng::{job_id, stream};
use crate::ustat::PairMoments;

/// Below this `c1` is treated as zero.
const C1_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEstimate {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// `+inf` when `c1` vanishes.
    pub g_star: f64,
    /// Set when `c1 = 0`, e.g. with a single prompt.
    pub c1_zero: bool,
    /// Group sizes used to identify `c3`.
    pub g_pair: (usize, usize),
    pub probes: String,
}

/// `G* = sqrt(c3 / c1)`, infinite when `c1 = 0`.
pub fn g_star(c1: f64, c3: f64) -> f64 {
    if c1 <= C1_FLOOR {
        f64::INFINITY
    } else {
        (c3 / c1).sqrt()
    }
}

/// Per-probe constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// Exact constants at one parameter. `c3` solves
/// `G m(G) = c2 + c3 / G` at the two group sizes, where `m` is the
/// prompt-averaged per-prompt leave-one-out MSE.
pub fn probe_constants(p: &PolicyParams, env: &Environment, ga: usize, gb: usize) -> Result<ProbeConstants> {
    if ga < 2 || gb < 2 || ga == gb {
        return Err(LabError::InvalidArgument(format!(
            "need two distinct group sizes >= 2, got {ga} and {gb}"
        )));
    }
    let table = p.probability_table();
    let exact = exact_gradient_from_table(&table, env);
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    let mut ma = 0.0;
    let mut mb = 0.0;
    for x in 0..env.num_prompts() {
        let w = env.weight(x);
        let d: Vec<f64> = exact.per_prompt[x].iter().zip(&exact.total).map(|(a, b)| a - b).collect();
        c1 += w * norm_sq(&d);
        let m = PairMoments::from_view(&PromptView::new(&table, env, x));
        c2 += w * m.oracle_trace;
        ma += w * m.loo_mse(ga);
        mb += w * m.loo_mse(gb);
    }
    let (fa, fb) = (ga as f64, gb as f64);
    let c3 = ((fa * ma - fb * mb) / (1.0 / fa - 1.0 / fb)).max(0.0);
    Ok(ProbeConstants { c1, c2, c3 })
}

/// Maximum of each constant over the probes.
pub fn estimate_constants(probes: &[PolicyParams], env: &Environment, ga: usize, gb: usize) -> Result<ScalingEstimate> {
    if probes.is_empty() {
        return Err(LabError::NoAdmissibleProbes("the probe set is empty".into()));
    }
    let mut est = ProbeConstants {
        c1: 0.0,
        c2: 0.0,
        c3: 0.0,
    };
    for p in probes {
        let c = probe_constants(p, env, ga, gb)?;
        est.c1 = est.c1.max(c.c1);
        est.c2 = est.c2.max(c.c2);
        est.c3 = est.c3.max(c.c3);
    }
    Ok(ScalingEstimate {
        c1: est.c1,
        c2: est.c2,
        c3: est.c3,
        g_star: g_star(est.c1, est.c3),
        c1_zero: est.c1 <= C1_FLOOR,
        g_pair: (ga, gb),
        probes: format!("{} probe(s)", probes.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub exact: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

fn check_budget(budget: usize, gs: &[usize]) -> Result<()> {
    for &g in gs {
        if g == 0 || budget % g != 0 {
            return Err(LabError::InvalidArgument(format!("G = {g} does not divide the budget N = {budget}")));
        }
    }
    Ok(())
}

/// Exact leave-one-out MSE at `B = N / G` against the three-term law.
pub fn fixed_budget_curve(
    p: &PolicyParams,
    env: &Environment,
    budget: usize,
    gs: &[usize],
    est: &ScalingEstimate,
) -> Result<Vec<BudgetRow>> {
    check_budget(budget, gs)?;
    let n = budget as f64;
    gs.iter()
        .map(|&g| {
            let b = budget / g;
            let exact = mse_exact(p, env, &EstimatorKind::leave_one_out(), b, g)?.total;
            let gf = g as f64;
            let predicted = est.c1 * gf / n + est.c2 / n + est.c3 / (n * gf);
            Ok(BudgetRow {
                g,
                b,
                exact,
                predicted,
                rel_error: (predicted - exact).abs() / exact,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub runs: usize,
    /// Mean final objective.
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub budget: usize,
    pub n: usize,
    pub rows: Vec<SweepRow>,
    /// Group size with the largest mean final objective.
    pub best_g: usize,
}

impl SweepTable {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["G", "B", "runs", "mean", "ci_lo", "ci_hi"])
            .map_err(crate::policy::csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.g.to_string(),
                r.b.to_string(),
                r.runs.to_string(),
                format!("{:.17e}", r.mean),
                format!("{:.17e}", r.ci_lo),
                format!("{:.17e}", r.ci_hi),
            ])
            .map_err(crate::policy::csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whether the final objective never decreases along the grid, up to
    /// the confidence half-widths.
    pub fn non_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].mean >= w[0].mean - ((w[1].ci_hi - w[1].mean) + (w[0].ci_hi - w[0].mean)))
    }
}

/// Trains `runs` times per group size at fixed budget `N = BG`, the rest of
/// the configuration taken from `template`. Run `r` of cell `c` uses the
/// stream `job_id(c, r)` of `seed`.
pub fn group_size_sweep(
    env: &Environment,
    budget: usize,
    gs: &[usize],
    template: &TrainConfig,
    runs: usize,
    seed: u64,
) -> Result<SweepTable> {
    check_budget(budget, gs)?;
    if runs == 0 {
        return Err(LabError::InvalidArgument("runs must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(gs.len());
    for (cell, &g) in gs.iter().enumerate() {
        let mut cfg = template.clone();
        cfg.g = g;
        cfg.b = budget / g;
        cfg.record_stride = cfg.n.max(1);
        cfg.snapshot_stride = 0;
        cfg.validate()?;
        let finals: Vec<(f64, f64)> = (0..runs as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream(seed, job_id(cell as u64, r));
                let t = train_meta(env, &cfg, &mut rng)?;
                let last = t.last();
                Ok((last.objective, last.gap))
            })
            .collect::<Result<_>>()?;
        let js: Vec<f64> = finals.iter().map(|f| f.0).collect();
        let (mean, half) = mean_ci(&js);
        let half = if half.is_nan() { 0.0 } else { half };
        rows.push(SweepRow {
            g,
            b: cfg.b,
            runs,
            mean,
            ci_lo: mean - half,
            ci_hi: mean + half,
            mean_gap: finals.iter().map(|f| f.1).sum::<f64>() / runs as f64,
        });
    }
    let best_g = rows
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .map(|r| r.g)
        .expect("non-empty grid");
    Ok(SweepTable {
        budget,
        n: template.n,
        rows,
        best_g,
    })
}
