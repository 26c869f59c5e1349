//! Measurements of the estimators and optimizers: exact and Monte-Carlo
//! MSE, scaling constants, off-policy bias, and the limit law of the gap.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::Result;
use crate::grad::{meta_gradient_with_table, normalized_gradient_with_table, BaselineKind, EpsPolicy, GroupBatch};
use crate::policy::ProbTable;

pub mod asymptotics;
pub mod mse;
pub mod practical;
pub mod quadratic;
pub mod scaling;

/// An on-policy gradient estimator that can be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum EstimatorKind {
    Meta { baseline: BaselineKind },
    Normalized {
        #[serde(default)]
        eps: EpsPolicy,
    },
}

impl EstimatorKind {
    pub fn meta(baseline: BaselineKind) -> Self {
        EstimatorKind::Meta { baseline }
    }

    pub fn leave_one_out() -> Self {
        Self::meta(BaselineKind::LeaveOneOut)
    }

    pub fn vanilla() -> Self {
        Self::meta(BaselineKind::Vanilla)
    }

    pub fn oracle() -> Self {
        Self::meta(BaselineKind::OracleValue)
    }

    pub fn normalized() -> Self {
        EstimatorKind::Normalized { eps: EpsPolicy::HardZero }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Meta { baseline } => baseline.tag().to_string(),
            EstimatorKind::Normalized { .. } => "normalized".to_string(),
        }
    }

    /// Parses `vanilla`, `leave_one_out`, `oracle_value` or `normalized`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "normalized" {
            Ok(Self::normalized())
        } else {
            BaselineKind::parse(s).map(Self::meta)
        }
    }

    pub fn min_group(&self) -> usize {
        match self {
            EstimatorKind::Meta { baseline } => baseline.min_group(),
            EstimatorKind::Normalized { .. } => 2,
        }
    }

    /// The estimate on one batch drawn from `table`. `oracle` holds `V(x)`
    /// at the snapshot and is only read by the oracle baseline.
    pub fn estimate(
        &self,
        table: &ProbTable,
        env: &Environment,
        batch: &GroupBatch,
        oracle: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match self {
            EstimatorKind::Meta { baseline } => meta_gradient_with_table(table, env, batch, baseline, oracle),
            EstimatorKind::Normalized { eps } => normalized_gradient_with_table(table, env, batch, *eps),
        }
    }

    pub(crate) fn needs_oracle(&self) -> bool {
        matches!(self, EstimatorKind::Meta { baseline: BaselineKind::OracleValue })
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Sample mean and the 95% normal-approximation half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.959_963_984_540_054 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.7)).collect();
        assert!((log_log_slope(&x, &y) + 1.7).abs() < 1e-12);
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_ci(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }

    #[test]
    fn parse_round_trip() {
        for k in [
            EstimatorKind::vanilla(),
            EstimatorKind::leave_one_out(),
            EstimatorKind::oracle(),
            EstimatorKind::normalized(),
        ] {
            assert_eq!(EstimatorKind::parse(&k.label()).unwrap(), k);
        }
    }
}
