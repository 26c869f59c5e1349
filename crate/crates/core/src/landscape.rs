//! Objectives with exact gradients, and the finite-difference Hessian built
//! on top of them.

use nalgebra::DMatrix;

use crate::env::Environment;
use crate::error::{LabError, Result};
use crate::policy::{self, PolicyParams};

/// Default cap on the dimension for which a dense Hessian is formed.
pub const DEFAULT_HESSIAN_CAP: usize = 200;
/// Central-difference step used for Hessians.
pub const HESSIAN_STEP: f64 = 1e-4;

/// A maximization problem with an exact gradient oracle.
pub trait Landscape {
    fn dim(&self) -> usize;
    fn objective(&self, theta: &[f64]) -> f64;
    fn gradient(&self, theta: &[f64]) -> Vec<f64>;
    /// Supremum of the objective.
    fn optimum(&self) -> f64;

    fn gap(&self, theta: &[f64]) -> f64 {
        (self.optimum() - self.objective(theta)).max(0.0)
    }
}

/// The policy objective `J(theta)` of an environment, as a function of the
/// flat logit vector.
#[derive(Debug, Clone, Copy)]
pub struct EnvLandscape<'a> {
    pub env: &'a Environment,
}

impl<'a> EnvLandscape<'a> {
    pub fn new(env: &'a Environment) -> Self {
        Self { env }
    }

    fn params(&self, theta: &[f64]) -> PolicyParams {
        PolicyParams::from_logits(self.env, theta.to_vec()).expect("theta has the policy dimension")
    }
}

impl Landscape for EnvLandscape<'_> {
    fn dim(&self) -> usize {
        PolicyParams::zeros(self.env).dim()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        policy::objective(&self.params(theta), self.env)
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        policy::exact_gradient(&self.params(theta), self.env).total
    }

    fn optimum(&self) -> f64 {
        self.env.optimal_value()
    }
}

/// Finite-difference Hessian together with its asymmetry before
/// symmetrization.
#[derive(Debug, Clone)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    pub asymmetry: f64,
}

/// Hessian by central differences of the exact gradient, symmetrized.
pub fn hessian_fd(land: &impl Landscape, theta: &[f64], step: f64, cap: usize) -> Result<HessianEstimate> {
    let d = land.dim();
    if d > cap {
        return Err(LabError::DimensionCap { dim: d, cap });
    }
    let mut h = DMatrix::zeros(d, d);
    let mut probe = theta.to_vec();
    for j in 0..d {
        probe[j] = theta[j] + step;
        let up = land.gradient(&probe);
        probe[j] = theta[j] - step;
        let down = land.gradient(&probe);
        probe[j] = theta[j];
        for i in 0..d {
            h[(i, j)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    let asymmetry = (&h - h.transpose()).amax();
    let matrix = (&h + h.transpose()) * 0.5;
    Ok(HessianEstimate { matrix, asymmetry })
}

/// Hessian of `sum_x w(x) V(x)` at the given policy.
pub fn exact_hessian(p: &PolicyParams, env: &Environment) -> Result<HessianEstimate> {
    hessian_fd(&EnvLandscape::new(env), p.logits(), HESSIAN_STEP, DEFAULT_HESSIAN_CAP)
}
