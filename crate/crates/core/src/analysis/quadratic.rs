//! Concave quadratic landscape with a noisy gradient oracle.
//!
//! `J(theta) = -1/2 (theta - theta*)' M (theta - theta*)` with `M` psd and
//! possibly singular, so the optimum set is an affine subspace. The oracle
//! returns `-M (theta - theta*)` plus zero-mean Gaussian noise with a fixed
//! covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::landscape::Landscape;
use crate::optim::LrSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticQuadratic {
    m: DMatrix<f64>,
    theta_star: DVector<f64>,
    gamma: DMatrix<f64>,
    /// `F F' = gamma`.
    noise_factor: DMatrix<f64>,
}

/// Symmetric square root of a psd matrix, clamping tiny negative
/// eigenvalues.
pub(crate) fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

pub(crate) fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

fn check_psd(name: &str, a: &DMatrix<f64>, d: usize) -> Result<()> {
    if a.nrows() != d || a.ncols() != d {
        return Err(LabError::Dimension(format!("{name} must be {d}x{d}, got {}x{}", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(1.0);
    if (a - a.transpose()).amax() > 1e-10 * scale {
        return Err(LabError::InvalidArgument(format!("{name} is not symmetric")));
    }
    let lo = min_eigenvalue(a);
    if lo < -1e-10 * scale {
        return Err(LabError::InvalidArgument(format!("{name} is not psd: eigenvalue {lo:e}")));
    }
    Ok(())
}

impl SyntheticQuadratic {
    pub fn new(m: DMatrix<f64>, theta_star: DVector<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let d = theta_star.len();
        check_psd("M", &m, d)?;
        check_psd("Gamma", &gamma, d)?;
        let noise_factor = psd_sqrt(&gamma);
        Ok(Self {
            m,
            theta_star,
            gamma,
            noise_factor,
        })
    }

    /// Diagonal curvature, optimum at the origin.
    pub fn diagonal(curvature: &[f64], gamma: DMatrix<f64>) -> Result<Self> {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(curvature));
        Self::new(m, DVector::zeros(curvature.len()), gamma)
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Same landscape with another noise covariance.
    pub fn with_gamma(&self, gamma: DMatrix<f64>) -> Result<Self> {
        Self::new(self.m.clone(), self.theta_star.clone(), gamma)
    }

    /// Exact Hessian `-M`.
    pub fn hessian(&self) -> DMatrix<f64> {
        -self.m.clone()
    }

    /// Smallest positive and largest eigenvalue of `M` (the PL and
    /// smoothness constants).
    pub fn pl_and_smoothness(&self) -> (f64, f64) {
        let eig = self.m.clone().symmetric_eigen().eigenvalues;
        let max = eig.max();
        let tol = 1e-10 * max.max(1e-300);
        let mu = eig.iter().cloned().filter(|&v| v > tol).fold(f64::INFINITY, f64::min);
        (mu, max)
    }

    /// Expected squared norm of the noise, `trace(Gamma)`.
    pub fn noise_trace(&self) -> f64 {
        self.gamma.trace()
    }

    /// One noisy gradient evaluation, written into `out`.
    pub fn noisy_gradient_into(&self, theta: &[f64], rng: &mut impl Rng, out: &mut [f64]) {
        let d = theta.len();
        let mut xi = [0.0f64; 16];
        let mut xi_heap = Vec::new();
        let xi: &mut [f64] = if d <= 16 {
            &mut xi[..d]
        } else {
            xi_heap.resize(d, 0.0);
            &mut xi_heap
        };
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc -= self.m[(i, j)] * (theta[j] - self.theta_star[j]);
                acc += self.noise_factor[(i, j)] * xi[j];
            }
            out[i] = acc;
        }
    }

    /// Stochastic ascent from `theta0`, returning the gap at each requested
    /// iteration count (sorted ascending).
    pub fn run_sgd(
        &self,
        schedule: LrSchedule,
        theta0: &[f64],
        record_at: &[usize],
        rng: &mut impl Rng,
    ) -> Vec<f64> {
        let mut theta = theta0.to_vec();
        let mut grad = vec![0.0; theta.len()];
        let mut out = Vec::with_capacity(record_at.len());
        let mut next = 0;
        let last = record_at.last().copied().unwrap_or(0);
        if record_at.first() == Some(&0) {
            out.push(self.gap(&theta));
            next = 1;
        }
        for i in 1..=last {
            self.noisy_gradient_into(&theta, rng, &mut grad);
            let eta = schedule.rate(i);
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t += eta * g;
            }
            while next < record_at.len() && record_at[next] == i {
                out.push(self.gap(&theta));
                next += 1;
            }
        }
        out
    }
}

impl Landscape for SyntheticQuadratic {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let e = DVector::from_column_slice(theta) - &self.theta_star;
        -0.5 * e.dot(&(&self.m * &e))
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let e = DVector::from_column_slice(theta) - &self.theta_star;
        (-(&self.m * e)).as_slice().to_vec()
    }

    fn optimum(&self) -> f64 {
        0.0
    }
}

/// Plain-data description of a quadratic, for configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    /// Row-major `d x d` curvature.
    pub m: Vec<Vec<f64>>,
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    /// Row-major `d x d` noise covariance.
    pub gamma: Vec<Vec<f64>>,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(LabError::Dimension(format!("{name} must be square")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl QuadraticSpec {
    pub fn build(&self) -> Result<SyntheticQuadratic> {
        let m = matrix_from_rows("M", &self.m)?;
        let gamma = matrix_from_rows("Gamma", &self.gamma)?;
        let d = m.nrows();
        let star = match &self.theta_star {
            Some(t) => DVector::from_column_slice(t),
            None => DVector::zeros(d),
        };
        SyntheticQuadratic::new(m, star, gamma)
    }
}
