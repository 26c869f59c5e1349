//! Limiting law of the rescaled suboptimality gap.
//!
//! Near a (possibly non-isolated) optimum with Hessian eigenvalues
//! `lambda_1..lambda_r` on its normal space, stochastic ascent with steps
//! `beta / i` has `sqrt(n) Q'(theta_n - theta*) -> N(0, Sigma)` where
//! `A' Sigma + Sigma A = beta^2 Omega`, `A = beta diag(lambda) - I/2`, and
//! `Omega = Q' Gamma Q`. The gap then satisfies
//! `n Delta -> sum_k w_k chi2_1` with `w` the eigenvalues of
//! `1/2 Sigma^{1/2} diag(lambda) Sigma^{1/2}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quadratic::{min_eigenvalue, psd_sqrt, SyntheticQuadratic};
use crate::error::{LabError, Result};
use crate::landscape::Landscape;
use crate::optim::LrSchedule;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub rank: usize,
    /// Positive eigenvalues of `-H`, descending.
    pub lambdas: Vec<f64>,
    /// Matching orthonormal eigenvectors as columns.
    pub q: DMatrix<f64>,
    pub tol: f64,
}

/// Eigen-decomposition of `-H` restricted to its positive part.
pub fn hessian_spectrum(h: &DMatrix<f64>, rank_tol: Option<f64>) -> Result<Spectrum> {
    let d = h.nrows();
    if h.ncols() != d {
        return Err(LabError::Dimension("Hessian must be square".into()));
    }
    if (h - h.transpose()).amax() > 1e-6 {
        return Err(LabError::InvalidArgument("Hessian is not symmetric within 1e-6".into()));
    }
    let eig = (-h).symmetric_eigen();
    let max_abs = eig.eigenvalues.amax();
    let tol = rank_tol.unwrap_or(1e-6 * max_abs);
    if let Some(&bad) = eig.eigenvalues.iter().filter(|&&v| v < -tol).min_by(|a, b| a.total_cmp(b)) {
        return Err(LabError::NotNegativeSemidefinite { eigenvalue: bad, tol });
    }
    let mut idx: Vec<usize> = (0..d).filter(|&i| eig.eigenvalues[i] > tol).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut q = DMatrix::zeros(d, idx.len());
    for (k, &i) in idx.iter().enumerate() {
        q.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok(Spectrum {
        rank: idx.len(),
        lambdas,
        q,
        tol,
    })
}

/// Solves `A' Sigma + Sigma A = Omega` through the Kronecker form.
///
/// Requires every eigenvalue of `A` to have positive real part.
pub fn solve_lyapunov(a: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = a.nrows();
    if a.ncols() != r || omega.nrows() != r || omega.ncols() != r {
        return Err(LabError::Dimension(format!(
            "A is {}x{}, Omega is {}x{}",
            a.nrows(),
            a.ncols(),
            omega.nrows(),
            omega.ncols()
        )));
    }
    if r == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = a.complex_eigenvalues();
    if let Some(bad) = eig.iter().find(|z| z.re <= 0.0) {
        return Err(LabError::Stability(format!(
            "A has eigenvalue {:.6}{:+.6}i with non-positive real part; the step constant beta must exceed 1/(2 lambda_min)",
            bad.re, bad.im
        )));
    }
    // column-major vec: vec(A' S) = (I kron A') vec S, vec(S A) = (A' kron I) vec S
    let n = r * r;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..r {
        for j in 0..r {
            // row index of S[i, j] in vec form
            let row = j * r + i;
            for l in 0..r {
                // (A' S)[i, j] = sum_l A[l, i] S[l, j]
                k[(row, j * r + l)] += a[(l, i)];
                // (S A)[i, j] = sum_l S[i, l] A[l, j]
                k[(row, l * r + i)] += a[(l, j)];
            }
        }
    }
    let rhs = DVector::from_column_slice(omega.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LabError::Stability("Lyapunov operator is singular".into()))?;
    let s = DMatrix::from_column_slice(r, r, sol.as_slice());
    let s = (&s + s.transpose()) * 0.5;
    let resid = (a.transpose() * &s + &s * a - omega).amax();
    let scale = omega.amax();
    if resid > 1e-8 * scale.max(f64::MIN_POSITIVE) && resid > 1e-300 {
        return Err(LabError::Stability(format!("Lyapunov residual {resid:e} exceeds 1e-8 of |Omega|")));
    }
    Ok(s)
}

/// Eigenvalues of `1/2 Sigma^{1/2} diag(lambdas) Sigma^{1/2}`, non-increasing.
pub fn chi2_mixture_weights(sigma: &DMatrix<f64>, lambdas: &[f64]) -> Result<Vec<f64>> {
    let r = lambdas.len();
    if sigma.nrows() != r || sigma.ncols() != r {
        return Err(LabError::Dimension(format!(
            "Sigma is {}x{} but there are {r} eigenvalues",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    let root = psd_sqrt(sigma);
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(lambdas));
    let m = (&root * lam * &root) * 0.5;
    let m = (&m + m.transpose()) * 0.5;
    let mut w: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().cloned().collect();
    w.sort_by(|a, b| b.total_cmp(a));
    for v in &mut w {
        if *v < -1e-10 {
            return Err(LabError::InvalidArgument(format!("negative mixture weight {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(w)
}

/// Draws of `sum_k w_k chi2_1`.
pub fn chi2_mixture_sample(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            weights
                .iter()
                .map(|w| {
                    let z: f64 = rng.sample(StandardNormal);
                    w * z * z
                })
                .sum()
        })
        .collect()
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 5% critical value of the two-sample KS distance.
pub fn ks_critical_5pct(na: usize, nb: usize) -> f64 {
    1.358 * ((na + nb) as f64 / (na as f64 * nb as f64)).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    pub rank: usize,
    pub lambdas: Vec<f64>,
    /// `d x r`, row-major.
    pub q: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub omega_min_eigenvalue: f64,
    pub sigma: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub beta: f64,
    pub n: usize,
    pub runs: usize,
    pub mixture_samples: usize,
    pub ks_stat: f64,
    pub ks_critical_5pct: f64,
    pub scaled_gap_mean: f64,
    pub mixture_mean: f64,
    /// `n * Delta` of every run.
    #[serde(skip)]
    pub scaled_gaps: Vec<f64>,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

/// Spectrum, projected noise, Lyapunov covariance and mixture weights,
/// without any simulation.
#[derive(Debug, Clone)]
pub struct LimitLaw {
    pub spectrum: Spectrum,
    pub omega: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub weights: Vec<f64>,
}

pub fn limit_law(quad: &SyntheticQuadratic, beta: f64) -> Result<LimitLaw> {
    limit_law_for(&quad.hessian(), quad.gamma(), beta)
}

/// Mixture weights of the limit law for Hessian `h` and noise covariance
/// `gamma` under steps `beta / i`.
pub fn limit_law_for(h: &DMatrix<f64>, gamma: &DMatrix<f64>, beta: f64) -> Result<LimitLaw> {
    let spectrum = hessian_spectrum(h, None)?;
    let r = spectrum.rank;
    if let Some(&lmin) = spectrum.lambdas.last() {
        if beta <= 1.0 / (2.0 * lmin) {
            return Err(LabError::Stability(format!(
                "beta = {beta} must exceed 1/(2 lambda_min) = {} (lambda_min = {lmin}); A has eigenvalue {} <= 0",
                1.0 / (2.0 * lmin),
                beta * lmin - 0.5
            )));
        }
    }
    let omega = spectrum.q.transpose() * gamma * &spectrum.q;
    let a = DMatrix::from_diagonal(&DVector::from_iterator(r, spectrum.lambdas.iter().map(|l| beta * l - 0.5)));
    let sigma = solve_lyapunov(&a, &(&omega * (beta * beta)))?;
    let weights = chi2_mixture_weights(&sigma, &spectrum.lambdas)?;
    Ok(LimitLaw {
        spectrum,
        omega,
        sigma,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub beta: f64,
    pub n: usize,
    pub runs: usize,
    pub mixture_samples: usize,
    pub seed: u64,
}

/// Runs the whole pipeline: limit law, `runs` independent trajectories of
/// `n` steps from `theta0` (the optimum when `None`), and the KS distance
/// between `{n Delta}` and mixture draws.
pub fn asymptotics_pipeline(
    quad: &SyntheticQuadratic,
    opts: PipelineOptions,
    theta0: Option<&[f64]>,
) -> Result<AsymptoticsReport> {
    let law = limit_law(quad, opts.beta)?;
    let start: Vec<f64> = match theta0 {
        Some(t) => {
            if t.len() != quad.dim() {
                return Err(LabError::Dimension("theta0 has the wrong dimension".into()));
            }
            t.to_vec()
        }
        None => quad.theta_star().as_slice().to_vec(),
    };
    let schedule = LrSchedule::InverseIter(opts.beta);
    let scaled: Vec<f64> = (0..opts.runs as u64)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream(opts.seed, run);
            quad.run_sgd(schedule, &start, &[opts.n], &mut rng)[0] * opts.n as f64
        })
        .collect();
    let mut mix_rng = stream(opts.seed, opts.runs as u64 + (1 << 40));
    let mixture = chi2_mixture_sample(&law.weights, opts.mixture_samples, &mut mix_rng);
    let ks = ks_two_sample(&scaled, &mixture);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(AsymptoticsReport {
        rank: law.spectrum.rank,
        lambdas: law.spectrum.lambdas.clone(),
        q: rows(&law.spectrum.q),
        gamma: rows(quad.gamma()),
        omega_min_eigenvalue: if law.spectrum.rank > 0 { min_eigenvalue(&law.omega) } else { 0.0 },
        omega: rows(&law.omega),
        sigma: rows(&law.sigma),
        weights: law.weights.clone(),
        beta: opts.beta,
        n: opts.n,
        runs: opts.runs,
        mixture_samples: opts.mixture_samples,
        ks_stat: ks,
        ks_critical_5pct: ks_critical_5pct(scaled.len(), mixture.len()),
        scaled_gap_mean: mean(&scaled),
        mixture_mean: mean(&mixture),
        scaled_gaps: scaled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn spectrum_examples() {
        let s = hessian_spectrum(&diag(&[-2.0, 0.0]), None).unwrap();
        assert_eq!(s.rank, 1);
        assert_eq!(s.lambdas, vec![2.0]);
        assert!((s.q[(0, 0)].abs() - 1.0).abs() < 1e-12 && s.q[(1, 0)].abs() < 1e-12);
        let s = hessian_spectrum(&(-DMatrix::<f64>::identity(3, 3)), None).unwrap();
        assert_eq!(s.rank, 3);
        assert!(s.lambdas.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(matches!(
            hessian_spectrum(&diag(&[-2.0, 1.0]), None),
            Err(LabError::NotNegativeSemidefinite { .. })
        ));
    }

    #[test]
    fn spectrum_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = DMatrix::from_fn(5, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = -(&b * b.transpose());
            let s = hessian_spectrum(&h, None).unwrap();
            assert_eq!(s.rank, 3);
            let qtq = s.q.transpose() * &s.q;
            assert!((qtq - DMatrix::identity(3, 3)).amax() < 1e-10);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let s = solve_lyapunov(&diag(&[1.0]), &diag(&[2.0])).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-14);
        let s = solve_lyapunov(&diag(&[0.5, 2.0, 3.0]), &diag(&[1.0, 4.0, 9.0])).unwrap();
        for (k, (a, o)) in [(0.5, 1.0), (2.0, 4.0), (3.0, 9.0)].iter().enumerate() {
            assert!((s[(k, k)] - o / (2.0 * a)).abs() < 1e-14);
        }
        match solve_lyapunov(&diag(&[1.0, -0.2]), &diag(&[1.0, 1.0])) {
            Err(LabError::Stability(msg)) => assert!(msg.contains("-0.2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lyapunov_matches_quadrature_of_the_integral() {
        // Sigma = int_0^inf exp(-A' u) Omega exp(-A u) du
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let noise = DMatrix::from_fn(3, 3, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            let a = DMatrix::identity(3, 3) * 1.5 + noise;
            let b = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let omega = &b * b.transpose();
            let s = solve_lyapunov(&a, &omega).unwrap();
            let resid = (a.transpose() * &s + &s * &a - &omega).amax();
            assert!(resid <= 1e-8 * omega.amax());
            // composite Simpson on [0, 40] with the exact one-step propagator
            let h = 1e-3;
            let steps = 40_000;
            let step = (-&a * h).exp();
            let mut e = DMatrix::<f64>::identity(3, 3);
            let mut integral = DMatrix::zeros(3, 3);
            for k in 0..=steps {
                let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                integral += (e.transpose() * &omega * &e) * (w * h / 3.0);
                e = &e * &step;
            }
            assert!((integral - &s).amax() < 1e-6, "quadrature mismatch");
        }
    }

    #[test]
    fn weight_examples() {
        let w = chi2_mixture_weights(&DMatrix::identity(2, 2), &[2.0, 2.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        let w = chi2_mixture_weights(&diag(&[4.0, 1.0]), &[2.0, 2.0]).unwrap();
        assert!((w[0] - 4.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        assert!(chi2_mixture_weights(&diag(&[4.0, 1.0]), &[2.0]).is_err());
    }

    #[test]
    fn isotropic_weights_are_rotation_invariant() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let rotated = &rot * &sigma * rot.transpose();
        let a = chi2_mixture_weights(&sigma, &[3.0, 3.0]).unwrap();
        let b = chi2_mixture_weights(&rotated, &[3.0, 3.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let s = chi2_mixture_sample(&[0.7], n, &mut rng);
        let mean = s.iter().sum::<f64>() / n as f64;
        // Var(w chi2_1) = 2 w^2
        assert!((mean - 0.7).abs() <= 4.0 * (2.0 * 0.49 / n as f64).sqrt());
        assert!(chi2_mixture_sample(&[0.0, 0.0], 100, &mut rng).iter().all(|v| *v == 0.0));
        let w = [1.5, 0.4, 0.1];
        let s = chi2_mixture_sample(&w, n, &mut rng);
        let mean = s.iter().sum::<f64>() / n as f64;
        let var: f64 = w.iter().map(|v| 2.0 * v * v).sum();
        assert!((mean - 2.0).abs() <= 4.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn ks_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = chi2_mixture_sample(&[1.0, 0.5], 10_000, &mut rng);
        let b = chi2_mixture_sample(&[1.0, 0.5], 10_000, &mut rng);
        assert!(ks_two_sample(&a, &b) <= 0.05);
        let c = chi2_mixture_sample(&[2.0, 0.5], 10_000, &mut rng);
        assert!(ks_two_sample(&a, &c) > 0.05);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
    }

    #[test]
    fn one_dimensional_limit_by_hand() {
        // lambda = 2, beta = 1, Gamma = s2: A = 3/2, Sigma = s2/3, w = s2/3
        let q = SyntheticQuadratic::diagonal(&[2.0], diag(&[0.9])).unwrap();
        let law = limit_law(&q, 1.0).unwrap();
        assert!((law.sigma[(0, 0)] - 0.3).abs() < 1e-14);
        assert!((law.weights[0] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn halving_gamma_halves_weights_and_zero_noise_gives_zero() {
        let gamma = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.8, 0.0, 0.1, 0.0, 0.5]);
        let q = SyntheticQuadratic::diagonal(&[3.0, 1.0, 0.0], gamma.clone()).unwrap();
        let full = limit_law(&q, 1.0).unwrap().weights;
        let half = limit_law(&q.with_gamma(gamma * 0.5).unwrap(), 1.0).unwrap().weights;
        for (a, b) in full.iter().zip(&half) {
            assert!((b / a - 0.5).abs() < 0.02);
        }
        let silent = q.with_gamma(DMatrix::zeros(3, 3)).unwrap();
        let rep = asymptotics_pipeline(
            &silent,
            PipelineOptions {
                beta: 1.0,
                n: 1000,
                runs: 20,
                mixture_samples: 100,
                seed: 0,
            },
            Some(&[0.1, -0.1, 0.3]),
        )
        .unwrap();
        assert!(rep.weights.iter().all(|w| *w == 0.0));
        assert!(rep.scaled_gaps.iter().all(|v| *v < 1e-6));
    }

    #[test]
    fn unstable_beta_is_rejected() {
        let q = SyntheticQuadratic::diagonal(&[2.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        match limit_law(&q, 0.2) {
            Err(LabError::Stability(msg)) => assert!(msg.contains("1/(2 lambda_min)")),
            other => panic!("{other:?}"),
        }
    }
}
