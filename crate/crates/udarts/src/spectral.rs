//! Largest-eigenvalue estimation of loss Hessians.
//!
//! Hessian-vector products come from central differences of the
//! gradient, `(g(p + e v) - g(p - e v)) / 2e` with `e = eps / |v|`, so
//! the autodiff core stays first-order. Power iteration with the
//! Rayleigh quotient then estimates the dominant eigenvalue; only the
//! top of the spectrum is ever reported.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default perturbation scale for the central-difference product.
pub const HVP_EPS: f64 = 1e-3;
/// Default power-iteration budget and residual target.
pub const POWER_ITERS: usize = 20;
pub const POWER_TOL: f64 = 1e-3;

/// A differentiable loss surface over a flat parameter vector. The
/// gradient must be deterministic for fixed parameters (stochastic
/// losses freeze their noise before coming here).
pub trait LossLandscape {
    fn dim(&self) -> usize;
    fn grad(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Explicit quadratic `p' A p / 2` with exact gradient `A p`; the test
/// oracle surface.
pub struct QuadraticLandscape {
    pub a: Vec<f64>,
    pub d: usize,
}

impl QuadraticLandscape {
    pub fn new(a: Vec<f64>, d: usize) -> Self {
        debug_assert_eq!(a.len(), d * d);
        QuadraticLandscape { a, d }
    }
}

impl LossLandscape for QuadraticLandscape {
    fn dim(&self) -> usize {
        self.d
    }

    fn grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.d];
        for i in 0..self.d {
            for j in 0..self.d {
                g[i] += self.a[i * self.d + j] * params[j];
            }
        }
        Ok(g)
    }
}

/// Central-difference Hessian-vector product at `params` along `v`.
pub fn hvp<L: LossLandscape + ?Sized>(landscape: &L, params: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroValidGradient);
    }
    let e = eps / norm;
    let plus: Vec<f64> = params.iter().zip(v.iter()).map(|(p, vi)| p + e * vi).collect();
    let minus: Vec<f64> = params.iter().zip(v.iter()).map(|(p, vi)| p - e * vi).collect();
    let gp = landscape.grad(&plus)?;
    let gm = landscape.grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * e)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "hvp" });
    }
    Ok(out)
}

/// One dominant-eigenvalue estimate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpectralEstimate {
    /// Rayleigh quotient of the final iterate; its magnitude estimates
    /// the dominant |eigenvalue|.
    pub lambda: f64,
    pub iterations: usize,
    /// `|Hv - lambda v|` at the final unit iterate.
    pub residual: f64,
    /// Residual below tolerance.
    pub converged: bool,
    /// `Hv` vanished three times in a row; `lambda` is reported as 0.
    pub degenerate: bool,
}

/// Power iteration `v <- Hv / |Hv|` with Rayleigh quotient
/// `lambda = v' H v`; stops at `tol` or after `iters`.
///
/// When the plain run stalls (a dominant +/- eigenvalue pair makes the
/// iterate oscillate), two shifted runs on `H + cI` and `H - cI`
/// separate the ends of the spectrum; the estimate with the larger
/// magnitude wins. The estimate targets the dominant |eigenvalue|.
pub fn lambda_max<L: LossLandscape + ?Sized>(
    landscape: &L,
    params: &[f64],
    iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SpectralEstimate> {
    debug_assert!(iters >= 1);
    let first = power_run(landscape, params, 0.0, iters, tol, rng)?;
    if first.0.converged || first.0.degenerate {
        return Ok(first.0);
    }
    let shift = 1.25 * first.1.max(tol);
    let up = power_run(landscape, params, shift, iters, tol, rng)?.0;
    let down = power_run(landscape, params, -shift, iters, tol, rng)?.0;
    let mut best = if up.lambda.abs() >= down.lambda.abs() { up } else { down };
    if first.0.lambda.abs() > best.lambda.abs() && first.0.residual < best.residual {
        best = first.0;
    }
    best.iterations += first.0.iterations;
    Ok(best)
}

/// One power run on `H + shift I`. Returns the estimate (Rayleigh
/// quotient and residual taken on the unshifted `H`) and the largest
/// `|Hv|` seen, which scales the fallback shift.
fn power_run<L: LossLandscape + ?Sized>(
    landscape: &L,
    params: &[f64],
    shift: f64,
    iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(SpectralEstimate, f64)> {
    let d = landscape.dim();
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let mut vanished = 0;
    let mut done = 0;
    let mut hv_norm_max: f64 = 0.0;
    for it in 0..iters {
        done = it + 1;
        let hv = hvp(landscape, params, &v, HVP_EPS)?;
        let hv_norm: f64 = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        hv_norm_max = hv_norm_max.max(hv_norm);
        if hv_norm < 1e-12 && shift == 0.0 {
            vanished += 1;
            if vanished >= 3 {
                return Ok((
                    SpectralEstimate {
                        lambda: 0.0,
                        iterations: done,
                        residual: 0.0,
                        converged: false,
                        degenerate: true,
                    },
                    hv_norm_max,
                ));
            }
            v = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize(&mut v);
            continue;
        }
        vanished = 0;
        lambda = v.iter().zip(hv.iter()).map(|(a, b)| a * b).sum();
        residual = hv
            .iter()
            .zip(v.iter())
            .map(|(h, vi)| (h - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        // Iterate on the shifted operator; diagnostics stay unshifted.
        let mut next: Vec<f64> = hv;
        if shift != 0.0 {
            for (n, vi) in next.iter_mut().zip(v.iter()) {
                *n += shift * vi;
            }
        }
        let next_norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if next_norm < 1e-12 {
            break;
        }
        v = next;
        normalize(&mut v);
        if residual < tol {
            break;
        }
    }
    Ok((
        SpectralEstimate {
            lambda,
            iterations: done,
            residual,
            converged: residual < tol,
            degenerate: false,
        },
        hv_norm_max,
    ))
}

fn normalize(v: &mut [f64]) {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Per-checkpoint spectral diagnostics: dominant eigenvalues of the
/// validation loss over the architecture logits and of the training
/// loss over the weights, with iteration counts and residuals.
/// Convergence is declared only when the residual is below 1e-3.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    pub epoch: usize,
    pub lambda_max_alpha: SpectralEstimate,
    pub lambda_max_w: SpectralEstimate,
}

/// Estimate both eigenvalues over a frozen snapshot; the supplied
/// landscapes must hold their stochastic state fixed.
pub fn track_spectrum<A, W>(
    epoch: usize,
    alpha_landscape: &A,
    alpha_params: &[f64],
    w_landscape: &W,
    w_params: &[f64],
    iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SpectralReport>
where
    A: LossLandscape + ?Sized,
    W: LossLandscape + ?Sized,
{
    let lambda_max_alpha = lambda_max(alpha_landscape, alpha_params, iters, tol, rng)?;
    let lambda_max_w = lambda_max(w_landscape, w_params, iters, tol, rng)?;
    Ok(SpectralReport {
        epoch,
        lambda_max_alpha,
        lambda_max_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linoracle::jacobi_eigenvalues;
    use crate::util::{assert_close, seeded_rng};

    fn sym_random(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.gen_range(-1.0..1.0);
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        }
        a
    }

    #[test]
    fn hvp_on_constant_hessian_is_exact() {
        // Quadratic p' diag(2,5) p / 2, v = e2: Hv = (0, 5).
        let q = QuadraticLandscape::new(vec![2.0, 0.0, 0.0, 5.0], 2);
        let hv = hvp(&q, &[0.3, -0.7], &[0.0, 1.0], 1e-3).unwrap();
        assert_close(hv[0], 0.0, 1e-6);
        assert_close(hv[1], 5.0, 1e-6);
    }

    #[test]
    fn hvp_of_linear_loss_is_zero() {
        struct Linear;
        impl LossLandscape for Linear {
            fn dim(&self) -> usize {
                3
            }
            fn grad(&self, _p: &[f64]) -> Result<Vec<f64>> {
                Ok(vec![1.0, -2.0, 0.5])
            }
        }
        let hv = hvp(&Linear, &[0.0; 3], &[0.4, 0.2, -0.9], 1e-3).unwrap();
        for v in hv {
            assert_close(v, 0.0, 1e-6);
        }
    }

    #[test]
    fn hvp_matches_dense_product_on_random_quadratic() {
        let mut rng = seeded_rng(8);
        for _ in 0..10 {
            let a = sym_random(3, &mut rng);
            let q = QuadraticLandscape::new(a.clone(), 3);
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hv = hvp(&q, &[0.1, 0.2, 0.3], &v, 1e-3).unwrap();
            for i in 0..3 {
                let expect: f64 = (0..3).map(|j| a[i * 3 + j] * v[j]).sum();
                assert_close(hv[i], expect, 1e-5);
            }
        }
    }

    #[test]
    fn hvp_rejects_zero_direction() {
        let q = QuadraticLandscape::new(vec![1.0], 1);
        assert!(hvp(&q, &[0.0], &[0.0], 1e-3).is_err());
    }

    #[test]
    fn power_iteration_on_diagonal_spectrum() {
        let q = QuadraticLandscape::new(
            vec![1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 9.0],
            3,
        );
        let mut rng = seeded_rng(4);
        let est = lambda_max(&q, &[0.0; 3], 100, 1e-8, &mut rng).unwrap();
        assert!(est.converged);
        assert_close(est.lambda, 9.0, 1e-4);
    }

    #[test]
    fn identity_quadratic_converges_immediately() {
        let q = QuadraticLandscape::new(vec![1.0, 0.0, 0.0, 1.0], 2);
        let mut rng = seeded_rng(12);
        let est = lambda_max(&q, &[0.0; 2], 20, 1e-3, &mut rng).unwrap();
        assert_eq!(est.iterations, 1);
        assert_close(est.lambda, 1.0, 1e-9);
    }

    #[test]
    fn zero_hessian_degenerates_to_flagged_zero() {
        let q = QuadraticLandscape::new(vec![0.0; 4], 2);
        let mut rng = seeded_rng(3);
        let est = lambda_max(&q, &[0.0; 2], 20, 1e-3, &mut rng).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.lambda, 0.0);
    }

    #[test]
    fn matches_dense_eigensolver_on_random_quadratics() {
        let mut rng = seeded_rng(19);
        for trial in 0..20 {
            let d = rng.gen_range(2..=10);
            let a = sym_random(d, &mut rng);
            let q = QuadraticLandscape::new(a.clone(), d);
            let est = lambda_max(&q, &vec![0.0; d], 500, 1e-10, &mut rng).unwrap();
            let eig = jacobi_eigenvalues(&a, d);
            let dominant = eig
                .iter()
                .cloned()
                .max_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap())
                .unwrap();
            let rel = (est.lambda.abs() - dominant.abs()).abs() / dominant.abs().max(1e-12);
            assert!(
                rel < 1e-3,
                "trial {trial}: power {} vs dense {dominant}",
                est.lambda
            );
        }
    }

    #[test]
    fn estimate_is_start_vector_invariant_with_spectral_gap() {
        // diag(3.0, 1.0): gap well above 0.1.
        let q = QuadraticLandscape::new(vec![3.0, 0.0, 0.0, 1.0], 2);
        let mut estimates = Vec::new();
        for seed in 0..5 {
            let mut rng = seeded_rng(seed);
            let est = lambda_max(&q, &[0.0; 2], 400, 1e-10, &mut rng).unwrap();
            estimates.push(est.lambda);
        }
        for w in estimates.windows(2) {
            assert_close(w[0], w[1], 1e-6);
        }
    }

    #[test]
    fn rayleigh_quotient_capped_by_dense_lambda_max() {
        let mut rng = seeded_rng(29);
        let d = 6;
        let a = sym_random(d, &mut rng);
        let q = QuadraticLandscape::new(a.clone(), d);
        let est = lambda_max(&q, &vec![0.0; d], 200, 1e-9, &mut rng).unwrap();
        let lam_max = *jacobi_eigenvalues(&a, d).last().unwrap();
        // The signed quotient never exceeds the top eigenvalue.
        assert!(est.lambda <= lam_max + 1e-6);
    }
}
