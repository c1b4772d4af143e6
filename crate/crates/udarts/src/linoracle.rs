//! Exact linear-model oracle for the flat-minima eigenvalue bounds.
//!
//! Works on a binary logistic model `sigma(x_i' alpha)` with `T = N`:
//! closed-form cross-entropy Hessians, the predictive-variance-augmented
//! validation loss, Rayleigh-quotient bounds, the extremal constants of
//! the sigma polynomials, and numeric comparisons of the largest
//! eigenvalues of both losses. A dense cyclic-Jacobi eigensolver keeps
//! the checks dependency-free; the augmented loss itself is ground truth
//! for its Hessian, which is taken by central differences of
//! central-difference gradients.

use crate::autodiff::tape::sigmoid;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ── Dense symmetric eigensolver ──────────────────────────────────────

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, swept
/// until the off-diagonal Frobenius norm falls below 1e-12.
pub fn jacobi_eigenvalues(matrix: &[f64], d: usize) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), d * d);
    let mut a = matrix.to_vec();
    let mut off = off_diag_norm(&a, d);
    let mut sweeps = 0;
    while off > 1e-12 && sweeps < 100 {
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
        off = off_diag_norm(&a, d);
        sweeps += 1;
    }
    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

fn off_diag_norm(a: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += a[i * d + j] * a[i * d + j];
            }
        }
    }
    s.sqrt()
}

pub fn lambda_max_sym(matrix: &[f64], d: usize) -> f64 {
    *jacobi_eigenvalues(matrix, d).last().unwrap()
}

pub fn lambda_min_sym(matrix: &[f64], d: usize) -> f64 {
    jacobi_eigenvalues(matrix, d)[0]
}

// ── Instances ────────────────────────────────────────────────────────

/// Binary logistic instance with the MC-sample proxy count tied to the
/// dataset size (`T = N`). The weight norm satisfies `|alpha|^2 < 1`.
#[derive(Clone, Debug)]
pub struct LogisticInstance {
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d` inputs.
    pub x: Vec<f64>,
    /// Labels in {0, 1}.
    pub y: Vec<u8>,
    pub alpha: Vec<f64>,
}

impl LogisticInstance {
    pub fn new(n: usize, d: usize, x: Vec<f64>, y: Vec<u8>, alpha: Vec<f64>) -> Result<Self> {
        let a2: f64 = alpha.iter().map(|v| v * v).sum();
        if a2 >= 1.0 {
            return Err(Error::AlphaNormTooLarge(a2));
        }
        debug_assert_eq!(x.len(), n * d);
        debug_assert_eq!(y.len(), n);
        debug_assert_eq!(alpha.len(), d);
        Ok(LogisticInstance { n, d, x, y, alpha })
    }

    /// Random instance: bounded inputs, random labels, and `|alpha|`
    /// uniform in `[0, max_alpha_norm]`.
    pub fn random(n: usize, d: usize, max_alpha_norm: f64, rng: &mut ChaCha8Rng) -> Self {
        let x: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let mut alpha: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = alpha.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = if max_alpha_norm > 0.0 {
            rng.gen_range(0.0..max_alpha_norm)
        } else {
            0.0
        };
        let scale = if norm > 0.0 { target / norm } else { 0.0 };
        for a in alpha.iter_mut() {
            *a *= scale;
        }
        LogisticInstance::new(n, d, x, y, alpha).expect("norm within bound by construction")
    }

    pub fn alpha_sq_norm(&self) -> f64 {
        self.alpha.iter().map(|v| v * v).sum()
    }

    fn margin(&self, alpha: &[f64], i: usize) -> f64 {
        let mut z = 0.0;
        for j in 0..self.d {
            z += self.x[i * self.d + j] * alpha[j];
        }
        z
    }

    /// Gram matrix `sum_i x_i x_i'`.
    pub fn gram(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d * self.d];
        for i in 0..self.n {
            for a in 0..self.d {
                for b in 0..self.d {
                    m[a * self.d + b] += self.x[i * self.d + a] * self.x[i * self.d + b];
                }
            }
        }
        m
    }
}

// ── Losses and Hessians ──────────────────────────────────────────────

/// Cross-entropy validation loss of the linear model at `alpha`.
pub fn ce_loss(inst: &LogisticInstance, alpha: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..inst.n {
        let p = sigmoid(inst.margin(alpha, i)).clamp(1e-300, 1.0 - 1e-16);
        acc -= if inst.y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    acc / inst.n as f64
}

/// Closed-form cross-entropy Hessian:
/// `(1/N) sum_i sigma_i (1 - sigma_i) x_i x_i'`, symmetric PSD.
pub fn darts_hessian(inst: &LogisticInstance) -> Vec<f64> {
    let d = inst.d;
    let mut h = vec![0.0; d * d];
    for i in 0..inst.n {
        let s = sigmoid(inst.margin(&inst.alpha, i));
        let w = s * (1.0 - s) / inst.n as f64;
        for a in 0..d {
            for b in 0..d {
                h[a * d + b] += w * inst.x[i * d + a] * inst.x[i * d + b];
            }
        }
    }
    h
}

/// Predictive variance of the linear model with `T = N`:
/// `(1/T) sum_i sigma((x_i' a)^2) - ((1/T) sum_i sigma(x_i' a))^2`.
pub fn predictive_variance_term(inst: &LogisticInstance, alpha: &[f64]) -> f64 {
    let t = inst.n as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..inst.n {
        let z = inst.margin(alpha, i);
        first += sigmoid(z * z);
        second += sigmoid(z);
    }
    first / t - (second / t).powi(2)
}

/// Variance-augmented validation loss: cross entropy plus the
/// predictive-variance term, exactly as written.
pub fn mudarts_valid_loss(inst: &LogisticInstance, alpha: &[f64]) -> f64 {
    ce_loss(inst, alpha) + predictive_variance_term(inst, alpha)
}

/// Numeric Hessian by central differences of central-difference
/// gradients at step `h` (the loss itself is the ground truth).
pub fn numeric_hessian<F>(alpha: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = alpha.len();
    let mut a = alpha.to_vec();
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let mut eval = |di: f64, dj: f64| -> f64 {
                a[i] += di;
                a[j] += dj;
                let v = f(&a);
                a[i] -= di;
                a[j] -= dj;
                v
            };
            let v = (eval(h, h) - eval(-h, h) - eval(h, -h) + eval(-h, -h)) / (4.0 * h * h);
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "numeric_hessian" });
            }
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
    Ok(hess)
}

// ── Sigma polynomials ────────────────────────────────────────────────

pub fn sigma_d(p: f64) -> f64 {
    p * (1.0 - p)
}

/// `p(1-p) - 2p^2(1-p) = p(1-p)(1-2p)`, the cubic whose maximum over
/// [0,1] is 1/(6*sqrt(3)) at p = (3 - sqrt(3))/6.
pub fn sigma_cubic(p: f64) -> f64 {
    p * (1.0 - p) * (1.0 - 2.0 * p)
}

/// Which written form of the variance-side polynomial to evaluate. The
/// derivation circulates in inconsistent drafts; the oracle evaluates
/// each exactly as written and reports empirical truth per variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaUdVariant {
    /// `sqrt(q)(1-sqrt(q)) + 4a2[q(1-q) - 2q^2(1-q)] + 2q(1-q)
    ///  - 2(sqrt(q)(1-sqrt(q)) + sqrt(q))`; its maximum is non-positive.
    Standard,
    /// Same with the quadratic term negated: `- 2q(1-q)`.
    NegatedQuadratic,
    /// `0.5 sqrt(q)(1-sqrt(q)) + 4a2[q(1-q) - 2q^2(1-q)] - 2q(1-q)
    ///  - 0.1924 sqrt(q)`, the earlier coefficient set.
    LegacyCoefficients,
}

impl SigmaUdVariant {
    pub fn name(self) -> &'static str {
        match self {
            SigmaUdVariant::Standard => "standard",
            SigmaUdVariant::NegatedQuadratic => "negated_quadratic",
            SigmaUdVariant::LegacyCoefficients => "legacy_coefficients",
        }
    }

    pub fn all() -> [SigmaUdVariant; 3] {
        [
            SigmaUdVariant::Standard,
            SigmaUdVariant::NegatedQuadratic,
            SigmaUdVariant::LegacyCoefficients,
        ]
    }
}

/// Pointwise evaluation of the variance-side polynomial at
/// `q in [0, 1]` with squared weight norm `a2`.
pub fn sigma_ud(q: f64, a2: f64) -> Result<f64> {
    sigma_ud_variant(q, a2, SigmaUdVariant::Standard)
}

pub fn sigma_ud_variant(q: f64, a2: f64, variant: SigmaUdVariant) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::SigmaUdDomain(q));
    }
    let r = q.sqrt();
    let brackets = q * (1.0 - q) - 2.0 * q * q * (1.0 - q);
    Ok(match variant {
        SigmaUdVariant::Standard => {
            r * (1.0 - r) + 4.0 * a2 * brackets + 2.0 * q * (1.0 - q) - 2.0 * (r * (1.0 - r) + r)
        }
        SigmaUdVariant::NegatedQuadratic => {
            r * (1.0 - r) + 4.0 * a2 * brackets - 2.0 * q * (1.0 - q) - 2.0 * (r * (1.0 - r) + r)
        }
        SigmaUdVariant::LegacyCoefficients => {
            0.5 * r * (1.0 - r) + 4.0 * a2 * brackets - 2.0 * q * (1.0 - q) - 0.1924 * r
        }
    })
}

/// Extremal constants of the sigma polynomials over [0, 1]:
/// grid search refined around the winner, with the cubic's stationary
/// point pinned by bisecting `1 - 6p + 6p^2`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SigmaExtrema {
    pub max_sigma_d: f64,
    pub argmax_sigma_d: f64,
    pub max_cubic: f64,
    pub argmax_cubic: f64,
}

pub fn sigma_extrema() -> SigmaExtrema {
    let (argmax_sigma_d, max_sigma_d) = grid_refine_max(sigma_d);
    let dcubic = |p: f64| 1.0 - 6.0 * p + 6.0 * p * p;
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dcubic(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let argmax_cubic = 0.5 * (lo + hi);
    SigmaExtrema {
        max_sigma_d,
        argmax_sigma_d,
        max_cubic: sigma_cubic(argmax_cubic),
        argmax_cubic,
    }
}

fn grid_refine_max(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut best_x = 0.0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=10_000 {
        let x = i as f64 / 10_000.0;
        let v = f(x);
        if v > best {
            best = v;
            best_x = x;
        }
    }
    let (mut lo, mut hi) = ((best_x - 1e-4).max(0.0), (best_x + 1e-4).min(1.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

// ── Lemma verification ───────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub instances: usize,
    pub bound_passes: usize,
    pub psd_passes: usize,
}

impl Lemma1Report {
    pub fn all_pass(&self) -> bool {
        self.bound_passes == self.instances && self.psd_passes == self.instances
    }
}

/// Check, on one instance, (a) the spectral bound
/// `lambda_max(H_ce) <= (1/4N) lambda_max(sum x x') + 1e-9` and (b)
/// positive semidefiniteness `lambda_min >= -1e-10`.
pub fn verify_lemma1(inst: &LogisticInstance) -> (bool, bool) {
    let h = darts_hessian(inst);
    let lam_max = lambda_max_sym(&h, inst.d);
    let lam_min = lambda_min_sym(&h, inst.d);
    let gram_max = lambda_max_sym(&inst.gram(), inst.d);
    let bound = 0.25 / inst.n as f64 * gram_max;
    (lam_max <= bound + 1e-9, lam_min >= -1e-10)
}

pub fn verify_lemma1_batch(instances: &[LogisticInstance]) -> Lemma1Report {
    let mut bound_passes = 0;
    let mut psd_passes = 0;
    for inst in instances {
        let (b, p) = verify_lemma1(inst);
        bound_passes += usize::from(b);
        psd_passes += usize::from(p);
    }
    Lemma1Report {
        instances: instances.len(),
        bound_passes,
        psd_passes,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JensenReport {
    pub points: usize,
    pub violations: usize,
}

/// `sigma(x' a)^2 <= sigma(a x x' a')` on random points with |a| < 1.
pub fn verify_jensen(points: usize, rng: &mut ChaCha8Rng) -> JensenReport {
    let mut violations = 0;
    for _ in 0..points {
        let d = rng.gen_range(1..6);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut a: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1.0 {
            let s = rng.gen_range(0.0..1.0) / norm;
            for v in a.iter_mut() {
                *v *= s;
            }
        }
        let z: f64 = x.iter().zip(a.iter()).map(|(xi, ai)| xi * ai).sum();
        if sigmoid(z).powi(2) > sigmoid(z * z) {
            violations += 1;
        }
    }
    JensenReport { points, violations }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma3Instance {
    pub lambda_darts: f64,
    pub lambda_mudarts: f64,
    pub inequality_holds: bool,
    pub alpha_sq_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma3Report {
    pub instances: Vec<Lemma3Instance>,
    pub pass_count: usize,
    pub pass_rate: f64,
    /// Max of the variance-side polynomial over the q grid at each
    /// instance's weight norm; its sign regime decides which spectral
    /// comparison applies.
    pub sigma_ud_grid_max: f64,
    pub sigma_ud_grid_nonpositive: bool,
    pub sigma_ud_regime: String,
    /// Grid maxima of the alternative written forms, for comparison.
    pub variant_grid_maxima: BTreeMap<String, f64>,
}

/// Grid max of a variant over q in [0,1] at resolution `step`.
pub fn sigma_ud_grid_max(a2: f64, step: f64, variant: SigmaUdVariant) -> f64 {
    let n = (1.0 / step).round() as usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let q = (i as f64 * step).min(1.0);
        let v = sigma_ud_variant(q, a2, variant).expect("q within domain");
        if v > best {
            best = v;
        }
    }
    best
}

/// Numerically compare the largest eigenvalues of both validation-loss
/// Hessians over a batch of instances, and run the sign-regime grid
/// check of the variance-side polynomial.
pub fn verify_lemma3(instances: &[LogisticInstance], fd_step: f64) -> Result<Lemma3Report> {
    let mut out = Vec::with_capacity(instances.len());
    let mut pass_count = 0;
    let mut grid_max = f64::NEG_INFINITY;
    for inst in instances {
        let lambda_darts = lambda_max_sym(&darts_hessian(inst), inst.d);
        let h_mu = numeric_hessian(&inst.alpha, fd_step, |a| mudarts_valid_loss(inst, a))?;
        let lambda_mudarts = lambda_max_sym(&h_mu, inst.d);
        let inequality_holds = lambda_mudarts <= lambda_darts + 1e-9;
        pass_count += usize::from(inequality_holds);
        let a2 = inst.alpha_sq_norm();
        grid_max = grid_max.max(sigma_ud_grid_max(a2, 1e-4, SigmaUdVariant::Standard));
        out.push(Lemma3Instance {
            lambda_darts,
            lambda_mudarts,
            inequality_holds,
            alpha_sq_norm: a2,
        });
    }
    let mut variant_grid_maxima = BTreeMap::new();
    for variant in SigmaUdVariant::all() {
        variant_grid_maxima.insert(
            variant.name().to_string(),
            sigma_ud_grid_max(0.95, 1e-4, variant),
        );
    }
    let nonpositive = grid_max <= 1e-12;
    Ok(Lemma3Report {
        pass_count,
        pass_rate: pass_count as f64 / instances.len().max(1) as f64,
        instances: out,
        sigma_ud_grid_max: grid_max,
        sigma_ud_grid_nonpositive: nonpositive,
        sigma_ud_regime: if nonpositive {
            "non-positive: the variance-side polynomial never exceeds zero on the grid".to_string()
        } else {
            "positive: spectral-factor bound comparison applies".to_string()
        },
        variant_grid_maxima,
    })
}

/// Everything the `verify-lemmas` subcommand reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LemmaVerification {
    pub seed: u64,
    pub constants: SigmaExtrema,
    pub lemma1: Lemma1Report,
    pub jensen: JensenReport,
    pub lemma3: Lemma3Report,
}

pub struct VerificationSettings {
    pub lemma1_instances: usize,
    pub lemma3_instances: usize,
    pub jensen_points: usize,
    pub max_d: usize,
    pub max_n: usize,
    pub max_alpha_norm: f64,
    pub fd_step: f64,
}

impl Default for VerificationSettings {
    fn default() -> Self {
        VerificationSettings {
            lemma1_instances: 100,
            lemma3_instances: 200,
            jensen_points: 10_000,
            max_d: 8,
            max_n: 64,
            max_alpha_norm: 0.95,
            fd_step: 1e-4,
        }
    }
}

pub fn run_verification(seed: u64, settings: &VerificationSettings) -> Result<LemmaVerification> {
    let mut rng = crate::util::stream(seed, &[0x11e2]);
    let constants = sigma_extrema();

    let lemma1_instances: Vec<LogisticInstance> = (0..settings.lemma1_instances)
        .map(|_| {
            let d = rng.gen_range(1..=settings.max_d);
            let n = rng.gen_range(2..=settings.max_n);
            LogisticInstance::random(n, d, settings.max_alpha_norm, &mut rng)
        })
        .collect();
    let lemma1 = verify_lemma1_batch(&lemma1_instances);

    let jensen = verify_jensen(settings.jensen_points, &mut rng);

    let lemma3_instances: Vec<LogisticInstance> = (0..settings.lemma3_instances)
        .map(|_| {
            let d = rng.gen_range(1..=settings.max_d);
            let n = rng.gen_range(2..=settings.max_n);
            LogisticInstance::random(n, d, settings.max_alpha_norm, &mut rng)
        })
        .collect();
    let lemma3 = verify_lemma3(&lemma3_instances, settings.fd_step)?;

    Ok(LemmaVerification {
        seed,
        constants,
        lemma1,
        jensen,
        lemma3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{assert_close, seeded_rng};

    #[test]
    fn jacobi_recovers_diagonal_spectrum() {
        let m = vec![1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 9.0];
        let eig = jacobi_eigenvalues(&m, 3);
        assert_close(eig[0], 1.0, 1e-12);
        assert_close(eig[1], 4.0, 1e-12);
        assert_close(eig[2], 9.0, 1e-12);
    }

    #[test]
    fn jacobi_on_random_symmetric_matches_closed_form_2x2() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let m = vec![a, b, b, c];
            let tr = a + c;
            let det = a * c - b * b;
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let expect = [tr / 2.0 - disc, tr / 2.0 + disc];
            let eig = jacobi_eigenvalues(&m, 2);
            assert_close(eig[0], expect[0], 1e-10);
            assert_close(eig[1], expect[1], 1e-10);
        }
    }

    #[test]
    fn darts_hessian_single_point_at_origin() {
        // x = e1, alpha = 0: H = 0.25 e1 e1', lambda_max 0.25.
        let inst = LogisticInstance::new(1, 2, vec![1.0, 0.0], vec![1], vec![0.0, 0.0]).unwrap();
        let h = darts_hessian(&inst);
        assert_close(h[0], 0.25, 1e-15);
        assert_close(h[1], 0.0, 1e-15);
        assert_close(h[3], 0.0, 1e-15);
        assert_close(lambda_max_sym(&h, 2), 0.25, 1e-12);
    }

    #[test]
    fn darts_hessian_at_zero_weights_is_quarter_gram() {
        let mut rng = seeded_rng(9);
        let inst = LogisticInstance::random(12, 3, 0.0, &mut rng);
        let h = darts_hessian(&inst);
        let gram = inst.gram();
        for (hv, gv) in h.iter().zip(gram.iter()) {
            assert_close(*hv, 0.25 * gv / inst.n as f64, 1e-12);
        }
        assert_close(
            lambda_max_sym(&h, 3),
            0.25 / inst.n as f64 * lambda_max_sym(&gram, 3),
            1e-10,
        );
    }

    #[test]
    fn darts_hessian_matches_numeric_hessian_of_ce() {
        let mut rng = seeded_rng(21);
        for _ in 0..5 {
            let inst = LogisticInstance::random(10, 3, 0.9, &mut rng);
            let closed = darts_hessian(&inst);
            let numeric = numeric_hessian(&inst.alpha, 1e-4, |a| ce_loss(&inst, a)).unwrap();
            for (c, n) in closed.iter().zip(numeric.iter()) {
                assert_close(*c, *n, 1e-5);
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_and_psd() {
        let mut rng = seeded_rng(33);
        for _ in 0..20 {
            let inst = LogisticInstance::random(16, 4, 0.9, &mut rng);
            let h = darts_hessian(&inst);
            for a in 0..4 {
                for b in 0..4 {
                    assert!((h[a * 4 + b] - h[b * 4 + a]).abs() < 1e-12);
                }
            }
            assert!(lambda_min_sym(&h, 4) >= -1e-10);
        }
    }

    #[test]
    fn variance_term_hand_values() {
        // alpha = 0: Var = sigma(0) - sigma(0)^2 = 0.25.
        let mut rng = seeded_rng(2);
        let inst = LogisticInstance::random(7, 3, 0.0, &mut rng);
        assert_close(predictive_variance_term(&inst, &inst.alpha), 0.25, 1e-12);

        // N = 1 single-term evaluation by hand.
        let inst = LogisticInstance::new(1, 2, vec![0.7, -0.4], vec![0], vec![0.5, 0.3]).unwrap();
        let z = 0.7 * 0.5 + (-0.4) * 0.3;
        let expect = sigmoid(z * z) - sigmoid(z).powi(2);
        assert_close(predictive_variance_term(&inst, &inst.alpha), expect, 1e-15);
    }

    #[test]
    fn constants_match_their_closed_forms() {
        let c = sigma_extrema();
        assert_close(c.max_sigma_d, 0.25, 1e-9);
        assert_close(c.argmax_sigma_d, 0.5, 1e-6);
        // Max of p(1-p)(1-2p) is 1/(6 sqrt 3) at (3 - sqrt 3)/6.
        assert_close(c.max_cubic, 0.0962, 1e-4);
        assert_close(c.max_cubic, 1.0 / (6.0 * 3f64.sqrt()), 1e-12);
        assert_close(c.argmax_cubic, (3.0 - 3f64.sqrt()) / 6.0, 1e-6);
    }

    #[test]
    fn sigma_ud_boundary_values() {
        // q = 0: every term vanishes.
        assert_close(sigma_ud(0.0, 0.3).unwrap(), 0.0, 1e-15);
        // q = 1, a2 = 0: hand evaluation gives -2.
        assert_close(sigma_ud(1.0, 0.0).unwrap(), -2.0, 1e-15);
        assert!(sigma_ud(1.5, 0.0).is_err());
        assert!(sigma_ud(-0.1, 0.0).is_err());
    }

    #[test]
    fn sigma_ud_grid_stays_nonpositive_below_unit_norm() {
        for &a2 in &[0.0, 0.3, 0.6, 0.9, 0.99] {
            let m = sigma_ud_grid_max(a2, 1e-4, SigmaUdVariant::Standard);
            assert!(m <= 1e-12, "a2={a2} grid max {m}");
        }
    }

    #[test]
    fn lemma1_holds_on_random_instances() {
        let mut rng = seeded_rng(77);
        for _ in 0..25 {
            let d = rng.gen_range(1..=6);
            let n = rng.gen_range(2..=32);
            let inst = LogisticInstance::random(n, d, 0.95, &mut rng);
            let (bound, psd) = verify_lemma1(&inst);
            assert!(bound && psd);
        }
    }

    #[test]
    fn lemma1_bound_tight_at_zero_weights_rank_one() {
        // Rank-1 inputs x_i = c_i * v: lambda_max(Gram) = sum |x_i|^2,
        // and at alpha = 0 the bound holds with equality.
        let v = [0.6, -0.8];
        let scales = [1.0, -0.5, 2.0];
        let mut x = Vec::new();
        for &c in &scales {
            x.push(c * v[0]);
            x.push(c * v[1]);
        }
        let inst = LogisticInstance::new(3, 2, x, vec![1, 0, 1], vec![0.0, 0.0]).unwrap();
        let gram_max = lambda_max_sym(&inst.gram(), 2);
        let sum_sq: f64 = scales.iter().map(|c| c * c).sum();
        assert_close(gram_max, sum_sq, 1e-10);
        let h_max = lambda_max_sym(&darts_hessian(&inst), 2);
        assert_close(h_max, 0.25 / 3.0 * gram_max, 1e-10);
    }

    #[test]
    fn rayleigh_quotient_never_exceeds_lambda_max() {
        let mut rng = seeded_rng(91);
        let inst = LogisticInstance::random(20, 4, 0.9, &mut rng);
        let h = darts_hessian(&inst);
        let lam = lambda_max_sym(&h, 4);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zn: f64 = z.iter().map(|v| v * v).sum();
            if zn < 1e-12 {
                continue;
            }
            let mut hz = vec![0.0; 4];
            for a in 0..4 {
                for b in 0..4 {
                    hz[a] += h[a * 4 + b] * z[b];
                }
            }
            let rq: f64 = z.iter().zip(hz.iter()).map(|(a, b)| a * b).sum::<f64>() / zn;
            assert!(rq <= lam + 1e-9);
        }
    }

    #[test]
    fn scalar_instance_fully_by_hand() {
        // d = 1, N = 1, x = 2, y = 1, alpha = 0.3.
        let inst = LogisticInstance::new(1, 1, vec![2.0], vec![1], vec![0.3]).unwrap();
        let z = 0.6;
        let s = sigmoid(z);
        let h = darts_hessian(&inst);
        assert_close(h[0], s * (1.0 - s) * 4.0, 1e-12);
        let numeric = numeric_hessian(&[0.3], 1e-4, |a| ce_loss(&inst, a)).unwrap();
        assert_close(numeric[0], h[0], 1e-5);
        // Variance-augmented loss: CE + sigma(z^2) - sigma(z)^2 by hand.
        let expect = -s.ln() + sigmoid(z * z) - s * s;
        assert_close(mudarts_valid_loss(&inst, &inst.alpha), expect, 1e-12);
    }

    #[test]
    fn jensen_holds_numerically() {
        let mut rng = seeded_rng(55);
        let rep = verify_jensen(10_000, &mut rng);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn lemma3_census_runs_and_reports() {
        let mut rng = seeded_rng(13);
        let instances: Vec<LogisticInstance> = (0..10)
            .map(|_| LogisticInstance::random(8, 3, 0.9, &mut rng))
            .collect();
        let rep = verify_lemma3(&instances, 1e-4).unwrap();
        assert_eq!(rep.instances.len(), 10);
        assert!(rep.sigma_ud_grid_nonpositive);
        assert!(rep.pass_rate >= 0.0 && rep.pass_rate <= 1.0);
        for inst in &rep.instances {
            assert!(inst.lambda_darts.is_finite() && inst.lambda_mudarts.is_finite());
        }
    }

    #[test]
    fn alpha_norm_invariant_is_enforced() {
        assert!(LogisticInstance::new(1, 2, vec![1.0, 0.0], vec![0], vec![0.8, 0.7]).is_err());
    }
}
