//! Concrete dropout, Monte-Carlo prediction, predictive variance, and the
//! KL-derived dropout regularizer.
//!
//! The concrete relaxation makes the per-site dropout probability a
//! differentiable variational parameter: a mask entry is
//! `1 - sigmoid((logit + log(u/(1-u))) / temperature)` for `u ~ U(0,1)`,
//! so its expectation approaches `1 - p`, `p = sigmoid(logit)`, as the
//! temperature falls. Masked activations are rescaled by `1/(1-p)` to keep
//! their expectation at the clean value.
//!
//! Predictive variance follows the population form: the sum over output
//! dimensions of `(1/T) * sum_t (y_t - mean)^2`, batch-averaged, plus an
//! optional `tau_inverse * D` noise floor (defaults to zero).
//!
//! The regularizer per site is `l^2 (1-p)/2 * ||M||^2 - K * H(p)`, scaled
//! by `1/N`; `M` is the weight group consuming the masked activation and
//! `K` the number of masked units per sample.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Logits past this magnitude have numerically saturated probabilities;
/// the regularizer clamps there and reports it.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Variational dropout parameters: one logit per site plus the shared
/// relaxation temperature, prior length scale, and model precision.
#[derive(Clone, Debug)]
pub struct DropoutParams {
    pub logit_ids: Vec<crate::autodiff::ParamId>,
    pub temperature: f64,
    pub length_scale: f64,
    pub tau_inverse: f64,
}

impl DropoutParams {
    pub fn empty() -> Self {
        DropoutParams {
            logit_ids: Vec::new(),
            temperature: 0.1,
            length_scale: 1.0,
            tau_inverse: 0.0,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.logit_ids.len()
    }
}

/// Initial dropout probability 0.1 as a logit.
pub fn init_logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

// ── Instrumentation ──────────────────────────────────────────────────
//
// Thread-local call counters: a `darts`-mode run promises zero traffic
// through the variance/regularizer/mask paths, and the ablation tests
// assert it. Thread-local keeps parallel (mode, seed) workers honest.

pub mod counters {
    use std::cell::Cell;

    thread_local! {
        static MASK: Cell<u64> = const { Cell::new(0) };
        static VARIANCE: Cell<u64> = const { Cell::new(0) };
        static REGULARIZER: Cell<u64> = const { Cell::new(0) };
        static MC_PREDICT: Cell<u64> = const { Cell::new(0) };
    }

    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
    pub struct Snapshot {
        pub mask: u64,
        pub variance: u64,
        pub regularizer: u64,
        pub mc_predict: u64,
    }

    impl Snapshot {
        pub fn total(&self) -> u64 {
            self.mask + self.variance + self.regularizer + self.mc_predict
        }
    }

    pub fn snapshot() -> Snapshot {
        Snapshot {
            mask: MASK.with(|c| c.get()),
            variance: VARIANCE.with(|c| c.get()),
            regularizer: REGULARIZER.with(|c| c.get()),
            mc_predict: MC_PREDICT.with(|c| c.get()),
        }
    }

    pub fn reset() {
        MASK.with(|c| c.set(0));
        VARIANCE.with(|c| c.set(0));
        REGULARIZER.with(|c| c.set(0));
        MC_PREDICT.with(|c| c.set(0));
    }

    pub(crate) fn bump_mask() {
        MASK.with(|c| c.set(c.get() + 1));
    }
    pub(crate) fn bump_variance() {
        VARIANCE.with(|c| c.set(c.get() + 1));
    }
    pub(crate) fn bump_regularizer() {
        REGULARIZER.with(|c| c.set(c.get() + 1));
    }
    pub(crate) fn bump_mc() {
        MC_PREDICT.with(|c| c.set(c.get() + 1));
    }
}

// ── Concrete masks ───────────────────────────────────────────────────

/// Build a concrete-dropout mask on the tape: entries in (0,1),
/// differentiable with respect to the site logit.
pub fn concrete_mask(
    tape: &mut Tape,
    logit: Var,
    shape: &[usize],
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "temperature".into(),
            reason: format!("must be positive, got {temperature}"),
        });
    }
    counters::bump_mask();
    let noise = tape.constant(logistic_noise(shape, rng)?)?;
    let z = tape.shift_by_scalar(noise, logit)?;
    let z = tape.mul_const(z, 1.0 / temperature)?;
    let s = tape.sigmoid(z)?;
    tape.one_minus(s)
}

/// Mask an activation and rescale by the keep probability so the masked
/// activation keeps its clean expectation. Single fused node on the
/// tape; the mask construction matches [`concrete_mask`].
pub fn apply_concrete_dropout(
    tape: &mut Tape,
    x: Var,
    logit: Var,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "temperature".into(),
            reason: format!("must be positive, got {temperature}"),
        });
    }
    counters::bump_mask();
    let shape = tape.value(x).shape().to_vec();
    let noise = logistic_noise(&shape, rng)?;
    tape.concrete_dropout(x, logit, &noise, 1.0 / temperature)
}

/// Pre-drawn logistic noise `ln(u/(1-u))`, `u ~ U(0,1)`.
fn logistic_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
            (u / (1.0 - u)).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

// ── Monte-Carlo prediction ───────────────────────────────────────────

/// T stochastic forward passes: post-softmax class probabilities per
/// sample. Rows of every sample sum to one.
#[derive(Clone, Debug)]
pub struct McPrediction {
    samples: Vec<Tensor>,
}

impl McPrediction {
    pub fn new(samples: Vec<Tensor>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::VarianceNeedsSamples(0));
        }
        let shape = samples[0].shape().to_vec();
        for s in &samples {
            if s.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "mc_prediction",
                    expected: shape,
                    got: s.shape().to_vec(),
                });
            }
            if !s.all_finite() {
                return Err(Error::NonFinite { op: "mc_prediction" });
            }
            let classes = *s.shape().last().unwrap();
            for row in s.data().chunks(classes) {
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::NonFinite { op: "mc_prediction_row_sum" });
                }
            }
        }
        Ok(McPrediction { samples })
    }

    pub fn t(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    /// Samplewise average: the variational predictive distribution.
    pub fn mean(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.samples[0].shape());
        for s in &self.samples {
            acc.add_in_place(s);
        }
        acc.scale_in_place(1.0 / self.samples.len() as f64);
        acc
    }

    /// Argmax class per batch row of the predictive mean.
    pub fn predicted_classes(&self) -> Vec<usize> {
        let mean = self.mean();
        let classes = *mean.shape().last().unwrap();
        mean.data()
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

/// Run `t_samples` independent stochastic passes. Sample `t` draws from
/// the stream `(base_seed, t)`, so results are order-stable and
/// reproducible bit-exactly for a fixed seed.
pub fn mc_predict<F>(t_samples: usize, base_seed: u64, mut sample: F) -> Result<McPrediction>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Tensor>,
{
    if t_samples == 0 {
        return Err(Error::VarianceNeedsSamples(0));
    }
    counters::bump_mc();
    let mut samples = Vec::with_capacity(t_samples);
    for t in 0..t_samples {
        let mut rng = crate::util::stream(base_seed, &[0x6d63, t as u64]);
        samples.push(sample(&mut rng)?);
    }
    McPrediction::new(samples)
}

/// Sum over output dimensions of the population variance (divisor `T`)
/// of the samples, plus `tau_inverse * D`, averaged over the batch.
///
/// Computed on deviations from the first sample (variance is shift
/// invariant), so T bit-identical samples give exactly `tau_inverse * D`.
pub fn predictive_variance(mc: &McPrediction, tau_inverse: f64) -> Result<f64> {
    if mc.t() < 2 {
        return Err(Error::VarianceNeedsSamples(mc.t()));
    }
    counters::bump_variance();
    let first = &mc.samples()[0];
    let shape = first.shape();
    let classes = *shape.last().unwrap();
    let batch = first.len() / classes;
    let t = mc.t() as f64;
    let mut acc = 0.0;
    for b in 0..batch {
        for d in 0..classes {
            let idx = b * classes + d;
            let base = first.data()[idx];
            let mut m = 0.0;
            for s in mc.samples() {
                m += s.data()[idx] - base;
            }
            m /= t;
            let mut v = 0.0;
            for s in mc.samples() {
                let dlt = (s.data()[idx] - base) - m;
                v += dlt * dlt;
            }
            acc += v / t;
        }
    }
    Ok(acc / batch as f64 + tau_inverse * classes as f64)
}

// ── KL regularizer ───────────────────────────────────────────────────

/// One dropout site as seen by the regularizer: its logit on the tape,
/// the weight tensors it regularizes, and the unit count it masks.
pub struct SiteTerm {
    pub logit: Var,
    pub weights: Vec<Var>,
    pub k_units: f64,
}

/// Tape form of the dropout regularizer:
/// `(1/N) * sum_sites [ l^2 (1-p)/2 * ||M||^2 - K * H(p) ]`.
/// Differentiable in the logits and the weights. Returns the scalar and
/// whether any logit had to be clamped for the entropy.
pub fn mc_regularizer(
    tape: &mut Tape,
    sites: &[SiteTerm],
    length_scale: f64,
    n_data: usize,
) -> Result<(Var, bool)> {
    counters::bump_regularizer();
    let mut clamped = false;
    let mut total: Option<Var> = None;
    for site in sites {
        if tape.value(site.logit).item().abs() >= LOGIT_CLAMP {
            clamped = true;
        }
        let logit = tape.clamp(site.logit, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let p = tape.sigmoid(logit)?;
        let one_minus_p = tape.one_minus(p)?;

        // l^2 (1-p)/2 * ||M||^2
        let mut m_norm2: Option<Var> = None;
        for &w in &site.weights {
            let sq = tape.square(w)?;
            let s = tape.sum(sq)?;
            m_norm2 = Some(match m_norm2 {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let weight_term = match m_norm2 {
            Some(n2) => {
                let half = tape.mul_const(one_minus_p, length_scale * length_scale / 2.0)?;
                Some(tape.mul(half, n2)?)
            }
            None => None,
        };

        // K * H(p), H(p) = -p log p - (1-p) log(1-p)
        let log_p = tape.log(p)?;
        let log_q = tape.log(one_minus_p)?;
        let plp = tape.mul(p, log_p)?;
        let qlq = tape.mul(one_minus_p, log_q)?;
        let neg_h = tape.add(plp, qlq)?;
        let k_h = tape.mul_const(neg_h, site.k_units)?; // -K*H(p) is +k_units*neg_h

        let site_term = match weight_term {
            Some(wt) => tape.add(wt, k_h)?,
            None => k_h,
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, site_term)?,
            None => site_term,
        });
    }
    let total = match total {
        Some(t) => tape.mul_const(t, 1.0 / n_data as f64)?,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    Ok((total, clamped))
}

/// Plain-value form of the same regularizer, for reports and oracles.
/// Sites are `(p, ||M||^2, K)` triples.
pub fn mc_regularizer_value(sites: &[(f64, f64, f64)], length_scale: f64, n_data: usize) -> f64 {
    counters::bump_regularizer();
    let mut total = 0.0;
    for &(p, m_norm2, k) in sites {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        total += length_scale * length_scale * (1.0 - p) / 2.0 * m_norm2 - k * h;
    }
    total / n_data as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, ParamClass, ParamStore};
    use crate::util::{assert_close, rel_close, seeded_rng, stream};

    #[test]
    fn mask_limits_track_the_keep_probability() {
        let mut rng = seeded_rng(3);
        // p -> 0: keep everything.
        let mut tape = Tape::new();
        let logit = tape.constant(Tensor::scalar(-40.0)).unwrap();
        let mask = concrete_mask(&mut tape, logit, &[64], 0.1, &mut rng).unwrap();
        assert!(tape.value(mask).data().iter().all(|&m| m > 0.999999));
        // p -> 1: drop everything.
        let logit = tape.constant(Tensor::scalar(40.0)).unwrap();
        let mask = concrete_mask(&mut tape, logit, &[64], 0.1, &mut rng).unwrap();
        assert!(tape.value(mask).data().iter().all(|&m| m < 1e-6));
    }

    #[test]
    fn mask_mean_matches_keep_probability() {
        // p = 0.3, temperature 0.1, 1e5 draws: mean within 0.7 +- 0.01.
        let mut rng = seeded_rng(17);
        let mut tape = Tape::new();
        let logit = tape.constant(Tensor::scalar(init_logit(0.3))).unwrap();
        let mask = concrete_mask(&mut tape, logit, &[100_000], 0.1, &mut rng).unwrap();
        let mean = tape.value(mask).mean();
        assert!((mean - 0.7).abs() < 0.01, "mean mask {mean}");
    }

    #[test]
    fn mask_gradient_matches_finite_difference_with_frozen_noise() {
        // Reparameterization check: fixed uniform draws, differentiate a
        // loss through the mask with respect to the logit.
        let mut store = ParamStore::new();
        let logit = store.register("logit", ParamClass::DropoutLogit, Tensor::scalar(-0.4));
        let x = Tensor::from_vec(vec![0.3, -1.2, 0.9, 2.0]);
        let run = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut rng = stream(99, &[1]);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let lv = tape.param(s, logit)?;
            let y = apply_concrete_dropout(&mut tape, xv, lv, 0.2, &mut rng)?;
            let sq = tape.square(y)?;
            let loss = tape.sum(sq)?;
            Ok(tape.value(loss).item())
        };
        let mut rng = stream(99, &[1]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let lv = tape.param(&store, logit).unwrap();
        let y = apply_concrete_dropout(&mut tape, xv, lv, 0.2, &mut rng).unwrap();
        let sq = tape.square(y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward_scalar(loss).unwrap();
        let ad = grads.get(logit, &store).item();
        let fd = finite_diff_grad(&mut store, &[logit], 1e-6, |s| run(s)).unwrap()[0].item();
        assert!(rel_close(ad, fd, 1e-4, 1e-7), "ad {ad} vs fd {fd}");
    }

    #[test]
    fn mc_predict_without_dropout_is_deterministic() {
        let constant = Tensor::new(vec![2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let mc = mc_predict(5, 7, |_| Ok(constant.clone())).unwrap();
        assert_eq!(mc.t(), 5);
        for s in mc.samples() {
            assert_eq!(s, &constant);
        }
        // Predictive mean of identical samples is that sample.
        assert_eq!(mc.mean(), constant);
    }

    #[test]
    fn mc_predict_reproduces_bit_exactly_per_seed() {
        let sample = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.gen_range(0.0..1.0);
            Tensor::new(vec![1, 2], vec![a, 1.0 - a])
        };
        let a = mc_predict(4, 1234, sample).unwrap();
        let b = mc_predict(4, 1234, sample).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.data(), y.data());
        }
        let c = mc_predict(4, 1235, sample).unwrap();
        assert_ne!(a.samples()[0].data(), c.samples()[0].data());
    }

    #[test]
    fn variance_of_identical_samples_is_tau_floor() {
        let s = Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let mc = McPrediction::new(vec![s.clone(), s.clone(), s]).unwrap();
        assert_eq!(predictive_variance(&mc, 0.0).unwrap(), 0.0);
        assert_eq!(predictive_variance(&mc, 0.5).unwrap(), 1.5);
    }

    #[test]
    fn variance_of_opposite_one_hots_is_half() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let mc = McPrediction::new(vec![a, b]).unwrap();
        assert_eq!(predictive_variance(&mc, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn variance_requires_two_samples() {
        let s = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mc = McPrediction::new(vec![s]).unwrap();
        assert!(matches!(
            predictive_variance(&mc, 0.0),
            Err(Error::VarianceNeedsSamples(1))
        ));
    }

    #[test]
    fn variance_matches_direct_formula_and_ignores_order() {
        let mut rng = seeded_rng(41);
        for _ in 0..20 {
            let t = rng.gen_range(2..7);
            let batch = rng.gen_range(1..4);
            let classes = rng.gen_range(2..5);
            let mut samples = Vec::new();
            for _ in 0..t {
                let mut rows = Vec::new();
                for _ in 0..batch {
                    let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    rows.extend(raw.into_iter().map(|v| v / z));
                }
                samples.push(Tensor::new(vec![batch, classes], rows).unwrap());
            }
            let mc = McPrediction::new(samples.clone()).unwrap();
            let got = predictive_variance(&mc, 0.0).unwrap();

            // Brute-force recomputation straight from the formula.
            let mut expect = 0.0;
            for b in 0..batch {
                for d in 0..classes {
                    let mean: f64 = samples.iter().map(|s| s.data()[b * classes + d]).sum::<f64>() / t as f64;
                    let var: f64 = samples
                        .iter()
                        .map(|s| (s.data()[b * classes + d] - mean).powi(2))
                        .sum::<f64>()
                        / t as f64;
                    expect += var;
                }
            }
            expect /= batch as f64;
            assert_close(got, expect, 1e-12);

            // Permutation invariance.
            let mut shuffled = samples.clone();
            shuffled.reverse();
            let mc2 = McPrediction::new(shuffled).unwrap();
            assert_close(predictive_variance(&mc2, 0.0).unwrap(), got, 1e-15);

            // Never below the tau floor.
            let tau = 0.3;
            let with_floor = predictive_variance(&mc, tau).unwrap();
            assert!(with_floor >= tau * classes as f64);
        }
    }

    #[test]
    fn regularizer_hand_values() {
        // H(0.5) = ln 2 in the entropy term; zero weights leave only it.
        let v = mc_regularizer_value(&[(0.5, 0.0, 1.0)], 1.0, 1);
        assert_close(v, -(2.0f64.ln()), 1e-12);

        // l=1, p=0.2, ||M||^2=4, K=10, N=100:
        // (1/100)(0.8/2*4 - 10*H(0.2)) with H(0.2)=0.500402.
        let v = mc_regularizer_value(&[(0.2, 4.0, 10.0)], 1.0, 100);
        assert_close(v, -0.0340402, 5e-7);
    }

    #[test]
    fn regularizer_tape_matches_value_form_and_finite_difference() {
        let mut store = ParamStore::new();
        let logit = store.register("l0", ParamClass::DropoutLogit, Tensor::scalar(init_logit(0.2)));
        let w = store.register("w0", ParamClass::Weight, Tensor::from_vec(vec![1.0, -1.0, 1.0, 1.0]));
        let build = |s: &ParamStore| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let lv = tape.param(s, logit)?;
            let wv = tape.param(s, w)?;
            let (reg, _) = mc_regularizer(
                &mut tape,
                &[SiteTerm {
                    logit: lv,
                    weights: vec![wv],
                    k_units: 10.0,
                }],
                1.0,
                100,
            )?;
            Ok(tape.value(reg).item())
        };
        let got = build(&store).unwrap();
        assert_close(got, mc_regularizer_value(&[(0.2, 4.0, 10.0)], 1.0, 100), 1e-12);

        // d(regularizer)/d(logit) and /d(weights) against central differences.
        let mut tape = Tape::new();
        let lv = tape.param(&store, logit).unwrap();
        let wv = tape.param(&store, w).unwrap();
        let (reg, clamped) = mc_regularizer(
            &mut tape,
            &[SiteTerm {
                logit: lv,
                weights: vec![wv],
                k_units: 10.0,
            }],
            1.0,
            100,
        )
        .unwrap();
        assert!(!clamped);
        let grads = tape.backward_scalar(reg).unwrap();
        let fd = finite_diff_grad(&mut store, &[logit, w], 1e-6, |s| build(s)).unwrap();
        assert!(rel_close(grads.get(logit, &store).item(), fd[0].item(), 1e-4, 1e-7));
        for (a, b) in grads.get(w, &store).data().iter().zip(fd[1].data().iter()) {
            assert!(rel_close(*a, *b, 1e-4, 1e-7));
        }
    }

    #[test]
    fn regularizer_reports_clamped_logits() {
        let mut store = ParamStore::new();
        let logit = store.register("sat", ParamClass::DropoutLogit, Tensor::scalar(200.0));
        let mut tape = Tape::new();
        let lv = tape.param(&store, logit).unwrap();
        let (_, clamped) = mc_regularizer(
            &mut tape,
            &[SiteTerm {
                logit: lv,
                weights: vec![],
                k_units: 3.0,
            }],
            1.0,
            10,
        )
        .unwrap();
        assert!(clamped);
    }

    #[test]
    fn counters_track_calls() {
        counters::reset();
        let s = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let mc = McPrediction::new(vec![s.clone(), s]).unwrap();
        let _ = predictive_variance(&mc, 0.0).unwrap();
        let _ = mc_regularizer_value(&[(0.5, 0.0, 1.0)], 1.0, 1);
        let snap = counters::snapshot();
        assert_eq!(snap.variance, 1);
        assert_eq!(snap.regularizer, 1);
        counters::reset();
        assert_eq!(counters::snapshot().total(), 0);
    }
}
