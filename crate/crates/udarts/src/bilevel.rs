//! The bi-level optimizer: composite training/validation losses, the
//! virtual weight step, and the architecture gradient with its
//! finite-difference second-order term.
//!
//! Inner objective: cross entropy plus the dropout KL regularizer,
//! minimized over the weights (and dropout logits) by SGD with momentum
//! and weight decay. Outer objective: cross entropy of the Monte-Carlo
//! predictive mean plus the predictive variance, minimized over the
//! architecture logits (and, through the variance, the dropout logits)
//! by plain gradient descent on the one-step-unrolled surrogate
//! `w* ~ w - xi * grad_w(train)`.
//!
//! The second-order term replaces the mixed Hessian by a central
//! difference around `w +- eps * grad_w(valid)` with
//! `eps = fd_scale / |grad_w(valid)|`; the Monte-Carlo noise of every
//! loss evaluation inside one such difference is frozen to common
//! random numbers, otherwise sampling noise dominates the difference.

use crate::autodiff::{ParamClass, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::{Dataset, Split};
use crate::searchspace::{ForwardModel, FwdOptions, Network};
use crate::spectral::{self, LossLandscape, SpectralReport};
use crate::uncertainty;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Plain search: no dropout sites, no variance, no KL term.
    Darts,
    /// Dropout and the KL term, but the variance never enters a loss
    /// (it is still measured for the trajectory reports).
    DartsCd,
    /// The full objective.
    Mudarts,
}

impl SearchMode {
    pub fn uses_dropout(self) -> bool {
        !matches!(self, SearchMode::Darts)
    }

    pub fn optimizes_variance(self) -> bool {
        matches!(self, SearchMode::Mudarts)
    }

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Darts => "darts",
            SearchMode::DartsCd => "darts_cd",
            SearchMode::Mudarts => "mudarts",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    /// Virtual-step rate; `None` ties it to `w_lr`.
    pub xi: Option<f64>,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub order: Order,
    /// Scale constant of the finite-difference perturbation.
    pub fd_scale: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            xi: None,
            w_lr: 0.025,
            w_momentum: 0.9,
            w_weight_decay: 0.0243,
            alpha_lr: 0.01,
            order: Order::Second,
            fd_scale: 0.01,
        }
    }
}

impl BilevelConfig {
    pub fn xi(&self) -> f64 {
        self.xi.unwrap_or(self.w_lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.xi() < 0.0 {
            return Err(Error::InvalidConfig {
                field: "bilevel.xi".into(),
                reason: "must be non-negative".into(),
            });
        }
        if self.fd_scale <= 0.0 {
            return Err(Error::InvalidConfig {
                field: "bilevel.fd_scale".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One observation of the composite losses. Totals are the exact sums
/// of their parts.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_train: f64,
    pub l_mc: f64,
    pub ce_valid: f64,
    pub pred_var: f64,
    pub total_train: f64,
    pub total_valid: f64,
}

impl LossReport {
    pub fn new(ce_train: f64, l_mc: f64, ce_valid: f64, pred_var: f64) -> Self {
        LossReport {
            ce_train,
            l_mc,
            ce_valid,
            pred_var,
            total_train: ce_train + l_mc,
            total_valid: ce_valid + pred_var,
        }
    }
}

// ── Losses ───────────────────────────────────────────────────────────

pub struct TrainLossVars {
    pub total: Var,
    pub ce: Var,
    pub l_mc: Option<Var>,
    pub bn_updates: Vec<(ParamId, Tensor)>,
    pub clamped: bool,
}

impl TrainLossVars {
    pub fn report_fragment(&self, tape: &Tape) -> (f64, f64) {
        let ce = tape.value(self.ce).item();
        let l_mc = self.l_mc.map_or(0.0, |v| tape.value(v).item());
        (ce, l_mc)
    }
}

/// Inner objective on one batch: cross entropy of a single stochastic
/// pass plus the dropout regularizer (skipped entirely in plain mode).
/// Gradients flow to the weights and dropout logits; the architecture
/// update never consumes them.
pub fn train_loss<M: ForwardModel>(
    model: &M,
    store: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    mode: SearchMode,
    n_data: usize,
    mask_seed: u64,
) -> Result<(Tape, TrainLossVars)> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig {
            field: "batch".into(),
            reason: "empty training batch".into(),
        });
    }
    let mut tape = Tape::new();
    let vars = if mode.uses_dropout() {
        let mut rng = crate::util::stream(mask_seed, &[0x7261]);
        model.forward_on(&mut tape, store, x, FwdOptions::train(&mut rng))?
    } else {
        let mut opts = FwdOptions::deterministic();
        opts.update_running = true;
        model.forward_on(&mut tape, store, x, opts)?
    };
    let ce = tape.cross_entropy_from_probs(vars.probs, labels)?;
    let (total, l_mc, clamped) = if mode.uses_dropout() {
        let (reg, clamped) = uncertainty::mc_regularizer(
            &mut tape,
            &vars.reg_sites,
            model.dropout_params().length_scale,
            n_data,
        )?;
        (tape.add(ce, reg)?, Some(reg), clamped)
    } else {
        (ce, None, false)
    };
    Ok((
        tape,
        TrainLossVars {
            total,
            ce,
            l_mc,
            bn_updates: vars.bn_updates,
            clamped,
        },
    ))
}

pub struct ValidLossVars {
    pub total: Var,
    pub ce: Var,
    /// Measured even when it does not enter `total`.
    pub pred_var_value: f64,
    pub pred_var: Option<Var>,
}

impl ValidLossVars {
    pub fn report_fragment(&self, tape: &Tape) -> (f64, f64) {
        (tape.value(self.ce).item(), self.pred_var_value)
    }
}

/// Outer objective on one batch: cross entropy of the Monte-Carlo
/// predictive mean plus the predictive variance, all on one tape so the
/// whole thing stays differentiable in the architecture and dropout
/// logits. Plain mode is a single deterministic pass.
pub fn valid_loss<M: ForwardModel>(
    model: &M,
    store: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    mode: SearchMode,
    t_samples: usize,
    mc_seed: u64,
) -> Result<(Tape, ValidLossVars)> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig {
            field: "batch".into(),
            reason: "empty validation batch".into(),
        });
    }
    let mut tape = Tape::new();
    if !mode.uses_dropout() {
        let vars = model.forward_on(&mut tape, store, x, FwdOptions::deterministic())?;
        let ce = tape.cross_entropy_from_probs(vars.probs, labels)?;
        return Ok((
            tape,
            ValidLossVars {
                total: ce,
                ce,
                pred_var_value: 0.0,
                pred_var: None,
            },
        ));
    }
    if t_samples < 2 {
        return Err(Error::VarianceNeedsSamples(t_samples));
    }
    uncertainty::counters::bump_variance();
    let mut sample_probs = Vec::with_capacity(t_samples);
    for t in 0..t_samples {
        let mut rng = crate::util::stream(mc_seed, &[0x7661, t as u64]);
        let vars = model.forward_on(&mut tape, store, x, FwdOptions::sample(&mut rng))?;
        sample_probs.push(vars.probs);
    }
    // Predictive mean, then CE against it.
    let mut acc = sample_probs[0];
    for &p in &sample_probs[1..] {
        acc = tape.add(acc, p)?;
    }
    let mean = tape.mul_const(acc, 1.0 / t_samples as f64)?;
    let ce = tape.cross_entropy_from_probs(mean, labels)?;

    // Population variance summed over classes, averaged over the batch,
    // plus the optional noise floor.
    let batch = labels.len();
    let classes = model.classes();
    let mut var_acc: Option<Var> = None;
    for &p in &sample_probs {
        let d = tape.sub(p, mean)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        var_acc = Some(match var_acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    let var = tape.mul_const(var_acc.expect("t >= 2"), 1.0 / (t_samples * batch) as f64)?;
    let tau = model.dropout_params().tau_inverse;
    let var = if tau != 0.0 {
        tape.add_const(var, tau * classes as f64)?
    } else {
        var
    };
    let pred_var_value = tape.value(var).item();

    let total = if mode.optimizes_variance() {
        tape.add(ce, var)?
    } else {
        ce
    };
    Ok((
        tape,
        ValidLossVars {
            total,
            ce,
            pred_var_value,
            pred_var: Some(var),
        },
    ))
}

// ── Virtual step and architecture gradient ───────────────────────────

/// `w <- w - rate * g` over the weight class; other classes untouched.
/// A zero rate returns a bit-exact clone.
pub fn stepped_weights(store: &ParamStore, grads: &crate::autodiff::Gradients, rate: f64) -> ParamStore {
    let mut stepped = store.clone();
    if rate == 0.0 {
        return stepped;
    }
    for id in store.ids_of_class(ParamClass::Weight) {
        if let Some(g) = grads.get_ref(id) {
            let mut w = store.get(id).clone();
            w.axpy_in_place(-rate, g);
            stepped.set(id, w);
        }
    }
    stepped
}

/// `w' = w - xi * grad_w(total_train)`; the original store is untouched.
/// Returns the stepped store together with the training fragment it
/// evaluated.
pub fn virtual_step<M: ForwardModel>(
    model: &M,
    store: &ParamStore,
    x: &Tensor,
    labels: &[usize],
    mode: SearchMode,
    n_data: usize,
    cfg: &BilevelConfig,
    mask_seed: u64,
) -> Result<(ParamStore, f64, f64)> {
    let xi = cfg.xi();
    let (tape, vars) = train_loss(model, store, x, labels, mode, n_data, mask_seed)?;
    let (ce, l_mc) = vars.report_fragment(&tape);
    if xi == 0.0 {
        return Ok((store.clone(), ce, l_mc));
    }
    let grads = tape.backward_scalar(vars.total)?;
    Ok((stepped_weights(store, &grads, xi), ce, l_mc))
}

/// Outer gradient over architecture and dropout logits.
pub struct ArchGradient {
    pub grads: BTreeMap<ParamId, Tensor>,
    pub valid_fragment: (f64, f64),
    pub train_fragment: (f64, f64),
    /// The second-order term was skipped because the validation
    /// gradient over the weights vanished.
    pub second_order_skipped: bool,
}

/// A differentiable objective evaluation: its tape, the scalar to
/// differentiate, and a two-part report fragment.
pub type LossEval = (Tape, Var, (f64, f64));

/// The bilevel algebra over arbitrary train/valid objectives:
///
/// 1. virtual step `w' = w - xi * grad_w(train(w))`,
/// 2. first-order gradient of `valid` at the stepped parameters,
/// 3. unless `order` is first or `xi` is zero, subtract
///    `xi/(2 eps) * (grad_a train(w+) - grad_a train(w-))` with
///    `w+- = w +- eps * grad_w(valid(w'))` and
///    `eps = fd_scale / |grad_w(valid(w'))|`.
///
/// Gradients are reported for the architecture and dropout-logit
/// classes. Both closures must be deterministic per store (frozen
/// noise); the production wrappers pin their mask seeds.
pub fn arch_gradient_core<FT, FV>(
    store: &ParamStore,
    cfg: &BilevelConfig,
    train_at: &FT,
    valid_at: &FV,
) -> Result<ArchGradient>
where
    FT: Fn(&ParamStore) -> Result<LossEval>,
    FV: Fn(&ParamStore) -> Result<LossEval>,
{
    cfg.validate()?;
    let xi = cfg.xi();

    let (ttape, ttotal, train_fragment) = train_at(store)?;
    let stepped = if xi == 0.0 {
        store.clone()
    } else {
        let tgrads = ttape.backward_scalar(ttotal)?;
        stepped_weights(store, &tgrads, xi)
    };

    let (vtape, vtotal, valid_fragment) = valid_at(&stepped)?;
    let vgrads = vtape.backward_scalar(vtotal)?;

    let outer_ids: Vec<ParamId> = store
        .ids_of_class(ParamClass::Alpha)
        .into_iter()
        .chain(store.ids_of_class(ParamClass::DropoutLogit))
        .collect();
    let mut grads: BTreeMap<ParamId, Tensor> = outer_ids
        .iter()
        .map(|&id| (id, vgrads.get(id, store)))
        .collect();

    let mut second_order_skipped = false;
    if matches!(cfg.order, Order::Second) && xi > 0.0 {
        let v_norm = vgrads.class_norm2(store, ParamClass::Weight);
        if v_norm == 0.0 {
            second_order_skipped = true;
        } else {
            let eps = cfg.fd_scale / v_norm;
            let mut plus = store.clone();
            let mut minus = store.clone();
            for id in store.ids_of_class(ParamClass::Weight) {
                if let Some(g) = vgrads.get_ref(id) {
                    let mut wp = store.get(id).clone();
                    wp.axpy_in_place(eps, g);
                    plus.set(id, wp);
                    let mut wm = store.get(id).clone();
                    wm.axpy_in_place(-eps, g);
                    minus.set(id, wm);
                }
            }
            let (ptape, ptotal, _) = train_at(&plus)?;
            let pgrads = ptape.backward_scalar(ptotal)?;
            let (mtape, mtotal, _) = train_at(&minus)?;
            let mgrads = mtape.backward_scalar(mtotal)?;
            let scale = xi / (2.0 * eps);
            for &id in &outer_ids {
                let gp = pgrads.get(id, store);
                let gm = mgrads.get(id, store);
                let acc = grads.get_mut(&id).expect("outer id present");
                for ((a, p), m) in acc.data_mut().iter_mut().zip(gp.data()).zip(gm.data()) {
                    *a -= scale * (p - m);
                }
            }
        }
    }

    for g in grads.values() {
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "arch_gradient" });
        }
    }
    Ok(ArchGradient {
        grads,
        valid_fragment,
        train_fragment,
        second_order_skipped,
    })
}

/// Independent oracle for the architecture gradient: central
/// differences over the outer variables of the exactly unrolled
/// objective `F(alpha) = valid(alpha, w - xi grad_w train(alpha, w))`.
/// Never touches the finite-difference path of `arch_gradient_core`.
pub fn unrolled_hypergradient<FT, FV>(
    store: &ParamStore,
    alpha: ParamId,
    xi: f64,
    h: f64,
    train: &FT,
    valid: &FV,
) -> Result<Vec<f64>>
where
    FT: Fn(&ParamStore) -> Result<LossEval>,
    FV: Fn(&ParamStore) -> Result<LossEval>,
{
    let unrolled = |s: &ParamStore| -> Result<f64> {
        let (ttape, ttotal, _) = train(s)?;
        let tg = ttape.backward_scalar(ttotal)?;
        let stepped = stepped_weights(s, &tg, xi);
        let (vtape, vtotal, _) = valid(&stepped)?;
        Ok(vtape.value(vtotal).item())
    };
    let n = store.get(alpha).len();
    let mut grad = Vec::with_capacity(n);
    let mut probe = store.clone();
    for i in 0..n {
        let orig = store.get(alpha).data()[i];
        probe.get_mut(alpha).data_mut()[i] = orig + h;
        let plus = unrolled(&probe)?;
        probe.get_mut(alpha).data_mut()[i] = orig - h;
        let minus = unrolled(&probe)?;
        probe.get_mut(alpha).data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Architecture gradient of the composite objectives on one
/// train/valid batch pair. Monte-Carlo randomness is keyed to the two
/// seeds, so every evaluation inside one finite difference shares its
/// noise.
#[allow(clippy::too_many_arguments)]
pub fn arch_gradient(
    network: &Network,
    store: &ParamStore,
    train_x: &Tensor,
    train_y: &[usize],
    valid_x: &Tensor,
    valid_y: &[usize],
    mode: SearchMode,
    t_samples: usize,
    n_data: usize,
    cfg: &BilevelConfig,
    train_seed: u64,
    valid_seed: u64,
) -> Result<ArchGradient> {
    let train_at = |s: &ParamStore| -> Result<LossEval> {
        let (tape, vars) = train_loss(network, s, train_x, train_y, mode, n_data, train_seed)?;
        let fragment = vars.report_fragment(&tape);
        Ok((tape, vars.total, fragment))
    };
    let valid_at = |s: &ParamStore| -> Result<LossEval> {
        let (tape, vars) = valid_loss(network, s, valid_x, valid_y, mode, t_samples, valid_seed)?;
        let fragment = vars.report_fragment(&tape);
        Ok((tape, vars.total, fragment))
    };
    arch_gradient_core(store, cfg, &train_at, &valid_at)
}

// ── Search state and epochs ──────────────────────────────────────────

pub struct SearchState {
    pub store: ParamStore,
    pub momentum: BTreeMap<ParamId, Tensor>,
    pub epoch: usize,
    pub base_seed: u64,
}

impl SearchState {
    pub fn new(store: ParamStore, base_seed: u64) -> Self {
        SearchState {
            store,
            momentum: BTreeMap::new(),
            epoch: 0,
            base_seed,
        }
    }
}

/// SGD-with-momentum step on the weights plus a plain gradient step on
/// the dropout logits, from the inner objective on one batch. Batch-norm
/// running averages absorb the forward statistics.
#[allow(clippy::too_many_arguments)]
pub fn inner_step<M: ForwardModel>(
    model: &M,
    state: &mut SearchState,
    x: &Tensor,
    labels: &[usize],
    mode: SearchMode,
    n_data: usize,
    cfg: &BilevelConfig,
    mask_seed: u64,
) -> Result<(f64, f64)> {
    let (tape, vars) = train_loss(model, &state.store, x, labels, mode, n_data, mask_seed)?;
    let fragment = vars.report_fragment(&tape);
    if cfg.w_lr == 0.0 {
        return Ok(fragment);
    }
    let grads = tape.backward_scalar(vars.total)?;

    for id in state.store.ids_of_class(ParamClass::Weight) {
        let g = match grads.get_ref(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(state.store.get(id).shape()),
        };
        let mut step = g;
        step.axpy_in_place(cfg.w_weight_decay, state.store.get(id));
        let m = state
            .momentum
            .entry(id)
            .or_insert_with(|| Tensor::zeros(step.shape()));
        m.scale_in_place(cfg.w_momentum);
        m.add_in_place(&step);
        let mut w = state.store.get(id).clone();
        w.axpy_in_place(-cfg.w_lr, m);
        state.store.set(id, w);
    }
    for id in state.store.ids_of_class(ParamClass::DropoutLogit) {
        if let Some(g) = grads.get_ref(id) {
            let mut t = state.store.get(id).clone();
            t.axpy_in_place(-cfg.w_lr, g);
            state.store.set(id, t);
        }
    }
    for (id, value) in vars.bn_updates {
        state.store.set(id, value);
    }
    Ok(fragment)
}

/// Batch index schedule for one epoch: a seed-deterministic shuffle cut
/// into `batch_size` chunks (the last partial chunk is kept).
pub fn batch_schedule(indices: &[usize], batch_size: usize, seed: u64, epoch: usize, tag: u64) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    let mut rng = crate::util::stream(seed, &[tag, epoch as u64]);
    for i in (1..idx.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Batch-mean training-side and validation-side losses seen by the
    /// optimizer during the epoch.
    pub mean: LossReport,
    /// Fixed-probe evaluation after the epoch (comparable across
    /// epochs: same probe batch, same Monte-Carlo stream).
    pub eval: LossReport,
    pub batches: usize,
    pub second_order_skips: usize,
}

/// One alternating epoch: per batch, (1) a gradient-descent update of
/// the architecture (and, through the variance, the dropout logits),
/// then (2) an inner SGD step on the weights and logits.
pub fn search_epoch(
    network: &Network,
    state: &mut SearchState,
    data: &Dataset,
    split: &Split,
    mode: SearchMode,
    t_samples: usize,
    batch_size: usize,
    cfg: &BilevelConfig,
) -> Result<EpochReport> {
    cfg.validate()?;
    let epoch = state.epoch;
    let n_data = split.train.len();
    let shape = network.spec.input_shape;
    let train_batches = batch_schedule(&split.train, batch_size, state.base_seed, epoch, 0x7262);
    let valid_batches = batch_schedule(&split.valid, batch_size, state.base_seed, epoch, 0x7663);

    let mut sums = LossReport::default();
    let mut n_batches = 0;
    let mut skips = 0;
    for (i, tb) in train_batches.iter().enumerate() {
        let vb = &valid_batches[i % valid_batches.len()];
        let train_x = data.batch_tensor(tb, shape)?;
        let train_y = data.batch_labels(tb);
        let valid_x = data.batch_tensor(vb, shape)?;
        let valid_y = data.batch_labels(vb);

        let train_seed = mix_seed(state.base_seed, &[0x61, epoch as u64, i as u64]);
        let valid_seed = mix_seed(state.base_seed, &[0x62, epoch as u64, i as u64]);
        let inner_seed = mix_seed(state.base_seed, &[0x63, epoch as u64, i as u64]);

        let ag = arch_gradient(
            network,
            &state.store,
            &train_x,
            &train_y,
            &valid_x,
            &valid_y,
            mode,
            t_samples,
            n_data,
            cfg,
            train_seed,
            valid_seed,
        )?;
        skips += usize::from(ag.second_order_skipped);
        if cfg.alpha_lr != 0.0 {
            for (id, g) in &ag.grads {
                let mut v = state.store.get(*id).clone();
                v.axpy_in_place(-cfg.alpha_lr, g);
                state.store.set(*id, v);
            }
        }

        let (ce_train, l_mc) = inner_step(
            network,
            state,
            &train_x,
            &train_y,
            mode,
            n_data,
            cfg,
            inner_seed,
        )?;

        let report = LossReport::new(ce_train, l_mc, ag.valid_fragment.0, ag.valid_fragment.1);
        sums.ce_train += report.ce_train;
        sums.l_mc += report.l_mc;
        sums.ce_valid += report.ce_valid;
        sums.pred_var += report.pred_var;
        sums.total_train += report.total_train;
        sums.total_valid += report.total_valid;
        n_batches += 1;
    }
    let inv = 1.0 / n_batches.max(1) as f64;
    let mean = LossReport {
        ce_train: sums.ce_train * inv,
        l_mc: sums.l_mc * inv,
        ce_valid: sums.ce_valid * inv,
        pred_var: sums.pred_var * inv,
        total_train: sums.total_train * inv,
        total_valid: sums.total_valid * inv,
    };

    state.epoch += 1;
    let eval = probe_eval(network, &state.store, data, split, mode, t_samples, state.base_seed)?;
    Ok(EpochReport {
        // One-based: "after this many completed epochs". The epoch-0 row
        // of a run is the pre-training probe evaluation.
        epoch: state.epoch,
        mean,
        eval,
        batches: n_batches,
        second_order_skips: skips,
    })
}

/// Loss evaluation on a fixed probe with a fixed Monte-Carlo stream, so
/// trajectories are comparable across epochs. Used for the epoch-0
/// baseline row as well. Both probe losses are per-sample means, so the
/// chunk-weighted values equal the full-probe values.
pub fn probe_eval(
    network: &Network,
    store: &ParamStore,
    data: &Dataset,
    split: &Split,
    mode: SearchMode,
    t_samples: usize,
    base_seed: u64,
) -> Result<LossReport> {
    let probe: Vec<usize> = split.valid.iter().copied().take(PROBE_LIMIT).collect();
    let train_probe: Vec<usize> = split.train.iter().copied().take(PROBE_LIMIT).collect();
    let shape = network.spec.input_shape;
    let eval_seed = mix_seed(base_seed, &[0xe0a1]);

    let (mut ce_valid, mut pred_var) = (0.0, 0.0);
    let total_v = probe.len().max(1) as f64;
    for c in probe.chunks(PROBE_CHUNK) {
        let vx = data.batch_tensor(c, shape)?;
        let vy = data.batch_labels(c);
        let (vtape, vvars) = valid_loss(network, store, &vx, &vy, mode, t_samples, eval_seed)?;
        let (ce, var) = vvars.report_fragment(&vtape);
        let w = c.len() as f64 / total_v;
        ce_valid += w * ce;
        pred_var += w * var;
    }
    let (mut ce_train, mut l_mc) = (0.0, 0.0);
    let total_t = train_probe.len().max(1) as f64;
    for c in train_probe.chunks(PROBE_CHUNK) {
        let tx = data.batch_tensor(c, shape)?;
        let ty = data.batch_labels(c);
        let (ttape, tvars) = train_loss(network, store, &tx, &ty, mode, split.train.len(), eval_seed)?;
        let (ce, mc) = tvars.report_fragment(&ttape);
        let w = c.len() as f64 / total_t;
        ce_train += w * ce;
        l_mc += w * mc;
    }
    Ok(LossReport::new(ce_train, l_mc, ce_valid, pred_var))
}

/// Probe batch cap for spectra and trajectory evaluations.
pub const PROBE_LIMIT: usize = 256;

pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h = h
            .rotate_left(23)
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(p ^ 0x94d0_49bb_1331_11eb);
    }
    h
}

// ── Spectral landscapes ──────────────────────────────────────────────

/// How the spectra probe is evaluated: a fixed set of chunks, each a
/// batch tensor with its labels and probe weight. Both probe losses are
/// per-sample means, so the chunk-weighted gradient equals the
/// full-probe gradient (batch-norm statistics are taken per chunk,
/// which keeps single evaluations bounded and is the same fixed loss at
/// every epoch).
struct ProbeChunks {
    chunks: Vec<(Tensor, Vec<usize>, f64)>,
}

impl ProbeChunks {
    fn build(data: &Dataset, indices: &[usize], shape: [usize; 3], chunk: usize) -> Result<Self> {
        let total = indices.len().max(1) as f64;
        let mut chunks = Vec::new();
        for c in indices.chunks(chunk.max(1)) {
            chunks.push((
                data.batch_tensor(c, shape)?,
                data.batch_labels(c),
                c.len() as f64 / total,
            ));
        }
        Ok(ProbeChunks { chunks })
    }
}

/// Validation loss over the architecture logits at a frozen snapshot:
/// the surface whose dominant eigenvalue diagnoses flatness of the
/// search.
pub struct AlphaValidLandscape<'a> {
    network: &'a Network,
    store: &'a ParamStore,
    probe: ProbeChunks,
    mode: SearchMode,
    t_samples: usize,
    mc_seed: u64,
}

impl LossLandscape for AlphaValidLandscape<'_> {
    fn dim(&self) -> usize {
        self.store.class_len(ParamClass::Alpha)
    }

    fn grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut store = self.store.clone();
        store.unflatten_class(ParamClass::Alpha, params);
        let mut acc = vec![0.0; self.dim()];
        for (x, labels, weight) in &self.probe.chunks {
            let (tape, vars) =
                valid_loss(self.network, &store, x, labels, self.mode, self.t_samples, self.mc_seed)?;
            let grads = tape.backward_scalar(vars.total)?;
            for (a, g) in acc.iter_mut().zip(grads.flatten_class(&store, ParamClass::Alpha)) {
                *a += weight * g;
            }
        }
        Ok(acc)
    }
}

/// Training loss over the weights at a frozen snapshot.
pub struct WTrainLandscape<'a> {
    network: &'a Network,
    store: &'a ParamStore,
    probe: ProbeChunks,
    mode: SearchMode,
    n_data: usize,
    mask_seed: u64,
}

impl LossLandscape for WTrainLandscape<'_> {
    fn dim(&self) -> usize {
        self.store.class_len(ParamClass::Weight)
    }

    fn grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut store = self.store.clone();
        store.unflatten_class(ParamClass::Weight, params);
        let mut acc = vec![0.0; self.dim()];
        for (x, labels, weight) in &self.probe.chunks {
            let (tape, vars) =
                train_loss(self.network, &store, x, labels, self.mode, self.n_data, self.mask_seed)?;
            let grads = tape.backward_scalar(vars.total)?;
            for (a, g) in acc.iter_mut().zip(grads.flatten_class(&store, ParamClass::Weight)) {
                *a += weight * g;
            }
        }
        Ok(acc)
    }
}

/// Probe evaluation chunk width for the spectra landscapes.
pub const PROBE_CHUNK: usize = 32;

/// Dominant eigenvalues of both Hessians at the current state, on the
/// fixed probe batch with frozen Monte-Carlo noise.
#[allow(clippy::too_many_arguments)]
pub fn spectrum_snapshot(
    network: &Network,
    store: &ParamStore,
    data: &Dataset,
    split: &Split,
    mode: SearchMode,
    t_samples: usize,
    epoch: usize,
    base_seed: u64,
    iters: usize,
    tol: f64,
) -> Result<SpectralReport> {
    let probe: Vec<usize> = split.valid.iter().copied().take(PROBE_LIMIT).collect();
    let train_probe: Vec<usize> = split.train.iter().copied().take(PROBE_LIMIT).collect();
    let shape = network.spec.input_shape;

    let alpha_landscape = AlphaValidLandscape {
        network,
        store,
        probe: ProbeChunks::build(data, &probe, shape, PROBE_CHUNK)?,
        mode,
        t_samples,
        mc_seed: mix_seed(base_seed, &[0x5bec, epoch as u64]),
    };
    let w_landscape = WTrainLandscape {
        network,
        store,
        probe: ProbeChunks::build(data, &train_probe, shape, PROBE_CHUNK)?,
        mode,
        n_data: split.train.len(),
        mask_seed: mix_seed(base_seed, &[0x5bed, epoch as u64]),
    };
    let alpha_params = store.flatten_class(ParamClass::Alpha);
    let w_params = store.flatten_class(ParamClass::Weight);
    let mut rng = crate::util::stream(base_seed, &[0x5bee, epoch as u64]);
    spectral::track_spectrum(
        epoch,
        &alpha_landscape,
        &alpha_params,
        &w_landscape,
        &w_params,
        iters,
        tol,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Gradients;
    use crate::searchspace::{
        CandidateOp, DropoutPlacement, FwdOptions, NetworkSpec, OpCatalog, PassVars,
    };
    use crate::uncertainty::DropoutParams;
    use crate::util::{assert_close, rel_close, seeded_rng};
    use rand::Rng;

    /// Plain linear classifier as a forward model: probs are the
    /// softmax of `x w`, no dropout anywhere.
    struct LinearModel {
        w: ParamId,
        dim: usize,
        classes: usize,
        dropout: DropoutParams,
    }

    impl LinearModel {
        fn new(store: &mut ParamStore, dim: usize, classes: usize, init: &[f64]) -> Self {
            let w = store.register(
                "lin.w",
                ParamClass::Weight,
                Tensor::new(vec![dim, classes], init.to_vec()).unwrap(),
            );
            LinearModel {
                w,
                dim,
                classes,
                dropout: DropoutParams::empty(),
            }
        }
    }

    impl ForwardModel for LinearModel {
        fn forward_on(
            &self,
            tape: &mut Tape,
            store: &ParamStore,
            x: &Tensor,
            _opts: FwdOptions,
        ) -> crate::error::Result<PassVars> {
            let b = x.shape()[0];
            let xv = tape.constant(x.clone())?;
            let flat = tape.reshape(xv, vec![b, self.dim])?;
            let wv = tape.param(store, self.w)?;
            let logits = tape.matmul(flat, wv)?;
            let probs = tape.softmax(logits)?;
            Ok(PassVars {
                logits,
                probs,
                bn_updates: vec![],
                reg_sites: vec![],
                cell_nodes: vec![],
                cell_outputs: vec![],
            })
        }

        fn dropout_params(&self) -> &DropoutParams {
            &self.dropout
        }

        fn classes(&self) -> usize {
            self.classes
        }

        fn input_shape(&self) -> [usize; 3] {
            [self.dim, 1, 1]
        }
    }

    fn unit_batch(dim: usize, rows: usize) -> Tensor {
        // Identity-ish rows so logits are readable.
        let mut data = vec![0.0; rows * dim];
        for r in 0..rows {
            data[r * dim + (r % dim)] = 1.0;
        }
        Tensor::new(vec![rows, dim, 1, 1], data).unwrap()
    }

    #[test]
    fn uniform_predictions_cost_log_c() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 3, 4, &[0.0; 12]);
        let x = unit_batch(3, 3);
        let (tape, vars) = train_loss(&model, &store, &x, &[0, 1, 2], SearchMode::Darts, 3, 1).unwrap();
        let (ce, l_mc) = vars.report_fragment(&tape);
        assert_close(ce, 4f64.ln(), 1e-12);
        assert_eq!(l_mc, 0.0);
        assert_close(tape.value(vars.total).item(), ce, 0.0);
    }

    #[test]
    fn near_one_hot_predictions_cost_almost_nothing() {
        // Big aligned logits: the model is confident and right.
        let mut w = vec![0.0; 4];
        w[0] = 30.0; // class 0 for dim 0
        w[3] = 30.0; // class 1 for dim 1
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &w);
        let x = unit_batch(2, 2);
        let (tape, vars) = train_loss(&model, &store, &x, &[0, 1], SearchMode::Darts, 2, 1).unwrap();
        let (ce, _) = vars.report_fragment(&tape);
        assert!(ce < 1e-9, "ce {ce}");
    }

    #[test]
    fn report_totals_are_exact_sums() {
        let r = LossReport::new(0.3, -0.01, 0.7, 0.2);
        assert!((r.total_train - (r.ce_train + r.l_mc)).abs() < 1e-12);
        assert!((r.total_valid - (r.ce_valid + r.pred_var)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_model_has_zero_variance_and_plain_ce() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &[0.4, -0.2, 0.1, 0.3]);
        let x = unit_batch(2, 4);
        let y = [0, 1, 0, 1];
        // Plain mode: single pass, no variance.
        let (tape, vars) = valid_loss(&model, &store, &x, &y, SearchMode::Darts, 0, 9).unwrap();
        assert_eq!(vars.pred_var_value, 0.0);
        assert_eq!(
            tape.value(vars.total).item(),
            tape.value(vars.ce).item()
        );
        // Stochastic mode over a model without dropout: T identical
        // samples, so the variance term collapses.
        let (tape2, vars2) = valid_loss(&model, &store, &x, &y, SearchMode::Mudarts, 4, 9).unwrap();
        assert!(vars2.pred_var_value.abs() < 1e-12);
        assert_close(
            tape2.value(vars2.total).item(),
            tape2.value(vars2.ce).item(),
            1e-12,
        );
        assert_close(
            tape.value(vars.ce).item(),
            tape2.value(vars2.ce).item(),
            1e-12,
        );
    }

    #[test]
    fn valid_report_matches_manual_recomputation() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &[0.4, -0.2, 0.1, 0.3]);
        let x = unit_batch(2, 2);
        let (tape, vars) = valid_loss(&model, &store, &x, &[0, 1], SearchMode::Mudarts, 3, 5).unwrap();
        let (ce, var) = vars.report_fragment(&tape);
        let total = tape.value(vars.total).item();
        assert_close(total, ce + var, 1e-12);
    }

    #[test]
    fn stochastic_valid_requires_two_samples() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &[0.0; 4]);
        let x = unit_batch(2, 2);
        assert!(matches!(
            valid_loss(&model, &store, &x, &[0, 1], SearchMode::Mudarts, 1, 5),
            Err(crate::error::Error::VarianceNeedsSamples(1))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &[0.0; 4]);
        let x = unit_batch(2, 2);
        assert!(matches!(
            train_loss(&model, &store, &x, &[0, 2], SearchMode::Darts, 2, 1),
            Err(crate::error::Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn zero_xi_keeps_weights_bit_exact() {
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 2, 2, &[0.4, -0.2, 0.1, 0.3]);
        let x = unit_batch(2, 2);
        let cfg = BilevelConfig {
            xi: Some(0.0),
            ..BilevelConfig::default()
        };
        let (stepped, _, _) = virtual_step(&model, &store, &x, &[0, 1], SearchMode::Darts, 2, &cfg, 3).unwrap();
        assert_eq!(stepped.get(model.w).data(), store.get(model.w).data());
    }

    #[test]
    fn gradient_step_on_quadratic_gradient() {
        // grad of |w|^2/2 at w = 1 is 1; a 0.1 step lands on 0.9.
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::scalar(1.0));
        let mut grads = Gradients::new();
        grads.insert(id, Tensor::scalar(1.0));
        let stepped = stepped_weights(&store, &grads, 0.1);
        assert_close(stepped.get(id).item(), 0.9, 1e-15);
    }

    #[test]
    fn virtual_step_norm_identity() {
        // |w' - w| = xi * |grad| to 1e-10.
        let mut store = ParamStore::new();
        let model = LinearModel::new(&mut store, 3, 3, &[0.3, -0.5, 0.2, 0.7, 0.1, -0.4, 0.05, 0.6, -0.3]);
        let x = unit_batch(3, 6);
        let y = [0, 1, 2, 0, 1, 2];
        let cfg = BilevelConfig {
            xi: Some(0.07),
            ..BilevelConfig::default()
        };
        let (stepped, _, _) = virtual_step(&model, &store, &x, &y, SearchMode::Darts, 6, &cfg, 3).unwrap();
        let diff: f64 = stepped
            .get(model.w)
            .data()
            .iter()
            .zip(store.get(model.w).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let (tape, vars) = train_loss(&model, &store, &x, &y, SearchMode::Darts, 6, 3).unwrap();
        let grads = tape.backward_scalar(vars.total).unwrap();
        let g_norm = grads.class_norm2(&store, ParamClass::Weight);
        assert!((diff - 0.07 * g_norm).abs() < 1e-10);
    }

    // ── Bilevel algebra on analytic toys ─────────────────────────────

    /// Scalar bilinear toy: train = a*w, valid = w^2/2 + a*w.
    fn bilinear_fns(
        alpha: ParamId,
        w: ParamId,
    ) -> (
        impl Fn(&ParamStore) -> Result<LossEval>,
        impl Fn(&ParamStore) -> Result<LossEval>,
    ) {
        let train = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?;
            let wv = tape.param(s, w)?;
            let total = tape.mul(a, wv)?;
            let v = tape.value(total).item();
            Ok((tape, total, (v, 0.0)))
        };
        let valid = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?;
            let wv = tape.param(s, w)?;
            let sq = tape.square(wv)?;
            let half = tape.mul_const(sq, 0.5)?;
            let prod = tape.mul(a, wv)?;
            let total = tape.add(half, prod)?;
            let v = tape.value(total).item();
            Ok((tape, total, (v, 0.0)))
        };
        (train, valid)
    }

    #[test]
    fn bilinear_toy_matches_the_analytic_hypergradient() {
        // train = a w, valid = w^2/2 + a w, one virtual step of rate xi:
        //   w' = w - xi a
        //   dF/da = w' - xi (w' + a)
        let (a0, w0, xi) = (0.37, 1.21, 0.15);
        let mut store = ParamStore::new();
        let alpha = store.register("a", ParamClass::Alpha, Tensor::scalar(a0));
        let w = store.register("w", ParamClass::Weight, Tensor::scalar(w0));
        let (train, valid) = bilinear_fns(alpha, w);
        let cfg = BilevelConfig {
            xi: Some(xi),
            order: Order::Second,
            fd_scale: 0.01,
            ..BilevelConfig::default()
        };
        let ag = arch_gradient_core(&store, &cfg, &train, &valid).unwrap();
        let w_stepped = w0 - xi * a0;
        let expect = w_stepped - xi * (w_stepped + a0);
        let got = ag.grads.get(&alpha).unwrap().item();
        assert!((got - expect).abs() < 1e-3, "got {got}, expect {expect}");
        assert!(!ag.second_order_skipped);

        // xi = 0 collapses to the first-order gradient at (a, w).
        let cfg0 = BilevelConfig {
            xi: Some(0.0),
            ..cfg
        };
        let ag0 = arch_gradient_core(&store, &cfg0, &train, &valid).unwrap();
        assert_close(ag0.grads.get(&alpha).unwrap().item(), w0, 1e-12);
    }

    #[test]
    fn first_order_equals_gradient_at_stepped_weights() {
        let (a0, w0, xi) = (-0.4, 0.8, 0.05);
        let mut store = ParamStore::new();
        let alpha = store.register("a", ParamClass::Alpha, Tensor::scalar(a0));
        let w = store.register("w", ParamClass::Weight, Tensor::scalar(w0));
        let (train, valid) = bilinear_fns(alpha, w);
        let cfg = BilevelConfig {
            xi: Some(xi),
            order: Order::First,
            ..BilevelConfig::default()
        };
        let ag = arch_gradient_core(&store, &cfg, &train, &valid).unwrap();
        // Independent route: step manually, differentiate valid there.
        let (ttape, ttotal, _) = train(&store).unwrap();
        let tg = ttape.backward_scalar(ttotal).unwrap();
        let stepped = stepped_weights(&store, &tg, xi);
        let (vtape, vtotal, _) = valid(&stepped).unwrap();
        let vg = vtape.backward_scalar(vtotal).unwrap();
        assert!(
            (ag.grads.get(&alpha).unwrap().item() - vg.get(alpha, &store).item()).abs() < 1e-10
        );
    }

    /// Five-parameter smooth toy with a state-dependent mixed Hessian.
    fn smooth_toy(
        alpha: ParamId,
        w: ParamId,
        b: [f64; 6],
        c: [f64; 6],
        d: [f64; 3],
    ) -> (
        impl Fn(&ParamStore) -> Result<LossEval>,
        impl Fn(&ParamStore) -> Result<LossEval>,
    ) {
        let train = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?; // [1,2]
            let wv = tape.param(s, w)?; // [1,3]
            let bmat = tape.constant(Tensor::new(vec![2, 3], b.to_vec())?)?;
            let aw = tape.matmul(a, bmat)?; // [1,3]
            let lin = tape.mul(aw, wv)?;
            let t1 = tape.sum(lin)?;
            let w2 = tape.square(wv)?;
            let t2s = tape.sum(w2)?;
            let t2 = tape.mul_const(t2s, 0.5)?;
            let w3 = tape.mul(w2, wv)?;
            let cubic = tape.mul(aw, w3)?;
            let t3s = tape.sum(cubic)?;
            let t3 = tape.mul_const(t3s, 0.1)?;
            let total = tape.add(t1, t2)?;
            let total = tape.add(total, t3)?;
            let v = tape.value(total).item();
            Ok((tape, total, (v, 0.0)))
        };
        let valid = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?;
            let wv = tape.param(s, w)?;
            let dvec = tape.constant(Tensor::new(vec![1, 3], d.to_vec())?)?;
            let diff = tape.sub(wv, dvec)?;
            let sq = tape.square(diff)?;
            let v1s = tape.sum(sq)?;
            let v1 = tape.mul_const(v1s, 0.5)?;
            let cmat = tape.constant(Tensor::new(vec![2, 3], c.to_vec())?)?;
            let ac = tape.matmul(a, cmat)?;
            let lin = tape.mul(ac, wv)?;
            let v2 = tape.sum(lin)?;
            let a2 = tape.square(a)?;
            let v3s = tape.sum(a2)?;
            let v3 = tape.mul_const(v3s, 0.05)?;
            let total = tape.add(v1, v2)?;
            let total = tape.add(total, v3)?;
            let v = tape.value(total).item();
            Ok((tape, total, (v, 0.0)))
        };
        (train, valid)
    }

    #[test]
    fn second_order_matches_the_unrolled_oracle() {
        let mut rng = seeded_rng(314);
        for trial in 0..5u64 {
            let mut store = ParamStore::new();
            let alpha = store.register(
                "a",
                ParamClass::Alpha,
                Tensor::new(vec![1, 2], (0..2).map(|_| rng.gen_range(-0.7..0.7)).collect()).unwrap(),
            );
            let w = store.register(
                "w",
                ParamClass::Weight,
                Tensor::new(vec![1, 3], (0..3).map(|_| rng.gen_range(-0.7..0.7)).collect()).unwrap(),
            );
            let mut arr = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect() };
            let b: [f64; 6] = arr(6).try_into().unwrap();
            let c: [f64; 6] = arr(6).try_into().unwrap();
            let d: [f64; 3] = arr(3).try_into().unwrap();
            let (train, valid) = smooth_toy(alpha, w, b, c, d);
            let cfg = BilevelConfig {
                xi: Some(0.1),
                order: Order::Second,
                fd_scale: 0.01,
                ..BilevelConfig::default()
            };
            let ag = arch_gradient_core(&store, &cfg, &train, &valid).unwrap();
            let got = ag.grads.get(&alpha).unwrap();
            let oracle = unrolled_hypergradient(&store, alpha, 0.1, 1e-6, &train, &valid).unwrap();
            for (g, o) in got.data().iter().zip(oracle.iter()) {
                assert!(
                    rel_close(*g, *o, 1e-3, 1e-9),
                    "trial {trial}: {g} vs oracle {o}"
                );
            }
        }
    }

    #[test]
    fn vanished_validation_gradient_skips_the_correction() {
        // valid is constant in w: its weight gradient is exactly zero.
        let mut store = ParamStore::new();
        let alpha = store.register("a", ParamClass::Alpha, Tensor::scalar(0.5));
        let w = store.register("w", ParamClass::Weight, Tensor::scalar(1.0));
        let train = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?;
            let wv = tape.param(s, w)?;
            let total = tape.mul(a, wv)?;
            Ok((tape, total, (0.0, 0.0)))
        };
        let valid = move |s: &ParamStore| -> Result<LossEval> {
            let mut tape = Tape::new();
            let a = tape.param(s, alpha)?;
            let total = tape.square(a)?;
            Ok((tape, total, (0.0, 0.0)))
        };
        let cfg = BilevelConfig {
            xi: Some(0.1),
            order: Order::Second,
            ..BilevelConfig::default()
        };
        let ag = arch_gradient_core(&store, &cfg, &train, &valid).unwrap();
        assert!(ag.second_order_skipped);
    }

    // ── Epochs over a real (tiny) search network ─────────────────────

    fn tiny_setup(mode: SearchMode, seed: u64) -> (Network, SearchState, crate::harness::Dataset, Split) {
        let spec = NetworkSpec {
            n_cells: 1,
            n_nodes: 2,
            channels: 2,
            reduction_positions: vec![],
            input_shape: [2, 1, 1],
            classes: 2,
            dropout_sites: if mode.uses_dropout() {
                DropoutPlacement::ConvsAndClassifier
            } else {
                DropoutPlacement::None
            },
        };
        let catalog = OpCatalog::custom(vec![
            CandidateOp::SepConv3,
            CandidateOp::MaxPool3,
            CandidateOp::Identity,
            CandidateOp::Zero,
        ])
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let network = Network::build(spec, catalog, &mut store, &mut rng, 0.1, 1.0, 0.0, 0.1).unwrap();
        let data = crate::harness::generate(&crate::harness::DatasetSpec {
            source: crate::harness::DataSource::Synthetic {
                kind: crate::harness::SyntheticKind::TwoMoons,
                n: 48,
                noise: 0.2,
                seed: 5,
            },
            classes: 2,
            split_fraction: 0.5,
        })
        .unwrap();
        let split = crate::harness::split_dataset(data.n, 0.5, seed);
        let state = SearchState::new(store, seed);
        (network, state, data, split)
    }

    #[test]
    fn zero_learning_rates_leave_the_state_unchanged() {
        let (network, mut state, data, split) = tiny_setup(SearchMode::Mudarts, 7);
        let before = state.store.clone();
        let cfg = BilevelConfig {
            xi: Some(0.0),
            w_lr: 0.0,
            alpha_lr: 0.0,
            ..BilevelConfig::default()
        };
        search_epoch(&network, &mut state, &data, &split, SearchMode::Mudarts, 3, 8, &cfg).unwrap();
        for (id, p) in before.iter() {
            assert_eq!(
                state.store.get(id).data(),
                p.value.data(),
                "{} changed",
                p.name
            );
        }
        assert!(state.momentum.is_empty());
    }

    #[test]
    fn one_epoch_moves_alpha_and_weights() {
        let (network, mut state, data, split) = tiny_setup(SearchMode::Mudarts, 11);
        let alpha_before = state.store.get(network.arch.normal).clone();
        let cfg = BilevelConfig {
            w_lr: 0.05,
            alpha_lr: 0.05,
            ..BilevelConfig::default()
        };
        let report = search_epoch(&network, &mut state, &data, &split, SearchMode::Mudarts, 3, 8, &cfg).unwrap();
        assert_eq!(report.epoch, 1);
        assert!(report.batches > 0);
        assert_ne!(state.store.get(network.arch.normal).data(), alpha_before.data());
        assert!(report.mean.total_train.is_finite());
        assert!(report.eval.pred_var >= 0.0);
    }

    #[test]
    fn plain_mode_epochs_never_touch_uncertainty_paths() {
        let (network, mut state, data, split) = tiny_setup(SearchMode::Darts, 13);
        crate::uncertainty::counters::reset();
        let before = crate::uncertainty::counters::snapshot();
        let cfg = BilevelConfig {
            w_lr: 0.05,
            alpha_lr: 0.05,
            ..BilevelConfig::default()
        };
        search_epoch(&network, &mut state, &data, &split, SearchMode::Darts, 3, 8, &cfg).unwrap();
        let after = crate::uncertainty::counters::snapshot();
        assert_eq!(before, after);
    }

    #[test]
    fn epochs_are_deterministic_per_seed() {
        let run = || {
            let (network, mut state, data, split) = tiny_setup(SearchMode::Mudarts, 3);
            let cfg = BilevelConfig {
                w_lr: 0.05,
                alpha_lr: 0.05,
                ..BilevelConfig::default()
            };
            for _ in 0..2 {
                search_epoch(&network, &mut state, &data, &split, SearchMode::Mudarts, 3, 8, &cfg).unwrap();
            }
            state.store.flatten_class(ParamClass::Weight)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn network_arch_gradient_matches_unrolled_oracle_under_frozen_noise() {
        // End-to-end coherence check: with the Monte-Carlo noise frozen
        // to the same streams the production wrapper uses, the
        // second-order gradient of the full stochastic objective matches
        // finite differences of the exactly unrolled outer loss, for the
        // architecture logits and the dropout logits alike.
        let (network, state, data, split) = tiny_setup(SearchMode::Mudarts, 23);
        let shape = network.spec.input_shape;
        let tb: Vec<usize> = split.train.iter().copied().take(6).collect();
        let vb: Vec<usize> = split.valid.iter().copied().take(6).collect();
        let tx = data.batch_tensor(&tb, shape).unwrap();
        let ty = data.batch_labels(&tb);
        let vx = data.batch_tensor(&vb, shape).unwrap();
        let vy = data.batch_labels(&vb);
        let (train_seed, valid_seed) = (901u64, 902u64);
        let n_data = split.train.len();

        let train_at = |s: &ParamStore| -> Result<LossEval> {
            let (tape, vars) = train_loss(&network, s, &tx, &ty, SearchMode::Mudarts, n_data, train_seed)?;
            let f = vars.report_fragment(&tape);
            Ok((tape, vars.total, f))
        };
        let valid_at = |s: &ParamStore| -> Result<LossEval> {
            let (tape, vars) = valid_loss(&network, s, &vx, &vy, SearchMode::Mudarts, 4, valid_seed)?;
            let f = vars.report_fragment(&tape);
            Ok((tape, vars.total, f))
        };
        let cfg = BilevelConfig {
            xi: Some(0.05),
            order: Order::Second,
            fd_scale: 0.01,
            ..BilevelConfig::default()
        };
        let ag = arch_gradient_core(&state.store, &cfg, &train_at, &valid_at).unwrap();

        let mut checked = 0;
        for id in state
            .store
            .ids_of_class(ParamClass::Alpha)
            .into_iter()
            .chain(state.store.ids_of_class(ParamClass::DropoutLogit).into_iter().take(3))
        {
            let oracle =
                unrolled_hypergradient(&state.store, id, 0.05, 1e-5, &train_at, &valid_at).unwrap();
            let got = ag.grads.get(&id).unwrap();
            for (g, o) in got.data().iter().zip(oracle.iter()) {
                assert!(
                    rel_close(*g, *o, 1e-3, 1e-7),
                    "{}: {g} vs oracle {o}",
                    state.store.name(id)
                );
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn spectrum_snapshot_is_finite_and_repeatable() {
        let (network, state, data, split) = tiny_setup(SearchMode::Mudarts, 19);
        let one = spectrum_snapshot(&network, &state.store, &data, &split, SearchMode::Mudarts, 3, 0, 19, 10, 1e-3).unwrap();
        let two = spectrum_snapshot(&network, &state.store, &data, &split, SearchMode::Mudarts, 3, 0, 19, 10, 1e-3).unwrap();
        assert!(one.lambda_max_alpha.lambda.is_finite());
        assert!(one.lambda_max_w.lambda.is_finite());
        assert_eq!(one.lambda_max_alpha.lambda.to_bits(), two.lambda_max_alpha.lambda.to_bits());
        assert_eq!(one.lambda_max_w.lambda.to_bits(), two.lambda_max_w.lambda.to_bits());
    }
}
