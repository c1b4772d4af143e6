//! Subcommand implementations. One run directory per (mode, seed); every
//! artifact in it is a pure function of the echoed config and the seed.
//! Wall-clock timing and other non-reproducible notes go to `run.log`.

use crate::autodiff::{ParamStore, Tensor};
use crate::bilevel::{
    mix_seed, probe_eval, search_epoch, EpochReport, SearchMode, SearchState,
};
use crate::cli::checkpoint::{self, ModelKind};
use crate::cli::config::ExperimentConfig;
use crate::cli::report::{self, EvalRow, LossCsv, SpectraCsv, SweepCsv};
use crate::error::{Error, Result};
use crate::harness::{self, Dataset, Split};
use crate::searchspace::{
    discretize, DiscreteArchitecture, DiscreteNetwork, ForwardModel, FwdOptions, Network, OpCatalog,
};
use crate::uncertainty::{self, counters};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run_dir(cfg: &ExperimentConfig, out_override: Option<&Path>, seed: u64) -> PathBuf {
    let base = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    base.join(format!("{}_seed{}", cfg.mode.name(), seed))
}

fn seeds_for(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Vec<u64> {
    match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn worker_cap() -> usize {
    std::env::var("UDARTS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Run one closure per seed on up to `UDARTS_THREADS` workers. Each run
/// owns its directory; failures are collected and the first one wins.
fn for_each_seed<F>(seeds: &[u64], f: F) -> Result<()>
where
    F: Fn(u64) -> Result<()> + Sync,
{
    let cap = worker_cap().min(seeds.len()).max(1);
    if cap == 1 {
        for &s in seeds {
            f(s)?;
        }
        return Ok(());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failures = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..cap {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                if let Err(e) = f(seeds[i]) {
                    failures.lock().expect("failure list").push(e);
                    break;
                }
            });
        }
    });
    match failures.into_inner().expect("failure list").into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Model and parameters built deterministically from (config, seed).
pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<(Network, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = crate::util::stream(seed, &[0x1217]);
    let network = Network::build(
        cfg.network_spec(),
        OpCatalog::standard(),
        &mut store,
        &mut rng,
        cfg.uncertainty.temperature,
        cfg.uncertainty.prior_length_scale,
        cfg.uncertainty.tau_inverse,
        cfg.uncertainty.init_p,
    )?;
    Ok((network, store))
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Split)> {
    let data = harness::generate(&cfg.dataset)?;
    let split = harness::split_dataset(data.n, cfg.dataset.split_fraction, seed);
    Ok((data, split))
}

fn write_config_echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config_echo.json"), cfg.canonical_json()?)
    .map_err(Error::from)
}

// ── search ───────────────────────────────────────────────────────────

pub fn search(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds = seeds_for(cfg, seed_override);
    for_each_seed(&seeds, |seed| search_one(cfg, seed, out))
}

fn search_one(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let counters_before = counters::snapshot();
    let dir = run_dir(cfg, out, seed);
    write_config_echo(&dir, cfg)?;
    let config_hash = cfg.hash()?;

    let (data, split) = load_data(cfg, seed)?;
    let (network, store) = build_model(cfg, seed)?;
    let mut state = SearchState::new(store, seed);

    let mut losses = LossCsv::create(&dir.join("losses.csv"))?;
    let mut spectra = SpectraCsv::create(&dir.join("spectra.csv"))?;

    // Epoch 0: pre-training probe evaluation and spectra.
    let eval0 = probe_eval(
        &network,
        &state.store,
        &data,
        &split,
        cfg.mode,
        cfg.uncertainty.t_samples,
        seed,
    )?;
    losses.write_epoch(&EpochReport {
        epoch: 0,
        mean: eval0,
        eval: eval0,
        batches: 0,
        second_order_skips: 0,
    })?;
    if cfg.search.spectra_every > 0 {
        let rep = crate::bilevel::spectrum_snapshot(
            &network,
            &state.store,
            &data,
            &split,
            cfg.mode,
            cfg.uncertainty.t_samples,
            0,
            seed,
            cfg.search.spectral_iters,
            cfg.search.spectral_tol,
        )?;
        spectra.write_report(&rep)?;
    }

    for _ in 0..cfg.search.epochs {
        let report = search_epoch(
            &network,
            &mut state,
            &data,
            &split,
            cfg.mode,
            cfg.uncertainty.t_samples,
            cfg.search.batch_size,
            &cfg.bilevel,
        )?;
        losses.write_epoch(&report)?;
        let at_cadence = cfg.search.spectra_every > 0 && state.epoch % cfg.search.spectra_every == 0;
        let last = state.epoch == cfg.search.epochs;
        if at_cadence || (last && cfg.search.spectra_every > 0) {
            let rep = crate::bilevel::spectrum_snapshot(
                &network,
                &state.store,
                &data,
                &split,
                cfg.mode,
                cfg.uncertainty.t_samples,
                state.epoch,
                seed,
                cfg.search.spectral_iters,
                cfg.search.spectral_tol,
            )?;
            spectra.write_report(&rep)?;
            checkpoint::save_checkpoint(
                &dir.join("checkpoints").join(format!("epoch_{}", state.epoch)),
                &state,
                cfg.mode,
                ModelKind::Mixed,
                &config_hash,
                None,
            )?;
        }
    }

    checkpoint::save_checkpoint(&dir.join("checkpoint"), &state, cfg.mode, ModelKind::Mixed, &config_hash, None)?;

    let arch = discretize(
        &state.store,
        &network.arch,
        &network.catalog,
        network.spec.n_nodes,
        cfg.network.k,
    )?;
    std::fs::write(dir.join("architecture.json"), arch.to_json()?)?;

    let delta = {
        let after = counters::snapshot();
        counters::Snapshot {
            mask: after.mask - counters_before.mask,
            variance: after.variance - counters_before.variance,
            regularizer: after.regularizer - counters_before.regularizer,
            mc_predict: after.mc_predict - counters_before.mc_predict,
        }
    };
    if cfg.mode == SearchMode::Darts && delta.total() != 0 {
        return Err(Error::AcceptanceFailed(format!(
            "plain mode touched uncertainty paths: {delta:?}"
        )));
    }
    let mut log = std::fs::File::create(dir.join("run.log"))?;
    writeln!(log, "seed={seed} mode={} wall_s={:.3}", cfg.mode.name(), started.elapsed().as_secs_f64())?;
    writeln!(
        log,
        "uncertainty_calls mask={} variance={} regularizer={} mc_predict={}",
        delta.mask, delta.variance, delta.regularizer, delta.mc_predict
    )?;
    Ok(())
}

// ── train-final ──────────────────────────────────────────────────────

pub fn train_final(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds = seeds_for(cfg, seed_override);
    for_each_seed(&seeds, |seed| train_final_one(cfg, seed, out))
}

fn train_final_one(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let dir = run_dir(cfg, out, seed);
    let arch_path = dir.join("architecture.json");
    let text = std::fs::read_to_string(&arch_path).map_err(|_| Error::InvalidConfig {
        field: "architecture".into(),
        reason: format!("{} not found; run `search` first", arch_path.display()),
    })?;
    let arch = DiscreteArchitecture::from_json(&text)?;
    let config_hash = cfg.hash()?;

    let (data, split) = load_data(cfg, seed)?;
    let mut store = ParamStore::new();
    let mut rng = crate::util::stream(seed, &[0xf17a]);
    let model = DiscreteNetwork::build(
        cfg.network_spec(),
        OpCatalog::standard(),
        arch.clone(),
        &mut store,
        &mut rng,
        cfg.uncertainty.temperature,
        cfg.uncertainty.prior_length_scale,
        cfg.uncertainty.tau_inverse,
        cfg.uncertainty.init_p,
    )?;
    let mut state = SearchState::new(store, mix_seed(seed, &[0xf1]));

    let mut csv = LossCsv::create(&dir.join("final_losses.csv"))?;
    let shape = cfg.network.input_shape;
    for epoch in 0..cfg.search.epochs {
        let batches = crate::bilevel::batch_schedule(
            &split.train,
            cfg.search.batch_size,
            state.base_seed,
            epoch,
            0xf7b,
        );
        let mut sum_ce = 0.0;
        let mut sum_mc = 0.0;
        let mut n = 0;
        for (i, b) in batches.iter().enumerate() {
            let x = data.batch_tensor(b, shape)?;
            let y = data.batch_labels(b);
            let mask_seed = mix_seed(state.base_seed, &[epoch as u64, i as u64]);
            let (ce, mc) = crate::bilevel::inner_step(
                &model,
                &mut state,
                &x,
                &y,
                cfg.mode,
                split.train.len(),
                &cfg.bilevel,
                mask_seed,
            )?;
            sum_ce += ce;
            sum_mc += mc;
            n += 1;
        }
        state.epoch = epoch + 1;
        let inv = 1.0 / n.max(1) as f64;
        let eval = eval_fragment(&model, &state.store, &data, &split, cfg, seed)?;
        csv.write_epoch(&EpochReport {
            epoch: state.epoch,
            mean: crate::bilevel::LossReport::new(sum_ce * inv, sum_mc * inv, eval.0, eval.1),
            eval: crate::bilevel::LossReport::new(eval.2, eval.3, eval.0, eval.1),
            batches: n,
            second_order_skips: 0,
        })?;
    }

    checkpoint::save_checkpoint(
        &dir.join("final_checkpoint"),
        &state,
        cfg.mode,
        ModelKind::Discrete,
        &config_hash,
        Some(&arch),
    )?;
    Ok(())
}

fn eval_fragment<M: ForwardModel>(
    model: &M,
    store: &ParamStore,
    data: &Dataset,
    split: &Split,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let probe: Vec<usize> = split.valid.iter().copied().take(crate::bilevel::PROBE_LIMIT).collect();
    let train_probe: Vec<usize> = split.train.iter().copied().take(crate::bilevel::PROBE_LIMIT).collect();
    let shape = cfg.network.input_shape;
    let eval_seed = mix_seed(seed, &[0xe0a1]);
    let chunk = crate::bilevel::PROBE_CHUNK;

    let (mut ce_v, mut var) = (0.0, 0.0);
    let total_v = probe.len().max(1) as f64;
    for c in probe.chunks(chunk) {
        let vx = data.batch_tensor(c, shape)?;
        let vy = data.batch_labels(c);
        let (vtape, vvars) = crate::bilevel::valid_loss(
            model,
            store,
            &vx,
            &vy,
            cfg.mode,
            cfg.uncertainty.t_samples,
            eval_seed,
        )?;
        let (ce, pv) = vvars.report_fragment(&vtape);
        let w = c.len() as f64 / total_v;
        ce_v += w * ce;
        var += w * pv;
    }
    let (mut ce_t, mut mc) = (0.0, 0.0);
    let total_t = train_probe.len().max(1) as f64;
    for c in train_probe.chunks(chunk) {
        let tx = data.batch_tensor(c, shape)?;
        let ty = data.batch_labels(c);
        let (ttape, tvars) =
            crate::bilevel::train_loss(model, store, &tx, &ty, cfg.mode, split.train.len(), eval_seed)?;
        let (ce, m) = tvars.report_fragment(&ttape);
        let w = c.len() as f64 / total_t;
        ce_t += w * ce;
        mc += w * m;
    }
    Ok((ce_v, var, ce_t, mc))
}

// ── Rebuilding models from checkpoints ───────────────────────────────

pub enum ModelHandle {
    Mixed(Network),
    Discrete(DiscreteNetwork),
}

impl ForwardModel for ModelHandle {
    fn forward_on(
        &self,
        tape: &mut crate::autodiff::Tape,
        store: &ParamStore,
        x: &Tensor,
        opts: FwdOptions,
    ) -> Result<crate::searchspace::PassVars> {
        match self {
            ModelHandle::Mixed(m) => m.forward_on(tape, store, x, opts),
            ModelHandle::Discrete(m) => m.forward_on(tape, store, x, opts),
        }
    }

    fn dropout_params(&self) -> &uncertainty::DropoutParams {
        match self {
            ModelHandle::Mixed(m) => &m.dropout,
            ModelHandle::Discrete(m) => m.dropout(),
        }
    }

    fn classes(&self) -> usize {
        match self {
            ModelHandle::Mixed(m) => m.spec.classes,
            ModelHandle::Discrete(m) => m.spec().classes,
        }
    }

    fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelHandle::Mixed(m) => m.spec.input_shape,
            ModelHandle::Discrete(m) => m.spec().input_shape,
        }
    }
}

/// Rebuild the model named by a checkpoint manifest and restore its
/// numeric state.
pub fn load_model(cfg: &ExperimentConfig, seed: u64, ckpt_dir: &Path) -> Result<(ModelHandle, SearchState)> {
    let manifest = checkpoint::read_manifest(ckpt_dir)?;
    let config_hash = cfg.hash()?;
    match manifest.model {
        ModelKind::Mixed => {
            let (network, mut store) = build_model(cfg, seed)?;
            let (manifest, momentum) = checkpoint::load_checkpoint(ckpt_dir, &mut store, &config_hash)?;
            let mut state = SearchState::new(store, manifest.base_seed);
            state.epoch = manifest.epoch;
            state.momentum = momentum;
            Ok((ModelHandle::Mixed(network), state))
        }
        ModelKind::Discrete => {
            let arch = manifest.architecture.clone().ok_or_else(|| Error::InvalidConfig {
                field: "checkpoint".into(),
                reason: "discrete checkpoint without an architecture".into(),
            })?;
            let mut store = ParamStore::new();
            let mut rng = crate::util::stream(seed, &[0xf17a]);
            let model = DiscreteNetwork::build(
                cfg.network_spec(),
                OpCatalog::standard(),
                arch,
                &mut store,
                &mut rng,
                cfg.uncertainty.temperature,
                cfg.uncertainty.prior_length_scale,
                cfg.uncertainty.tau_inverse,
                cfg.uncertainty.init_p,
            )?;
            let (manifest, momentum) = checkpoint::load_checkpoint(ckpt_dir, &mut store, &config_hash)?;
            let mut state = SearchState::new(store, manifest.base_seed);
            state.epoch = manifest.epoch;
            state.momentum = momentum;
            Ok((ModelHandle::Discrete(model), state))
        }
    }
}

fn find_checkpoint(dir: &Path) -> Result<PathBuf> {
    for name in ["final_checkpoint", "checkpoint"] {
        let p = dir.join(name);
        if p.join(checkpoint::MANIFEST_FILE).exists() {
            return Ok(p);
        }
    }
    Err(Error::InvalidConfig {
        field: "checkpoint".into(),
        reason: format!("no checkpoint under {}; run `search` first", dir.display()),
    })
}

// ── evaluate ─────────────────────────────────────────────────────────

/// Accuracy of the Monte-Carlo predictive mean and the mean predictive
/// variance over the validation half, optionally under input noise.
/// Batch order is fixed so paired clean/noisy runs see the same batches.
pub fn evaluate_model<M: ForwardModel>(
    model: &M,
    store: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    t_samples: usize,
    batch_size: usize,
    seed: u64,
    snr_db: Option<f64>,
    tau_inverse: f64,
) -> Result<EvalRow> {
    let shape = model.input_shape();
    let mut correct = 0usize;
    let mut var_sum = 0.0;
    let mut var_batches = 0usize;
    for (bi, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let mut x = data.batch_tensor(chunk, shape)?;
        if let Some(snr) = snr_db {
            let mut rng = crate::util::stream(seed, &[0x5e0, bi as u64]);
            x = harness::add_input_noise(&x, snr, &mut rng);
        }
        let labels = data.batch_labels(chunk);
        let predicted: Vec<usize>;
        if model.has_dropout() {
            let mc = uncertainty::mc_predict(t_samples, mix_seed(seed, &[0x5e1, bi as u64]), |rng| {
                let mut tape = crate::autodiff::Tape::new();
                let opts = FwdOptions {
                    bn_batch_stats: false,
                    update_running: false,
                    dropout: crate::searchspace::DropoutMode::Sample(rng),
                };
                let vars = model.forward_on(&mut tape, store, &x, opts)?;
                Ok(tape.value(vars.probs).clone())
            })?;
            predicted = mc.predicted_classes();
            var_sum += uncertainty::predictive_variance(&mc, tau_inverse)?;
            var_batches += 1;
        } else {
            let mut tape = crate::autodiff::Tape::new();
            let vars = model.forward_on(&mut tape, store, &x, FwdOptions::eval())?;
            let probs = tape.value(vars.probs);
            let classes = model.classes();
            predicted = probs
                .data()
                .chunks(classes)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect();
        }
        correct += predicted.iter().zip(labels.iter()).filter(|(p, y)| p == y).count();
    }
    Ok(EvalRow {
        accuracy: correct as f64 / indices.len().max(1) as f64,
        pred_var: if var_batches > 0 {
            var_sum / var_batches as f64
        } else {
            0.0
        },
        n: indices.len(),
    })
}

pub fn evaluate(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds = seeds_for(cfg, seed_override);
    for_each_seed(&seeds, |seed| {
        let dir = run_dir(cfg, out, seed);
        let ckpt = find_checkpoint(&dir)?;
        let (model, state) = load_model(cfg, seed, &ckpt)?;
        let (data, split) = load_data(cfg, seed)?;

        let store = match cfg.evaluate.param_sigma {
            Some(sigma) => {
                let mut rng = crate::util::stream(seed, &[0x9a2a]);
                harness::perturb_params(&state.store, sigma, &mut rng)
            }
            None => state.store.clone(),
        };
        let row = evaluate_model(
            &model,
            &store,
            &data,
            &split.valid,
            cfg.uncertainty.t_samples,
            cfg.search.batch_size,
            mix_seed(seed, &[0xe7a1]),
            cfg.evaluate.input_snr_db,
            cfg.uncertainty.tau_inverse,
        )?;
        report::write_eval_csv(
            &dir.join("evaluate.csv"),
            cfg.evaluate.input_snr_db,
            cfg.evaluate.param_sigma,
            &row,
        )
    })
}

// ── spectra ──────────────────────────────────────────────────────────

pub fn spectra(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds = seeds_for(cfg, seed_override);
    for_each_seed(&seeds, |seed| {
        let dir = run_dir(cfg, out, seed);
        let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
        let ckpts = dir.join("checkpoints");
        if ckpts.is_dir() {
            for entry in std::fs::read_dir(&ckpts)? {
                let p = entry?.path();
                if let Some(epoch) = p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_prefix("epoch_"))
                    .and_then(|n| n.parse::<usize>().ok())
                {
                    dirs.push((epoch, p));
                }
            }
        }
        let final_ckpt = dir.join("checkpoint");
        if final_ckpt.join(checkpoint::MANIFEST_FILE).exists() {
            let manifest = checkpoint::read_manifest(&final_ckpt)?;
            if !dirs.iter().any(|(e, _)| *e == manifest.epoch) {
                dirs.push((manifest.epoch, final_ckpt));
            }
        }
        if dirs.is_empty() {
            return Err(Error::InvalidConfig {
                field: "checkpoint".into(),
                reason: format!("no checkpoints under {}", dir.display()),
            });
        }
        dirs.sort_by_key(|(e, _)| *e);

        let (data, split) = load_data(cfg, seed)?;
        let mut csv = SpectraCsv::create(&dir.join("spectra_recomputed.csv"))?;
        for (epoch, ckpt_dir) in dirs {
            let (model, state) = load_model(cfg, seed, &ckpt_dir)?;
            let network = match &model {
                ModelHandle::Mixed(n) => n,
                ModelHandle::Discrete(_) => {
                    return Err(Error::InvalidConfig {
                        field: "checkpoint".into(),
                        reason: "spectra needs mixed-network checkpoints".into(),
                    })
                }
            };
            let rep = crate::bilevel::spectrum_snapshot(
                network,
                &state.store,
                &data,
                &split,
                cfg.mode,
                cfg.uncertainty.t_samples,
                epoch,
                seed,
                cfg.search.spectral_iters,
                cfg.search.spectral_tol,
            )?;
            csv.write_report(&rep)?;
        }
        Ok(())
    })
}

// ── verify-lemmas ────────────────────────────────────────────────────

pub fn verify_lemmas(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seed = seed_override.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(1));
    let settings = crate::linoracle::VerificationSettings {
        lemma1_instances: cfg.lemmas.lemma1_instances,
        lemma3_instances: cfg.lemmas.lemma3_instances,
        jensen_points: cfg.lemmas.jensen_points,
        max_d: cfg.lemmas.max_d,
        max_n: cfg.lemmas.max_n,
        max_alpha_norm: cfg.lemmas.max_alpha_norm,
        fd_step: 1e-4,
    };
    let report = crate::linoracle::run_verification(seed, &settings)?;

    let base = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    std::fs::create_dir_all(&base)?;
    std::fs::write(base.join("lemmas.json"), serde_json::to_string_pretty(&report)?)?;

    // Gates: the appendix constants, the always-true bound, the Jensen
    // step, and the sign-regime grid check must all hold. The
    // eigenvalue census is reported, not gated.
    let c = &report.constants;
    let mut failures = Vec::new();
    if (c.max_sigma_d - 0.25).abs() > 1e-9 {
        failures.push(format!("max p(1-p) = {} != 0.25", c.max_sigma_d));
    }
    if (c.max_cubic - 0.0962).abs() > 1e-4 {
        failures.push(format!("max cubic = {} != 0.0962", c.max_cubic));
    }
    if (c.argmax_cubic - (3.0 - 3f64.sqrt()) / 6.0).abs() > 1e-6 {
        failures.push(format!("argmax cubic = {}", c.argmax_cubic));
    }
    if !report.lemma1.all_pass() {
        failures.push(format!(
            "spectral bound {}/{} psd {}/{}",
            report.lemma1.bound_passes,
            report.lemma1.instances,
            report.lemma1.psd_passes,
            report.lemma1.instances
        ));
    }
    if report.jensen.violations != 0 {
        failures.push(format!("jensen violations {}", report.jensen.violations));
    }
    if !report.lemma3.sigma_ud_grid_nonpositive {
        failures.push(format!(
            "sigma_ud grid max {} > 0",
            report.lemma3.sigma_ud_grid_max
        ));
    }
    if !failures.is_empty() {
        return Err(Error::AcceptanceFailed(failures.join("; ")));
    }
    Ok(())
}

// ── noise-sweep ──────────────────────────────────────────────────────

pub fn noise_sweep(cfg: &ExperimentConfig, seed_override: Option<u64>, out: Option<&Path>) -> Result<()> {
    let seeds = seeds_for(cfg, seed_override);
    for_each_seed(&seeds, |seed| {
        let dir = run_dir(cfg, out, seed);
        let ckpt = find_checkpoint(&dir)?;
        let (model, state) = load_model(cfg, seed, &ckpt)?;
        let (data, split) = load_data(cfg, seed)?;

        let mut csv = SweepCsv::create(&dir.join("noise_sweep.csv"))?;
        // Clean baseline, then the SNR x sigma grid; each cell repeats
        // with fresh noise but the same batch order.
        let mut cells: Vec<(Option<f64>, f64)> = vec![(None, 0.0)];
        for &snr in &cfg.noise.input_snr_db {
            for &sigma in &cfg.noise.param_sigma {
                cells.push((Some(snr), sigma));
            }
        }
        for (snr, sigma) in cells {
            let mut accs = Vec::with_capacity(cfg.noise.reps);
            let mut vars = Vec::with_capacity(cfg.noise.reps);
            for rep in 0..cfg.noise.reps {
                let store = if sigma > 0.0 {
                    let mut rng = crate::util::stream(seed, &[0x9a2a, rep as u64]);
                    harness::perturb_params(&state.store, sigma, &mut rng)
                } else {
                    state.store.clone()
                };
                let row = evaluate_model(
                    &model,
                    &store,
                    &data,
                    &split.valid,
                    cfg.uncertainty.t_samples,
                    cfg.search.batch_size,
                    mix_seed(seed, &[0x5235, rep as u64]),
                    snr,
                    cfg.uncertainty.tau_inverse,
                )?;
                accs.push(row.accuracy);
                vars.push(row.pred_var);
            }
            let (am, asd) = report::mean_std(&accs);
            let (vm, vsd) = report::mean_std(&vars);
            csv.write_cell(snr, sigma, cfg.noise.reps, am, asd, vm, vsd)?;
        }
        Ok(())
    })
}
