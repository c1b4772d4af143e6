//! Fixed-schema CSV writers. Every file starts with a version comment
//! line; floats print with Rust's shortest round-trip formatting, so a
//! rerun with the same config and seed is byte-identical. Timestamps go
//! to the side log, never into reports.

use crate::bilevel::EpochReport;
use crate::error::Result;
use crate::spectral::SpectralReport;
use std::io::Write;
use std::path::Path;

pub const LOSS_SCHEMA: &str = "# udarts losses v1; epoch 0 is the pre-training probe evaluation";
pub const SPECTRA_SCHEMA: &str = "# udarts spectra v1";
pub const EVAL_SCHEMA: &str = "# udarts evaluate v1";
pub const SWEEP_SCHEMA: &str = "# udarts noise-sweep v1";

pub struct LossCsv {
    out: std::fs::File,
}

impl LossCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::fs::File::create(path)?;
        writeln!(out, "{LOSS_SCHEMA}")?;
        writeln!(
            out,
            "epoch,ce_train,l_mc,ce_valid,pred_var,total_train,total_valid,eval_ce_train,eval_l_mc,eval_ce_valid,eval_pred_var"
        )?;
        Ok(LossCsv { out })
    }

    pub fn write_epoch(&mut self, r: &EpochReport) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.mean.ce_train,
            r.mean.l_mc,
            r.mean.ce_valid,
            r.mean.pred_var,
            r.mean.total_train,
            r.mean.total_valid,
            r.eval.ce_train,
            r.eval.l_mc,
            r.eval.ce_valid,
            r.eval.pred_var,
        )?;
        Ok(())
    }
}

pub struct SpectraCsv {
    out: std::fs::File,
}

impl SpectraCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::fs::File::create(path)?;
        writeln!(out, "{SPECTRA_SCHEMA}")?;
        writeln!(
            out,
            "epoch,lambda_max_alpha,alpha_residual,alpha_iterations,alpha_converged,lambda_max_w,w_residual,w_iterations,w_converged"
        )?;
        Ok(SpectraCsv { out })
    }

    pub fn write_report(&mut self, r: &SpectralReport) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lambda_max_alpha.lambda,
            r.lambda_max_alpha.residual,
            r.lambda_max_alpha.iterations,
            r.lambda_max_alpha.converged,
            r.lambda_max_w.lambda,
            r.lambda_max_w.residual,
            r.lambda_max_w.iterations,
            r.lambda_max_w.converged,
        )?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalRow {
    pub accuracy: f64,
    pub pred_var: f64,
    pub n: usize,
}

pub fn write_eval_csv(path: &Path, snr_db: Option<f64>, sigma: Option<f64>, row: &EvalRow) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "{EVAL_SCHEMA}")?;
    writeln!(out, "input_snr_db,param_sigma,n,accuracy,pred_var")?;
    writeln!(
        out,
        "{},{},{},{},{}",
        snr_db.map_or("inf".to_string(), |v| v.to_string()),
        sigma.map_or("0".to_string(), |v| v.to_string()),
        row.n,
        row.accuracy,
        row.pred_var,
    )?;
    Ok(())
}

pub struct SweepCsv {
    out: std::fs::File,
}

impl SweepCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::fs::File::create(path)?;
        writeln!(out, "{SWEEP_SCHEMA}")?;
        writeln!(
            out,
            "input_snr_db,param_sigma,reps,accuracy_mean,accuracy_std,pred_var_mean,pred_var_std"
        )?;
        Ok(SweepCsv { out })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn write_cell(
        &mut self,
        snr_db: Option<f64>,
        sigma: f64,
        reps: usize,
        acc_mean: f64,
        acc_std: f64,
        var_mean: f64,
        var_std: f64,
    ) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            snr_db.map_or("inf".to_string(), |v| v.to_string()),
            sigma,
            reps,
            acc_mean,
            acc_std,
            var_mean,
            var_std,
        )?;
        Ok(())
    }
}

/// Sample mean and standard deviation (population divisor).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
