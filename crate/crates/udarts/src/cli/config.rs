//! Experiment configuration: one JSON document, exhaustively validated,
//! with defaults echoed into the run directory so every artifact is
//! reproducible from the echoed config and a seed.

use crate::bilevel::{BilevelConfig, SearchMode};
use crate::error::{Error, Result};
use crate::harness::{DataSource, DatasetSpec};
use crate::searchspace::{DropoutPlacement, NetworkSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_cells: usize,
    pub n_nodes: usize,
    pub channels: usize,
    pub reduction_positions: Vec<usize>,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    /// Retained ops per node at discretization.
    pub k: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_cells: 4,
            n_nodes: 4,
            channels: 8,
            reduction_positions: vec![1, 2],
            input_shape: [2, 1, 1],
            k: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct UncertaintyConfig {
    /// Monte-Carlo samples per validation evaluation.
    pub t_samples: usize,
    pub temperature: f64,
    pub tau_inverse: f64,
    pub prior_length_scale: f64,
    /// Initial dropout probability at every site.
    pub init_p: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            t_samples: 20,
            temperature: 0.1,
            tau_inverse: 0.0,
            prior_length_scale: 1.0,
            init_p: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Spectral checkpoint cadence; 0 disables mid-run spectra.
    pub spectra_every: usize,
    pub spectral_iters: usize,
    pub spectral_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 16,
            spectra_every: 5,
            spectral_iters: 20,
            spectral_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSweepConfig {
    pub input_snr_db: Vec<f64>,
    pub param_sigma: Vec<f64>,
    pub reps: usize,
}

impl Default for NoiseSweepConfig {
    fn default() -> Self {
        NoiseSweepConfig {
            input_snr_db: vec![40.0, 30.0, 20.0],
            param_sigma: vec![0.01, 0.05, 0.1],
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaConfig {
    pub lemma1_instances: usize,
    pub lemma3_instances: usize,
    pub jensen_points: usize,
    pub max_d: usize,
    pub max_n: usize,
    pub max_alpha_norm: f64,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        LemmaConfig {
            lemma1_instances: 100,
            lemma3_instances: 200,
            jensen_points: 10_000,
            max_d: 8,
            max_n: 64,
            max_alpha_norm: 0.95,
        }
    }
}

/// Optional inference-time perturbations for `evaluate`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub input_snr_db: Option<f64>,
    pub param_sigma: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: SearchMode,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub bilevel: BilevelConfig,
    pub uncertainty: UncertaintyConfig,
    pub search: SearchConfig,
    pub noise: NoiseSweepConfig,
    pub lemmas: LemmaConfig,
    pub evaluate: EvaluateConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: SearchMode::Mudarts,
            dataset: DatasetSpec {
                source: DataSource::Synthetic {
                    kind: crate::harness::SyntheticKind::TwoMoons,
                    n: 400,
                    noise: 0.2,
                    seed: 7,
                },
                classes: 2,
                split_fraction: 0.5,
            },
            network: NetworkConfig::default(),
            bilevel: BilevelConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            search: SearchConfig::default(),
            noise: NoiseSweepConfig::default(),
            lemmas: LemmaConfig::default(),
            evaluate: EvaluateConfig::default(),
            seeds: (1..=10).collect(),
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
            field: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, reason: String| Error::InvalidConfig {
            field: field.into(),
            reason,
        };
        self.network_spec().validate().map_err(|e| match e {
            Error::BadNetworkSpec(r) => invalid("network", r),
            other => other,
        })?;
        self.bilevel.validate()?;
        if self.dataset.classes < 2 {
            return Err(invalid("dataset.classes", "need at least 2 classes".into()));
        }
        if !(0.0 < self.dataset.split_fraction && self.dataset.split_fraction < 1.0) {
            return Err(invalid(
                "dataset.split_fraction",
                format!("must lie strictly in (0,1), got {}", self.dataset.split_fraction),
            ));
        }
        if self.uncertainty.temperature <= 0.0 {
            return Err(invalid(
                "uncertainty.temperature",
                "must be positive".into(),
            ));
        }
        if !(0.0 < self.uncertainty.init_p && self.uncertainty.init_p < 1.0) {
            return Err(invalid("uncertainty.init_p", "must lie strictly in (0,1)".into()));
        }
        if self.uncertainty.tau_inverse < 0.0 {
            return Err(invalid("uncertainty.tau_inverse", "must be non-negative".into()));
        }
        if self.mode.uses_dropout() && self.uncertainty.t_samples < 2 {
            return Err(invalid(
                "uncertainty.t_samples",
                "stochastic modes need at least 2 samples".into(),
            ));
        }
        if self.search.epochs == 0 || self.search.batch_size == 0 {
            return Err(invalid("search", "epochs and batch_size must be positive".into()));
        }
        if self.network.k == 0 || self.network.k > 2 + self.network.n_nodes.saturating_sub(1) {
            return Err(invalid(
                "network.k",
                format!("k={} exceeds the incoming edges of some node", self.network.k),
            ));
        }
        // k is bounded by the first node's two incoming edges.
        if self.network.k > 2 {
            return Err(invalid(
                "network.k",
                "the first intermediate node has only two incoming edges".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed".into()));
        }
        if self.noise.reps == 0 {
            return Err(invalid("noise.reps", "need at least one repetition".into()));
        }
        Ok(())
    }

    /// Concrete-dropout placement implied by the ablation mode.
    pub fn placement(&self) -> DropoutPlacement {
        if self.mode.uses_dropout() {
            DropoutPlacement::ConvsAndClassifier
        } else {
            DropoutPlacement::None
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            n_cells: self.network.n_cells,
            n_nodes: self.network.n_nodes,
            channels: self.network.channels,
            reduction_positions: self.network.reduction_positions.clone(),
            input_shape: self.network.input_shape,
            classes: self.dataset.classes,
            dropout_sites: self.placement(),
        }
    }

    /// Canonical serialization; echoed into every run directory.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash binding checkpoints to the experiment they belong to. The
    /// output directory names where artifacts land, not what the
    /// experiment is, so it is excluded.
    pub fn hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.output_dir = String::new();
        let json = serde_json::to_string(&canon)?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(hex_digest(&hasher.finalize()))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash().unwrap(), cfg.hash().unwrap());
        let mut other = ExperimentConfig::default();
        other.search.epochs = 49;
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn invalid_fields_are_named() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.split_fraction = 1.5;
        match cfg.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "dataset.split_fraction"),
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
        let mut cfg = ExperimentConfig::default();
        cfg.network.reduction_positions = vec![0];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field, .. }) if field == "network"));
    }

    #[test]
    fn mode_controls_dropout_placement() {
        let mut cfg = ExperimentConfig::default();
        cfg.mode = SearchMode::Darts;
        assert_eq!(cfg.placement(), DropoutPlacement::None);
        cfg.mode = SearchMode::DartsCd;
        assert_eq!(cfg.placement(), DropoutPlacement::ConvsAndClassifier);
        cfg.mode = SearchMode::Mudarts;
        assert_eq!(cfg.placement(), DropoutPlacement::ConvsAndClassifier);
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let cfg = ExperimentConfig::default();
        let json = cfg.canonical_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }
}
