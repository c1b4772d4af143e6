//! On-disk search state: a JSON manifest plus one blob file of
//! little-endian f64 arrays, each integrity-hashed. Reloading a
//! checkpoint reproduces forward outputs bit-exactly; the manifest's
//! config hash refuses mismatched configs.

use crate::autodiff::{ParamClass, ParamId, ParamStore, Tensor};
use crate::bilevel::{SearchMode, SearchState};
use crate::cli::config::hex_digest;
use crate::error::{Error, Result};
use crate::searchspace::DiscreteArchitecture;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.bin";
const MOMENTUM_PREFIX: &str = "momentum:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mixed,
    Discrete,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub class: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: SearchMode,
    pub model: ModelKind,
    pub epoch: usize,
    pub base_seed: u64,
    pub config_hash: String,
    /// Present for discrete (retrained) checkpoints.
    pub architecture: Option<DiscreteArchitecture>,
    pub arrays: Vec<ArrayEntry>,
}

fn class_tag(class: ParamClass) -> &'static str {
    match class {
        ParamClass::Weight => "weight",
        ParamClass::Alpha => "alpha",
        ParamClass::DropoutLogit => "dropout_logit",
        ParamClass::RunningStat => "running_stat",
    }
}

fn blob_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn blob_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Write the full numeric state under `dir`: every parameter (weights,
/// architecture logits, dropout logits, running statistics) plus the
/// inner optimizer's momentum buffers.
pub fn save_checkpoint(
    dir: &Path,
    state: &SearchState,
    mode: SearchMode,
    model: ModelKind,
    config_hash: &str,
    architecture: Option<&DiscreteArchitecture>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();

    let push = |name: String, class: &str, t: &Tensor, blob: &mut Vec<u8>, arrays: &mut Vec<ArrayEntry>| {
        let bytes = blob_bytes(t);
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        arrays.push(ArrayEntry {
            name,
            class: class.into(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: bytes.len(),
            sha256: hex_digest(&hasher.finalize()),
        });
        blob.extend_from_slice(&bytes);
    };

    for (id, param) in state.store.iter() {
        let _ = id;
        push(
            param.name.clone(),
            class_tag(param.class),
            &param.value,
            &mut blob,
            &mut arrays,
        );
    }
    for (id, m) in &state.momentum {
        push(
            format!("{MOMENTUM_PREFIX}{}", state.store.name(*id)),
            "momentum",
            m,
            &mut blob,
            &mut arrays,
        );
    }

    let manifest = Manifest {
        mode,
        model,
        epoch: state.epoch,
        base_seed: state.base_seed,
        config_hash: config_hash.to_string(),
        architecture: architecture.cloned(),
        arrays,
    };
    let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    std::fs::write(dir.join(ARRAYS_FILE), &blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Restore a checkpoint into a freshly built store. Every stored array
/// is integrity-checked and matched by name and shape against the
/// store; the manifest's config hash must equal `expect_config_hash`.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore, expect_config_hash: &str) -> Result<(Manifest, BTreeMap<ParamId, Tensor>)> {
    let manifest = read_manifest(dir)?;
    if manifest.config_hash != expect_config_hash {
        return Err(Error::ConfigHashMismatch {
            found: manifest.config_hash,
            expected: expect_config_hash.to_string(),
        });
    }
    let blob = std::fs::read(dir.join(ARRAYS_FILE))?;
    let mut momentum = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();

    for entry in &manifest.arrays {
        let end = entry.offset + entry.len;
        if end > blob.len() {
            return Err(Error::CheckpointCorrupt {
                array: entry.name.clone(),
            });
        }
        let bytes = &blob[entry.offset..end];
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        if hex_digest(&hasher.finalize()) != entry.sha256 {
            return Err(Error::CheckpointCorrupt {
                array: entry.name.clone(),
            });
        }
        let values = blob_f64(bytes);
        let tensor = Tensor::new(entry.shape.clone(), values).map_err(|_| Error::CheckpointShape {
            array: entry.name.clone(),
            found: entry.shape.clone(),
            expected: vec![entry.len / 8],
        })?;
        if let Some(param_name) = entry.name.strip_prefix(MOMENTUM_PREFIX) {
            if let Some(id) = store.id_by_name(param_name) {
                momentum.insert(id, tensor);
            }
            continue;
        }
        let id = store
            .id_by_name(&entry.name)
            .ok_or_else(|| Error::CheckpointMissing {
                array: entry.name.clone(),
            })?;
        if store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::CheckpointShape {
                array: entry.name.clone(),
                found: entry.shape.clone(),
                expected: store.get(id).shape().to_vec(),
            });
        }
        store.set(id, tensor);
        seen.insert(entry.name.clone());
    }
    for (_, param) in store.iter() {
        if !seen.contains(&param.name) {
            return Err(Error::CheckpointMissing {
                array: param.name.clone(),
            });
        }
    }
    Ok((manifest, momentum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamClass;

    fn tiny_state() -> SearchState {
        let mut store = ParamStore::new();
        store.register("w1", ParamClass::Weight, Tensor::from_vec(vec![1.5, -2.25]));
        store.register("alpha_normal", ParamClass::Alpha, Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        store.register("site.drop_logit", ParamClass::DropoutLogit, Tensor::scalar(-2.0));
        store.register("bn.run_mean", ParamClass::RunningStat, Tensor::from_vec(vec![0.0, 0.5]));
        let mut state = SearchState::new(store, 42);
        state.epoch = 3;
        let id = state.store.id_by_name("w1").unwrap();
        state.momentum.insert(id, Tensor::from_vec(vec![0.01, 0.02]));
        state
    }

    fn fresh_store_like(state: &SearchState) -> ParamStore {
        let mut store = ParamStore::new();
        for (_, p) in state.store.iter() {
            store.register(p.name.clone(), p.class, Tensor::zeros(p.value.shape()));
        }
        store
    }

    #[test]
    fn round_trip_restores_every_value() {
        let dir = tempfile::tempdir().unwrap();
        let state = tiny_state();
        save_checkpoint(dir.path(), &state, SearchMode::Mudarts, ModelKind::Mixed, "h123", None).unwrap();
        let mut store = fresh_store_like(&state);
        let (manifest, momentum) = load_checkpoint(dir.path(), &mut store, "h123").unwrap();
        assert_eq!(manifest.epoch, 3);
        assert_eq!(manifest.base_seed, 42);
        for (id, p) in state.store.iter() {
            assert_eq!(store.get(store.id_by_name(&p.name).unwrap()), state.store.get(id));
        }
        let w1 = store.id_by_name("w1").unwrap();
        assert_eq!(momentum.get(&w1).unwrap().data(), &[0.01, 0.02]);
    }

    #[test]
    fn corrupted_blob_names_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let state = tiny_state();
        save_checkpoint(dir.path(), &state, SearchMode::Darts, ModelKind::Mixed, "h", None).unwrap();
        let path = dir.path().join(ARRAYS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        // First array is w1; flip one byte inside it.
        bytes[3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let mut store = fresh_store_like(&state);
        match load_checkpoint(dir.path(), &mut store, "h") {
            Err(Error::CheckpointCorrupt { array }) => assert_eq!(array, "w1"),
            other => panic!("expected CheckpointCorrupt, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let state = tiny_state();
        save_checkpoint(dir.path(), &state, SearchMode::Darts, ModelKind::Mixed, "expected", None).unwrap();
        let mut store = fresh_store_like(&state);
        assert!(matches!(
            load_checkpoint(dir.path(), &mut store, "different"),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn shape_disagreement_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let state = tiny_state();
        save_checkpoint(dir.path(), &state, SearchMode::Darts, ModelKind::Mixed, "h", None).unwrap();
        let mut store = ParamStore::new();
        store.register("w1", ParamClass::Weight, Tensor::zeros(&[3]));
        for (_, p) in state.store.iter().skip(1) {
            store.register(p.name.clone(), p.class, Tensor::zeros(p.value.shape()));
        }
        assert!(matches!(
            load_checkpoint(dir.path(), &mut store, "h"),
            Err(Error::CheckpointShape { .. })
        ));
    }
}
