//! Data generation and loading, train/valid splitting, and the
//! input-SNR / parameter-noise perturbation protocols.
//!
//! Synthetic sources are desk-scale stand-ins for image corpora; all of
//! them standardize features to zero mean and unit variance per
//! dimension and are bit-deterministic for a fixed seed. File sources
//! cover big-endian IDX (magic 0x803 images / 0x801 labels) and
//! headerless CSV with the integer label in the last column.

use crate::autodiff::{ParamClass, ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

// ── Dataset ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoMoons,
    Blobs,
    Spirals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        images: String,
        labels: String,
    },
    Csv {
        path: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub classes: usize,
    /// Train share of the inner loss; the remainder is the validation
    /// half of the bi-level split.
    pub split_fraction: f64,
}

/// In-memory dataset: row-major features `[n, dim]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Assemble a `[batch, c, h, w]` tensor from sample indices; the
    /// feature dimension must equal `c * h * w`.
    pub fn batch_tensor(&self, idx: &[usize], shape: [usize; 3]) -> Result<Tensor> {
        let per = shape[0] * shape[1] * shape[2];
        if per != self.dim {
            return Err(Error::ShapeMismatch {
                op: "batch_tensor",
                expected: vec![self.dim],
                got: vec![per],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Disjoint, seed-deterministic index partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::util::stream(seed, &[0x5b17]);
    // Fisher-Yates, explicit for stability across rand versions.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let cut = ((n as f64) * fraction).round() as usize;
    Split {
        train: idx[..cut].to_vec(),
        valid: idx[cut..].to_vec(),
    }
}

// ── Generation ───────────────────────────────────────────────────────

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let ds = match &spec.source {
        DataSource::Synthetic { kind, n, noise, seed } => {
            if *n < 4 * spec.classes {
                return Err(Error::DatasetTooSmall {
                    need: 4 * spec.classes,
                    got: *n,
                });
            }
            let mut rng = crate::util::stream(*seed, &[0xda7a]);
            let (features, labels, dim) = match kind {
                SyntheticKind::TwoMoons => two_moons(*n, *noise, &mut rng),
                SyntheticKind::Blobs => blobs(*n, spec.classes, *noise, &mut rng),
                SyntheticKind::Spirals => spirals(*n, spec.classes, *noise, &mut rng),
            };
            let mut ds = Dataset {
                n: labels.len(),
                dim,
                features,
                labels,
                classes: spec.classes,
            };
            standardize(&mut ds);
            ds
        }
        DataSource::Idx { images, labels } => {
            let mut ds = load_idx(Path::new(images), Path::new(labels))?;
            ds.classes = spec.classes;
            standardize(&mut ds);
            ds
        }
        DataSource::Csv { path } => {
            let mut ds = load_csv(Path::new(path))?;
            ds.classes = spec.classes;
            standardize(&mut ds);
            ds
        }
    };
    for &l in &ds.labels {
        if l >= ds.classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: ds.classes,
            });
        }
    }
    Ok(ds)
}

fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, usize) {
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = std::f64::consts::PI * i as f64 / (n_outer.max(2) - 1) as f64;
        features.push(t.cos() + gauss(rng) * noise);
        features.push(t.sin() + gauss(rng) * noise);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = std::f64::consts::PI * i as f64 / (n_inner.max(2) - 1) as f64;
        features.push(1.0 - t.cos() + gauss(rng) * noise);
        features.push(0.5 - t.sin() + gauss(rng) * noise);
        labels.push(1);
    }
    (features, labels, 2)
}

fn blobs(n: usize, classes: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, usize) {
    // Centers on a circle, samples round-robin so no class is empty.
    let centers: Vec<(f64, f64)> = (0..classes)
        .map(|c| {
            let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
            (3.0 * a.cos(), 3.0 * a.sin())
        })
        .collect();
    let spread = if noise > 0.0 { noise } else { 0.5 };
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        features.push(centers[c].0 + gauss(rng) * spread);
        features.push(centers[c].1 + gauss(rng) * spread);
        labels.push(c);
    }
    (features, labels, 2)
}

fn spirals(n: usize, classes: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, usize) {
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let per = n / classes;
    for i in 0..n {
        let c = i % classes;
        let k = i / classes;
        let r = (k % per.max(1)) as f64 / per.max(1) as f64;
        let t = 3.0 * r * 2.0 * std::f64::consts::PI / 3.0 + 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        features.push(r * t.cos() + gauss(rng) * noise);
        features.push(r * t.sin() + gauss(rng) * noise);
        labels.push(c);
    }
    (features, labels, 2)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Zero mean, unit variance per dimension (population divisor).
/// Constant dimensions are centered only.
pub fn standardize(ds: &mut Dataset) {
    for j in 0..ds.dim {
        let mut mean = 0.0;
        for i in 0..ds.n {
            mean += ds.features[i * ds.dim + j];
        }
        mean /= ds.n as f64;
        let mut var = 0.0;
        for i in 0..ds.n {
            let d = ds.features[i * ds.dim + j] - mean;
            var += d * d;
        }
        var /= ds.n as f64;
        let std = var.sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 1.0 };
        for i in 0..ds.n {
            let v = &mut ds.features[i * ds.dim + j];
            *v = (*v - mean) * inv;
        }
    }
}

// ── IDX and CSV ──────────────────────────────────────────────────────

fn read_u32_be(r: &mut impl Read, offset: &mut u64) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::IdxParse {
        offset: *offset,
        reason: e.to_string(),
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(b))
}

/// Big-endian IDX pair: `u8` images `[n, rows, cols]` under magic
/// 0x00000803 and `u8` labels `[n]` under magic 0x00000801. Pixel
/// values are scaled to [0, 1]; classes are inferred from the labels.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut f = std::fs::File::open(images)?;
    let mut off = 0u64;
    let magic = read_u32_be(&mut f, &mut off)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_u32_be(&mut f, &mut off)? as usize;
    let rows = read_u32_be(&mut f, &mut off)? as usize;
    let cols = read_u32_be(&mut f, &mut off)? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    f.read_exact(&mut raw).map_err(|e| Error::IdxParse {
        offset: off,
        reason: format!("truncated image payload: {e}"),
    })?;

    let mut f = std::fs::File::open(labels)?;
    let mut loff = 0u64;
    let magic = read_u32_be(&mut f, &mut loff)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let ln = read_u32_be(&mut f, &mut loff)? as usize;
    if ln != n {
        return Err(Error::IdxParse {
            offset: loff,
            reason: format!("{ln} labels for {n} images"),
        });
    }
    let mut lraw = vec![0u8; ln];
    f.read_exact(&mut lraw).map_err(|e| Error::IdxParse {
        offset: loff,
        reason: format!("truncated label payload: {e}"),
    })?;

    let classes = lraw.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    Ok(Dataset {
        features: raw.iter().map(|&b| b as f64 / 255.0).collect(),
        labels: lraw.iter().map(|&b| b as usize).collect(),
        n,
        dim: rows * cols,
        classes,
    })
}

/// Writer for the same IDX pair; test fixtures round-trip through it.
pub fn write_idx(images: &Path, labels: &Path, data: &[u8], n: usize, rows: usize, cols: usize, label_bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), n * rows * cols);
    debug_assert_eq!(label_bytes.len(), n);
    let mut f = std::fs::File::create(images)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    f.write_all(data)?;
    let mut f = std::fs::File::create(labels)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(label_bytes)?;
    Ok(())
}

/// Headerless CSV: floats with the integer label in the last column.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::CsvParse {
                line: lineno + 1,
                reason: "need at least one feature and a label".into(),
            });
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::CsvParse {
                    line: lineno + 1,
                    reason: format!("ragged row: {d} features, expected {expect}"),
                })
            }
            _ => {}
        }
        for f in &fields[..d] {
            features.push(f.parse::<f64>().map_err(|e| Error::CsvParse {
                line: lineno + 1,
                reason: format!("bad feature `{f}`: {e}"),
            })?);
        }
        let label_str = fields[d];
        let label = label_str.parse::<usize>().map_err(|_| Error::CsvParse {
            line: lineno + 1,
            reason: format!("label `{label_str}` is not a non-negative integer"),
        })?;
        labels.push(label);
    }
    let dim = dim.ok_or(Error::CsvParse {
        line: 0,
        reason: "empty file".into(),
    })?;
    let n = labels.len();
    let classes = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Ok(Dataset {
        features,
        labels,
        n,
        dim,
        classes,
    })
}

// ── Noise protocols ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Decibel level; `None` means clean input.
    pub input_snr_db: Option<f64>,
    /// Std of additive parameter noise; `None` means clean weights.
    pub param_sigma: Option<f64>,
}

/// Additive Gaussian input noise at a target signal-to-noise ratio.
/// The noise power is the batch's mean square over 10^(snr/10); labels
/// are untouched; infinite SNR leaves the batch unchanged. Applied at
/// inference only.
pub fn add_input_noise(batch: &Tensor, snr_db: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if snr_db.is_infinite() {
        return batch.clone();
    }
    let signal_power = batch.data().iter().map(|v| v * v).sum::<f64>() / batch.len() as f64;
    let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
    let sd = noise_power.sqrt();
    let data = batch.data().iter().map(|&v| v + sd * gauss(rng)).collect();
    Tensor::new(batch.shape().to_vec(), data).expect("same shape")
}

/// `w <- w + sigma * g`, `g ~ N(0,1)` i.i.d. over every weight-class
/// parameter. Returns a perturbed copy; the original store is kept for
/// paired evaluation.
pub fn perturb_params(store: &ParamStore, sigma: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = store.clone();
    if sigma == 0.0 {
        return out;
    }
    for id in store.ids_of_class(ParamClass::Weight) {
        let noisy: Vec<f64> = store.get(id).data().iter().map(|&v| v + sigma * gauss(rng)).collect();
        out.set(id, Tensor::new(store.get(id).shape().to_vec(), noisy).expect("same shape"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{assert_close, seeded_rng};

    fn moons_spec(n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: DataSource::Synthetic {
                kind: SyntheticKind::TwoMoons,
                n,
                noise: 0.2,
                seed,
            },
            classes: 2,
            split_fraction: 0.5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&moons_spec(400, 7)).unwrap();
        let b = generate(&moons_spec(400, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&moons_spec(400, 8)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn blobs_cover_every_class() {
        let spec = DatasetSpec {
            source: DataSource::Synthetic {
                kind: SyntheticKind::Blobs,
                n: 60,
                noise: 0.3,
                seed: 1,
            },
            classes: 3,
            split_fraction: 0.5,
        };
        let ds = generate(&spec).unwrap();
        for c in 0..3 {
            assert!(ds.labels.iter().any(|&l| l == c), "class {c} empty");
        }
        assert!(ds.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn generation_standardizes_each_dimension() {
        let ds = generate(&moons_spec(500, 3)).unwrap();
        for j in 0..ds.dim {
            let mean: f64 = (0..ds.n).map(|i| ds.features[i * ds.dim + j]).sum::<f64>() / ds.n as f64;
            let var: f64 = (0..ds.n)
                .map(|i| (ds.features[i * ds.dim + j] - mean).powi(2))
                .sum::<f64>()
                / ds.n as f64;
            assert!(mean.abs() < 1e-9, "dim {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "dim {j} std {}", var.sqrt());
        }
    }

    #[test]
    fn too_small_request_is_rejected() {
        assert!(matches!(
            generate(&moons_spec(7, 1)),
            Err(Error::DatasetTooSmall { need: 8, got: 7 })
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = split_dataset(100, 0.5, 42);
        let b = split_dataset(100, 0.5, 42);
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 50);
        assert_eq!(a.valid.len(), 50);
        let mut all: Vec<usize> = a.train.iter().chain(a.valid.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_ne!(a, split_dataset(100, 0.5, 43));
    }

    #[test]
    fn idx_round_trips_through_writer_and_reader() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        // 4 images of 2x2.
        let pixels: Vec<u8> = (0..16).map(|i| (i * 16) as u8).collect();
        let labels = vec![0u8, 1, 1, 0];
        write_idx(&img, &lab, &pixels, 4, 2, 2, &labels).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.n, 4);
        assert_eq!(ds.dim, 4);
        assert_eq!(ds.labels, vec![0, 1, 1, 0]);
        for (i, &p) in pixels.iter().enumerate() {
            assert_close(ds.features[i], p as f64 / 255.0, 1e-15);
        }
    }

    #[test]
    fn truncated_idx_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        write_idx(&img, &lab, &[0u8; 16], 4, 2, 2, &[0, 1, 0, 1]).unwrap();
        // Chop the image payload.
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 3]).unwrap();
        match load_idx(&img, &lab) {
            Err(Error::IdxParse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected IdxParse, got {other:?}"),
        }
    }

    #[test]
    fn bad_idx_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        write_idx(&img, &lab, &[0u8; 4], 1, 2, 2, &[0]).unwrap();
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, &bytes).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::IdxParse { .. })));
    }

    #[test]
    fn csv_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "0.1,0.2,1\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.n, 1);
        assert_eq!(ds.dim, 2);
        assert_eq!(ds.labels, vec![1]);
        assert_close(ds.features[0], 0.1, 1e-15);
    }

    #[test]
    fn csv_rejects_ragged_rows_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0.1,0.2,1\n0.3,0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::CsvParse { line: 2, .. })));
        std::fs::write(&path, "0.1,0.2,1.5\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::CsvParse { line: 1, .. })));
    }

    #[test]
    fn infinite_snr_is_identity() {
        let batch = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut rng = seeded_rng(1);
        let out = add_input_noise(&batch, f64::INFINITY, &mut rng);
        assert_eq!(out, batch);
    }

    #[test]
    fn snr_definition_and_empirical_level() {
        // 20 dB means noise power = signal power / 100 by definition;
        // measure the realized ratio over a large batch.
        let mut rng = seeded_rng(77);
        let n = 100_000;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![n], data).unwrap();
        let signal_power = batch.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let noisy = add_input_noise(&batch, 20.0, &mut rng);
        let noise_power = batch
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(c, n)| (n - c) * (n - c))
            .sum::<f64>()
            / n as f64;
        let snr_db = 10.0 * (signal_power / noise_power).log10();
        assert!((snr_db - 20.0).abs() < 0.5, "empirical snr {snr_db}");
    }

    #[test]
    fn perturbation_magnitude_matches_chi_square_expectation() {
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::zeros(&[200]));
        let alpha = store.register("alpha", ParamClass::Alpha, Tensor::zeros(&[4]));
        let sigma = 0.05;
        let mut total = 0.0;
        let trials = 1000;
        let mut rng = seeded_rng(1234);
        for _ in 0..trials {
            let p = perturb_params(&store, sigma, &mut rng);
            total += p.get(id).data().iter().map(|v| v * v).sum::<f64>();
            // Non-weight classes stay untouched.
            assert_eq!(p.get(alpha).data(), store.get(alpha).data());
        }
        let mean = total / trials as f64;
        let expect = sigma * sigma * 200.0;
        assert!(
            (mean - expect).abs() / expect < 0.05,
            "mean {mean} vs {expect}"
        );
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut store = ParamStore::new();
        let id = store.register("w", ParamClass::Weight, Tensor::from_vec(vec![1.0, 2.0]));
        let mut rng = seeded_rng(5);
        let p = perturb_params(&store, 0.0, &mut rng);
        assert_eq!(p.get(id).data(), store.get(id).data());
    }
}
