//! Dataset plumbing: the FMX1 feature-file format, CSV manifests, stratified
//! k-fold splits, classification metrics, and a synthetic hierarchical
//! multimodal dataset generator for desk-scale verification.
//!
//! Feature files hold encoder outputs as 32-bit floats; all math upstream of
//! disk runs in f64.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FocaError, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"FMX1";

/// Write a row-major f32 matrix as `FMX1 | rows u32 LE | cols u32 LE | payload`.
pub fn write_feature_file(path: &Path, m: &Array2<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + m.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        if !v.is_finite() {
            return Err(FocaError::NonFinite {
                context: format!("feature file {}", path.display()),
            });
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read an FMX1 file; rejects bad magic, size mismatch, and non-finite values.
pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(FocaError::Malformed(format!(
            "feature file {} truncated: {} bytes, header needs 12",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(FocaError::Malformed(format!(
            "feature file {} has bad magic {:?}, expected \"FMX1\"",
            path.display(),
            &bytes[0..4]
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FocaError::Malformed("feature dimensions overflow".into()))?;
    if bytes.len() != expect {
        return Err(FocaError::Malformed(format!(
            "feature file {} size mismatch: {} bytes, {rows}x{cols} needs {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FocaError::NonFinite {
                context: format!("feature file {}", path.display()),
            });
        }
        data.push(v);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}

/// One manifest line: a labelled sample and where its two feature rows live.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub label: String,
    pub audio_path: String,
    pub audio_row: usize,
    pub image_path: String,
    pub image_row: usize,
}

/// Parsed manifest; feature paths are resolved relative to the manifest file.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for rec in rdr.deserialize::<ManifestRecord>() {
            records.push(rec?);
        }
        let manifest = Self {
            records,
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(path: &Path, records: &[ManifestRecord]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for rec in records {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(FocaError::Manifest("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.sample_id.as_str()) {
                return Err(FocaError::Manifest(format!(
                    "duplicate sample_id {:?}",
                    rec.sample_id
                )));
            }
        }
        if self.class_names().len() < 2 {
            return Err(FocaError::Manifest("fewer than 2 labels present".into()));
        }
        Ok(())
    }

    /// Sorted unique labels; class index = position in this list.
    pub fn class_names(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> =
            self.records.iter().map(|r| r.label.clone()).collect();
        set.into_iter().collect()
    }

    /// Pull every referenced feature row into memory, validating dimensions
    /// and row bounds. Errors name the offending record.
    pub fn load_features(&self) -> Result<LoadedDataset> {
        let mut cache: HashMap<PathBuf, Array2<f32>> = HashMap::new();
        let mut fetch = |base: &Path, rel: &str, row: usize, id: &str| -> Result<Array1<f64>> {
            let path = base.join(rel);
            if !cache.contains_key(&path) {
                let m = read_feature_file(&path)?;
                cache.insert(path.clone(), m);
            }
            let m = &cache[&path];
            if row >= m.nrows() {
                return Err(FocaError::Manifest(format!(
                    "sample {id:?}: row {row} out of bounds for {} ({} rows)",
                    path.display(),
                    m.nrows()
                )));
            }
            Ok(m.row(row).mapv(|v| v as f64))
        };

        let class_names = self.class_names();
        let class_index: HashMap<&str, usize> = class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        let mut audio_rows = Vec::with_capacity(self.records.len());
        let mut visual_rows = Vec::with_capacity(self.records.len());
        let mut labels = Vec::with_capacity(self.records.len());
        let mut ids = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let a = fetch(&self.base_dir, &rec.audio_path, rec.audio_row, &rec.sample_id)?;
            let v = fetch(&self.base_dir, &rec.image_path, rec.image_row, &rec.sample_id)?;
            audio_rows.push(a);
            visual_rows.push(v);
            labels.push(class_index[rec.label.as_str()]);
            ids.push(rec.sample_id.clone());
        }

        let stack = |rows: Vec<Array1<f64>>, what: &str| -> Result<Array2<f64>> {
            let d = rows[0].len();
            for (i, r) in rows.iter().enumerate() {
                if r.len() != d {
                    return Err(FocaError::Manifest(format!(
                        "sample {:?}: {what} feature dimension {} differs from {d}",
                        self.records[i].sample_id,
                        r.len()
                    )));
                }
            }
            let mut m = Array2::zeros((rows.len(), d));
            for (i, r) in rows.into_iter().enumerate() {
                m.row_mut(i).assign(&r);
            }
            Ok(m)
        };

        Ok(LoadedDataset {
            audio: stack(audio_rows, "audio")?,
            visual: stack(visual_rows, "visual")?,
            labels,
            class_names,
            sample_ids: ids,
        })
    }
}

/// All features in memory, one row per manifest record, labels as class indices.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub audio: Array2<f64>,
    pub visual: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// k disjoint index lists covering all samples, stratified per label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Indices of every fold except `test_fold`, in ascending order.
    pub fn train_indices(&self, test_fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != test_fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Deterministic stratified split: label groups are shuffled with a seeded
/// RNG (labels in sorted order, one stream) and dealt round-robin with a
/// cursor that runs on across labels, so fold sizes differ by at most 1
/// overall and per label.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    let labels: Vec<&str> = manifest.records.iter().map(|r| r.label.as_str()).collect();
    stratified_folds(&labels, k, seed)
}

pub fn stratified_folds(labels: &[&str], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    for (label, idxs) in &groups {
        if idxs.len() < k {
            return Err(FocaError::TooFewSamples {
                label: (*label).to_string(),
                count: idxs.len(),
                need: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for (_, mut idxs) in groups {
        idxs.shuffle(&mut rng);
        for i in idxs {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    }
    Ok(FoldSplit { folds })
}

/// accuracy = trace/total; macro-F1 averages per-class F1, skipping classes
/// with neither support nor predictions. Rows are actual, columns predicted.
pub fn metrics(confusion: &Array2<u64>) -> Result<(f64, f64)> {
    let c = confusion.nrows();
    if confusion.ncols() != c {
        return Err(FocaError::ShapeMismatch {
            context: "metrics".into(),
            detail: format!("confusion matrix is {}x{}", c, confusion.ncols()),
        });
    }
    let total: u64 = confusion.iter().sum();
    if total == 0 {
        return Err(FocaError::EmptyInput("all-zero confusion matrix".into()));
    }
    let trace: u64 = (0..c).map(|i| confusion[[i, i]]).sum();
    let accuracy = trace as f64 / total as f64;

    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    for i in 0..c {
        let support: u64 = (0..c).map(|j| confusion[[i, j]]).sum();
        let predicted: u64 = (0..c).map(|j| confusion[[j, i]]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        let tp = confusion[[i, i]] as f64;
        let p = if predicted > 0 {
            tp / predicted as f64
        } else {
            0.0
        };
        let r = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        f1_sum += f1;
        f1_count += 1;
    }
    Ok((accuracy, f1_sum / f1_count as f64))
}

/// Per-fold metrics plus the confusion matrix that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub test_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Cross-validation summary; std is the population standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

impl EvalReport {
    pub fn from_folds(
        mode: &str,
        seed: u64,
        class_names: Vec<String>,
        folds: Vec<FoldReport>,
    ) -> Self {
        let stat = |xs: Vec<f64>| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (mean_accuracy, std_accuracy) = stat(folds.iter().map(|f| f.accuracy).collect());
        let (mean_macro_f1, std_macro_f1) = stat(folds.iter().map(|f| f.macro_f1).collect());
        Self {
            mode: mode.to_string(),
            seed,
            class_names,
            folds,
            mean_accuracy,
            std_accuracy,
            mean_macro_f1,
            std_macro_f1,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parameters of the synthetic hierarchical dataset.
///
/// The label tree has `parents` x `leaves_per_parent` leaf classes. Visual
/// features carry only the parent prototype (coarse level), audio features
/// carry the leaf prototype (fine level) under heavier noise, so neither
/// modality suffices alone: visual collapses sibling leaves, audio blurs
/// everything a little.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub parents: usize,
    pub leaves_per_parent: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            parents: 5,
            leaves_per_parent: 2,
            d_audio: 64,
            d_visual: 64,
            noise_sigma: 0.5,
            seed: 42,
        }
    }
}

/// Prototype norm; pairwise prototype distances are then ~scale*sqrt(2).
const PROTO_SCALE: f64 = 2.0;
/// Audio noise is this multiple of the visual noise_sigma.
const AUDIO_NOISE_MULT: f64 = 1.5;

/// Generated dataset held in memory, prototypes included for oracle checks.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ManifestRecord>,
    pub audio: Array2<f32>,
    pub visual: Array2<f32>,
    /// Per-class audio prototype (distinct per leaf).
    pub audio_prototypes: Array2<f64>,
    /// Per-class visual prototype (shared between sibling leaves).
    pub visual_prototypes: Array2<f64>,
    pub class_names: Vec<String>,
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.d_audio < 16 || cfg.d_visual < 16 {
        return Err(FocaError::Malformed(format!(
            "feature dims must be >= 16, got audio {} visual {}",
            cfg.d_audio, cfg.d_visual
        )));
    }
    if cfg.noise_sigma < 0.0 || !cfg.noise_sigma.is_finite() {
        return Err(FocaError::Malformed("noise_sigma must be >= 0".into()));
    }
    if cfg.parents < 1 || cfg.leaves_per_parent < 1 || cfg.parents * cfg.leaves_per_parent < 2 {
        return Err(FocaError::Malformed("need at least 2 leaf classes".into()));
    }
    if cfg.n_per_class < 1 {
        return Err(FocaError::Malformed("n_per_class must be >= 1".into()));
    }

    let n_classes = cfg.parents * cfg.leaves_per_parent;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = |d: usize, rng: &mut ChaCha8Rng| -> Array1<f64> {
        let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        v * (PROTO_SCALE / n)
    };

    let mut parent_protos = Array2::zeros((cfg.parents, cfg.d_visual));
    for p in 0..cfg.parents {
        parent_protos.row_mut(p).assign(&unit(cfg.d_visual, &mut rng));
    }
    let mut leaf_protos = Array2::zeros((n_classes, cfg.d_audio));
    for c in 0..n_classes {
        leaf_protos.row_mut(c).assign(&unit(cfg.d_audio, &mut rng));
    }

    let total = n_classes * cfg.n_per_class;
    let mut audio = Array2::zeros((total, cfg.d_audio));
    let mut visual = Array2::zeros((total, cfg.d_visual));
    let mut records = Vec::with_capacity(total);
    let mut class_names = Vec::with_capacity(n_classes);
    let sigma_a = cfg.noise_sigma * AUDIO_NOISE_MULT;
    let sigma_v = cfg.noise_sigma;

    let mut row = 0;
    for p in 0..cfg.parents {
        for l in 0..cfg.leaves_per_parent {
            let c = p * cfg.leaves_per_parent + l;
            let name = format!("p{p}_l{l}");
            class_names.push(name.clone());
            for _ in 0..cfg.n_per_class {
                for (i, x) in audio.row_mut(row).iter_mut().enumerate() {
                    *x = (leaf_protos[[c, i]] + sigma_a * rng.sample::<f64, _>(StandardNormal))
                        as f32;
                }
                for (i, x) in visual.row_mut(row).iter_mut().enumerate() {
                    *x = (parent_protos[[p, i]] + sigma_v * rng.sample::<f64, _>(StandardNormal))
                        as f32;
                }
                records.push(ManifestRecord {
                    sample_id: format!("s{row:05}"),
                    label: name.clone(),
                    audio_path: "audio.fmx".into(),
                    audio_row: row,
                    image_path: "visual.fmx".into(),
                    image_row: row,
                });
                row += 1;
            }
        }
    }

    // Per-class visual prototype = the parent's prototype.
    let mut visual_protos = Array2::zeros((n_classes, cfg.d_visual));
    for c in 0..n_classes {
        visual_protos
            .row_mut(c)
            .assign(&parent_protos.row(c / cfg.leaves_per_parent));
    }

    Ok(SynthDataset {
        records,
        audio,
        visual,
        audio_prototypes: leaf_protos,
        visual_prototypes: visual_protos,
        class_names,
    })
}

/// Write feature files + manifest into `out_dir`; returns the manifest path.
pub fn write_synth_dataset(out_dir: &Path, ds: &SynthDataset) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    write_feature_file(&out_dir.join("audio.fmx"), &ds.audio)?;
    write_feature_file(&out_dir.join("visual.fmx"), &ds.visual)?;
    let manifest_path = out_dir.join("manifest.csv");
    DatasetManifest::write(&manifest_path, &ds.records)?;
    Ok(manifest_path)
}
