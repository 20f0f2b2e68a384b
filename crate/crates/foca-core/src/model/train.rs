//! Adam training loop with early stopping, plus k-fold cross-validation.
//!
//! Everything is reproducible from (config, seed): fold splits, the
//! validation split, weight init, batch shuffles, and dropout masks all draw
//! from ChaCha streams keyed by seed, fold, epoch, and step. Batch gradients
//! are reduced in a fixed chunk order, so two runs with the same inputs
//! produce bit-identical parameters.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{metrics, EvalReport, FoldReport, FoldSplit, LoadedDataset};
use crate::error::{FocaError, Result};
use crate::model::{layers, loss_and_grads, Mode, ModelParams};

/// splitmix64 over all parts; used to derive independent seed streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E3779B97F4A7C15u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E3779B97F4A7C15).wrapping_add(z << 6);
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
    }
    z
}

const TAG_INIT: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_MASK: u64 = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout: f64,
    pub patience: usize,
    pub seed: u64,
    pub n_classes: usize,
    pub d_audio: usize,
    pub d_visual: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            max_epochs: 50,
            dropout: 0.3,
            patience: 5,
            seed: 42,
            n_classes: 2,
            d_audio: 768,
            d_visual: 768,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FocaError::Malformed("learning_rate must be finite".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.patience < 1 {
            return Err(FocaError::Malformed(
                "batch_size, max_epochs, patience must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FocaError::Malformed("dropout must be in [0, 1)".into()));
        }
        if self.n_classes < 2 {
            return Err(FocaError::Malformed("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Early-stopping bookkeeping for one fold.
#[derive(Debug, Clone, Serialize)]
pub struct FoldStats {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_loss: f64,
}

fn gather(
    ds: &LoadedDataset,
    idx: &[usize],
) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
    let mut audio = Array2::zeros((idx.len(), ds.audio.ncols()));
    let mut visual = Array2::zeros((idx.len(), ds.visual.ncols()));
    let mut labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        audio.row_mut(r).assign(&ds.audio.row(i));
        visual.row_mut(r).assign(&ds.visual.row(i));
        labels.push(ds.labels[i]);
    }
    (audio, visual, labels)
}

/// Mean cross-entropy over `indices`, dropout off, fixed-order reduction.
pub fn eval_mean_loss(
    params: &ModelParams,
    ds: &LoadedDataset,
    indices: &[usize],
) -> Result<f64> {
    const CHUNK: usize = 16;
    let losses: Vec<Result<f64>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for &i in chunk {
                let cache = params.forward_cached(ds.audio.row(i), ds.visual.row(i), None)?;
                sum += layers::cross_entropy(cache.logits().view(), ds.labels[i]);
            }
            Ok(sum)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / indices.len() as f64)
}

/// Argmax class per sample (ties resolve to the lowest index).
pub fn eval_predictions(
    params: &ModelParams,
    ds: &LoadedDataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    const CHUNK: usize = 16;
    let preds: Vec<Result<Vec<usize>>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let cache = params.forward_cached(ds.audio.row(i), ds.visual.row(i), None)?;
                let logits = cache.logits();
                let mut best = 0;
                for c in 1..logits.len() {
                    if logits[c] > logits[best] {
                        best = c;
                    }
                }
                out.push(best);
            }
            Ok(out)
        })
        .collect();
    let mut flat = Vec::with_capacity(indices.len());
    for p in preds {
        flat.extend(p?);
    }
    Ok(flat)
}

/// Confusion matrix (rows actual, columns predicted) over `indices`.
pub fn eval_confusion(
    params: &ModelParams,
    ds: &LoadedDataset,
    indices: &[usize],
) -> Result<Array2<u64>> {
    let preds = eval_predictions(params, ds, indices)?;
    let c = ds.n_classes();
    let mut conf = Array2::zeros((c, c));
    for (&i, &p) in indices.iter().zip(preds.iter()) {
        conf[[ds.labels[i], p]] += 1;
    }
    Ok(conf)
}

/// Train one fold: hold out a seeded 10% of the training pool for validation,
/// run Adam with early stopping on validation loss, and return the parameters
/// from the best-validation epoch.
pub fn train_single_fold(
    ds: &LoadedDataset,
    train_pool: &[usize],
    cfg: &TrainConfig,
    mode: Mode,
    fold: usize,
) -> Result<(ModelParams, FoldStats)> {
    cfg.validate()?;
    if train_pool.is_empty() {
        return Err(FocaError::EmptyInput("empty training pool".into()));
    }
    for class in 0..ds.n_classes() {
        if !train_pool.iter().any(|&i| ds.labels[i] == class) {
            return Err(FocaError::Training(format!(
                "class {:?} absent from training folds",
                ds.class_names[class]
            )));
        }
    }

    let mut pool = train_pool.to_vec();
    let mut val_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, fold as u64, TAG_VAL]));
    pool.shuffle(&mut val_rng);
    let n_val = (pool.len() / 10).max(1);
    if n_val >= pool.len() {
        return Err(FocaError::Training(
            "training pool too small to hold out validation samples".into(),
        ));
    }
    let (val_idx, train_idx) = pool.split_at(n_val);

    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, fold as u64, TAG_INIT]));
    let mut params = ModelParams::init(
        mode,
        cfg.d_audio,
        cfg.d_visual,
        cfg.n_classes,
        &mut init_rng,
    )?;
    let mut adam = Adam::new(cfg.learning_rate, params.param_count());

    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut patience_left = cfg.patience;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order = train_idx.to_vec();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.seed,
            fold as u64,
            TAG_SHUFFLE,
            epoch as u64,
        ]));
        order.shuffle(&mut shuffle_rng);

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (audio, visual, labels) = gather(ds, batch);
            let mask_base = mix_seed(&[cfg.seed, fold as u64, TAG_MASK, epoch as u64, step as u64]);
            let (loss, grads) = loss_and_grads(
                &params,
                &audio,
                &visual,
                &labels,
                Some((cfg.dropout, mask_base)),
            )?;
            if !loss.is_finite() {
                return Err(FocaError::NonFiniteLoss { fold, epoch });
            }
            let mut theta = params.flat();
            adam.step(&mut theta, &grads.flat());
            params.set_flat(&theta);
        }

        let val_loss = eval_mean_loss(&params, ds, val_idx)?;
        if !val_loss.is_finite() {
            return Err(FocaError::NonFiniteLoss { fold, epoch });
        }
        if std::env::var_os("FOCA_TRACE_LOSS").is_some() {
            let train_loss = eval_mean_loss(&params, ds, train_idx)?;
            eprintln!(
                "fold {fold} epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:.4}"
            );
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
            patience_left = cfg.patience;
        } else {
            patience_left -= 1;
            if patience_left == 0 {
                break;
            }
        }
    }

    Ok((
        best_params,
        FoldStats {
            best_epoch,
            epochs_run,
            best_val_loss: best_val,
        },
    ))
}

/// Cross-validated training: per-fold trained parameters plus the report.
pub struct TrainOutcome {
    pub report: EvalReport,
    pub fold_params: Vec<ModelParams>,
}

/// Train on k-1 folds and test on the held-out fold, rotating through all
/// folds; per-fold and averaged accuracy / macro-F1 in the report.
pub fn train(
    ds: &LoadedDataset,
    folds: &FoldSplit,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<TrainOutcome> {
    if ds.is_empty() {
        return Err(FocaError::EmptyInput("empty dataset".into()));
    }
    let mut fold_reports = Vec::with_capacity(folds.folds.len());
    let mut fold_params = Vec::with_capacity(folds.folds.len());
    for fold in 0..folds.folds.len() {
        let train_pool = folds.train_indices(fold);
        let (params, stats) = train_single_fold(ds, &train_pool, cfg, mode, fold)?;
        let test_idx = &folds.folds[fold];
        let confusion = eval_confusion(&params, ds, test_idx)?;
        let (accuracy, macro_f1) = metrics(&confusion)?;
        fold_reports.push(FoldReport {
            fold,
            accuracy,
            macro_f1,
            confusion: confusion
                .outer_iter()
                .map(|row| row.to_vec())
                .collect(),
            test_size: test_idx.len(),
            best_epoch: stats.best_epoch,
            epochs_run: stats.epochs_run,
        });
        fold_params.push(params);
    }
    let report = EvalReport::from_folds(mode.tag(), cfg.seed, ds.class_names.clone(), fold_reports);
    Ok(TrainOutcome {
        report,
        fold_params,
    })
}
