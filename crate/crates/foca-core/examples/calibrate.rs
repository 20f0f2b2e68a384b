//! Scratch harness for sizing the synthetic cross-validation experiment.
//!
//! ```bash
//! cargo run --release -p foca-core --example calibrate -- <d> <lr> <epochs> <folds> [modes...]
//! ```

use foca_core::data::{make_folds, synth_dataset, write_synth_dataset, DatasetManifest, SynthConfig};
use foca_core::model::train::{train, TrainConfig};
use foca_core::model::Mode;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let d: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let k: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
    let modes: Vec<Mode> = if args.len() > 4 {
        args[4..]
            .iter()
            .map(|t| Mode::from_tag(t).unwrap())
            .collect()
    } else {
        Mode::ALL.to_vec()
    };

    let t0 = Instant::now();
    let dir = std::env::temp_dir().join(format!("foca-calib-{d}"));
    let ds_gen = synth_dataset(&SynthConfig {
        n_per_class: 200,
        d_audio: d,
        d_visual: d,
        noise_sigma: 0.5,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let manifest_path = write_synth_dataset(&dir, &ds_gen).unwrap();
    let manifest = DatasetManifest::read(&manifest_path).unwrap();
    let ds = manifest.load_features().unwrap();
    let folds = make_folds(&manifest, 5, 42).unwrap();
    println!("dataset ready in {:?}; {} samples", t0.elapsed(), ds.len());

    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: 32,
        max_epochs: epochs,
        dropout: std::env::var("FOCA_DROPOUT").ok().and_then(|s| s.parse().ok()).unwrap_or(0.3),
        patience: std::env::var("FOCA_PATIENCE").ok().and_then(|s| s.parse().ok()).unwrap_or(5),
        seed: 42,
        n_classes: ds.n_classes(),
        d_audio: d,
        d_visual: d,
    };

    for mode in modes {
        let t = Instant::now();
        if k == 1 {
            // quick probe: train once against fold 0
            use foca_core::data::metrics;
            use foca_core::model::train::{eval_confusion, train_single_fold};
            let pool = folds.train_indices(0);
            match train_single_fold(&ds, &pool, &cfg, mode, 0) {
                Ok((params, stats)) => {
                    let conf = eval_confusion(&params, &ds, &folds.folds[0]).unwrap();
                    let (acc, f1) = metrics(&conf).unwrap();
                    println!(
                        "{:<13} acc {acc:.4}  f1 {f1:.4}  best_epoch {} of {}  in {:?}",
                        mode.tag(),
                        stats.best_epoch,
                        stats.epochs_run,
                        t.elapsed()
                    );
                }
                Err(e) => println!("{:<13} FAILED: {e}", mode.tag()),
            }
            continue;
        }
        match train(&ds, &folds, &cfg, mode) {
            Ok(out) => {
                let epochs_run: Vec<usize> =
                    out.report.folds.iter().map(|f| f.epochs_run).collect();
                println!(
                    "{:<13} acc {:.4} +- {:.4}  f1 {:.4}  epochs {:?}  in {:?}",
                    mode.tag(),
                    out.report.mean_accuracy,
                    out.report.std_accuracy,
                    out.report.mean_macro_f1,
                    epochs_run,
                    t.elapsed()
                );
            }
            Err(e) => println!("{:<13} FAILED: {e}", mode.tag()),
        }
    }
    println!("total {:?}", t0.elapsed());
}
