//! Stratified k-fold cross-validation over a labeled manifest.
//!
//! Folds are assigned per nodule, so every image of a nodule lands on the
//! same side of each split. Fold f trains a fresh model (substreams tagged
//! with f) on the other k-1 folds and scores fold f in infer mode.

use std::time::Instant;

use spn_core::dataset::{split_by_fold, stratified_kfold, Manifest};
use spn_core::Result;

use crate::config::{activation_name, optimizer_name, regularizer_name, ResolvedConfig};
use crate::results::{FoldOutcome, RunResult};
use crate::train::{evaluate_items, load_items, BatchObserver, Trainer};

/// Default run id: architecture, dataset, augmentation condition, seed.
pub fn default_run_id(cfg: &ResolvedConfig, manifest: &Manifest) -> String {
    format!(
        "{}_{}_{}_s{}",
        cfg.arch.as_str(),
        manifest.source(),
        if cfg.augment_enabled { "aug" } else { "raw" },
        cfg.seed
    )
}

pub fn crossval(
    cfg: &ResolvedConfig,
    manifest: &Manifest,
    observer: &mut dyn BatchObserver,
) -> Result<RunResult> {
    crossval_with_id(default_run_id(cfg, manifest), cfg, manifest, observer)
}

/// Cross-validates under an explicit run id (grid rows name their runs).
pub fn crossval_with_id(
    run_id: String,
    cfg: &ResolvedConfig,
    manifest: &Manifest,
    observer: &mut dyn BatchObserver,
) -> Result<RunResult> {
    let start = Instant::now();
    let assignment = stratified_kfold(manifest, cfg.folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let (train_manifest, test_manifest) = split_by_fold(manifest, &assignment, f)?;
        let train_items = load_items(&train_manifest)?;
        let test_items = load_items(&test_manifest)?;
        let mut trainer = Trainer::new(cfg, train_items, f as u64)?;
        let history = trainer.run(cfg.epochs, observer)?;
        let last = history.last();
        let (test_accuracy, _) =
            evaluate_items(trainer.graph(), trainer.params(), &test_items, cfg.batch_size)?;
        folds.push(FoldOutcome {
            train_accuracy: last.map_or(0.0, |h| h.train_accuracy),
            test_accuracy,
            final_loss: last.map_or(f64::NAN, |h| h.mean_loss),
        });
    }
    Ok(RunResult {
        run_id,
        arch: cfg.arch.as_str().to_string(),
        dataset: manifest.source().to_string(),
        augmented: cfg.augment_enabled,
        regularizer: regularizer_name(&cfg.regularizer),
        optimizer: optimizer_name(cfg.optimizer).to_string(),
        activation: activation_name(cfg.options.activation).to_string(),
        folds,
        epochs: cfg.epochs,
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        skipped: false,
    })
}
