//! The training loop: seeded shuffling, optional per-image augmentation,
//! mini-batch gradient steps, and infer-mode evaluation.
//!
//! Every random draw comes from a substream keyed by (seed, purpose, fold,
//! epoch, ...), so a run is a pure function of (config, manifest). The
//! end-of-epoch training accuracy is computed in infer mode with the same
//! chunked batching as evaluation, so evaluating a saved model on its own
//! training manifest reproduces the last history entry exactly.

use spn_core::dataset::Manifest;
use spn_core::models::{build_model, ArchName, ModelOptions, INPUT_EXTENT};
use spn_core::nn::{
    backward, commit_batch_stats, forward, CompiledGraph, Mode, ParamSet,
};
use spn_core::optim::{
    accuracy, apply_regularizer, confusion_matrix, one_hot, softmax_cross_entropy, Optimizer,
};
use spn_core::rng::{substream, tags};
use spn_core::{Error, Result, Tensor};

use crate::config::ResolvedConfig;

/// One image ready for training: pixels, class, its index in the full
/// manifest (keys the augmentation stream), and its nodule (for fold
/// bookkeeping).
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Tensor,
    pub label: usize,
    pub global_index: u64,
    pub nodule_id: String,
}

/// Loads every manifest image into memory. `global_index` is the record
/// position, so items keep stable identities when later split into folds.
pub fn load_items(manifest: &Manifest) -> Result<Vec<TrainItem>> {
    let images = manifest.load_images()?;
    Ok(manifest
        .records()
        .iter()
        .zip(images)
        .enumerate()
        .map(|(i, (r, image))| TrainItem {
            image,
            label: r.label.class_index(),
            global_index: i as u64,
            nodule_id: r.nodule_id.clone(),
        })
        .collect())
}

/// Receives every training batch as it is formed. Used by tests to assert
/// properties of the batch stream (fold isolation, permutation coverage).
pub trait BatchObserver {
    fn on_batch(&mut self, fold: u64, epoch: usize, nodule_ids: &[&str]);
}

pub struct NoopObserver;

impl BatchObserver for NoopObserver {
    fn on_batch(&mut self, _fold: u64, _epoch: usize, _nodule_ids: &[&str]) {}
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

pub struct Trainer {
    cfg: ResolvedConfig,
    graph: CompiledGraph,
    params: ParamSet,
    optimizer: Optimizer,
    items: Vec<TrainItem>,
    fold: u64,
    epoch: usize,
}

impl Trainer {
    /// `fold` tags this trainer's substreams; cross-validation passes the
    /// fold index, single runs pass 0.
    pub fn new(cfg: &ResolvedConfig, items: Vec<TrainItem>, fold: u64) -> Result<Trainer> {
        if items.is_empty() {
            return Err(Error::invalid("train", "no training images"));
        }
        if !(items.iter().any(|i| i.label == 0) && items.iter().any(|i| i.label == 1)) {
            return Err(Error::invalid("train", "training set must contain both classes"));
        }
        let graph = build_model(cfg.arch, &cfg.options)?.compile()?;
        let params = ParamSet::init(&graph, &mut substream(cfg.seed, &[tags::INIT, fold]));
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            graph,
            params,
            optimizer,
            items,
            fold,
            epoch: 0,
        })
    }

    pub fn graph(&self) -> &CompiledGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn into_parts(self) -> (ArchName, ModelOptions, ParamSet) {
        (self.cfg.arch, self.cfg.options, self.params)
    }

    /// One pass over the training set: shuffle, batch, augment (if enabled),
    /// step, then score the full set in infer mode.
    pub fn run_epoch(&mut self, observer: &mut dyn BatchObserver) -> Result<EpochStats> {
        use rand::seq::SliceRandom;
        let seed = self.cfg.seed;
        let e = self.epoch as u64;
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut substream(seed, &[tags::SHUFFLE, self.fold, e]));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let px = INPUT_EXTENT * INPUT_EXTENT;
            let mut data = Vec::with_capacity(chunk.len() * px);
            let mut labels = Vec::with_capacity(chunk.len());
            let mut nodules = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &self.items[i];
                if self.cfg.augment_enabled {
                    let mut rng =
                        substream(seed, &[tags::AUGMENT, e, item.global_index]);
                    let t = self.cfg.policy.sample_transform(&mut rng);
                    data.extend_from_slice(self.cfg.policy.apply(&item.image, &t)?.data());
                } else {
                    data.extend_from_slice(item.image.data());
                }
                labels.push(item.label);
                nodules.push(item.nodule_id.as_str());
            }
            observer.on_batch(self.fold, self.epoch, &nodules);
            let batch = Tensor::new(vec![chunk.len(), INPUT_EXTENT, INPUT_EXTENT, 1], data)?;
            let mut drop_rng = substream(seed, &[tags::DROPOUT, self.fold, e, batch_idx as u64]);
            let trace = forward(&self.graph, &self.params, &batch, Mode::Train, &mut drop_rng)?;
            let (loss, d_logits) =
                softmax_cross_entropy(trace.logits(), &one_hot(&labels, 2)?)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch });
            }
            let mut grads = backward(&self.graph, &self.params, &trace, &batch, &d_logits)?;
            apply_regularizer(&self.params, &self.cfg.regularizer, &mut grads);
            self.optimizer.step(&mut self.params, &grads)?;
            commit_batch_stats(&self.graph, &mut self.params, &trace);
            loss_sum += loss;
            batches += 1;
        }
        self.epoch += 1;
        let (train_accuracy, _) =
            evaluate_items(&self.graph, &self.params, &self.items, self.cfg.batch_size)?;
        Ok(EpochStats {
            mean_loss: loss_sum / batches as f64,
            train_accuracy,
        })
    }

    /// Runs `epochs` epochs; zero epochs leaves the model at initialization.
    pub fn run(&mut self, epochs: usize, observer: &mut dyn BatchObserver) -> Result<Vec<EpochStats>> {
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            history.push(self.run_epoch(observer)?);
        }
        Ok(history)
    }
}

/// Infer-mode scoring with deterministic order-preserving chunking.
/// Returns (accuracy, confusion matrix indexed [actual][predicted]).
pub fn evaluate_items(
    graph: &CompiledGraph,
    params: &ParamSet,
    items: &[TrainItem],
    batch_size: usize,
) -> Result<(f64, [[usize; 2]; 2])> {
    if items.is_empty() {
        return Err(Error::invalid("evaluate", "no images to evaluate"));
    }
    let px = INPUT_EXTENT * INPUT_EXTENT;
    let mut predictions = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * px);
        for item in chunk {
            data.extend_from_slice(item.image.data());
            labels.push(item.label);
        }
        let batch = Tensor::new(vec![chunk.len(), INPUT_EXTENT, INPUT_EXTENT, 1], data)?;
        // Infer mode draws nothing from the stream.
        let mut rng = substream(0, &[]);
        let trace = forward(graph, params, &batch, Mode::Infer, &mut rng)?;
        predictions.extend(trace.probabilities().argmax_last()?);
    }
    Ok((
        accuracy(&predictions, &labels)?,
        confusion_matrix(&predictions, &labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use spn_core::dataset::synthetic::generate_synthetic_dataset;
    use std::collections::BTreeSet;

    fn small_corpus(n_per_class: usize, seed: u64, tag: &str) -> Vec<TrainItem> {
        let dir = std::env::temp_dir().join(format!("spn-train-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = generate_synthetic_dataset(n_per_class, seed, &dir).unwrap();
        load_items(&manifest).unwrap()
    }

    fn config(json: &str) -> ResolvedConfig {
        serde_json::from_str::<ExperimentConfig>(json)
            .unwrap()
            .resolve()
            .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = config(r#"{"arch": "dspn", "seed": 3, "epochs": 0, "batch_size": 8}"#);
        let items = small_corpus(3, 1, "zero");
        let mut t = Trainer::new(&cfg, items, 0).unwrap();
        let before: Vec<f64> = t.params().entries()[0].value.data().to_vec();
        let history = t.run(0, &mut NoopObserver).unwrap();
        assert!(history.is_empty());
        assert_eq!(t.params().entries()[0].value.data(), before.as_slice());
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let cfg = config(
            r#"{"arch": "dspn", "seed": 5, "batch_size": 8,
                "augment": {"enabled": true}}"#,
        );
        let items = small_corpus(4, 2, "det1");
        let h1 = Trainer::new(&cfg, items.clone(), 0)
            .unwrap()
            .run(2, &mut NoopObserver)
            .unwrap();
        let h2 = Trainer::new(&cfg, items, 0)
            .unwrap()
            .run(2, &mut NoopObserver)
            .unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            assert_eq!(a.train_accuracy.to_bits(), b.train_accuracy.to_bits());
        }
    }

    struct Collector {
        per_epoch: Vec<Vec<String>>,
    }

    impl BatchObserver for Collector {
        fn on_batch(&mut self, _fold: u64, epoch: usize, nodule_ids: &[&str]) {
            while self.per_epoch.len() <= epoch {
                self.per_epoch.push(Vec::new());
            }
            self.per_epoch[epoch].extend(nodule_ids.iter().map(|s| s.to_string()));
        }
    }

    #[test]
    fn without_augmentation_each_epoch_is_a_permutation() {
        let cfg = config(r#"{"arch": "dspn", "seed": 11, "batch_size": 4}"#);
        let items = small_corpus(4, 6, "perm");
        let all: Vec<String> = items.iter().map(|i| i.nodule_id.clone()).collect();
        let mut obs = Collector { per_epoch: Vec::new() };
        Trainer::new(&cfg, items, 0).unwrap().run(2, &mut obs).unwrap();
        assert_eq!(obs.per_epoch.len(), 2);
        let want: BTreeSet<&String> = all.iter().collect();
        for epoch in &obs.per_epoch {
            assert_eq!(epoch.len(), all.len());
            assert_eq!(epoch.iter().collect::<BTreeSet<_>>(), want);
        }
        // And the order differs between epochs (shuffle is per-epoch).
        assert_ne!(obs.per_epoch[0], obs.per_epoch[1]);
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let cfg = config(r#"{"arch": "dspn", "seed": 9, "batch_size": 8}"#);
        let items = small_corpus(6, 4, "learn");
        let mut t = Trainer::new(&cfg, items, 0).unwrap();
        let h = t.run(4, &mut NoopObserver).unwrap();
        assert!(
            h.last().unwrap().mean_loss < h[0].mean_loss,
            "loss should fall: {} -> {}",
            h[0].mean_loss,
            h.last().unwrap().mean_loss
        );
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let cfg = config(
            r#"{"arch": "dspn", "seed": 1, "batch_size": 8,
                "optimizer": "sgd", "learning_rate": 1e30}"#,
        );
        let items = small_corpus(4, 3, "diverge");
        let mut t = Trainer::new(&cfg, items, 0).unwrap();
        let err = t.run(5, &mut NoopObserver).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let cfg = config(r#"{"arch": "dspn", "seed": 1}"#);
        let mut items = small_corpus(2, 1, "oneclass");
        items.retain(|i| i.label == 0);
        assert!(Trainer::new(&cfg, items, 0).is_err());
    }

    #[test]
    fn final_history_accuracy_matches_standalone_evaluation() {
        let cfg = config(r#"{"arch": "dspn", "seed": 21, "batch_size": 8}"#);
        let items = small_corpus(4, 8, "evalmatch");
        let mut t = Trainer::new(&cfg, items.clone(), 0).unwrap();
        let h = t.run(2, &mut NoopObserver).unwrap();
        let (acc, _) = evaluate_items(t.graph(), t.params(), &items, 8).unwrap();
        assert_eq!(acc.to_bits(), h.last().unwrap().train_accuracy.to_bits());
    }
}
