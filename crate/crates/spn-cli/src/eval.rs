//! Frozen-model evaluation: pure inference over a manifest, typically one
//! the model never saw during training.

use spn_core::dataset::Manifest;
use spn_core::Result;

use crate::model_file::ModelState;
use crate::train::{evaluate_items, load_items};

#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub images: usize,
    pub accuracy: f64,
    /// Indexed [actual][predicted]; class 0 benign, 1 malignant.
    pub confusion: [[usize; 2]; 2],
}

/// Scores `state` on every image in the manifest. No parameter is updated;
/// dropout is off and batch normalization uses its stored running stats.
pub fn cross_dataset_eval(
    state: &ModelState,
    manifest: &Manifest,
    batch_size: usize,
) -> Result<EvalReport> {
    let graph = state.compile()?;
    let items = load_items(manifest)?;
    let (accuracy, confusion) = evaluate_items(&graph, &state.params, &items, batch_size)?;
    Ok(EvalReport {
        images: items.len(),
        accuracy,
        confusion,
    })
}

pub fn render_eval_report(dataset: &str, report: &EvalReport) -> String {
    let c = report.confusion;
    format!(
        "dataset: {dataset}\n\
         images: {}\n\
         accuracy: {:.4}\n\
         confusion (rows actual, columns predicted):\n\
         {:>12}  {:>7}  {:>9}\n\
         {:>12}  {:>7}  {:>9}\n\
         {:>12}  {:>7}  {:>9}\n",
        report.images,
        report.accuracy,
        "",
        "benign",
        "malignant",
        "benign",
        c[0][0],
        c[0][1],
        "malignant",
        c[1][0],
        c[1][1],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::train::{NoopObserver, Trainer};
    use spn_core::dataset::synthetic::generate_synthetic_dataset;
    use spn_core::dataset::{Label, Manifest, NoduleRecord};

    fn trained_state(tag: &str) -> (ModelState, Manifest) {
        let dir = std::env::temp_dir().join(format!("spn-eval-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = generate_synthetic_dataset(4, 3, &dir).unwrap();
        let cfg = serde_json::from_str::<ExperimentConfig>(
            r#"{"arch": "dspn", "seed": 2, "batch_size": 8}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        let items = load_items(&manifest).unwrap();
        let mut trainer = Trainer::new(&cfg, items, 0).unwrap();
        trainer.run(2, &mut NoopObserver).unwrap();
        let (arch, options, params) = trainer.into_parts();
        (
            ModelState {
                arch,
                options,
                params,
            },
            manifest,
        )
    }

    #[test]
    fn flipping_every_label_complements_the_accuracy() {
        let (state, manifest) = trained_state("flip");
        let original = cross_dataset_eval(&state, &manifest, 8).unwrap();

        let flipped_records: Vec<NoduleRecord> = manifest
            .records()
            .iter()
            .map(|r| NoduleRecord {
                label: match r.label {
                    Label::Benign => Label::Malignant,
                    Label::Malignant => Label::Benign,
                },
                ..r.clone()
            })
            .collect();
        let flipped = Manifest::from_records(
            manifest.source(),
            manifest.base_dir(),
            flipped_records,
        )
        .unwrap();
        let complement = cross_dataset_eval(&state, &flipped, 8).unwrap();
        let n = original.images as f64;
        assert_eq!(
            (original.accuracy * n).round() + (complement.accuracy * n).round(),
            n
        );
        // The confusion matrix swaps rows, not columns.
        assert_eq!(original.confusion[0], complement.confusion[1]);
        assert_eq!(original.confusion[1], complement.confusion[0]);
    }

    #[test]
    fn confusion_matrix_totals_match_image_count() {
        let (state, manifest) = trained_state("totals");
        let report = cross_dataset_eval(&state, &manifest, 8).unwrap();
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, report.images);
        let correct = report.confusion[0][0] + report.confusion[1][1];
        assert_eq!(correct as f64 / total as f64, report.accuracy);
    }

    #[test]
    fn report_renders_all_cells() {
        let report = EvalReport {
            images: 10,
            accuracy: 0.9,
            confusion: [[4, 1], [0, 5]],
        };
        let text = render_eval_report("synthetic", &report);
        assert!(text.contains("accuracy: 0.9000"));
        for cell in ["4", "1", "0", "5"] {
            assert!(text.contains(cell), "{text}");
        }
    }
}
