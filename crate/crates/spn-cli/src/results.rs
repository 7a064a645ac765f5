//! Result records and the CSV table they are published as.
//!
//! One `RunResult` is one cross-validated configuration. The CSV lists each
//! run's fold rows followed by a `mean` row; a combination that a grid file
//! marked as skipped appears as a single `mean` row with empty accuracy
//! cells so the table stays a complete record of the sweep layout.

use std::fs;
use std::path::Path;

use spn_core::{Error, Result};

pub const RESULTS_HEADER: &str =
    "run_id,arch,dataset,augmented,regularizer,optimizer,activation,fold,train_acc,test_acc,epochs,seed,status";

/// A run counts as underfit when its mean final training accuracy is below
/// this; mirrors the sweep tables' practice of flagging such cells instead
/// of reporting a meaningless test number.
pub const UNDERFIT_TRAIN_ACCURACY: f64 = 0.60;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldOutcome {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_id: String,
    pub arch: String,
    pub dataset: String,
    pub augmented: bool,
    pub regularizer: String,
    pub optimizer: String,
    pub activation: String,
    /// Per-fold outcomes in fold order; empty for skipped combinations.
    pub folds: Vec<FoldOutcome>,
    pub epochs: usize,
    pub seed: u64,
    pub wall_time_s: f64,
    pub skipped: bool,
}

impl RunResult {
    pub fn mean_train_accuracy(&self) -> Option<f64> {
        mean(self.folds.iter().map(|f| f.train_accuracy))
    }

    pub fn mean_test_accuracy(&self) -> Option<f64> {
        mean(self.folds.iter().map(|f| f.test_accuracy))
    }

    pub fn underfit(&self) -> bool {
        self.mean_train_accuracy()
            .is_some_and(|a| a < UNDERFIT_TRAIN_ACCURACY)
    }

    pub fn status(&self) -> &'static str {
        if self.skipped {
            "skipped"
        } else if self.underfit() {
            "underfit"
        } else {
            "ok"
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn check_field(run_id: &str, value: &str) -> Result<()> {
    if value.contains(',') || value.contains('\n') {
        return Err(Error::invalid(
            "results",
            format!("run `{run_id}`: field `{value}` would break the CSV"),
        ));
    }
    Ok(())
}

/// Renders the table. Runs are ordered by run_id so output is independent
/// of execution order; fold rows keep their fold order.
pub fn render_results(results: &[RunResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::invalid("results", "no results to emit"));
    }
    let mut ordered: Vec<&RunResult> = results.iter().collect();
    ordered.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in ordered {
        for field in [
            &r.run_id,
            &r.arch,
            &r.dataset,
            &r.regularizer,
            &r.optimizer,
            &r.activation,
        ] {
            check_field(&r.run_id, field)?;
        }
        let prefix = format!(
            "{},{},{},{},{},{},{}",
            r.run_id,
            r.arch,
            r.dataset,
            r.augmented,
            r.regularizer,
            r.optimizer,
            r.activation
        );
        let suffix = format!("{},{},{}", r.epochs, r.seed, r.status());
        for (i, f) in r.folds.iter().enumerate() {
            out.push_str(&format!(
                "{prefix},{i},{:.4},{:.4},{suffix}\n",
                f.train_accuracy, f.test_accuracy
            ));
        }
        match (r.mean_train_accuracy(), r.mean_test_accuracy()) {
            (Some(train), Some(test)) => {
                out.push_str(&format!("{prefix},mean,{train:.4},{test:.4},{suffix}\n"));
            }
            _ => out.push_str(&format!("{prefix},mean,,,{suffix}\n")),
        }
    }
    Ok(out)
}

pub fn emit_results(results: &[RunResult], path: &Path) -> Result<()> {
    let text = render_results(results)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reparses an emitted table. Fields absent from the CSV (per-fold loss,
/// wall time) come back as zero; accuracies carry the table's 4-decimal
/// precision. `render_results(parse_results(t))` reproduces `t`.
pub fn parse_results(text: &str) -> Result<Vec<RunResult>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        _ => return Err(Error::invalid("results", "missing or wrong header")),
    }
    let mut out: Vec<RunResult> = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::invalid(
                "results",
                format!("line {}: expected 13 fields, got {}", i + 2, fields.len()),
            ));
        }
        let run_id = fields[0];
        let current = match out.last_mut() {
            Some(r) if r.run_id == run_id => r,
            _ => {
                out.push(RunResult {
                    run_id: run_id.to_string(),
                    arch: fields[1].to_string(),
                    dataset: fields[2].to_string(),
                    augmented: fields[3] == "true",
                    regularizer: fields[4].to_string(),
                    optimizer: fields[5].to_string(),
                    activation: fields[6].to_string(),
                    folds: Vec::new(),
                    epochs: parse_num(fields[10], i + 2, "epochs")?,
                    seed: parse_num(fields[11], i + 2, "seed")?,
                    wall_time_s: 0.0,
                    skipped: fields[12] == "skipped",
                });
                out.last_mut().expect("just pushed")
            }
        };
        if fields[7] == "mean" {
            continue;
        }
        let fold: usize = parse_num(fields[7], i + 2, "fold")?;
        if fold != current.folds.len() {
            return Err(Error::invalid(
                "results",
                format!("line {}: fold {} out of order", i + 2, fold),
            ));
        }
        current.folds.push(FoldOutcome {
            train_accuracy: parse_acc(fields[8], i + 2)?,
            test_accuracy: parse_acc(fields[9], i + 2)?,
            final_loss: 0.0,
        });
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, field: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::invalid("results", format!("line {line}: bad {field} `{s}`")))
}

fn parse_acc(s: &str, line: usize) -> Result<f64> {
    parse_num(s, line, "accuracy")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(id: &str, folds: &[(f64, f64)]) -> RunResult {
        RunResult {
            run_id: id.to_string(),
            arch: "dspn".to_string(),
            dataset: "synthetic".to_string(),
            augmented: false,
            regularizer: "l2@0.001".to_string(),
            optimizer: "adam".to_string(),
            activation: "relu".to_string(),
            folds: folds
                .iter()
                .map(|&(train, test)| FoldOutcome {
                    train_accuracy: train,
                    test_accuracy: test,
                    final_loss: 0.1,
                })
                .collect(),
            epochs: 5,
            seed: 7,
            wall_time_s: 1.5,
            skipped: false,
        }
    }

    #[test]
    fn one_run_emits_fold_rows_plus_mean() {
        let text =
            render_results(&[run("r1", &[(0.9, 0.8), (0.95, 0.85), (1.0, 0.9)])]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert_eq!(
            lines[1],
            "r1,dspn,synthetic,false,l2@0.001,adam,relu,0,0.9000,0.8000,5,7,ok"
        );
        assert_eq!(
            lines[4],
            "r1,dspn,synthetic,false,l2@0.001,adam,relu,mean,0.9500,0.8500,5,7,ok"
        );
        assert!(text.ends_with('\n') && !text.contains("\r\n"));
    }

    #[test]
    fn underfit_status_keeps_accuracies() {
        let r = run("r1", &[(0.5, 0.5), (0.55, 0.4)]);
        assert!(r.underfit());
        let text = render_results(&[r]).unwrap();
        assert!(text.contains(",0,0.5000,0.5000,5,7,underfit"));
        assert!(text.contains(",mean,0.5250,0.4500,5,7,underfit"));
    }

    #[test]
    fn boundary_train_accuracy_is_not_underfit() {
        assert!(!run("r", &[(0.60, 0.5)]).underfit());
        assert!(run("r", &[(0.5999, 0.5)]).underfit());
    }

    #[test]
    fn skipped_run_is_one_row_with_empty_accuracies() {
        let mut r = run("r1", &[]);
        r.skipped = true;
        let text = render_results(&[r]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[1],
            "r1,dspn,synthetic,false,l2@0.001,adam,relu,mean,,,5,7,skipped"
        );
    }

    #[test]
    fn runs_are_sorted_by_run_id() {
        let text = render_results(&[
            run("zeta", &[(1.0, 1.0)]),
            run("alpha", &[(1.0, 1.0)]),
        ])
        .unwrap();
        let ids: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(ids, ["alpha", "alpha", "zeta", "zeta"]);
    }

    #[test]
    fn mean_is_arithmetic_mean_of_folds() {
        let r = run("r", &[(0.7, 0.1), (0.8, 0.2), (0.9, 0.7)]);
        let want: f64 = (0.1 + 0.2 + 0.7) / 3.0;
        assert_eq!(r.mean_test_accuracy().unwrap().to_bits(), want.to_bits());
    }

    #[test]
    fn reparse_then_emit_is_a_fixpoint() {
        let mut skipped = run("b_skip", &[]);
        skipped.skipped = true;
        let first = render_results(&[
            run("a_run", &[(0.91, 0.82), (0.93, 0.88)]),
            skipped,
        ])
        .unwrap();
        let second = render_results(&parse_results(&first).unwrap()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_results_are_rejected() {
        assert!(render_results(&[]).is_err());
    }

    #[test]
    fn comma_in_field_is_rejected() {
        let mut r = run("r1", &[(1.0, 1.0)]);
        r.dataset = "set,with,commas".to_string();
        assert!(render_results(&[r]).is_err());
    }
}
