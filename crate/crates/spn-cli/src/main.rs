//! `spn`: generate corpora, label ratings, train, cross-validate, sweep,
//! and evaluate the nodule classifiers.
//!
//! Exit codes: 0 success, 1 validation or I/O error, 2 training divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spn_core::dataset::{synthetic::generate_synthetic_dataset, Manifest};
use spn_core::{Error, Result};

use spn_cli::config::ExperimentConfig;
use spn_cli::crossval::crossval;
use spn_cli::eval::{cross_dataset_eval, render_eval_report};
use spn_cli::grid::{render_grid_table, run_grid, GridFile};
use spn_cli::label::label_ratings_file;
use spn_cli::model_file::{load_model, save_model, ModelState};
use spn_cli::results::emit_results;
use spn_cli::train::{load_items, NoopObserver, Trainer};

#[derive(Parser)]
#[command(name = "spn", version, about = "Solitary pulmonary nodule classification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PGM corpus and its labeled manifest
    Synth {
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Nodules per class
        #[arg(long)]
        n_per_class: usize,
        /// Corpus seed
        #[arg(long)]
        seed: u64,
    },
    /// Label a ratings listing and write the resulting manifest
    Label {
        /// Input CSV: image_path,nodule_id,patient_id,diameter_mm,ratings
        #[arg(long)]
        ratings: PathBuf,
        /// Output manifest path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the full manifest and save it
    Train {
        /// Experiment config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Labeled manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Output model file
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified k-fold cross-validation; writes the results CSV
    Crossval {
        /// Experiment config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Labeled manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Output results CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sweep file: every row under raw and augmented conditions
    Grid {
        /// Sweep file (JSON: base config plus named override rows)
        #[arg(long)]
        grid: PathBuf,
        /// Labeled manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Output results CSV
        #[arg(long)]
        out: PathBuf,
        /// Reject penalty weights outside the studied set
        #[arg(long)]
        paper_grid: bool,
    },
    /// Evaluate a saved model on a manifest (pure inference)
    Eval {
        /// Saved model file
        #[arg(long)]
        model: PathBuf,
        /// Labeled manifest to score
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success; bad usage is a
            // validation failure, not clap's default exit code 2 (which
            // this tool reserves for divergence).
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            n_per_class,
            seed,
        } => {
            let manifest = generate_synthetic_dataset(n_per_class, seed, &out)?;
            println!(
                "wrote {} images and {} to {}",
                manifest.len(),
                "synthetic.csv",
                out.display()
            );
            Ok(())
        }
        Command::Label { ratings, out } => {
            let summary = label_ratings_file(&ratings, &out)?;
            eprintln!("{summary}");
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            config,
            manifest,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?.resolve()?;
            let manifest = Manifest::load(&manifest)?;
            let items = load_items(&manifest)?;
            let mut trainer = Trainer::new(&cfg, items, 0)?;
            for epoch in 0..cfg.epochs {
                let stats = trainer.run_epoch(&mut NoopObserver)?;
                println!(
                    "epoch {}/{}: loss {:.4} train_acc {:.4}",
                    epoch + 1,
                    cfg.epochs,
                    stats.mean_loss,
                    stats.train_accuracy
                );
            }
            let (arch, options, params) = trainer.into_parts();
            let state = ModelState {
                arch,
                options,
                params,
            };
            save_model(&state, &out)?;
            println!("saved model to {}", out.display());
            Ok(())
        }
        Command::Crossval {
            config,
            manifest,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?.resolve()?;
            let manifest = Manifest::load(&manifest)?;
            let result = crossval(&cfg, &manifest, &mut NoopObserver)?;
            for (i, fold) in result.folds.iter().enumerate() {
                println!(
                    "fold {i}: train_acc {:.4} test_acc {:.4}",
                    fold.train_accuracy, fold.test_accuracy
                );
            }
            println!(
                "mean test accuracy: {:.4} ({})",
                result.mean_test_accuracy().unwrap_or(f64::NAN),
                result.status()
            );
            emit_results(&[result], &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Grid {
            grid,
            manifest,
            out,
            paper_grid,
        } => {
            let grid = GridFile::load(&grid)?;
            let manifest = Manifest::load(&manifest)?;
            let outcome = run_grid(&grid, &manifest, paper_grid, &mut NoopObserver)?;
            for report in &outcome.row_errors {
                eprintln!("skipping {report}");
            }
            if outcome.results.is_empty() {
                return Err(Error::invalid("grid", "no runnable rows"));
            }
            print!("{}", render_grid_table(&outcome.results));
            emit_results(&outcome.results, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { model, manifest } => {
            let state = load_model(&model)?;
            let manifest = Manifest::load(&manifest)?;
            let report = cross_dataset_eval(&state, &manifest, 32)?;
            print!("{}", render_eval_report(manifest.source(), &report));
            Ok(())
        }
    }
}
