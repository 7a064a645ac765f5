//! Hyperparameter sweeps: a base config plus named override rows, each run
//! under both augmentation conditions.
//!
//! A row's overrides deep-merge into the base (objects merge key-by-key,
//! everything else is replaced), then the condition forces
//! `augment.enabled`. Rows can mark either condition as skipped, which
//! emits a placeholder result so the sweep table keeps its full layout. A
//! row that fails to parse or resolve is reported by name and the rest of
//! the sweep continues.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use spn_core::dataset::Manifest;
use spn_core::optim::Regularizer;
use spn_core::{Error, Result};

use crate::config::{
    activation_name, optimizer_name, regularizer_name, ExperimentConfig, ResolvedConfig,
};
use crate::crossval::crossval_with_id;
use crate::results::RunResult;
use crate::train::BatchObserver;

#[derive(Clone, Debug)]
pub struct GridRow {
    pub name: String,
    pub overrides: Value,
    pub skip_raw: bool,
    pub skip_augmented: bool,
}

#[derive(Clone, Debug)]
pub struct GridFile {
    pub base: Value,
    pub rows: Vec<GridRow>,
}

/// The two dataset conditions every row runs under.
const CONDITIONS: [(&str, bool); 2] = [("raw", false), ("aug", true)];

impl GridFile {
    pub fn parse(text: &str) -> Result<GridFile> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::invalid("grid", format!("not valid JSON: {e}")))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::invalid("grid", "top level must be an object"))?;
        for key in obj.keys() {
            if key != "base" && key != "rows" {
                return Err(Error::invalid("grid", format!("unknown key `{key}`")));
            }
        }
        let base = obj
            .get("base")
            .ok_or_else(|| Error::invalid("grid", "missing `base` config"))?;
        if !base.is_object() {
            return Err(Error::invalid("grid", "`base` must be an object"));
        }
        let rows_val = obj
            .get("rows")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::invalid("grid", "missing `rows` array"))?;
        if rows_val.is_empty() {
            return Err(Error::invalid("grid", "`rows` must not be empty"));
        }
        let mut rows = Vec::with_capacity(rows_val.len());
        for (i, row) in rows_val.iter().enumerate() {
            rows.push(parse_row(i, row)?);
        }
        let mut names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid("grid", format!("duplicate row name `{}`", w[0])));
        }
        Ok(GridFile {
            base: base.clone(),
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<GridFile> {
        GridFile::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Row shape errors are hard errors: a row whose name or skip list cannot be
/// read cannot even be reported as skipped, so the file is rejected. Bad
/// override CONTENT is soft and surfaces per-row at run time.
fn parse_row(index: usize, row: &Value) -> Result<GridRow> {
    let obj = row
        .as_object()
        .ok_or_else(|| Error::invalid("grid", format!("row {index}: must be an object")))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "name" | "overrides" | "skip") {
            return Err(Error::invalid(
                "grid",
                format!("row {index}: unknown key `{key}`"),
            ));
        }
    }
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::invalid("grid", format!("row {index}: missing string `name`")))?;
    if name.is_empty() || name.contains(',') || name.contains('_') {
        return Err(Error::invalid(
            "grid",
            format!("row {index}: name `{name}` must be nonempty without commas or underscores"),
        ));
    }
    let overrides = obj
        .get("overrides")
        .cloned()
        .unwrap_or_else(|| Value::Object(Map::new()));
    let mut skip_raw = false;
    let mut skip_augmented = false;
    if let Some(skip) = obj.get("skip") {
        let list = skip.as_array().ok_or_else(|| {
            Error::invalid("grid", format!("row {index}: `skip` must be an array"))
        })?;
        for v in list {
            match v.as_str() {
                Some("raw") => skip_raw = true,
                Some("augmented") => skip_augmented = true,
                _ => {
                    return Err(Error::invalid(
                        "grid",
                        format!("row {index}: skip entries are \"raw\" or \"augmented\""),
                    ))
                }
            }
        }
    }
    Ok(GridRow {
        name: name.to_string(),
        overrides,
        skip_raw,
        skip_augmented,
    })
}

/// Objects merge recursively; any other value in `over` replaces the base.
pub fn deep_merge(base: &Value, over: &Value) -> Value {
    match (base, over) {
        (Value::Object(a), Value::Object(b)) => {
            let mut merged = a.clone();
            for (k, v) in b {
                let entry = match a.get(k) {
                    Some(existing) => deep_merge(existing, v),
                    None => v.clone(),
                };
                merged.insert(k.clone(), entry);
            }
            Value::Object(merged)
        }
        _ => over.clone(),
    }
}

/// Resolves one row under one condition. The condition's enabled flag is
/// applied last: the sweep axis beats any `enabled` inside the overrides.
fn resolve_cell(base: &Value, row: &GridRow, augmented: bool) -> Result<ResolvedConfig> {
    let merged = deep_merge(base, &row.overrides);
    let merged = deep_merge(&merged, &json!({"augment": {"enabled": augmented}}));
    let config: ExperimentConfig = serde_json::from_value(merged)
        .map_err(|e| Error::invalid("grid", format!("row `{}`: {e}", row.name)))?;
    config.resolve()
}

/// Sweep-table constraints used with `--paper-grid`: the studied penalty
/// weights only.
fn check_paper_lattice(cfg: &ResolvedConfig) -> Result<()> {
    match cfg.regularizer {
        Regularizer::L1 { lambda } | Regularizer::L2 { lambda }
            if lambda != 0.01 && lambda != 0.001 =>
        {
            Err(Error::invalid(
                "grid",
                format!("penalty weight {lambda} is outside the studied set {{0.01, 0.001}}"),
            ))
        }
        _ => Ok(()),
    }
}

pub struct GridOutcome {
    pub results: Vec<RunResult>,
    /// Human-readable reports for rows that could not run, named by row.
    pub row_errors: Vec<String>,
}

pub fn run_grid(
    grid: &GridFile,
    manifest: &Manifest,
    paper_grid: bool,
    observer: &mut dyn BatchObserver,
) -> Result<GridOutcome> {
    let mut results = Vec::new();
    let mut row_errors = Vec::new();
    for row in &grid.rows {
        for (tag, augmented) in CONDITIONS {
            let run_id = format!("{}_{tag}", row.name);
            let cfg = match resolve_cell(&grid.base, row, augmented) {
                Ok(cfg) => cfg,
                Err(e) => {
                    row_errors.push(format!("row `{}` ({tag}): {e}", row.name));
                    continue;
                }
            };
            if paper_grid {
                if let Err(e) = check_paper_lattice(&cfg) {
                    row_errors.push(format!("row `{}` ({tag}): {e}", row.name));
                    continue;
                }
            }
            let skip = if augmented { row.skip_augmented } else { row.skip_raw };
            if skip {
                results.push(RunResult {
                    run_id,
                    arch: cfg.arch.as_str().to_string(),
                    dataset: manifest.source().to_string(),
                    augmented,
                    regularizer: regularizer_name(&cfg.regularizer),
                    optimizer: optimizer_name(cfg.optimizer).to_string(),
                    activation: activation_name(cfg.options.activation).to_string(),
                    folds: Vec::new(),
                    epochs: cfg.epochs,
                    seed: cfg.seed,
                    wall_time_s: 0.0,
                    skipped: true,
                });
                continue;
            }
            results.push(crossval_with_id(run_id, &cfg, manifest, observer)?);
        }
    }
    Ok(GridOutcome {
        results,
        row_errors,
    })
}

/// The sweep summary printed after a grid run: one line per row, one column
/// per condition, mean test accuracy in each cell, `x` marking underfit
/// runs and `-` marking skipped or failed cells.
pub fn render_grid_table(results: &[RunResult]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for r in results {
        let name = row_name(&r.run_id);
        if !rows.iter().any(|n| n == name) {
            rows.push(name.to_string());
        }
    }
    let width = rows.iter().map(String::len).fold("row".len(), usize::max);
    let mut out = format!("{:width$}  {:>9}  {:>9}\n", "row", "raw", "augmented");
    for name in &rows {
        let mut cells = ["-".to_string(), "-".to_string()];
        for r in results.iter().filter(|r| row_name(&r.run_id) == name) {
            let col = usize::from(r.augmented);
            cells[col] = if r.skipped {
                "-".to_string()
            } else if r.underfit() {
                "x".to_string()
            } else {
                match r.mean_test_accuracy() {
                    Some(m) => format!("{m:.4}"),
                    None => "-".to_string(),
                }
            };
        }
        let _ = writeln!(out, "{name:width$}  {:>9}  {:>9}", cells[0], cells[1]);
    }
    out
}

/// Run ids are `{row}_{condition}`; row names cannot contain underscores.
fn row_name(run_id: &str) -> &str {
    run_id.rsplit_once('_').map_or(run_id, |(name, _)| name)
}
