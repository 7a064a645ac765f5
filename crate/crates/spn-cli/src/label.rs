//! Turns a raw ratings listing into a labeled manifest.
//!
//! The input carries one row per image with the nodule's size and rater
//! scores but no label column:
//!
//! ```text
//! image_path,nodule_id,patient_id,diameter_mm,ratings
//! ```
//!
//! Each nodule is labeled from its ratings and size; nodules the rules
//! exclude (too few raters, out-of-range size, indeterminate median) are
//! dropped whole, and the summary reports how many fell to each rule.

use std::fmt;
use std::fs;
use std::path::Path;

use spn_core::dataset::{
    label_from_ratings, ExclusionReason, LabelDecision, Manifest, NoduleRecord,
};
use spn_core::{Error, Result};

pub const RATINGS_HEADER: &str = "image_path,nodule_id,patient_id,diameter_mm,ratings";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelSummary {
    pub labeled_nodules: usize,
    pub labeled_images: usize,
    pub excluded_too_few_raters: usize,
    pub excluded_size: usize,
    pub excluded_indeterminate: usize,
}

impl LabelSummary {
    pub fn excluded_nodules(&self) -> usize {
        self.excluded_too_few_raters + self.excluded_size + self.excluded_indeterminate
    }
}

impl fmt::Display for LabelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "labeled {} nodules ({} images)",
            self.labeled_nodules, self.labeled_images
        )?;
        write!(
            f,
            "excluded {}: {} with fewer than 3 raters, {} outside 3-30 mm, {} with indeterminate median",
            self.excluded_nodules(),
            self.excluded_too_few_raters,
            self.excluded_size,
            self.excluded_indeterminate
        )
    }
}

struct RatingsRow {
    image_path: String,
    nodule_id: String,
    patient_id: String,
    diameter_mm: f64,
    ratings: Vec<u8>,
}

fn parse_ratings_file(path: &Path) -> Result<Vec<RatingsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RATINGS_HEADER => {}
        _ => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                details: format!("expected header `{RATINGS_HEADER}`"),
            })
        }
    }
    let err = |line: usize, details: String| Error::Manifest {
        path: path.to_path_buf(),
        line: line + 1,
        details,
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(i, format!("expected 5 fields, got {}", fields.len())));
        }
        let diameter_mm: f64 = fields[3]
            .parse()
            .map_err(|_| err(i, format!("bad diameter `{}`", fields[3])))?;
        let ratings = fields[4]
            .split('|')
            .map(|r| match r.parse::<u8>() {
                Ok(v @ 1..=5) => Ok(v),
                _ => Err(err(i, format!("bad rating `{r}` (expected 1-5)"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        for (field, name) in [(fields[0], "image_path"), (fields[1], "nodule_id"), (fields[2], "patient_id")] {
            if field.is_empty() {
                return Err(err(i, format!("empty {name}")));
            }
        }
        rows.push(RatingsRow {
            image_path: fields[0].to_string(),
            nodule_id: fields[1].to_string(),
            patient_id: fields[2].to_string(),
            diameter_mm,
            ratings,
        });
    }
    if rows.is_empty() {
        return Err(err(0, "no data rows".to_string()));
    }
    Ok(rows)
}

/// Labels every nodule in `input` and writes the kept rows as a manifest to
/// `output`. Rows keep their input order; a nodule's rows must agree on
/// patient, diameter, and ratings.
pub fn label_ratings_file(input: &Path, output: &Path) -> Result<LabelSummary> {
    let rows = parse_ratings_file(input)?;

    // Decide once per nodule, in first-appearance order.
    let mut decisions: Vec<(&str, LabelDecision)> = Vec::new();
    for row in &rows {
        if let Some((_, prior)) = decisions.iter().find(|(id, _)| *id == row.nodule_id) {
            // Consistency: re-deciding from this row must agree.
            let again = label_from_ratings(&row.ratings, row.diameter_mm)?;
            if again != *prior {
                return Err(Error::invalid(
                    "label",
                    format!(
                        "nodule `{}` has rows with conflicting ratings or diameter",
                        row.nodule_id
                    ),
                ));
            }
            continue;
        }
        let decision = label_from_ratings(&row.ratings, row.diameter_mm)?;
        decisions.push((&row.nodule_id, decision));
    }

    let mut summary = LabelSummary::default();
    let mut records = Vec::new();
    for (nodule_id, decision) in &decisions {
        match decision {
            LabelDecision::Labeled(label) => {
                summary.labeled_nodules += 1;
                for row in rows.iter().filter(|r| r.nodule_id == *nodule_id) {
                    summary.labeled_images += 1;
                    records.push(NoduleRecord {
                        image_path: row.image_path.clone(),
                        nodule_id: row.nodule_id.clone(),
                        patient_id: row.patient_id.clone(),
                        label: *label,
                        diameter_mm: Some(row.diameter_mm),
                        ratings: Some(row.ratings.clone()),
                    });
                }
            }
            LabelDecision::Excluded(reason) => match reason {
                ExclusionReason::TooFewRaters => summary.excluded_too_few_raters += 1,
                ExclusionReason::Size => summary.excluded_size += 1,
                ExclusionReason::Indeterminate => summary.excluded_indeterminate += 1,
            },
        }
    }
    if records.is_empty() {
        return Err(Error::invalid(
            "label",
            "every nodule was excluded; nothing to write",
        ));
    }
    let source = output
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("labeled")
        .to_string();
    let base_dir = output.parent().unwrap_or_else(|| Path::new("."));
    let manifest = Manifest::from_records(source, base_dir, records)?;
    manifest.save(output)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use spn_core::dataset::Label;

    fn write_input(tag: &str, body: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("spn-label-{tag}.csv"));
        fs::write(&path, format!("{RATINGS_HEADER}\n{body}")).unwrap();
        path
    }

    fn out_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("spn-label-{tag}-out.csv"))
    }

    #[test]
    fn labels_and_exclusions_are_counted_by_rule() {
        let input = write_input(
            "mixed",
            "a1.pgm,n1,p1,10.0,1|2|2\n\
             a2.pgm,n1,p1,10.0,1|2|2\n\
             b.pgm,n2,p2,10.0,4|5|5\n\
             c.pgm,n3,p3,10.0,1|2\n\
             d.pgm,n4,p4,40.0,1|1|1\n\
             e.pgm,n5,p5,10.0,2|3|4\n",
        );
        let output = out_path("mixed");
        let summary = label_ratings_file(&input, &output).unwrap();
        assert_eq!(
            summary,
            LabelSummary {
                labeled_nodules: 2,
                labeled_images: 3,
                excluded_too_few_raters: 1,
                excluded_size: 1,
                excluded_indeterminate: 1,
            }
        );
        let manifest = Manifest::load(&output).unwrap();
        assert_eq!(manifest.len(), 3);
        assert_eq!(manifest.records()[0].label, Label::Benign);
        assert_eq!(manifest.records()[2].label, Label::Malignant);
        assert_eq!(manifest.records()[2].ratings, Some(vec![4, 5, 5]));
    }

    #[test]
    fn conflicting_rows_for_one_nodule_are_rejected() {
        let input = write_input(
            "conflict",
            "a1.pgm,n1,p1,10.0,1|2|2\n\
             a2.pgm,n1,p1,10.0,4|5|5\n",
        );
        let err = label_ratings_file(&input, &out_path("conflict")).unwrap_err();
        assert!(err.to_string().contains("n1"), "{err}");
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let input = write_input("badline", "a.pgm,n1,p1,ten,1|2|2\n");
        let err = label_ratings_file(&input, &out_path("badline")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let input = write_input("badrating", "a.pgm,n1,p1,10.0,1|9|2\n");
        let err = label_ratings_file(&input, &out_path("badrating")).unwrap_err();
        assert!(err.to_string().contains("9"), "{err}");
    }

    #[test]
    fn all_excluded_is_an_error_not_an_empty_file() {
        let input = write_input("allgone", "a.pgm,n1,p1,10.0,3|3|3\n");
        assert!(label_ratings_file(&input, &out_path("allgone")).is_err());
    }

    #[test]
    fn output_reloads_as_a_valid_manifest() {
        let input = write_input(
            "roundtrip",
            "x.pgm,n1,p1,7.5,1|1|2\ny.pgm,n2,p1,20.0,5|4|4\n",
        );
        let output = out_path("roundtrip");
        label_ratings_file(&input, &output).unwrap();
        let manifest = Manifest::load(&output).unwrap();
        assert_eq!(manifest.nodule_ids(), ["n1", "n2"]);
        assert_eq!(manifest.records()[1].diameter_mm, Some(20.0));
    }
}
