//! Corpus rules: manifests, rating-based labeling, per-nodule image caps,
//! and stratified cross-validation folds.
//!
//! A manifest row is one image of one nodule; a nodule has one label and one
//! patient, any number of images. All grouping (caps, folds) happens at the
//! nodule level so images of the same nodule can never straddle a fold
//! boundary.

pub mod pgm;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{substream, tags};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }

    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "benign" => Some(Label::Benign),
            "malignant" => Some(Label::Malignant),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Why a nodule was left out of the labeled corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExclusionReason {
    /// Fewer than 3 raters.
    TooFewRaters,
    /// Diameter outside [3, 30] mm.
    Size,
    /// Median rating exactly 3.
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelDecision {
    Labeled(Label),
    Excluded(ExclusionReason),
}

/// Derives a label from rater malignancy scores (1..=5) and the nodule
/// diameter. Checks run in a fixed order: rater count, then size, then the
/// median rule (median below 3 is benign, above 3 malignant, exactly 3
/// indeterminate; an even rater count takes the mean of the middle two).
pub fn label_from_ratings(ratings: &[u8], diameter_mm: f64) -> Result<LabelDecision> {
    for &r in ratings {
        if !(1..=5).contains(&r) {
            return Err(Error::invalid(
                "label_from_ratings",
                format!("rating {r} outside 1..=5"),
            ));
        }
    }
    if !diameter_mm.is_finite() || diameter_mm <= 0.0 {
        return Err(Error::invalid(
            "label_from_ratings",
            format!("diameter must be a positive real, got {diameter_mm}"),
        ));
    }
    if ratings.len() < 3 {
        return Ok(LabelDecision::Excluded(ExclusionReason::TooFewRaters));
    }
    if !(3.0..=30.0).contains(&diameter_mm) {
        return Ok(LabelDecision::Excluded(ExclusionReason::Size));
    }
    let mut sorted = ratings.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    };
    Ok(if median < 3.0 {
        LabelDecision::Labeled(Label::Benign)
    } else if median > 3.0 {
        LabelDecision::Labeled(Label::Malignant)
    } else {
        LabelDecision::Excluded(ExclusionReason::Indeterminate)
    })
}

/// One image of one nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleRecord {
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub image_path: String,
    pub nodule_id: String,
    pub patient_id: String,
    pub label: Label,
    pub diameter_mm: Option<f64>,
    pub ratings: Option<Vec<u8>>,
}

pub const MANIFEST_HEADER: &str = "image_path,nodule_id,patient_id,label,diameter_mm,ratings";

/// An ordered image corpus plus its source tag (derived from the manifest
/// file stem, e.g. `synthetic.csv` -> "synthetic").
#[derive(Clone, Debug)]
pub struct Manifest {
    source: String,
    base_dir: PathBuf,
    records: Vec<NoduleRecord>,
}

impl Manifest {
    /// Builds a manifest in memory, enforcing the corpus invariants:
    /// at least one record, and a nodule never changes label or patient.
    pub fn from_records(
        source: impl Into<String>,
        base_dir: impl Into<PathBuf>,
        records: Vec<NoduleRecord>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("manifest", "no records"));
        }
        let mut seen: BTreeMap<&str, (&str, Label)> = BTreeMap::new();
        for r in &records {
            match seen.get(r.nodule_id.as_str()) {
                None => {
                    seen.insert(&r.nodule_id, (&r.patient_id, r.label));
                }
                Some(&(patient, label)) => {
                    if patient != r.patient_id || label != r.label {
                        return Err(Error::invalid(
                            "manifest",
                            format!(
                                "nodule `{}` appears with conflicting label or patient",
                                r.nodule_id
                            ),
                        ));
                    }
                }
            }
        }
        Ok(Manifest {
            source: source.into(),
            base_dir: base_dir.into(),
            records,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, details: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            details,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            got => {
                return Err(err(
                    1,
                    format!("header must be `{MANIFEST_HEADER}`, got `{}`", got.unwrap_or("")),
                ))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err(line_no, format!("expected 6 fields, got {}", fields.len())));
            }
            let label = Label::parse(fields[3])
                .ok_or_else(|| err(line_no, format!("unknown label `{}`", fields[3])))?;
            let diameter_mm = if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse::<f64>().map_err(|_| {
                    err(line_no, format!("bad diameter `{}`", fields[4]))
                })?)
            };
            let ratings = if fields[5].is_empty() {
                None
            } else {
                let vals: std::result::Result<Vec<u8>, _> =
                    fields[5].split('|').map(|t| t.parse::<u8>()).collect();
                let vals =
                    vals.map_err(|_| err(line_no, format!("bad ratings `{}`", fields[5])))?;
                if vals.iter().any(|&v| !(1..=5).contains(&v)) {
                    return Err(err(line_no, format!("rating outside 1..=5 in `{}`", fields[5])));
                }
                Some(vals)
            };
            if fields[0].is_empty() || fields[1].is_empty() || fields[2].is_empty() {
                return Err(err(line_no, "image path, nodule id, and patient id are required".into()));
            }
            records.push(NoduleRecord {
                image_path: fields[0].to_string(),
                nodule_id: fields[1].to_string(),
                patient_id: fields[2].to_string(),
                label,
                diameter_mm,
                ratings,
            });
        }
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manifest".to_string());
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::from_records(source, base_dir, records).map_err(|e| match e {
            Error::InvalidArgument { details, .. } => err(1, details),
            other => other,
        })
    }

    /// Writes the canonical CSV form: exact header, LF line endings, label
    /// lowercase, empty cells for missing diameter/ratings, ratings joined
    /// with `|`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let diameter = r.diameter_mm.map(|d| d.to_string()).unwrap_or_default();
            let ratings = r
                .ratings
                .as_ref()
                .map(|v| {
                    v.iter()
                        .map(|x| x.to_string())
                        .collect::<Vec<_>>()
                        .join("|")
                })
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.image_path, r.nodule_id, r.patient_id, r.label, diameter, ratings
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Directory relative image paths resolve against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn records(&self) -> &[NoduleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Absolute path of a record's image.
    pub fn resolve_image_path(&self, record: &NoduleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Distinct nodule ids in first-appearance order.
    pub fn nodule_ids(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.nodule_id.as_str()) {
                out.push(r.nodule_id.as_str());
            }
        }
        out
    }

    /// Label of each distinct nodule.
    pub fn nodule_labels(&self) -> BTreeMap<&str, Label> {
        self.records
            .iter()
            .map(|r| (r.nodule_id.as_str(), r.label))
            .collect()
    }

    /// Loads every image, in record order.
    pub fn load_images(&self) -> Result<Vec<Tensor>> {
        self.records
            .iter()
            .map(|r| pgm::load_image(&self.resolve_image_path(r)))
            .collect()
    }

    fn with_records(&self, records: Vec<NoduleRecord>) -> Result<Manifest> {
        Manifest::from_records(self.source.clone(), self.base_dir.clone(), records)
    }
}

/// Keeps at most `cap` images per nodule, preferring earlier records; record
/// order is otherwise preserved, so the operation is idempotent.
pub fn cap_images_per_nodule(manifest: &Manifest, cap: usize) -> Result<Manifest> {
    if cap == 0 {
        return Err(Error::invalid("cap_images_per_nodule", "cap must be positive"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut kept = Vec::new();
    for r in manifest.records() {
        let c = counts.entry(r.nodule_id.as_str()).or_insert(0);
        if *c < cap {
            *c += 1;
            kept.push(r.clone());
        }
    }
    manifest.with_records(kept)
}

/// Nodule-to-fold assignment for k-fold cross-validation.
#[derive(Clone, Debug)]
pub struct FoldAssignment {
    k: usize,
    map: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, nodule_id: &str) -> Option<usize> {
        self.map.get(nodule_id).copied()
    }

    /// Nodules per fold.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &f in self.map.values() {
            counts[f] += 1;
        }
        counts
    }
}

/// Stratified k-fold split at the nodule level. Each class's nodules are
/// shuffled independently (substreams of `seed`), then dealt round-robin
/// with a single pointer that carries over from the benign list to the
/// malignant list, so both per-class and total fold sizes differ by at most
/// one nodule.
pub fn stratified_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(
            "stratified_kfold",
            format!("k must be at least 2, got {k}"),
        ));
    }
    let labels = manifest.nodule_labels();
    let mut benign: Vec<&str> = Vec::new();
    let mut malignant: Vec<&str> = Vec::new();
    for id in manifest.nodule_ids() {
        match labels[id] {
            Label::Benign => benign.push(id),
            Label::Malignant => malignant.push(id),
        }
    }
    let total = benign.len() + malignant.len();
    if total < k {
        return Err(Error::invalid(
            "stratified_kfold",
            format!("{total} nodules cannot fill {k} folds"),
        ));
    }
    benign.shuffle(&mut substream(seed, &[tags::KFOLD, 0]));
    malignant.shuffle(&mut substream(seed, &[tags::KFOLD, 1]));
    let mut map = BTreeMap::new();
    let mut ptr = 0usize;
    for id in benign.into_iter().chain(malignant) {
        map.insert(id.to_string(), ptr);
        ptr = (ptr + 1) % k;
    }
    Ok(FoldAssignment { k, map })
}

/// Splits a manifest into (train, test) for one fold. Record order is
/// preserved in both halves.
pub fn split_by_fold(
    manifest: &Manifest,
    assignment: &FoldAssignment,
    fold: usize,
) -> Result<(Manifest, Manifest)> {
    if fold >= assignment.k() {
        return Err(Error::invalid(
            "split_by_fold",
            format!("fold {fold} out of range for k={}", assignment.k()),
        ));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in manifest.records() {
        match assignment.fold_of(&r.nodule_id) {
            Some(f) if f == fold => test.push(r.clone()),
            Some(_) => train.push(r.clone()),
            None => {
                return Err(Error::invalid(
                    "split_by_fold",
                    format!("nodule `{}` has no fold assignment", r.nodule_id),
                ))
            }
        }
    }
    Ok((manifest.with_records(train)?, manifest.with_records(test)?))
}
