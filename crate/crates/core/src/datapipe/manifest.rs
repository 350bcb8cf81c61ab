//! Dataset bookkeeping: graded samples, manifests on disk, expansion by
//! augmentation and stratified splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::imageops::AugTag;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Number of severity grades.
pub const GRADES: usize = 5;

/// Diabetic retinopathy severity, 0 (none) to 4 (proliferative).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DRGrade(u8);

impl DRGrade {
    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < GRADES {
            Ok(DRGrade(value))
        } else {
            Err(Error::Validation(format!("grade {value} outside 0..=4")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        ["none", "mild", "moderate", "severe", "proliferative"][self.index()]
    }

    /// Accepts `3` or `DR3` (any case).
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let digits = t
            .strip_prefix("DR")
            .or_else(|| t.strip_prefix("dr"))
            .unwrap_or(t);
        let v: u8 = digits
            .parse()
            .map_err(|_| Error::Validation(format!("cannot read grade from {text:?}")))?;
        DRGrade::new(v)
    }
}

impl fmt::Display for DRGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DR{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split {s:?}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest record. Augmented samples share the path of their original;
/// the transform is applied when the image is loaded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub grade: DRGrade,
    pub split: Option<Split>,
    pub aug: AugTag,
}

impl Sample {
    pub fn original(path: impl Into<PathBuf>, grade: DRGrade) -> Self {
        Sample {
            path: path.into(),
            grade,
            split: None,
            aug: AugTag::Orig,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    grade: u8,
    split: String,
    aug_tag: String,
}

/// Ordered samples plus the name of the dataset they came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub source: String,
    pub samples: Vec<Sample>,
}

impl Manifest {
    pub fn new(source: impl Into<String>, samples: Vec<Sample>) -> Self {
        Manifest {
            source: source.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples per grade.
    pub fn class_counts(&self) -> [usize; GRADES] {
        let mut counts = [0; GRADES];
        for s in &self.samples {
            counts[s.grade.index()] += 1;
        }
        counts
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn originals(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.aug == AugTag::Orig)
    }

    /// Checks that each image path has a single grade and a single split,
    /// i.e. that no augmented copy has leaked across splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&Path, (DRGrade, Option<Split>)> = BTreeMap::new();
        for s in &self.samples {
            let entry = seen.entry(&s.path).or_insert((s.grade, s.split));
            if *entry != (s.grade, s.split) {
                return Err(Error::Validation(format!(
                    "{} appears with inconsistent grade or split",
                    s.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.samples {
            let path = s.path.to_str().ok_or_else(|| {
                Error::Validation(format!("non UTF-8 path {}", s.path.display()))
            })?;
            w.serialize(Row {
                path: path.to_string(),
                grade: s.grade.value(),
                split: s.split.map(Split::as_str).unwrap_or("").to_string(),
                aug_tag: s.aug.as_str().to_string(),
            })
            .map_err(|e| Error::Validation(format!("manifest row: {e}")))?;
        }
        if self.samples.is_empty() {
            w.write_record(["path", "grade", "split", "aug_tag"])
                .map_err(|e| Error::Validation(format!("manifest header: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Validation(format!("manifest: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(source: impl Into<String>, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| Error::Validation(format!("manifest header: {e}")))?;
        if headers.iter().collect::<Vec<_>>() != ["path", "grade", "split", "aug_tag"] {
            return Err(Error::Validation(format!(
                "manifest header must be path,grade,split,aug_tag, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut samples = Vec::new();
        for (i, row) in r.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Validation(format!("manifest line {}: {e}", i + 2)))?;
            samples.push(Sample {
                path: PathBuf::from(row.path),
                grade: DRGrade::new(row.grade)?,
                split: if row.split.is_empty() {
                    None
                } else {
                    Some(row.split.parse()?)
                },
                aug: row.aug_tag.parse()?,
            });
        }
        let m = Manifest::new(source, samples);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest. Relative image paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut m = Manifest::from_csv(source, &text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for s in &mut m.samples {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
        }
        Ok(m)
    }
}

/// How many augmented copies each original receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpandPolicy {
    /// One transform drawn uniformly per original: exactly 2x.
    OneRandom,
    /// All four transforms: exactly 5x.
    Full,
    None,
}

impl std::str::FromStr for ExpandPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-random" => Ok(ExpandPolicy::OneRandom),
            "full" => Ok(ExpandPolicy::Full),
            "none" => Ok(ExpandPolicy::None),
            _ => Err(Error::Config(format!(
                "unknown augmentation policy {s:?} (one-random, full, none)"
            ))),
        }
    }
}

/// Adds augmented variants right after each original. Variants inherit the
/// original's path, grade and split. Existing variants are dropped first, so
/// expanding twice equals expanding once.
pub fn expand_dataset(manifest: &Manifest, policy: ExpandPolicy, seed: u64) -> Manifest {
    let mut rng = stream_rng(seed, Stream::Augment, 0);
    let mut samples = Vec::new();
    for orig in manifest.originals() {
        samples.push(orig.clone());
        let tags: Vec<AugTag> = match policy {
            ExpandPolicy::None => vec![],
            ExpandPolicy::Full => AugTag::TRANSFORMS.to_vec(),
            ExpandPolicy::OneRandom => {
                vec![AugTag::TRANSFORMS[rng.random_range(0..AugTag::TRANSFORMS.len())]]
            }
        };
        for aug in tags {
            samples.push(Sample { aug, ..orig.clone() });
        }
    }
    Manifest::new(manifest.source.clone(), samples)
}

/// Split sizes for `n` items: floors of `n * fraction`, then the leftover
/// items go one each to test, val, train in that order.
pub fn allocate_split(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = fractions.map(|f| (n as f64 * f + 1e-9).floor() as usize);
    let mut left = n.saturating_sub(counts.iter().sum());
    for i in [2, 1, 0].into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Stratified train/val/test assignment. Each grade's distinct images are
/// shuffled with the seed and cut by [`allocate_split`]; every sample then
/// takes the split of its image, so augmented copies never leave their
/// original's split. Grades with fewer than 3 images go entirely to train.
pub fn split_dataset(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    check_fractions(fractions)?;
    manifest.validate()?;
    let mut by_grade: BTreeMap<DRGrade, Vec<&Path>> = BTreeMap::new();
    for s in &manifest.samples {
        let paths = by_grade.entry(s.grade).or_default();
        if !paths.contains(&s.path.as_path()) {
            paths.push(&s.path);
        }
    }
    let mut assignment: BTreeMap<&Path, Split> = BTreeMap::new();
    for (grade, mut paths) in by_grade {
        paths.sort();
        if paths.len() < 3 {
            log::warn!(
                "grade {grade} has only {} image(s); all assigned to train",
                paths.len()
            );
            for p in paths {
                assignment.insert(p, Split::Train);
            }
            continue;
        }
        paths.shuffle(&mut stream_rng(seed, Stream::Split, grade.value() as u64));
        let [train, val, _] = allocate_split(paths.len(), fractions);
        for (i, p) in paths.into_iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            assignment.insert(p, split);
        }
    }
    let samples = manifest
        .samples
        .iter()
        .map(|s| Sample {
            split: Some(assignment[s.path.as_path()]),
            ..s.clone()
        })
        .collect();
    Ok(Manifest::new(manifest.source.clone(), samples))
}

/// Per-grade tallies and fractions of a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub counts: [usize; GRADES],
    pub total: usize,
    /// `counts / total`; all zero for an empty manifest.
    pub fractions: [f64; GRADES],
}

pub fn class_distribution(manifest: &Manifest) -> ClassDistribution {
    let counts = manifest.class_counts();
    let total: usize = counts.iter().sum();
    let fractions = counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 });
    ClassDistribution {
        counts,
        total,
        fractions,
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Collects labelled originals from `dir`. With a `labels.csv` (columns
/// `path,grade`, paths relative to `dir`) that file is authoritative;
/// otherwise images are read from grade subdirectories named `0`..`4` or
/// `DR0`..`DR4`. Samples are sorted by path.
pub fn scan_input_dir(dir: &Path) -> Result<Manifest> {
    let source = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut samples = Vec::new();
    let labels = dir.join("labels.csv");
    if labels.is_file() {
        #[derive(Deserialize)]
        struct LabelRow {
            path: String,
            grade: String,
        }
        let text = std::fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for (i, row) in r.deserialize::<LabelRow>().enumerate() {
            let row = row.map_err(|e| Error::Ingestion {
                path: labels.clone(),
                message: format!("line {}: {e}", i + 2),
            })?;
            let path = dir.join(&row.path);
            if !path.is_file() {
                return Err(Error::Ingestion {
                    path,
                    message: "listed in labels.csv but missing".into(),
                });
            }
            samples.push(Sample::original(path, DRGrade::parse(&row.grade)?));
        }
    } else {
        for sub in read_dir_sorted(dir)? {
            if !sub.is_dir() {
                continue;
            }
            let name = sub.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Ok(grade) = DRGrade::parse(&name) else {
                log::warn!("skipping directory {} (not a grade)", sub.display());
                continue;
            };
            for path in read_dir_sorted(&sub)? {
                if path.is_file() && is_image(&path) {
                    samples.push(Sample::original(path, grade));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Validation(format!("no labelled images found in {}", dir.display())));
    }
    samples.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest::new(source, samples))
}
