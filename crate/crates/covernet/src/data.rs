//! Dataset manifest protocol: parsing, single-category resolution,
//! per-class balancing, stratified splitting, and the dense label map.
//!
//! Raw class ids live in [0, 32); an experiment works with a 30-class
//! subset, so dense labels in [0, 30) are always an explicit, serialized
//! remapping and never an implicit convention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, domain};

/// Raw class-id space of the full catalog.
pub const RAW_CLASS_COUNT: u32 = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("manifest line {line}: class id {class_id} is outside [0, {RAW_CLASS_COUNT})")]
    ClassIdRange { line: u64, class_id: i64 },
    #[error("manifest line {line}: class {class_id} named {actual:?}, expected {expected:?}")]
    ClassNameMismatch {
        line: u64,
        class_id: u32,
        expected: String,
        actual: String,
    },
    #[error(
        "class {class_id} ({class_name:?}) has {available} records, {required} required"
    )]
    UnderPopulatedClass {
        class_id: u32,
        class_name: String,
        available: usize,
        required: usize,
    },
    #[error("classes are not uniformly sized: class {class_id} has {count}, expected {expected}")]
    UnbalancedInput {
        class_id: u32,
        count: usize,
        expected: usize,
    },
    #[error("train fraction {0} is outside (0, 1)")]
    BadTrainFrac(f64),
    #[error("train fraction {frac} leaves an empty {side} side for classes of {per_class}")]
    DegenerateSplit {
        frac: f64,
        per_class: usize,
        side: &'static str,
    },
    #[error("class table line {line}: {reason}")]
    MalformedClassTable { line: u64, reason: String },
    #[error("label map line {line}: {reason}")]
    MalformedLabelMap { line: u64, reason: String },
    #[error("split metadata: {0}")]
    BadSplitMeta(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One catalog entry. `image_url` is carried as metadata only; nothing
/// downstream dereferences it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BookRecord {
    pub id: String,
    pub image_file: String,
    pub image_url: String,
    pub title: String,
    pub author: String,
    pub class_id: u32,
    pub class_name: String,
}

fn row_line(pos: Option<&csv::Position>) -> u64 {
    pos.map(|p| p.line()).unwrap_or(0)
}

/// Parses the seven-column manifest CSV (no header row). Duplicate ids
/// are legal here: a book listed under several categories appears once
/// per category until [`resolve_single_class`] collapses it.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<BookRecord>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes);
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::MalformedRow {
            line: row_line(e.position()),
            reason: e.to_string(),
        })?;
        let line = row_line(row.position());
        if row.len() != 7 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected 7 fields, got {}", row.len()),
            });
        }
        let class_id: i64 = row[5].trim().parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("class id {:?} is not an integer", &row[5]),
        })?;
        if class_id < 0 || class_id >= i64::from(RAW_CLASS_COUNT) {
            return Err(DataError::ClassIdRange { line, class_id });
        }
        records.push(BookRecord {
            id: row[0].to_string(),
            image_file: row[1].to_string(),
            image_url: row[2].to_string(),
            title: row[3].to_string(),
            author: row[4].to_string(),
            class_id: class_id as u32,
            class_name: row[6].to_string(),
        });
    }
    Ok(records)
}

/// Inverse of [`parse_manifest`]; quoting is applied where needed.
pub fn write_manifest(records: &[BookRecord]) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for r in records {
        writer
            .write_record([
                r.id.as_str(),
                r.image_file.as_str(),
                r.image_url.as_str(),
                r.title.as_str(),
                r.author.as_str(),
                &r.class_id.to_string(),
                r.class_name.as_str(),
            ])
            .expect("writing to memory cannot fail");
    }
    writer.into_inner().expect("writing to memory cannot fail")
}

/// Raw class id → display name, from a two-column `classId,className`
/// file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: BTreeMap<u32, String>,
}

impl ClassTable {
    pub fn parse(bytes: &[u8]) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(bytes);
        let mut names = BTreeMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| DataError::MalformedClassTable {
                line: row_line(e.position()),
                reason: e.to_string(),
            })?;
            let line = row_line(row.position());
            if row.len() != 2 {
                return Err(DataError::MalformedClassTable {
                    line,
                    reason: format!("expected 2 fields, got {}", row.len()),
                });
            }
            let id: u32 = row[0].trim().parse().map_err(|_| DataError::MalformedClassTable {
                line,
                reason: format!("class id {:?} is not an integer", &row[0]),
            })?;
            if id >= RAW_CLASS_COUNT {
                return Err(DataError::MalformedClassTable {
                    line,
                    reason: format!("class id {id} is outside [0, {RAW_CLASS_COUNT})"),
                });
            }
            if names.insert(id, row[1].to_string()).is_some() {
                return Err(DataError::MalformedClassTable {
                    line,
                    reason: format!("class id {id} listed twice"),
                });
            }
        }
        Ok(Self { names })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for (id, name) in &self.names {
            writer
                .write_record([id.to_string().as_str(), name])
                .expect("writing to memory cannot fail");
        }
        writer.into_inner().expect("writing to memory cannot fail")
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.names.get(&class_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.names.keys().copied()
    }

    /// Every record's (classId, className) pair must agree with the
    /// table. Records come line-numbered from the manifest order, so the
    /// first offender is cited by its position (1-based).
    pub fn check_records(&self, records: &[BookRecord]) -> Result<(), DataError> {
        for (i, r) in records.iter().enumerate() {
            let expected = self.name(r.class_id).unwrap_or("");
            if r.class_name != expected {
                return Err(DataError::ClassNameMismatch {
                    line: i as u64 + 1,
                    class_id: r.class_id,
                    expected: expected.to_string(),
                    actual: r.class_name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Collapses multi-category listings: every id keeps exactly one record,
/// chosen uniformly from its candidates on a stream keyed by the id, so
/// the survivor does not depend on manifest order or on other ids.
/// Output preserves first-occurrence order.
pub fn resolve_single_class(records: &[BookRecord], seed: u64) -> Vec<BookRecord> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&BookRecord>> = BTreeMap::new();
    for r in records {
        let slot = groups.entry(r.id.as_str()).or_default();
        if slot.is_empty() {
            order.push(r.id.as_str());
        }
        slot.push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let candidates = &groups[id];
            let pick = if candidates.len() == 1 {
                0
            } else {
                let mut stream =
                    rng::stream(seed, domain::RESOLVE_CLASS, &[rng::hash_str(id)]);
                stream.random_range(0..candidates.len())
            };
            candidates[pick].clone()
        })
        .collect()
}

/// Uniform subsample to exactly `per_class` records for every included
/// class; excluded classes are dropped. Selected records keep their
/// original relative order; output is grouped by ascending class id.
pub fn balance_classes(
    records: &[BookRecord],
    per_class: usize,
    included: &BTreeSet<u32>,
    seed: u64,
) -> Result<Vec<BookRecord>, DataError> {
    let mut by_class: BTreeMap<u32, Vec<&BookRecord>> = BTreeMap::new();
    for r in records {
        if included.contains(&r.class_id) {
            by_class.entry(r.class_id).or_default().push(r);
        }
    }
    for &class_id in included {
        let available = by_class.get(&class_id).map_or(0, Vec::len);
        if available < per_class {
            let class_name = by_class
                .get(&class_id)
                .and_then(|v| v.first())
                .map(|r| r.class_name.clone())
                .unwrap_or_default();
            return Err(DataError::UnderPopulatedClass {
                class_id,
                class_name,
                available,
                required: per_class,
            });
        }
    }
    let mut out = Vec::with_capacity(per_class * included.len());
    for (class_id, members) in &by_class {
        let n = members.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut stream = rng::stream(seed, domain::BALANCE, &[u64::from(*class_id)]);
        // Partial Fisher-Yates: the first per_class slots are a uniform
        // subset; re-sorting restores manifest order within the class.
        for i in 0..per_class {
            let j = stream.random_range(i..n);
            idx.swap(i, j);
        }
        let mut chosen = idx[..per_class].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

/// Balanced, disjoint train/test views over one record set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<BookRecord>,
    pub test: Vec<BookRecord>,
    pub seed: u64,
    pub per_class_count: usize,
}

/// Stratified split: each class is shuffled on its own keyed stream and
/// contributes `round(train_frac * per_class)` records to train, the
/// rest to test. Input must be class-balanced.
pub fn split(
    records: &[BookRecord],
    train_frac: f64,
    seed: u64,
) -> Result<SplitManifest, DataError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::BadTrainFrac(train_frac));
    }
    let mut by_class: BTreeMap<u32, Vec<&BookRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class_id).or_default().push(r);
    }
    let per_class = by_class.values().next().map_or(0, Vec::len);
    for (&class_id, members) in &by_class {
        if members.len() != per_class {
            return Err(DataError::UnbalancedInput {
                class_id,
                count: members.len(),
                expected: per_class,
            });
        }
    }
    let n_train = (train_frac * per_class as f64).round() as usize;
    if n_train == 0 || n_train == per_class {
        return Err(DataError::DegenerateSplit {
            frac: train_frac,
            per_class,
            side: if n_train == 0 { "train" } else { "test" },
        });
    }
    let mut train = Vec::with_capacity(n_train * by_class.len());
    let mut test = Vec::with_capacity((per_class - n_train) * by_class.len());
    for (&class_id, members) in &by_class {
        let mut shuffled: Vec<&BookRecord> = members.clone();
        let mut stream = rng::stream(seed, domain::SPLIT, &[u64::from(class_id)]);
        rng::shuffle(&mut shuffled, &mut stream);
        train.extend(shuffled[..n_train].iter().map(|r| (*r).clone()));
        test.extend(shuffled[n_train..].iter().map(|r| (*r).clone()));
    }
    Ok(SplitManifest {
        train,
        test,
        seed,
        per_class_count: per_class,
    })
}

/// Dense experiment labels: the distinct raw class ids, ascending, are
/// assigned indices 0..K. Always serialized next to anything that stores
/// dense labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    raw_ids: Vec<u32>,
    names: Vec<String>,
}

impl LabelMap {
    pub fn from_records(records: &[BookRecord]) -> Self {
        let mut seen: BTreeMap<u32, String> = BTreeMap::new();
        for r in records {
            seen.entry(r.class_id).or_insert_with(|| r.class_name.clone());
        }
        let (raw_ids, names) = seen.into_iter().unzip();
        Self { raw_ids, names }
    }

    pub fn class_count(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn dense(&self, raw_id: u32) -> Option<usize> {
        self.raw_ids.binary_search(&raw_id).ok()
    }

    pub fn raw(&self, dense: usize) -> Option<u32> {
        self.raw_ids.get(dense).copied()
    }

    pub fn name(&self, dense: usize) -> Option<&str> {
        self.names.get(dense).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Three columns: dense index, raw class id, class name.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for (dense, (raw, name)) in self.raw_ids.iter().zip(&self.names).enumerate() {
            writer
                .write_record([dense.to_string().as_str(), raw.to_string().as_str(), name])
                .expect("writing to memory cannot fail");
        }
        writer.into_inner().expect("writing to memory cannot fail")
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(bytes);
        let mut raw_ids = Vec::new();
        let mut names = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| DataError::MalformedLabelMap {
                line: row_line(e.position()),
                reason: e.to_string(),
            })?;
            let line = row_line(row.position());
            if row.len() != 3 {
                return Err(DataError::MalformedLabelMap {
                    line,
                    reason: format!("expected 3 fields, got {}", row.len()),
                });
            }
            let dense: usize = row[0].trim().parse().map_err(|_| {
                DataError::MalformedLabelMap {
                    line,
                    reason: format!("dense index {:?} is not an integer", &row[0]),
                }
            })?;
            if dense != i {
                return Err(DataError::MalformedLabelMap {
                    line,
                    reason: format!("dense index {dense} out of sequence, expected {i}"),
                });
            }
            let raw: u32 = row[1].trim().parse().map_err(|_| {
                DataError::MalformedLabelMap {
                    line,
                    reason: format!("raw class id {:?} is not an integer", &row[1]),
                }
            })?;
            if let Some(&prev) = raw_ids.last() {
                if raw <= prev {
                    return Err(DataError::MalformedLabelMap {
                        line,
                        reason: format!("raw class ids must ascend, {raw} after {prev}"),
                    });
                }
            }
            raw_ids.push(raw);
            names.push(row[2].to_string());
        }
        Ok(Self { raw_ids, names })
    }
}

/// File names a prepared split directory contains.
pub mod split_files {
    pub const TRAIN: &str = "train.csv";
    pub const TEST: &str = "test.csv";
    pub const LABELS: &str = "labels.csv";
    pub const META: &str = "split.meta";
}

/// Writes `train.csv`, `test.csv`, `labels.csv`, and a `split.meta`
/// key=value record (seed, per-class count) into `dir`.
pub fn write_split(
    dir: &Path,
    manifest: &SplitManifest,
    labels: &LabelMap,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))
    };
    write(split_files::TRAIN, &write_manifest(&manifest.train))?;
    write(split_files::TEST, &write_manifest(&manifest.test))?;
    write(split_files::LABELS, &labels.to_bytes())?;
    let mut meta = String::new();
    let _ = writeln!(meta, "seed={}", manifest.seed);
    let _ = writeln!(meta, "perClassCount={}", manifest.per_class_count);
    write(split_files::META, meta.as_bytes())
}

/// Reads a directory written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(SplitManifest, LabelMap), DataError> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read(&path).map_err(io_err(&path))
    };
    let train = parse_manifest(&read(split_files::TRAIN)?)?;
    let test = parse_manifest(&read(split_files::TEST)?)?;
    let labels = LabelMap::parse(&read(split_files::LABELS)?)?;
    let meta = String::from_utf8_lossy(&read(split_files::META)?).into_owned();
    let mut seed = None;
    let mut per_class = None;
    for line in meta.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DataError::BadSplitMeta(format!("no '=' in {line:?}")))?;
        match key {
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|_| {
                    DataError::BadSplitMeta(format!("seed {value:?} is not an integer"))
                })?)
            }
            "perClassCount" => {
                per_class = Some(value.parse::<usize>().map_err(|_| {
                    DataError::BadSplitMeta(format!("perClassCount {value:?} is not an integer"))
                })?)
            }
            other => {
                return Err(DataError::BadSplitMeta(format!("unknown key {other:?}")));
            }
        }
    }
    Ok((
        SplitManifest {
            train,
            test,
            seed: seed.ok_or_else(|| DataError::BadSplitMeta("seed missing".into()))?,
            per_class_count: per_class
                .ok_or_else(|| DataError::BadSplitMeta("perClassCount missing".into()))?,
        },
        labels,
    ))
}
