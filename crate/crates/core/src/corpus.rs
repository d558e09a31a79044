//! Labeled datasets: label schemas, loading, serialization, class audits.
//!
//! Three task shapes are supported: 5-way language identification (A),
//! binary hate speech detection (B) and 3-way hate target detection (C).
//! Files are CSV or TSV with a header row, or JSON lines.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Task identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    A,
    B,
    C,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::A, TaskId::B, TaskId::C];
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskId::A => "A",
            TaskId::B => "B",
            TaskId::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskId {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(TaskId::A),
            "B" => Ok(TaskId::B),
            "C" => Ok(TaskId::C),
            _ => Err(CorpusError::UnknownTask(s.to_string())),
        }
    }
}

/// Ordered label names for a task. A label's code is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    task: TaskId,
    labels: Vec<String>,
}

impl LabelSchema {
    pub fn for_task(task: TaskId) -> Self {
        let labels: &[&str] = match task {
            TaskId::A => &["Nepali", "Marathi", "Sanskrit", "Bhojpuri", "Hindi"],
            TaskId::B => &["Non-hate", "Hate"],
            TaskId::C => &["Individual", "Organization", "Community"],
        };
        LabelSchema {
            task,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, code: u32) -> Option<&str> {
        self.labels.get(code as usize).map(String::as_str)
    }

    pub fn contains(&self, code: u32) -> bool {
        (code as usize) < self.labels.len()
    }

    /// Case-insensitive name lookup.
    pub fn code_of(&self, name: &str) -> Option<u32> {
        let name = name.trim().to_lowercase();
        self.labels
            .iter()
            .position(|l| l.to_lowercase() == name)
            .map(|i| i as u32)
    }

    /// Parses a raw label field: an integer code or a label name.
    pub fn parse_label(&self, raw: &str) -> Result<u32, RecordErrorKind> {
        let raw = raw.trim();
        if let Ok(code) = raw.parse::<i64>() {
            if code >= 0 && (code as usize) < self.labels.len() {
                return Ok(code as u32);
            }
            return Err(RecordErrorKind::CodeOutOfRange {
                code,
                num_labels: self.labels.len(),
            });
        }
        self.code_of(raw)
            .ok_or_else(|| RecordErrorKind::UnknownLabel(raw.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub fn requires_labels(self) -> bool {
        !matches!(self, SplitName::Test)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Tsv,
    Jsonl,
}

impl DataFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(DataFormat::Csv),
            "tsv" => Some(DataFormat::Tsv),
            "jsonl" | "ndjson" => Some(DataFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for DataFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "tsv" => Ok(DataFormat::Tsv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub schema: LabelSchema,
    pub examples: Vec<LabeledExample>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, schema: LabelSchema, examples: Vec<LabeledExample>) -> Self {
        DatasetSplit { name, schema, examples }
    }

    pub fn empty(name: SplitName, schema: LabelSchema) -> Self {
        Self::new(name, schema, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// True when every example carries a gold label. Empty splits count as labeled.
    pub fn is_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.label.is_some())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }

    /// Gold labels, or the index of the first unlabeled example.
    pub fn gold_labels(&self) -> Result<Vec<u32>, CorpusError> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| e.label.ok_or(CorpusError::Unlabeled { index: i }))
            .collect()
    }
}

/// Per-label counts; `counts[code]` is the number of examples with that code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ClassDistribution {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        ClassDistribution { counts, total }
    }

    pub fn get(&self, code: u32) -> u64 {
        self.counts.get(code as usize).copied().unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Per-class weights indexed by label code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn get(&self, code: u32) -> Option<f64> {
        self.0.get(code as usize).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordErrorKind {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label code out of range: {code} (schema has {num_labels} labels)")]
    CodeOutOfRange { code: i64, num_labels: usize },
    #[error("empty text")]
    EmptyText,
    #[error("missing label")]
    MissingLabel,
    #[error("malformed record: {0}")]
    Malformed(String),
}

/// A record that could not be ingested, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct RecordError {
    pub line: u64,
    pub kind: RecordErrorKind,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("dataset not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("cannot read {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", .path.display())]
    Record {
        path: PathBuf,
        #[source]
        source: RecordError,
    },
    #[error("{}: no text column", .0.display())]
    NoTextColumn(PathBuf),
    #[error("{name} split must carry labels")]
    LabelsRequired { name: SplitName },
    #[error("unlabeled example at index {index}")]
    Unlabeled { index: usize },
    #[error("schema mismatch: task {left} vs task {right}")]
    SchemaMismatch { left: TaskId, right: TaskId },
    #[error("class {code} has zero examples")]
    ZeroCount { code: u32 },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("unknown data format {0:?}")]
    UnknownFormat(String),
    #[error("serialization failed: {0}")]
    Serialize(String),
}

/// Result of a lenient load: every input record is either an example or an error.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub split: DatasetSplit,
    pub errors: Vec<RecordError>,
    pub records_seen: usize,
}

struct RawRecord {
    line: u64,
    text: String,
    label: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    if source.kind() == std::io::ErrorKind::NotFound {
        CorpusError::NotFound(path.to_path_buf())
    } else {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn read_delimited(path: &Path, delimiter: u8) -> Result<Vec<Result<RawRecord, RecordError>>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (text_col, label_col) = match find("text") {
        Some(t) => (t, find("label")),
        None if headers.is_empty() => return Err(CorpusError::NoTextColumn(path.to_path_buf())),
        None => (0, if headers.len() > 1 { Some(1) } else { None }),
    };

    let mut out = Vec::new();
    for rec in reader.records() {
        match rec {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                match rec.get(text_col) {
                    Some(text) => out.push(Ok(RawRecord {
                        line,
                        text: text.to_string(),
                        label: label_col.and_then(|c| rec.get(c)).map(str::to_string),
                    })),
                    None => out.push(Err(RecordError {
                        line,
                        kind: RecordErrorKind::Malformed("missing text field".into()),
                    })),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if let csv::ErrorKind::Io(_) = e.kind() {
                    return Err(CorpusError::Io {
                        path: path.to_path_buf(),
                        source: std::io::Error::other(e.to_string()),
                    });
                }
                out.push(Err(RecordError {
                    line,
                    kind: RecordErrorKind::Malformed(e.to_string()),
                }));
            }
        }
    }
    Ok(out)
}

fn read_jsonl(path: &Path) -> Result<Vec<Result<RawRecord, RecordError>>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| RecordError {
            line: line_no,
            kind: RecordErrorKind::Malformed(msg),
        };
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.push(Err(malformed(e.to_string())));
                continue;
            }
        };
        let Some(text) = value.get("text").and_then(|t| t.as_str()) else {
            out.push(Err(malformed("missing string field \"text\"".into())));
            continue;
        };
        let label = match value.get("label") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(other) => {
                out.push(Err(malformed(format!("unsupported label value {other}"))));
                continue;
            }
        };
        out.push(Ok(RawRecord {
            line: line_no,
            text: text.to_string(),
            label,
        }));
    }
    Ok(out)
}

/// Loads a split, collecting per-record errors instead of failing.
///
/// With `has_labels` every record must carry a label. Without it a label is
/// still read when the record has a non-empty label field.
pub fn load_dataset_report(
    path: &Path,
    format: DataFormat,
    schema: &LabelSchema,
    name: SplitName,
    has_labels: bool,
) -> Result<LoadReport, CorpusError> {
    if name.requires_labels() && !has_labels {
        return Err(CorpusError::LabelsRequired { name });
    }
    let raw = match format {
        DataFormat::Csv => read_delimited(path, b',')?,
        DataFormat::Tsv => read_delimited(path, b'\t')?,
        DataFormat::Jsonl => read_jsonl(path)?,
    };
    let records_seen = raw.len();
    let mut examples = Vec::with_capacity(records_seen);
    let mut errors = Vec::new();
    for rec in raw {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(e);
                continue;
            }
        };
        let fail = |kind| RecordError { line: rec.line, kind };
        if rec.text.trim().is_empty() {
            errors.push(fail(RecordErrorKind::EmptyText));
            continue;
        }
        let raw_label = rec.label.as_deref().filter(|l| !l.trim().is_empty());
        let label = match raw_label {
            Some(l) => match schema.parse_label(l) {
                Ok(code) => Some(code),
                Err(kind) => {
                    errors.push(fail(kind));
                    continue;
                }
            },
            None if has_labels => {
                errors.push(fail(RecordErrorKind::MissingLabel));
                continue;
            }
            None => None,
        };
        examples.push(LabeledExample { text: rec.text, label });
    }
    Ok(LoadReport {
        split: DatasetSplit::new(name, schema.clone(), examples),
        errors,
        records_seen,
    })
}

/// Loads a split, failing on the first bad record.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    schema: &LabelSchema,
    name: SplitName,
    has_labels: bool,
) -> Result<DatasetSplit, CorpusError> {
    let mut report = load_dataset_report(path, format, schema, name, has_labels)?;
    if !report.errors.is_empty() {
        return Err(CorpusError::Record {
            path: path.to_path_buf(),
            source: report.errors.swap_remove(0),
        });
    }
    Ok(report.split)
}

/// Writes a split as UTF-8 with LF line endings. Labels are written as codes.
pub fn write_dataset(split: &DatasetSplit, path: &Path, format: DataFormat) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let ser = |e: &dyn fmt::Display| CorpusError::Serialize(e.to_string());
    match format {
        DataFormat::Csv | DataFormat::Tsv => {
            let delim = if format == DataFormat::Csv { b',' } else { b'\t' };
            let mut cw = csv::WriterBuilder::new()
                .delimiter(delim)
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(w);
            cw.write_record(["text", "label"]).map_err(|e| ser(&e))?;
            for ex in &split.examples {
                let label = ex.label.map(|l| l.to_string()).unwrap_or_default();
                cw.write_record([ex.text.as_str(), label.as_str()])
                    .map_err(|e| ser(&e))?;
            }
            cw.flush().map_err(|e| io_err(path, e))?;
        }
        DataFormat::Jsonl => {
            for ex in &split.examples {
                let line = serde_json::to_string(ex).map_err(|e| ser(&e))?;
                w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
                w.write_all(b"\n").map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

pub fn class_distribution(split: &DatasetSplit) -> Result<ClassDistribution, CorpusError> {
    let mut counts = vec![0u64; split.schema.len()];
    for (index, ex) in split.examples.iter().enumerate() {
        let code = ex.label.ok_or(CorpusError::Unlabeled { index })?;
        counts[code as usize] += 1;
    }
    Ok(ClassDistribution::from_counts(counts))
}

/// Concatenates `a` then `b`. Both must be labeled and share a schema.
pub fn merge_splits(a: &DatasetSplit, b: &DatasetSplit) -> Result<DatasetSplit, CorpusError> {
    if a.schema != b.schema {
        return Err(CorpusError::SchemaMismatch {
            left: a.schema.task(),
            right: b.schema.task(),
        });
    }
    for split in [a, b] {
        if let Some(index) = split.examples.iter().position(|e| e.label.is_none()) {
            return Err(CorpusError::Unlabeled { index });
        }
    }
    let mut examples = Vec::with_capacity(a.len() + b.len());
    examples.extend_from_slice(&a.examples);
    examples.extend_from_slice(&b.examples);
    Ok(DatasetSplit::new(a.name, a.schema.clone(), examples))
}

/// Inverse-frequency weights `total / (num_classes * count)`.
///
/// Their mean under the class frequencies is exactly one.
pub fn class_weights(dist: &ClassDistribution) -> Result<ClassWeights, CorpusError> {
    let k = dist.num_classes() as f64;
    let total = dist.total as f64;
    dist.counts
        .iter()
        .enumerate()
        .map(|(code, &count)| {
            if count == 0 {
                Err(CorpusError::ZeroCount { code: code as u32 })
            } else {
                Ok(total / (k * count as f64))
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(ClassWeights)
}
